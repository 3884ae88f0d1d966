"""Bit-exact storage for UAPs (checksummed binary) and JSON artifacts.

UAP container layout, all little-endian::

    magic    4s   b"UAPF"
    version  u16
    dtype    u8   1 = float32
    pad      u8
    height   u32
    width    u32
    channels u32
    epsilon  f64
    payload  H*W*C float32, row-major (H, W, C)
    sha256   32 bytes over everything above
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import BudgetError, CorruptionError
from .optimizer import ImageUAP
from .text_attack import TextTrigger, TriggerLexicon

MAGIC = b"UAPF"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sHBBIIId")
_DIGEST_LEN = 32


def uap_to_bytes(uap: ImageUAP) -> bytes:
    h, w, c = uap.geometry
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, 0, h, w, c, uap.epsilon)
    body = header + np.ascontiguousarray(uap.delta, dtype="<f4").tobytes()
    return body + hashlib.sha256(body).digest()


def uap_from_bytes(blob: bytes) -> ImageUAP:
    if len(blob) < _HEADER.size + _DIGEST_LEN:
        raise CorruptionError(f"UAP file truncated ({len(blob)} bytes)")
    body, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("UAP checksum mismatch")
    magic, version, dtype, _, h, w, c, eps = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise CorruptionError(f"bad magic {magic!r}")
    if version != VERSION or dtype != DTYPE_F32:
        raise CorruptionError(f"unsupported container version={version} dtype={dtype}")
    payload = body[_HEADER.size:]
    if len(payload) != h * w * c * 4:
        raise CorruptionError(f"payload is {len(payload)} bytes, expected {h * w * c * 4}")
    if not (math.isfinite(eps) and eps > 0):
        raise CorruptionError(f"invalid epsilon {eps!r}")
    delta = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)
    linf = float(np.max(np.abs(delta))) if delta.size else 0.0
    if linf > eps:
        raise BudgetError(f"stored UAP violates its budget: max|delta| = {linf!r} > epsilon = {eps!r}")
    return ImageUAP(delta, eps)


def save_uap(uap: ImageUAP, path) -> None:
    Path(path).write_bytes(uap_to_bytes(uap))


def load_uap(path) -> ImageUAP:
    return uap_from_bytes(Path(path).read_bytes())


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def save_json(obj, path) -> None:
    Path(path).write_text(dumps_json(obj), encoding="utf-8")


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def triggers_to_dict(lexicon: TriggerLexicon, trigger: TextTrigger) -> dict:
    return {
        "ranked": [{"token": t, "score": s} for t, s in lexicon.ranked],
        "trigger": trigger.token,
        "policy": trigger.policy,
        "epsilon_T": trigger.budget,
    }


def triggers_from_dict(d: dict) -> tuple:
    lexicon = TriggerLexicon(tuple((r["token"], r["score"]) for r in d["ranked"]))
    return lexicon, TextTrigger(d["trigger"], int(d["epsilon_T"]), d["policy"])


def save_triggers(lexicon: TriggerLexicon, trigger: TextTrigger, path) -> None:
    save_json(triggers_to_dict(lexicon, trigger), path)


def load_triggers(path) -> tuple:
    return triggers_from_dict(load_json(path))
