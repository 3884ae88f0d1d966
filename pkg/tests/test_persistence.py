import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uapforge.errors import BudgetError, CorruptionError
from uapforge.optimizer import ImageUAP
from uapforge.persistence import (dumps_json, load_uap, save_uap, triggers_from_dict,
                                  triggers_to_dict, uap_from_bytes, uap_to_bytes)
from uapforge.text_attack import TextTrigger, TriggerLexicon


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), c=st.integers(1, 4),
       eps=st.floats(1e-4, 1.0), seed=st.integers(0, 2**31))
def test_uap_bytes_round_trip(h, w, c, eps, seed):
    rng = np.random.default_rng(seed)
    u = ImageUAP.random((h, w, c), eps, rng)
    back = uap_from_bytes(uap_to_bytes(u))
    assert back.delta.tobytes() == u.delta.tobytes()
    assert back.epsilon == u.epsilon and back.geometry == (h, w, c)


def test_layout_is_little_endian_float32(tmp_path):
    u = ImageUAP(np.array([[[0.25, -0.5]]]), 1.0)
    save_uap(u, tmp_path / "u.bin")
    raw = (tmp_path / "u.bin").read_bytes()
    head = struct.unpack_from("<4sHBBIIId", raw)
    assert head == (b"UAPF", 1, 1, 0, 1, 1, 2, 1.0)
    payload = raw[struct.calcsize("<4sHBBIIId"):-32]
    assert np.frombuffer(payload, "<f4").tolist() == [0.25, -0.5]
    assert raw[-32:] == hashlib.sha256(raw[:-32]).digest()
    assert load_uap(tmp_path / "u.bin").delta.tolist() == [[[0.25, -0.5]]]


def _forge(h, w, c, eps, values, magic=b"UAPF", version=1):
    body = struct.pack("<4sHBBIIId", magic, version, 1, 0, h, w, c, eps) + np.asarray(values, "<f4").tobytes()
    return body + hashlib.sha256(body).digest()


def test_rejections():
    with pytest.raises(CorruptionError, match="truncated"):
        uap_from_bytes(b"UAPF")
    with pytest.raises(CorruptionError, match="magic"):
        uap_from_bytes(_forge(1, 1, 1, 0.1, [0.0], magic=b"NOPE"))
    with pytest.raises(CorruptionError, match="version"):
        uap_from_bytes(_forge(1, 1, 1, 0.1, [0.0], version=7))
    with pytest.raises(CorruptionError, match="payload"):
        uap_from_bytes(_forge(2, 1, 1, 0.1, [0.0]))
    with pytest.raises(CorruptionError, match="epsilon"):
        uap_from_bytes(_forge(1, 1, 1, float("nan"), [0.0]))
    with pytest.raises(BudgetError):
        uap_from_bytes(_forge(1, 1, 2, 0.1, [0.0, -0.2]))
    good = bytearray(_forge(1, 1, 1, 0.1, [0.05]))
    good[20] ^= 0xFF
    with pytest.raises(CorruptionError, match="checksum"):
        uap_from_bytes(bytes(good))


def test_triggers_dict_round_trip():
    lex = TriggerLexicon((("dog", 0.5), ("cat", 0.25)))
    trig = TextTrigger("dog", 2, "random")
    d = triggers_to_dict(lex, trig)
    assert d == {"ranked": [{"token": "dog", "score": 0.5}, {"token": "cat", "score": 0.25}],
                 "trigger": "dog", "policy": "random", "epsilon_T": 2}
    assert triggers_from_dict(d) == (lex, trig)


def test_json_is_canonical_and_finite():
    assert dumps_json({"b": 1, "a": [1.5]}) == '{\n  "a": [\n    1.5\n  ],\n  "b": 1\n}\n'
    with pytest.raises(ValueError):
        dumps_json({"x": float("nan")})
