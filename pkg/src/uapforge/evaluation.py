"""Image-text retrieval recall, attack success rate and cross-geometry UAP transfer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .dataset import PairedDataset, caption_owner, expand_by_captions
from .errors import ContractError, ParameterError
from .interp import resize
from .optimizer import ImageUAP
from .text_attack import TextConfig, TextTrigger, apply_trigger

DIRECTIONS = ("i2t", "t2i")


@dataclass(frozen=True)
class RetrievalIndex:
    image_emb: np.ndarray   # N x E
    text_emb: np.ndarray    # M x E
    text_owner: np.ndarray  # M, index of the image each caption belongs to

    def __post_init__(self):
        n = self.image_emb.shape[0]
        owners = np.asarray(self.text_owner)
        if owners.shape != (self.text_emb.shape[0],):
            raise ContractError("text_owner must have one entry per caption")
        if set(owners.tolist()) != set(range(n)):
            raise ContractError("every image needs at least one matching caption")

    def similarity(self) -> np.ndarray:
        return cosine_similarity(self.image_emb, self.text_emb)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return a @ b.T


def _topk(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -score: ties go to the lower index
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def hits_i2t(sim: np.ndarray, owner: np.ndarray, k: int) -> np.ndarray:
    """Per image query: does any of its captions appear in the top-k texts?"""
    top = _topk(sim, k)
    return (owner[top] == np.arange(sim.shape[0])[:, None]).any(axis=1)


def hits_t2i(sim: np.ndarray, owner: np.ndarray, k: int) -> np.ndarray:
    top = _topk(sim.T, k)
    return (top == owner[:, None]).any(axis=1)


def hits(sim: np.ndarray, owner: np.ndarray, k: int) -> dict:
    if k < 1 or k > min(sim.shape):
        raise ParameterError(f"K={k} must lie in [1, {min(sim.shape)}] for this corpus")
    return {"i2t": hits_i2t(sim, owner, k), "t2i": hits_t2i(sim, owner, k)}


def success_rate(clean_hits: np.ndarray, adv_hits: np.ndarray):
    """Percent of clean-correct queries that fail under attack; None if there are none."""
    base = int(clean_hits.sum())
    if base == 0:
        return None
    return 100.0 * int((clean_hits & ~adv_hits).sum()) / base


def _encode_images(bundle, pixels: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for s in range(0, len(pixels), chunk):
            out.append(bundle.encode_image(pixels[s:s + chunk]).numpy())
    return np.concatenate(out)


def _encode_texts(bundle, captions, chunk: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for s in range(0, len(captions), chunk):
            out.append(bundle.encode_text(captions[s:s + chunk]).numpy())
    return np.concatenate(out)


def perturbed_captions(dataset: PairedDataset, trigger: TextTrigger, bundle,
                       text_cfg: TextConfig = TextConfig(), seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    return [apply_trigger(cap, trigger, (im, cap), bundle, rng, text_cfg)
            for im, cap in expand_by_captions(dataset)]


def build_index(bundle, dataset: PairedDataset, uap: ImageUAP | None = None,
                trigger: TextTrigger | None = None, text_cfg: TextConfig = TextConfig(),
                seed: int = 0) -> RetrievalIndex:
    pixels = np.stack([it.image.pixels for it in dataset.items])
    if uap is not None:
        if uap.geometry != dataset.image_geometry:
            uap = resize_uap(uap, dataset.image_geometry)
        pixels = np.clip(pixels + uap.delta.astype(np.float64), 0.0, 1.0)
    if trigger is None:
        captions = [cap for _, cap in expand_by_captions(dataset)]
    else:
        captions = perturbed_captions(dataset, trigger, bundle, text_cfg, seed)
    return RetrievalIndex(_encode_images(bundle, pixels), _encode_texts(bundle, captions),
                          caption_owner(dataset))


def retrieval_recall(bundle, dataset: PairedDataset, k: int, uap: ImageUAP | None = None,
                     trigger: TextTrigger | None = None, text_cfg: TextConfig = TextConfig(),
                     seed: int = 0) -> dict:
    """R@k in percent for both directions, ranking by cosine similarity."""
    idx = build_index(bundle, dataset, uap, trigger, text_cfg, seed)
    return {d: 100.0 * float(h.mean()) for d, h in hits(idx.similarity(), idx.text_owner, k).items()}


def attack_success_rate(bundle, dataset: PairedDataset, uap: ImageUAP | None,
                        trigger: TextTrigger | None, k: int, text_cfg: TextConfig = TextConfig(),
                        seed: int = 0) -> dict:
    clean = build_index(bundle, dataset)
    adv = build_index(bundle, dataset, uap, trigger, text_cfg, seed)
    ch = hits(clean.similarity(), clean.text_owner, k)
    ah = hits(adv.similarity(), adv.text_owner, k)
    return {d: success_rate(ch[d], ah[d]) for d in DIRECTIONS}


def resize_uap(uap: ImageUAP, target_geometry: Sequence[int]) -> ImageUAP:
    """Bilinear resize of a UAP to another input size, keeping its budget."""
    h, w = int(target_geometry[0]), int(target_geometry[1])
    if len(target_geometry) > 2 and int(target_geometry[2]) != uap.geometry[2]:
        raise ParameterError(f"cannot change channel count {uap.geometry[2]} -> {target_geometry[2]}")
    if (h, w) == uap.geometry[:2]:
        return ImageUAP(uap.delta.copy(), uap.epsilon)
    out = resize(uap.delta, h, w)
    bound = uap.linf
    return ImageUAP.project(np.clip(out, -bound, bound), uap.epsilon)


@dataclass
class AttackReport:
    adapter: str
    config_digest: str
    ks: list
    clean: dict = field(default_factory=dict)        # direction -> {k: R@k}
    adversarial: dict = field(default_factory=dict)
    asr: dict = field(default_factory=dict)          # direction -> {k: ASR@k or None}
    n_images: int = 0
    n_captions: int = 0

    def to_dict(self) -> dict:
        def keyed(block):
            return {d: {str(k): v for k, v in block[d].items()} for d in DIRECTIONS}
        return {
            "adapter": self.adapter,
            "config_digest": self.config_digest,
            "ks": list(self.ks),
            "n_images": self.n_images,
            "n_captions": self.n_captions,
            "clean_recall": keyed(self.clean),
            "adversarial_recall": keyed(self.adversarial),
            "asr": keyed(self.asr),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        def unkeyed(block):
            return {dr: {int(k): v for k, v in block[dr].items()} for dr in DIRECTIONS}
        return cls(d["adapter"], d["config_digest"], list(d["ks"]), unkeyed(d["clean_recall"]),
                   unkeyed(d["adversarial_recall"]), unkeyed(d["asr"]), d["n_images"], d["n_captions"])


def evaluate_attack(bundle, dataset: PairedDataset, ks: Sequence[int], uap: ImageUAP | None = None,
                    trigger: TextTrigger | None = None, text_cfg: TextConfig = TextConfig(),
                    seed: int = 0, adapter_name: str = "", config_digest: str = "") -> AttackReport:
    clean = build_index(bundle, dataset)
    adv = build_index(bundle, dataset, uap, trigger, text_cfg, seed)
    s_clean, s_adv = clean.similarity(), adv.similarity()
    rep = AttackReport(adapter_name or getattr(bundle, "name", ""), config_digest, list(ks),
                       {d: {} for d in DIRECTIONS}, {d: {} for d in DIRECTIONS}, {d: {} for d in DIRECTIONS},
                       dataset.n, dataset.n_t)
    for k in ks:
        ch, ah = hits(s_clean, clean.text_owner, k), hits(s_adv, adv.text_owner, k)
        for d in DIRECTIONS:
            rep.clean[d][k] = 100.0 * float(ch[d].mean())
            rep.adversarial[d][k] = 100.0 * float(ah[d].mean())
            rep.asr[d][k] = success_rate(ch[d], ah[d])
    return rep


def format_report(rep: AttackReport) -> str:
    lines = [f"adapter: {rep.adapter}   images: {rep.n_images}   captions: {rep.n_captions}",
             f"{'metric':<14}" + "".join(f"{'@' + str(k):>10}" for k in rep.ks)]
    for label, block in (("R clean", rep.clean), ("R adv", rep.adversarial), ("ASR", rep.asr)):
        for d in DIRECTIONS:
            cells = []
            for k in rep.ks:
                v = block[d][k]
                cells.append(f"{'n/a':>10}" if v is None else f"{v:>10.2f}")
            lines.append(f"{label + ' ' + d:<14}" + "".join(cells))
    return "\n".join(lines)
