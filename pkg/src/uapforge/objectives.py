"""Divergence and the global / local-utility / combined UAP objectives.

All losses are sums over the batch (they are maximised by the optimizer) and
are returned as 0-dim float64 tensors, differentiable w.r.t. ``delta`` when
``delta`` is a tensor that requires grad.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentedPair, CropResizeParams
from .errors import ContractError, ParameterError, ShapeError
from .interp import CropBox, crop_resize_tensor, sample_box


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 1.0
    use_global: bool = True
    use_local: bool = True
    crop_scale: tuple = (0.5, 1.0)
    crop_per_sample: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        CropResizeParams(tuple(self.crop_scale))

    @property
    def crop_params(self) -> CropResizeParams:
        return CropResizeParams(tuple(self.crop_scale))


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    l2: float
    total: float


def kl_rows(a: torch.Tensor, b: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Row-wise KL(softmax(a/t) || softmax(b/t)); gradient flows through ``a``."""
    if a.shape != b.shape:
        raise ShapeError(f"divergence shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    log_pa = torch.log_softmax(a / temperature, dim=-1)
    log_pb = torch.log_softmax(b / temperature, dim=-1)
    return (log_pa.exp() * (log_pa - log_pb)).sum(dim=-1)


def divergence(a, b, cfg: LossConfig = LossConfig()) -> float:
    a = torch.as_tensor(np.asarray(a, dtype=np.float64))
    b = torch.as_tensor(np.asarray(b, dtype=np.float64))
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"divergence needs two equal-length vectors, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[0] < 2:
        raise ShapeError("divergence needs embedding dimension >= 2")
    return float(kl_rows(a, b, cfg.temperature))


def as_delta_tensor(delta) -> torch.Tensor:
    if isinstance(delta, torch.Tensor):
        return delta
    d = getattr(delta, "delta", delta)
    return torch.tensor(np.asarray(d, dtype=np.float64))


def _pixels(images) -> torch.Tensor:
    return torch.tensor(np.stack([im.pixels for im in images]))


def _check_delta(delta: torch.Tensor, bundle) -> None:
    if tuple(delta.shape) != tuple(bundle.geometry):
        raise ShapeError(f"delta has shape {tuple(delta.shape)}, encoder expects {tuple(bundle.geometry)}")


def loss_global(batch: Sequence, delta, bundle, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Sum over ``(image, caption)`` pairs of
    KL(f_I(x+delta) || f_I(x)) + KL(f_I(x+delta) || f_T(y))."""
    if not batch:
        raise ContractError("empty batch")
    d = as_delta_tensor(delta)
    _check_delta(d, bundle)
    x = _pixels([im for im, _ in batch])
    with torch.no_grad():
        ref_img = bundle.encode_image(x)
        ref_txt = bundle.encode_text([cap for _, cap in batch])
    adv = bundle.encode_image(torch.clamp(x + d, 0.0, 1.0))
    t = cfg.temperature
    return (kl_rows(adv, ref_img, t) + kl_rows(adv, ref_txt, t)).sum()


def draw_boxes(rng: np.random.Generator, n: int, geometry, cfg: LossConfig) -> list:
    h, w = geometry[:2]
    if cfg.crop_per_sample:
        return [sample_box(rng, h, w, cfg.crop_scale) for _ in range(n)]
    return [sample_box(rng, h, w, cfg.crop_scale)] * n


def _cropped_delta(d: torch.Tensor, boxes: Sequence[CropBox]) -> torch.Tensor:
    if all(b == boxes[0] for b in boxes):
        return crop_resize_tensor(d, boxes[0]).unsqueeze(0)
    return torch.stack([crop_resize_tensor(d, b) for b in boxes])


def loss_local(batch: Sequence[AugmentedPair], delta, crop_params, bundle,
               cfg: LossConfig = LossConfig(), rng: np.random.Generator | None = None,
               boxes: Sequence[CropBox] | None = None) -> torch.Tensor:
    """Local-utility objective on crop-resized views of ``delta``.

    Five terms per pair, with ``ds = A_s(delta)``:
    KL(f_I(x+ds)||f_I(x)) + KL(f_I(x+ds)||f_T(y)) + KL(f_I(xt+ds)||f_I(x))
    + KL(f_I(xt+ds)||f_T(y)) + KL(f_I(xt+ds)||p).
    One crop is shared by the whole batch unless ``crop_per_sample`` is set
    or explicit per-sample ``boxes`` are passed.
    """
    if not batch:
        raise ContractError("empty batch")
    if any(p.soft_target is None for p in batch):
        raise ContractError("loss_local needs a soft target p for every augmented pair")
    d = as_delta_tensor(delta)
    _check_delta(d, bundle)
    if boxes is None:
        if rng is None:
            raise ContractError("loss_local needs either rng or explicit boxes")
        if crop_params is not None:
            cfg = LossConfig(cfg.temperature, cfg.use_global, cfg.use_local,
                             tuple(crop_params.scale_range), cfg.crop_per_sample)
        boxes = draw_boxes(rng, len(batch), bundle.geometry, cfg)
    if len(boxes) != len(batch):
        raise ContractError(f"{len(boxes)} crop boxes for {len(batch)} pairs")
    ds = _cropped_delta(d, boxes)
    x = _pixels([p.original for p in batch])
    xt = _pixels([p.mixed_image for p in batch])
    soft = torch.tensor(np.stack([p.soft_target for p in batch]))
    with torch.no_grad():
        ref_img = bundle.encode_image(x)
        ref_txt = bundle.encode_text([p.caption for p in batch])
    adv = bundle.encode_image(torch.clamp(x + ds, 0.0, 1.0))
    adv_mix = bundle.encode_image(torch.clamp(xt + ds, 0.0, 1.0))
    t = cfg.temperature
    terms = (
        kl_rows(adv, ref_img, t)
        + kl_rows(adv, ref_txt, t)
        + kl_rows(adv_mix, ref_img, t)
        + kl_rows(adv_mix, ref_txt, t)
        + kl_rows(adv_mix, soft, t)
    )
    return terms.sum()


def objective(batch: Sequence[AugmentedPair], delta, bundle, cfg: LossConfig,
              boxes: Sequence[CropBox] | None) -> tuple:
    """``(l1, l2)`` tensors on one mini-batch; disabled terms are exact zeros."""
    d = as_delta_tensor(delta)
    zero = torch.zeros((), dtype=torch.float64)
    l1 = loss_global([(p.original, p.caption) for p in batch], d, bundle, cfg) if cfg.use_global else zero
    l2 = loss_local(batch, d, None, bundle, cfg, boxes=boxes) if cfg.use_local else zero
    return l1, l2


def loss_total(batch: Sequence[AugmentedPair], delta, crop_params, bundle,
               cfg: LossConfig = LossConfig(), rng: np.random.Generator | None = None,
               boxes: Sequence[CropBox] | None = None) -> LossBreakdown:
    if boxes is None and cfg.use_local:
        if rng is None:
            raise ContractError("loss_total needs either rng or explicit boxes")
        if crop_params is not None:
            cfg = LossConfig(cfg.temperature, cfg.use_global, cfg.use_local,
                             tuple(crop_params.scale_range), cfg.crop_per_sample)
        boxes = draw_boxes(rng, len(batch), batch[0].original.geometry, cfg)
    with torch.no_grad():
        l1, l2 = objective(batch, delta, bundle, cfg, boxes)
    l1, l2 = float(l1), float(l2)
    return LossBreakdown(l1, l2, l1 + l2)
