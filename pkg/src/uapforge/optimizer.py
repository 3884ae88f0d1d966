"""Future-aware momentum PGD for image UAPs and the full training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from .augment import AugmentedPair, ScMixParams, identity_pair, scmix_pair
from .dataset import PairedDataset, expand_by_captions, iterate_batches
from .errors import BudgetError, ContractError, NonFiniteLossError, ParameterError, ShapeError
from .objectives import LossConfig, draw_boxes, loss_global, objective

log = logging.getLogger(__name__)


def float32_bound(epsilon: float) -> np.float32:
    """Largest float32 that does not exceed ``epsilon``."""
    b = np.float32(epsilon)
    if float(b) > epsilon:
        b = np.nextafter(b, np.float32(0))
    return b


@dataclass(frozen=True)
class ImageUAP:
    delta: np.ndarray
    epsilon: float

    def __post_init__(self):
        raw = np.asarray(self.delta)
        if raw.ndim != 3:
            raise ShapeError(f"UAP must be H x W x C, got shape {raw.shape}")
        if not np.all(np.isfinite(raw)):
            raise BudgetError("UAP contains non-finite values")
        linf = float(np.max(np.abs(raw))) if raw.size else 0.0
        if linf > self.epsilon:
            raise BudgetError(f"max|delta| = {linf!r} exceeds epsilon = {self.epsilon!r}")
        d = np.array(raw, dtype=np.float32, order="C")
        if raw.dtype != np.float32:
            # float32 rounding may step just past the budget
            b = float32_bound(self.epsilon)
            np.clip(d, -b, b, out=d)
        d.setflags(write=False)
        object.__setattr__(self, "delta", d)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def geometry(self) -> tuple:
        return tuple(self.delta.shape)

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.delta)))

    @classmethod
    def project(cls, values, epsilon: float) -> "ImageUAP":
        """Clip float64 ``values`` to the budget and store them as float32."""
        return cls(np.clip(np.asarray(values, dtype=np.float64), -epsilon, epsilon), epsilon)

    @classmethod
    def random(cls, geometry, epsilon: float, rng: np.random.Generator) -> "ImageUAP":
        return cls.project(rng.uniform(-epsilon, epsilon, size=tuple(geometry)), epsilon)

    @classmethod
    def zeros(cls, geometry, epsilon: float) -> "ImageUAP":
        return cls(np.zeros(tuple(geometry), dtype=np.float32), epsilon)


@dataclass
class MomentumState:
    g_prev: np.ndarray
    gamma1: float = 0.9
    gamma2: float = 0.1
    lookahead: int = 2
    future_sign: int = -1

    def __post_init__(self):
        if not (0.0 <= self.gamma1 < 1.0 and 0.0 <= self.gamma2 < 1.0):
            raise ParameterError(f"gamma1, gamma2 must lie in [0, 1), got {self.gamma1}, {self.gamma2}")
        if self.lookahead < 0:
            raise ParameterError("lookahead must be >= 0")
        if self.future_sign not in (1, -1):
            raise ParameterError("future_sign must be +1 or -1")

    @classmethod
    def initial(cls, geometry, **kwargs) -> "MomentumState":
        return cls(np.zeros(tuple(geometry), dtype=np.float64), **kwargs)


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    alpha_mix: float = 1.0
    beta1: float = 0.8
    beta2: float = 0.2
    crop_scale: tuple = (0.5, 1.0)

    def __post_init__(self):
        if self.enabled:
            self.params  # validates beta / alpha / crop ranges

    @property
    def params(self) -> ScMixParams:
        return ScMixParams(self.alpha_mix, self.beta1, self.beta2, tuple(self.crop_scale))


@dataclass(frozen=True)
class AttackConfig:
    epsilon_I: float = 12 / 255
    step_size: float | None = None
    iterations: int = 100
    batch_size: int = 16
    seed: int = 0
    lookahead: int = 2
    gamma1: float = 0.9
    gamma2: float = 0.1
    future_sign: int = -1
    future_mode: str = "mean"
    momentum_update: str = "epoch"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        problems = []
        if not self.epsilon_I > 0:
            problems.append("epsilon_I must be > 0")
        if self.iterations < 1:
            problems.append("iterations must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            problems.append("step_size must be > 0")
        if self.future_mode not in ("mean", "single"):
            problems.append("future_mode must be 'mean' or 'single'")
        if self.momentum_update not in ("epoch", "batch"):
            problems.append("momentum_update must be 'epoch' or 'batch'")
        if problems:
            raise ParameterError("; ".join(problems))

    @property
    def alpha_step(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        return self.epsilon_I / self.iterations * 1.25


class TraceRow(NamedTuple):
    step: int
    epoch: int
    l1: float
    l2: float
    linf: float


def grad_batch(loss_fn: Callable, delta, batch: Sequence, bundle) -> np.ndarray:
    """(1/|batch|) * d loss_fn(batch, delta, bundle) / d delta, as float64."""
    if not batch:
        raise ContractError("empty batch")
    d0 = getattr(delta, "delta", delta)
    d = torch.tensor(np.asarray(d0, dtype=np.float64), requires_grad=True)
    loss = torch.as_tensor(loss_fn(batch, d, bundle))
    if loss.numel() != 1:
        raise ContractError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        return np.zeros(d.shape, dtype=np.float64)
    (g,) = torch.autograd.grad(loss.reshape(()), d, allow_unused=True)
    if g is None:
        return np.zeros(d.shape, dtype=np.float64)
    return g.numpy() / len(batch)


def lookahead_future_grad(delta: ImageUAP, batch: Sequence, d: int, step_size: float, bundle,
                          cfg: LossConfig = LossConfig(), mode: str = "mean") -> np.ndarray:
    """Mean global-loss gradient over ``d`` virtual sign-PGD steps on ``batch``.

    ``batch`` holds ``(image, caption)`` pairs. The roll-out works on a float64
    copy, so neither ``delta`` nor any momentum state is touched.
    ``mode="single"`` returns only the gradient at the last virtual point.
    """
    shape = delta.geometry
    if d <= 0:
        return np.zeros(shape, dtype=np.float64)
    if mode not in ("mean", "single"):
        raise ParameterError(f"unknown future-gradient mode {mode!r}")
    eps = delta.epsilon

    def l1(b, x, bundle_):
        return loss_global(b, x, bundle_, cfg)

    cur = np.array(delta.delta, dtype=np.float64)
    g = grad_batch(l1, cur, batch, bundle)
    acc = np.zeros(shape, dtype=np.float64)
    for _ in range(d):
        cur = np.clip(cur + step_size * np.sign(g), -eps, eps)
        g = grad_batch(l1, cur, batch, bundle)
        acc += g
    return acc / d if mode == "mean" else g


def combine(g: np.ndarray, state: MomentumState, g_f: np.ndarray) -> np.ndarray:
    if not (g.shape == state.g_prev.shape == g_f.shape):
        raise ShapeError(f"combine shape mismatch: {g.shape}, {state.g_prev.shape}, {g_f.shape}")
    return g + state.gamma1 * state.g_prev + state.future_sign * state.gamma2 * g_f


def pgd_update(delta: ImageUAP, g_tilde: np.ndarray, step_size: float) -> ImageUAP:
    """One signed ascent step projected back onto the l-inf ball (sign(0) = 0)."""
    if g_tilde.shape != delta.geometry:
        raise ShapeError(f"gradient shape {g_tilde.shape} != delta shape {delta.geometry}")
    moved = delta.delta.astype(np.float64) + step_size * np.sign(g_tilde)
    return ImageUAP.project(moved, delta.epsilon)


def _augment_batch(batch, cfg: AttackConfig, bundle, rng) -> list:
    if not cfg.augment.enabled:
        if cfg.loss.use_local:
            return [identity_pair(im, cap, bundle) for im, cap in batch]
        return [AugmentedPair(im, im, im, tuple(cap), None, 1.0) for im, cap in batch]
    params = cfg.augment.params
    out = []
    for i, (im, cap) in enumerate(batch):
        if len(batch) > 1:
            j = int(rng.integers(len(batch) - 1))
            j += j >= i
        else:
            j = i
        out.append(scmix_pair(im, cap, batch[j][0], params, bundle, rng))
    return out


def run_image_attack(dataset: PairedDataset, bundle, cfg: AttackConfig,
                     on_step: Callable | None = None):
    """Learn an image UAP; returns ``(ImageUAP, list[TraceRow])``.

    Random streams are spawned from ``cfg.seed`` in a fixed order:
    initialisation, batch order (one shuffle per epoch), then augmentation
    and crop draws.
    """
    geometry = dataset.image_geometry
    if tuple(geometry) != tuple(bundle.geometry):
        raise ShapeError(f"dataset geometry {geometry} != encoder geometry {bundle.geometry}")
    pairs = expand_by_captions(dataset)
    init_rng, order_rng, aug_rng = (np.random.default_rng(s)
                                    for s in np.random.SeedSequence(cfg.seed).spawn(3))
    uap = ImageUAP.random(geometry, cfg.epsilon_I, init_rng)
    state = MomentumState.initial(geometry, gamma1=cfg.gamma1, gamma2=cfg.gamma2,
                                  lookahead=cfg.lookahead, future_sign=cfg.future_sign)
    alpha = cfg.alpha_step
    lcfg = cfg.loss
    trace = []
    step = 0
    for epoch in range(cfg.iterations):
        g_tilde = None
        for idx in iterate_batches(len(pairs), cfg.batch_size, order_rng):
            batch = [pairs[i] for i in idx]
            aug = _augment_batch(batch, cfg, bundle, aug_rng)
            boxes = draw_boxes(aug_rng, len(aug), geometry, lcfg) if lcfg.use_local else None

            d_t = torch.tensor(uap.delta.astype(np.float64), requires_grad=True)
            l1, l2 = objective(aug, d_t, bundle, lcfg, boxes)
            total = l1 + l2
            if not torch.isfinite(total):
                raise NonFiniteLossError(f"non-finite loss at step {step} (epoch {epoch}): l1={float(l1.detach())}, l2={float(l2.detach())}")
            if total.requires_grad:
                g = torch.autograd.grad(total, d_t)[0].numpy() / len(batch)
            else:
                g = np.zeros(geometry, dtype=np.float64)

            if state.lookahead > 0:
                g_f = lookahead_future_grad(uap, batch, state.lookahead, alpha, bundle, lcfg, cfg.future_mode)
            else:
                g_f = np.zeros(geometry, dtype=np.float64)
            g_tilde = combine(g, state, g_f)
            uap = pgd_update(uap, g_tilde, alpha)
            if cfg.momentum_update == "batch":
                state.g_prev = g_tilde

            row = TraceRow(step, epoch, float(l1.detach()), float(l2.detach()), uap.linf)
            trace.append(row)
            if on_step is not None:
                on_step(row, uap)
            step += 1
        if cfg.momentum_update == "epoch":
            state.g_prev = g_tilde
        log.info("epoch %d/%d  l1=%.6g  l2=%.6g  linf=%.6g", epoch + 1, cfg.iterations,
                 trace[-1].l1, trace[-1].l2, trace[-1].linf)
    return uap, trace
