"""ScMix (self-mix + cross-mix with a soft embedding target) and UAP crop-resize."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dataset import CaptionedImage, ImageSample
from .errors import ParameterError, ShapeError
from .interp import CropBox, crop_resize, full_box, sample_box


@dataclass(frozen=True)
class ScMixParams:
    alpha_mix: float = 1.0
    beta1: float = 0.8
    beta2: float = 0.2
    crop_scale: tuple = (0.5, 1.0)

    def __post_init__(self):
        if not self.alpha_mix > 0:
            raise ParameterError(f"alpha_mix must be > 0, got {self.alpha_mix}")
        if not (0.0 <= self.beta2 < self.beta1 < 1.0):
            raise ParameterError(f"need 0 <= beta2 < beta1 < 1, got beta1={self.beta1}, beta2={self.beta2}")
        if self.beta1 + self.beta2 > 1.0:
            raise ParameterError("beta1 + beta2 must not exceed 1 (keeps mixed pixels in [0, 1])")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ParameterError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")


@dataclass(frozen=True)
class CropResizeParams:
    scale_range: tuple = (0.5, 1.0)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ParameterError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")


@dataclass(frozen=True)
class AugmentedPair:
    original: ImageSample
    mixed_image: ImageSample
    self_mixed: ImageSample
    caption: tuple
    soft_target: np.ndarray
    eta: float


def self_mix(image: ImageSample, rng: np.random.Generator, alpha_mix: float = 1.0,
             scale_range=(0.5, 1.0), *, boxes=None, eta_prime=None):
    """Blend two random crops of ``image`` (each resized back to full size).

    Returns ``(x_hat, eta, x1, x2)`` with ``eta = max(eta', 1 - eta')`` and
    ``eta' ~ Beta(alpha_mix, alpha_mix)``. ``boxes``/``eta_prime`` pin the
    random draws.
    """
    if not alpha_mix > 0:
        raise ParameterError(f"alpha_mix must be > 0, got {alpha_mix}")
    h, w, _ = image.geometry
    if boxes is None:
        boxes = (sample_box(rng, h, w, scale_range), sample_box(rng, h, w, scale_range))
    if eta_prime is None:
        eta_prime = float(rng.beta(alpha_mix, alpha_mix))
    eta = max(eta_prime, 1.0 - eta_prime)
    x1 = np.clip(crop_resize(image.pixels, boxes[0]), 0.0, 1.0)
    x2 = np.clip(crop_resize(image.pixels, boxes[1]), 0.0, 1.0)
    x_hat = np.clip(eta * x1 + (1.0 - eta) * x2, 0.0, 1.0)
    return (
        ImageSample(x_hat, f"{image.id}~self"),
        eta,
        ImageSample(x1, f"{image.id}~crop1"),
        ImageSample(x2, f"{image.id}~crop2"),
    )


def cross_mix(x_hat: ImageSample, partner: ImageSample, beta1: float, beta2: float) -> ImageSample:
    if x_hat.geometry != partner.geometry:
        raise ShapeError(f"cross_mix geometry mismatch: {x_hat.geometry} vs {partner.geometry}")
    if beta1 < 0 or beta2 < 0 or beta1 + beta2 > 1.0:
        raise ParameterError(f"cross_mix needs beta1, beta2 >= 0 and beta1 + beta2 <= 1")
    out = np.clip(beta1 * x_hat.pixels + beta2 * partner.pixels, 0.0, 1.0)
    return ImageSample(out, f"{x_hat.id}~cross")


def scmix_pair(image: ImageSample, caption, partner: ImageSample, params: ScMixParams,
               bundle, rng: np.random.Generator) -> AugmentedPair:
    x_hat, eta, x1, x2 = self_mix(image, rng, params.alpha_mix, params.crop_scale)
    x_tilde = cross_mix(x_hat, partner, params.beta1, params.beta2)
    with torch.no_grad():
        emb = bundle.encode_image(np.stack([x1.pixels, x2.pixels])).numpy()
    p = eta * emb[0] + (1.0 - eta) * emb[1]
    return AugmentedPair(image, x_tilde, x_hat, tuple(caption), p, eta)


def scmix(item: CaptionedImage, partner: ImageSample, params: ScMixParams,
          bundle, rng: np.random.Generator) -> list:
    """One freshly mixed :class:`AugmentedPair` per caption of ``item``."""
    return [scmix_pair(item.image, cap, partner, params, bundle, rng) for cap in item.captions]


def identity_pair(image: ImageSample, caption, bundle) -> AugmentedPair:
    """The no-augmentation pair: ``x_tilde = x`` and ``p = f_I(x)``."""
    with torch.no_grad():
        p = bundle.encode_image(image.pixels[None]).numpy()[0]
    return AugmentedPair(image, image, image, tuple(caption), p, 1.0)


def crop_resize_uap(delta, params: CropResizeParams, rng: np.random.Generator,
                    box: CropBox | None = None) -> np.ndarray:
    """Crop a random subregion of ``delta`` and resize it back to full geometry.

    The result never exceeds ``max|delta|`` because every output entry is a
    convex combination of input entries; the final clip only removes
    floating-point overshoot.
    """
    d = np.asarray(getattr(delta, "delta", delta), dtype=np.float64)
    h, w, _ = d.shape
    if box is None:
        box = sample_box(rng, h, w, params.scale_range)
    if box == full_box(h, w):
        return d.copy()
    bound = float(np.max(np.abs(d))) if d.size else 0.0
    return np.clip(crop_resize(d, box), -bound, bound)
