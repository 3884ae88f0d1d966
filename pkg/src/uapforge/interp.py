"""Bilinear resampling expressed as a pair of row-stochastic matrices.

Writing the resize as ``R_y @ img @ R_x^T`` keeps it linear (so autograd sees
an exact adjoint) and makes every output pixel a convex combination of input
pixels, which is what bounds the l-inf norm of resized perturbations.
"""

from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np
import torch

from .errors import ParameterError


class CropBox(NamedTuple):
    top: int
    left: int
    height: int
    width: int


@lru_cache(maxsize=256)
def _bilinear_matrix_cached(out_size: int, in_size: int) -> np.ndarray:
    m = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        # half-pixel centres; identical sizes give the identity exactly
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        w1 = src - i0
        m[i, i0] += 1.0 - w1
        m[i, i1] += w1
    m.setflags(write=False)
    return m


def bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    if out_size < 1 or in_size < 1:
        raise ParameterError(f"resize sides must be >= 1, got {in_size} -> {out_size}")
    return _bilinear_matrix_cached(int(out_size), int(in_size))


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an H x W x C array (float64 result)."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return np.array(img, dtype=np.float64, copy=True)
    ry = bilinear_matrix(out_h, h)
    rx = bilinear_matrix(out_w, w)
    out = np.tensordot(ry, np.asarray(img, dtype=np.float64), axes=(1, 0))  # oh, w, c
    return np.tensordot(out, rx, axes=(1, 1)).transpose(0, 2, 1)


def resize_tensor(img: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Differentiable twin of :func:`resize` for ``(..., H, W, C)`` tensors."""
    h, w = img.shape[-3], img.shape[-2]
    if (h, w) == (out_h, out_w):
        return img
    ry = torch.tensor(bilinear_matrix(out_h, h), dtype=img.dtype)
    rx = torch.tensor(bilinear_matrix(out_w, w), dtype=img.dtype)
    out = torch.matmul(ry, img.movedim(-1, -3).reshape(*img.shape[:-3], img.shape[-1], h, w))
    out = torch.matmul(out, rx.T)  # ..., c, oh, ow
    return out.movedim(-3, -1)


def crop(img, box: CropBox):
    return img[..., box.top:box.top + box.height, box.left:box.left + box.width, :]


def crop_resize(img: np.ndarray, box: CropBox) -> np.ndarray:
    h, w = img.shape[:2]
    return resize(crop(img, box), h, w)


def crop_resize_tensor(img: torch.Tensor, box: CropBox) -> torch.Tensor:
    h, w = img.shape[-3], img.shape[-2]
    return resize_tensor(crop(img, box), h, w)


def full_box(h: int, w: int) -> CropBox:
    return CropBox(0, 0, h, w)


def sample_box(rng: np.random.Generator, h: int, w: int, scale_range) -> CropBox:
    """Random axis-aligned crop; each side keeps a U(lo, hi) fraction."""
    lo, hi = scale_range
    if not 0.0 < lo <= hi <= 1.0:
        raise ParameterError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    fh, fw = rng.uniform(lo, hi, size=2)
    ch, cw = int(round(fh * h)), int(round(fw * w))
    if ch < 1 or cw < 1:
        raise ParameterError(
            f"degenerate crop {ch}x{cw} from a {h}x{w} frame (scale_range={scale_range})"
        )
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return CropBox(top, left, ch, cw)
