"""Shared ground truth for the synthetic corpus and the toy dual encoder.

Every token owns a smooth visual pattern in [-1, 1]. Synthetic images are
built from the patterns of their caption tokens, and the toy text encoder
embeds a token as the image encoder's linear response to that same pattern,
which is what makes the toy pair retrievable at all.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np

from .interp import resize

PATTERN_GRID = 8
MASK_TOKEN = "<mask>"


def _token_seed(token: str, world_seed: int) -> int:
    digest = hashlib.sha256(f"{world_seed}:{token}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@lru_cache(maxsize=4096)
def _pattern_cached(token: str, geometry: tuple, world_seed: int) -> np.ndarray:
    h, w, c = geometry
    rng = np.random.default_rng(_token_seed(token, world_seed))
    grid = rng.uniform(-1.0, 1.0, size=(min(PATTERN_GRID, h), min(PATTERN_GRID, w), c))
    pat = resize(grid, h, w)
    pat.setflags(write=False)
    return pat


def token_pattern(token: str, geometry, world_seed: int = 0) -> np.ndarray:
    """H x W x C pattern for ``token``; a pure function of its arguments."""
    return _pattern_cached(token, tuple(int(g) for g in geometry), int(world_seed))


def vocab_token(i: int) -> str:
    return f"tok{i:03d}"
