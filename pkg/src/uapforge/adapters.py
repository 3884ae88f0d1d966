"""Encoder contract for attacked/surrogate models, plus the toy dual encoder.

An adapter exposes only the unimodal encoders. Images arrive as
``B x H x W x C`` float64 tensors in [0, 1]; any model-specific
normalisation happens inside ``encode_image`` so the perturbation budget
stays in pixel units. ``encode_image`` must be differentiable with torch
autograd; ``encode_text`` need not be.
"""

from __future__ import annotations

import importlib
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, ContractError, ShapeError
from .toyworld import MASK_TOKEN, token_pattern


class EncoderBundle:
    name = "abstract"
    input_size: tuple = (224, 224)
    channels: int = 3
    embed_dim: int = 0
    mask_token: str = MASK_TOKEN

    @property
    def geometry(self) -> tuple:
        return (*self.input_size, self.channels)

    def encode_image(self, images) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, captions: Sequence[Sequence[str]]) -> torch.Tensor:
        raise NotImplementedError

    def as_image_batch(self, images) -> torch.Tensor:
        if isinstance(images, torch.Tensor):
            x = images.to(torch.float64)
        else:
            x = torch.tensor(np.asarray(images), dtype=torch.float64)
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.geometry:
            raise ShapeError(
                f"{self.name}: expected images of shape (B, {', '.join(map(str, self.geometry))}),"
                f" got {tuple(x.shape)}"
            )
        return x

    def grad_image(self, loss_closure: Callable, images) -> np.ndarray:
        """d loss_closure(encode_image(images)) / d images, same shape as ``images``."""
        x = self.as_image_batch(images).detach().clone().requires_grad_(True)
        loss = loss_closure(self.encode_image(x))
        loss = torch.as_tensor(loss)
        if loss.numel() != 1:
            raise ContractError(f"loss closure must return a scalar, got shape {tuple(loss.shape)}")
        if not loss.requires_grad:
            g = torch.zeros_like(x)
        else:
            (g,) = torch.autograd.grad(loss.reshape(()), x, allow_unused=True)
            if g is None:
                g = torch.zeros_like(x)
        return g.detach().numpy().reshape(np.shape(images))


def _l2_normalize(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


class ToyDualEncoder(EncoderBundle):
    """Random linear image map with a tanh squashing, and a bag-of-tokens text map.

    A token's text embedding is the image map applied to the token's visual
    pattern (see :mod:`uapforge.toyworld`), so images rendered from a caption
    land near that caption in embedding space. Different ``seed`` values give
    different image maps, which serves as a stand-in for a different model.
    """

    name = "toy"

    def __init__(
        self,
        seed: int = 0,
        geometry: Sequence[int] = (32, 32, 3),
        embed_dim: int = 64,
        gain: float = 12.0,
        world_seed: int = 0,
        nonlinearity: bool = True,
        normalize: bool = True,
    ):
        h, w, c = (int(g) for g in geometry)
        self.seed = seed
        self.input_size = (h, w)
        self.channels = c
        self.embed_dim = int(embed_dim)
        self.gain = float(gain)
        self.world_seed = world_seed
        self.nonlinearity = nonlinearity
        self.normalize = normalize
        d = h * w * c
        rng = np.random.default_rng(seed)
        self.weight = torch.from_numpy(rng.standard_normal((self.embed_dim, d)) / np.sqrt(d))
        self._token_cache: dict = {}

    def encode_image(self, images) -> torch.Tensor:
        x = self.as_image_batch(images)
        z = (x - 0.5).reshape(x.shape[0], -1) @ self.weight.T
        if self.nonlinearity:
            z = torch.tanh(self.gain * z)
        return _l2_normalize(z) if self.normalize else z

    def token_embedding(self, token: str) -> torch.Tensor:
        vec = self._token_cache.get(token)
        if vec is None:
            if token == self.mask_token:
                vec = torch.zeros(self.embed_dim, dtype=torch.float64)
            else:
                pat = token_pattern(token, self.geometry, self.world_seed)
                vec = self.weight @ torch.tensor(pat.reshape(-1))
            self._token_cache[token] = vec
        return vec

    def encode_text(self, captions) -> torch.Tensor:
        rows = []
        for cap in captions:
            if len(cap) == 0:
                raise ContractError("cannot encode an empty caption")
            rows.append(torch.stack([self.token_embedding(t) for t in cap]).mean(dim=0))
        t = torch.stack(rows)
        return _l2_normalize(t) if self.normalize else t


def load_adapter(name: str, geometry: Sequence[int], **kwargs) -> EncoderBundle:
    """Resolve ``"toy"`` or ``"external:<module>[:<factory>]"`` to a bundle.

    External factories are called as ``factory(geometry=..., **kwargs)`` and
    default to a module-level ``build_bundle``.
    """
    if name == "toy":
        try:
            return ToyDualEncoder(geometry=geometry, **kwargs)
        except TypeError as exc:
            raise ConfigError(f"adapter_args for 'toy': {exc}") from exc
    if name.startswith("external:"):
        target = name[len("external:"):]
        mod_name, _, attr = target.partition(":")
        try:
            module = importlib.import_module(mod_name)
        except ImportError as exc:
            raise ConfigError(f"adapter {name!r}: cannot import {mod_name!r} ({exc})") from exc
        factory = getattr(module, attr or "build_bundle", None)
        if factory is None:
            raise ConfigError(f"adapter {name!r}: {mod_name} has no {attr or 'build_bundle'!r}")
        bundle = factory(geometry=tuple(geometry), **kwargs)
        if not isinstance(bundle, EncoderBundle):
            raise ConfigError(f"adapter {name!r} did not return an EncoderBundle")
        return bundle
    raise ConfigError(f"unknown adapter {name!r} (expected 'toy' or 'external:<module>')")
