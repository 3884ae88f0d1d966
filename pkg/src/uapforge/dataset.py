"""Paired image-text corpora: JSONL manifests, synthetic fixtures, batching."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import CorruptImageError, DatasetError, ParameterError, ShapeError
from .toyworld import token_pattern, vocab_token

RAW_SUFFIX = ".f32"
_PUNCT = re.compile(r"[^\w\s<>]")

Caption = tuple  # tuple[str, ...]


def tokenize(text: str) -> Caption:
    """Lowercase, strip punctuation, split on whitespace."""
    return tuple(_PUNCT.sub(" ", text.lower()).split())


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    id: str

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3:
            raise ShapeError(f"image {self.id!r}: expected H x W x C, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise CorruptImageError(f"image {self.id!r}: pixel values outside [0, 1]")
        if px is self.pixels:
            px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def geometry(self) -> tuple:
        return tuple(self.pixels.shape)


@dataclass(frozen=True)
class CaptionedImage:
    image: ImageSample
    captions: tuple

    def __post_init__(self):
        caps = tuple(tuple(c) for c in self.captions)
        if not caps:
            raise DatasetError(f"image {self.image.id!r} has no captions")
        if any(len(c) == 0 for c in caps):
            raise DatasetError(f"image {self.image.id!r} has an empty caption")
        object.__setattr__(self, "captions", caps)


@dataclass(frozen=True)
class PairedDataset:
    items: tuple
    image_geometry: tuple
    vocabulary: frozenset = field(default=frozenset())

    def __post_init__(self):
        items = tuple(self.items)
        if not items:
            raise DatasetError("empty dataset")
        geom = tuple(int(g) for g in self.image_geometry)
        for it in items:
            if it.image.geometry != geom:
                raise ShapeError(
                    f"image {it.image.id!r} has geometry {it.image.geometry}, dataset declares {geom}"
                )
        vocab = frozenset(self.vocabulary) or frozenset(t for it in items for c in it.captions for t in c)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "image_geometry", geom)
        object.__setattr__(self, "vocabulary", vocab)

    @property
    def n(self) -> int:
        return len(self.items)

    @property
    def n_t(self) -> int:
        return sum(len(it.captions) for it in self.items)


def expand_by_captions(dataset: PairedDataset) -> list:
    """One ``(image, caption)`` entry per caption, manifest order then caption order."""
    return [(it.image, cap) for it in dataset.items for cap in it.captions]


def caption_owner(dataset: PairedDataset) -> np.ndarray:
    """Index of the owning image for every entry of :func:`expand_by_captions`."""
    return np.repeat(np.arange(dataset.n), [len(it.captions) for it in dataset.items])


# -- manifest I/O -----------------------------------------------------------

def _read_raw(path: Path) -> np.ndarray:
    header_path = path.with_name(path.name + ".json")
    try:
        header = json.loads(header_path.read_text())
        shape = tuple(int(s) for s in header["shape"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptImageError(f"{path}: unreadable sidecar header ({exc})") from exc
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise CorruptImageError(f"{path}: payload has {data.size} values, header says {shape}")
    return data.reshape(shape).astype(np.float64)


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise CorruptImageError(f"{path}: cannot decode image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr / 255.0


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == RAW_SUFFIX:
        return _read_raw(path)
    return _read_png(path)


def write_raw_image(pixels: np.ndarray, path) -> None:
    path = Path(path)
    np.asarray(pixels, dtype="<f4").tofile(path)
    header = {"shape": list(pixels.shape), "dtype": "float32"}
    path.with_name(path.name + ".json").write_text(json.dumps(header))


def load_manifest(path) -> PairedDataset:
    path = Path(path)
    root = path.parent
    items = []
    geometry = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rel, sid, caps = rec["image"], str(rec["id"]), rec["captions"]
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from exc
            img_path = root / rel
            if not img_path.exists():
                raise DatasetError(f"{path}:{lineno}: image file not found: {img_path}")
            try:
                pixels = read_image(img_path)
                sample = ImageSample(pixels, sid)
            except CorruptImageError as exc:
                raise CorruptImageError(f"{path}:{lineno}: {exc}") from exc
            if geometry is None:
                geometry = sample.geometry
            elif sample.geometry != geometry:
                raise ShapeError(f"{path}:{lineno}: geometry {sample.geometry} != {geometry}")
            try:
                items.append(CaptionedImage(sample, [tokenize(c) for c in caps]))
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    if not items:
        raise DatasetError(f"{path}: empty dataset")
    return PairedDataset(items, geometry)


def write_manifest(dataset: PairedDataset, directory, name: str = "manifest.jsonl") -> Path:
    """Write images as raw float32 tensors plus a JSONL manifest."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for it in dataset.items:
        rel = f"images/{it.image.id}{RAW_SUFFIX}"
        write_raw_image(it.image.pixels, directory / rel)
        rec = {"id": it.image.id, "image": rel, "captions": [" ".join(c) for c in it.captions]}
        lines.append(json.dumps(rec))
    out = directory / name
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


# -- synthetic fixture ------------------------------------------------------

def synth_toy_dataset(
    seed: int,
    n: int,
    geometry: Sequence[int] = (32, 32, 3),
    vocab_size: int = 48,
    caption_len: int = 6,
    *,
    world_seed: int = 0,
    amplitude: float = 0.5,
    noise: float = 0.02,
) -> PairedDataset:
    """Seeded corpus where each image is rendered from its first caption's tokens.

    The second caption swaps one token for an unused one, so the two captions
    of an image overlap but are not identical.
    """
    if n < 1 or vocab_size < 1 or caption_len < 1 or min(geometry) < 1:
        raise ParameterError("n, vocab_size, caption_len and all geometry dims must be >= 1")
    geometry = tuple(int(g) for g in geometry)
    rng = np.random.default_rng(seed)
    vocab = [vocab_token(i) for i in range(vocab_size)]
    items = []
    for i in range(n):
        idx = rng.choice(vocab_size, size=caption_len, replace=caption_len > vocab_size)
        cap1 = tuple(vocab[j] for j in idx)
        unused = np.setdiff1d(np.arange(vocab_size), idx)
        cap2 = list(cap1)
        if unused.size:
            cap2[int(rng.integers(caption_len))] = vocab[int(rng.choice(unused))]
        mean_pat = np.mean([token_pattern(t, geometry, world_seed) for t in cap1], axis=0)
        px = 0.5 + amplitude * mean_pat + noise * rng.uniform(-1.0, 1.0, size=geometry)
        items.append(CaptionedImage(ImageSample(np.clip(px, 0.0, 1.0), f"img{i:05d}"), [cap1, tuple(cap2)]))
    return PairedDataset(items, geometry)


def iterate_batches(n_items: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch of index batches from a single shuffle; the last batch may be short."""
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    order = rng.permutation(n_items)
    for start in range(0, n_items, batch_size):
        yield order[start:start + batch_size]
