"""Synthetic shape triplets, prompt tokenization and on-disk triplet folders.

A triplet folder holds, per sample id, ``<id>.img.ppm`` (P6), ``<id>.mask.pgm``
(P5, 0 or 255) and ``<id>.prompt.txt``. An optional ``manifest.txt`` lists the
ids to include, one per line.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

SHAPE_CLASSES = ("circle", "square", "triangle")
PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple = (PAD, UNK, "segment", "the", *SHAPE_CLASSES)

    def __post_init__(self):
        toks = tuple(self.tokens)
        object.__setattr__(self, "tokens", toks)
        if len(toks) < 2 or toks[PAD_ID] != PAD or toks[UNK_ID] != UNK:
            raise ValueError("vocabulary must start with the pad and unknown tokens")
        if len(set(toks)) != len(toks):
            raise ValueError("duplicate token in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(toks)})

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        seen = [PAD, UNK]
        for w in words:
            w = w.lower()
            if w not in seen:
                seen.append(w)
        return cls(tuple(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        return self._index.get(word, UNK_ID)


DEFAULT_VOCAB = Vocabulary()


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    tokens: np.ndarray  # (context_length,) int64
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str
    prompt: str = ""

    def __post_init__(self):
        for arr in (self.image, self.tokens, self.mask):
            arr.flags.writeable = False
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"{self.id}: image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise DataError(f"{self.id}: mask shape {self.mask.shape} != image {self.image.shape[1:]}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise DataError(f"{self.id}: image values outside [0, 1]")
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError(f"{self.id}: mask is not binary")


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 200
    image_size: int = 64
    shape_classes: tuple = SHAPE_CLASSES
    noise_level: float = 0.1
    seed: int = 0
    # foreground lift over the background; channels draw from [0.75 * contrast, contrast]
    contrast: float = 0.35
    # probability of drawing a second shape of another class that the prompt does not name
    distractor_prob: float = 0.0
    invert: bool = False
    context_length: int = 16
    id_prefix: str = "s"

    def __post_init__(self):
        object.__setattr__(self, "shape_classes", tuple(self.shape_classes))
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.shape_classes:
            raise ValueError("need at least one shape class")
        unknown = set(self.shape_classes) - set(SHAPE_CLASSES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")
        if not 0 <= self.noise_level <= 0.3:
            raise ValueError("noise_level must lie in [0, 0.3]")
        if not 0 <= self.distractor_prob <= 1:
            raise ValueError("distractor_prob must lie in [0, 1]")
        if not 0 < self.contrast <= 0.5:
            raise ValueError("contrast must lie in (0, 0.5]")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")


def tokenize(prompt: str, vocab: Vocabulary = DEFAULT_VOCAB, context_length: int = 16) -> np.ndarray:
    if context_length < 1:
        raise ValueError("context_length must be >= 1")
    ids = [vocab.id(w) for w in prompt.lower().split()][:context_length]
    ids += [PAD_ID] * (context_length - len(ids))
    return np.array(ids, dtype=np.int64)


def prompt_for(shape: str) -> str:
    return f"segment the {shape}"


# -- rasterization ----------------------------------------------------------

def rasterize(shape: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    """Boolean mask of pixels whose centres fall inside the shape."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        # upright equilateral triangle inscribed in the circle of radius r
        verts = [(cx + r * math.cos(a), cy + r * math.sin(a)) for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
        inside = np.ones((size, size), dtype=bool)
        for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
            cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
            inside &= cross >= 0
        return inside
    raise ValueError(f"unknown shape {shape!r}")


def _place(rng: np.random.Generator, size: int):
    r = rng.uniform(size / 8, size / 4)
    cx, cy = rng.uniform(r, size - r, 2)
    return float(cx), float(cy), float(r)


def _draw_sample(rng: np.random.Generator, spec: DatasetSpec, index: int, vocab: Vocabulary) -> Sample:
    size = spec.image_size
    target = spec.shape_classes[int(rng.integers(len(spec.shape_classes)))]
    cx, cy, r = _place(rng, size)
    mask = rasterize(target, cx, cy, r, size)

    shapes = [(target, mask)]
    others = [c for c in spec.shape_classes if c != target]
    if others and rng.random() < spec.distractor_prob:
        other = others[int(rng.integers(len(others)))]
        for _ in range(100):
            ox, oy, orad = _place(rng, size)
            if math.hypot(ox - cx, oy - cy) > r + orad + 1:
                break
        shapes.insert(0, (other, rasterize(other, ox, oy, orad, size) & ~mask))

    # tinted mid-grey background, uniform noise, shapes brighter by a per-channel contrast
    base = rng.uniform(0.3, 0.4, 3)[:, None, None]
    image = base + rng.uniform(0.0, spec.noise_level, (3, size, size))
    for _, m in shapes:
        lift = spec.contrast * rng.uniform(0.75, 1.0, 3)
        image = image + lift[:, None, None] * m[None]
    image = np.clip(image, 0.0, 1.0)
    if spec.invert:
        image = 1.0 - image

    prompt = prompt_for(target)
    return Sample(
        image=image,
        tokens=tokenize(prompt, vocab, spec.context_length),
        mask=mask.astype(np.uint8),
        id=f"{spec.id_prefix}{index:05d}",
        prompt=prompt,
    )


def generate(spec: DatasetSpec, vocab: Vocabulary = DEFAULT_VOCAB) -> list:
    """Deterministic list of synthetic samples; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    return [_draw_sample(rng, spec, i, vocab) for i in range(spec.n_samples)]


def split(samples: Sequence[Sample], n_train: int, n_val: int) -> tuple:
    """Contiguous train/val/test split; the test part takes the remainder."""
    if n_train + n_val > len(samples):
        raise ValueError("split sizes exceed dataset size")
    return (list(samples[:n_train]), list(samples[n_train:n_train + n_val]), list(samples[n_train + n_val:]))


# -- triplet folders ----------------------------------------------------------

def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image_chw: np.ndarray) -> None:
    arr = image_chw if image_chw.dtype == np.uint8 else to_uint8(image_chw)
    Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)), mode="RGB").save(path, format="PPM")


def write_pgm(path, gray_hw: np.ndarray) -> None:
    arr = gray_hw if gray_hw.dtype == np.uint8 else to_uint8(gray_hw)
    Image.fromarray(np.ascontiguousarray(arr), mode="L").save(path, format="PPM")


def _read_image(path: Path, mode: str, sample_id: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != mode:
                im = im.convert(mode)
            return np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"{sample_id}: unreadable image {path.name}: {exc}") from None


def resize_nearest(arr: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of the two leading (H, W) axes to ``size`` x ``size``."""
    h, w = arr.shape[:2]
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return arr[rows][:, cols]


def save_triplets(samples: Iterable[Sample], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for s in samples:
        write_ppm(directory / f"{s.id}.img.ppm", s.image)
        write_pgm(directory / f"{s.id}.mask.pgm", s.mask * 255)
        (directory / f"{s.id}.prompt.txt").write_text(s.prompt + "\n", encoding="utf-8")
        ids.append(s.id)
    (directory / "manifest.txt").write_text("".join(i + "\n" for i in ids), encoding="utf-8")


def _list_ids(directory: Path) -> list:
    manifest = directory / "manifest.txt"
    if manifest.exists():
        ids = [ln.strip() for ln in manifest.read_text(encoding="utf-8").splitlines()]
        return sorted({i for i in ids if i})
    return sorted(p.name[: -len(".img.ppm")] for p in directory.glob("*.img.ppm"))


def load_triplets(directory, vocab: Vocabulary = DEFAULT_VOCAB, image_size: int = 64,
                  context_length: int = 16) -> list:
    """Read a triplet folder into samples ordered by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    samples = []
    for sid in _list_ids(directory):
        paths = {k: directory / f"{sid}.{k}" for k in ("img.ppm", "mask.pgm", "prompt.txt")}
        for kind, p in paths.items():
            if not p.exists():
                raise DataError(f"sample {sid!r}: missing {kind} file")
        rgb = resize_nearest(_read_image(paths["img.ppm"], "RGB", sid), image_size)
        gray = resize_nearest(_read_image(paths["mask.pgm"], "L", sid), image_size)
        if rgb.shape[:2] != gray.shape:
            raise DataError(f"sample {sid!r}: mask/image size mismatch")
        prompt = paths["prompt.txt"].read_text(encoding="utf-8").strip()
        samples.append(Sample(
            image=rgb.transpose(2, 0, 1).astype(np.float64) / 255.0,
            tokens=tokenize(prompt, vocab, context_length),
            mask=(gray > 127).astype(np.uint8),
            id=sid,
            prompt=prompt,
        ))
    return samples


def stack(samples: Sequence[Sample], dtype=np.float64):
    """Batch arrays (images (B,3,H,W), tokens (B,L), masks (B,1,H,W))."""
    images = np.stack([s.image for s in samples]).astype(dtype)
    tokens = np.stack([s.tokens for s in samples])
    masks = np.stack([s.mask for s in samples])[:, None].astype(dtype)
    return images, tokens, masks
