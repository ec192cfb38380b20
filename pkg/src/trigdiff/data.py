"""Dataset ingestion: the builtin procedural shapes set, image folders, and
builtin target images for trigger-target pairs.

All images are float32 (C, H, W) in [-1, 1].
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError

log = logging.getLogger(__name__)

NULL_TOKEN = "<null>"

COLOR_VALUES = {
    "red": (0.9, -0.7, -0.7),
    "green": (-0.7, 0.85, -0.6),
    "blue": (-0.7, -0.6, 0.95),
    "yellow": (0.9, 0.85, -0.75),
}
SHAPE_NAMES = ("circle", "square", "triangle", "cross")

DATASET_SOURCES = ("builtin-synthetic-shapes", "image-folder", "captioned-image-folder")


@dataclass(frozen=True)
class Vocabulary:
    """Caption vocabulary; index 0 is the null token (empty string)."""

    words: tuple[str, ...]

    def __post_init__(self):
        if self.words[0] != NULL_TOKEN:
            raise ValueError(f"vocabulary must start with {NULL_TOKEN!r}")
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary has duplicate words")

    def __len__(self) -> int:
        return len(self.words)

    def index(self, word: str) -> int:
        return self.words.index(word)

    def encode(self, caption: tuple[str, ...] | None, length: int = 2) -> torch.Tensor:
        """Token ids padded/truncated to ``length``; None encodes the empty string."""
        ids = [0] * length
        if caption:
            for i, w in enumerate(caption[:length]):
                ids[i] = self.index(w)
        return torch.tensor(ids, dtype=torch.long)


def build_shape_vocab() -> Vocabulary:
    return Vocabulary((NULL_TOKEN, *COLOR_VALUES.keys(), *SHAPE_NAMES))


def _shape_region(shape: str, res: int, cx: float, cy: float, r: float) -> torch.Tensor:
    yy, xx = torch.meshgrid(
        torch.arange(res, dtype=torch.float32),
        torch.arange(res, dtype=torch.float32),
        indexing="ij",
    )
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
    if shape == "square":
        return torch.maximum((xx - cx).abs(), (yy - cy).abs()) <= r
    if shape == "triangle":
        t = (yy - (cy - r)) / (2 * r)
        return (t >= 0) & (t <= 1) & ((xx - cx).abs() <= t * r)
    if shape == "cross":
        arm = max(r / 3, 1.0)
        return (((xx - cx).abs() <= arm) & ((yy - cy).abs() <= r)) | (
            ((yy - cy).abs() <= arm) & ((xx - cx).abs() <= r)
        )
    raise ValueError(f"unknown shape {shape!r}")


def make_shape_image(
    resolution: int,
    shape: str,
    color: str,
    center: tuple[float, float],
    radius: float,
    background: float,
) -> torch.Tensor:
    region = _shape_region(shape, resolution, center[0], center[1], radius)
    img = torch.full((3, resolution, resolution), float(background))
    for c, v in enumerate(COLOR_VALUES[color]):
        img[c][region] = v
    return img


def synthetic_shapes(
    n: int, resolution: int, generator: torch.Generator
) -> tuple[torch.Tensor, list[tuple[str, str]]]:
    """Colored geometric primitives on plain backgrounds, with captions."""
    colors = list(COLOR_VALUES)
    images, captions = [], []
    for _ in range(n):
        color = colors[int(torch.randint(len(colors), (1,), generator=generator))]
        shape = SHAPE_NAMES[int(torch.randint(len(SHAPE_NAMES), (1,), generator=generator))]
        r = (0.2 + 0.15 * float(torch.rand((), generator=generator))) * resolution
        lo, hi = r + 1, resolution - r - 2
        cx = lo + (hi - lo) * float(torch.rand((), generator=generator))
        cy = lo + (hi - lo) * float(torch.rand((), generator=generator))
        bg = -0.6 + 1.2 * float(torch.rand((), generator=generator))
        images.append(make_shape_image(resolution, shape, color, (cx, cy), r, bg))
        captions.append((color, shape))
    return torch.stack(images), captions


TARGET_NAMES = ("checker", "stripes", "rings", "xcross")


def builtin_target(name: str, resolution: int) -> torch.Tensor:
    """Procedural target images, all exactly within [-1, 1]."""
    yy, xx = torch.meshgrid(
        torch.arange(resolution), torch.arange(resolution), indexing="ij"
    )
    hi, lo = 0.9, -0.9
    if name == "checker":
        pat = ((xx // 2 + yy // 2) % 2 == 0)
        img = torch.where(pat, hi, lo).float().expand(3, -1, -1).clone()
        img[2] = -img[2]
    elif name == "stripes":
        pat = (yy // 3) % 2 == 0
        img = torch.stack(
            [
                torch.where(pat, hi, lo).float(),
                torch.where(pat, lo, hi).float(),
                torch.full((resolution, resolution), -0.5),
            ]
        )
    elif name == "rings":
        c = (resolution - 1) / 2
        d = ((xx - c) ** 2 + (yy - c) ** 2).float().sqrt()
        pat = (d // 2) % 2 == 0
        img = torch.where(pat, hi, lo).float().expand(3, -1, -1).clone()
        img[1] = torch.where(pat, 0.5, -0.9)
    elif name == "xcross":
        pat = ((xx - yy).abs() <= 1) | ((xx + yy - (resolution - 1)).abs() <= 1)
        img = torch.where(pat, hi, lo).float().expand(3, -1, -1).clone()
        img[0] = torch.where(pat, hi, 0.2)
    else:
        raise ValueError(f"unknown builtin target {name!r}; have {TARGET_NAMES}")
    return img


def load_target(name_or_path: str, resolution: int) -> torch.Tensor:
    if name_or_path in TARGET_NAMES:
        return builtin_target(name_or_path, resolution)
    return _load_image_file(Path(name_or_path), resolution)


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "builtin-synthetic-shapes"
    path: str = ""
    n_items: int = 256
    resolution: int = 16
    channels: int = 3
    holdout_frac: float = 0.125
    max_bad_files: int = 5

    def __post_init__(self):
        if self.source not in DATASET_SOURCES:
            raise ConfigError(f"dataset.source must be one of {DATASET_SOURCES}, got {self.source!r}")
        if self.source != "builtin-synthetic-shapes" and not self.path:
            raise ConfigError("dataset.path required for folder sources")
        if self.channels != 3:
            raise ConfigError("only 3-channel images are supported")
        if not 0 <= self.holdout_frac < 1:
            raise ConfigError(f"dataset.holdout_frac must be in [0, 1), got {self.holdout_frac}")


@dataclass
class IngestedDataset:
    images: torch.Tensor  # (N, C, H, W) in [-1, 1]
    captions: list[tuple[str, ...]] | None
    vocab: Vocabulary | None
    train_indices: torch.Tensor
    holdout_indices: torch.Tensor

    @property
    def train_images(self) -> torch.Tensor:
        return self.images[self.train_indices]

    @property
    def holdout_images(self) -> torch.Tensor:
        return self.images[self.holdout_indices]

    def train_captions(self) -> list[tuple[str, ...]]:
        return [self.captions[int(i)] for i in self.train_indices]


def _load_image_file(path: Path, resolution: int) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).clamp(-1.0, 1.0)


def _ingest_folder(spec: DatasetSpec, captioned: bool):
    root = Path(spec.path)
    if not root.is_dir():
        raise ConfigError(f"dataset.path {root} is not a directory")
    caption_table = {}
    if captioned:
        cap_file = root / "captions.json"
        if not cap_file.is_file():
            raise ConfigError(f"captioned folder needs {cap_file}")
        caption_table = json.loads(cap_file.read_text())
    files = sorted(
        p for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    images, captions, bad = [], [], 0
    for p in files:
        try:
            img = _load_image_file(p, spec.resolution)
        except Exception as exc:  # undecodable file
            bad += 1
            log.warning("skipping undecodable file %s: %s", p.name, exc)
            if bad > spec.max_bad_files:
                raise ConfigError(f"more than {spec.max_bad_files} undecodable files in {root}")
            continue
        if captioned:
            if p.name not in caption_table:
                bad += 1
                log.warning("skipping %s: no caption", p.name)
                if bad > spec.max_bad_files:
                    raise ConfigError(f"more than {spec.max_bad_files} bad files in {root}")
                continue
            captions.append(tuple(caption_table[p.name].split()))
        images.append(img)
    if not images:
        raise ConfigError(f"no usable images in {root}")
    return torch.stack(images), (captions if captioned else None)


def ingest_dataset(spec: DatasetSpec, seed: int) -> IngestedDataset:
    """Load and normalize a dataset; ordering and splits are deterministic
    under the seed."""
    gen = torch.Generator().manual_seed(seed)
    if spec.source == "builtin-synthetic-shapes":
        images, captions = synthetic_shapes(spec.n_items, spec.resolution, gen)
        vocab = build_shape_vocab()
    else:
        images, captions = _ingest_folder(spec, spec.source == "captioned-image-folder")
        vocab = None
        if captions is not None:
            words = sorted({w for cap in captions for w in cap})
            vocab = Vocabulary((NULL_TOKEN, *words))
    n = images.shape[0]
    perm = torch.randperm(n, generator=gen)
    n_hold = int(round(spec.holdout_frac * n))
    return IngestedDataset(
        images=images,
        captions=captions,
        vocab=vocab,
        train_indices=perm[n_hold:].sort().values,
        holdout_indices=perm[:n_hold].sort().values,
    )
