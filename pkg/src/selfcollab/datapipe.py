"""Unpaired datasets, patch sampling and toy degradation corpora.

Dataset root layout::

    <root>/cleanA/*.png      clean domain (x)
    <root>/degradedB/*.png   degraded domain (y)

Paired evaluation sets use ``<root>/clean`` and ``<root>/degraded`` with
matching file names.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .imagecore import read_image, write_image, to_tensor

log = logging.getLogger(__name__)

CLEAN_DIR = "cleanA"
DEGRADED_DIR = "degradedB"
IMAGE_SUFFIXES = (".png",)

DEGRADATION_KINDS = ("gaussian_noise", "rain_streaks", "snow_speckles")


@dataclass(frozen=True)
class DegradationSpec:
    """Toy degradation recipe. Same spec and seed give bit-identical output."""

    kind: str = "gaussian_noise"
    seed: int = 0
    # gaussian_noise
    stddev: float = 25 / 255
    # rain_streaks
    streak_count: int = 40
    streak_length: tuple = (8.0, 20.0)
    streak_angle: tuple = (-20.0, 20.0)
    streak_width: float = 0.6
    opacity: float = 0.5
    # snow_speckles
    density: float = 0.004
    radius: tuple = (0.8, 2.5)

    def __post_init__(self):
        if self.kind not in DEGRADATION_KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.stddev < 0:
            raise ValueError("stddev must be nonnegative")
        if self.density < 0:
            raise ValueError("density must be nonnegative")
        if self.streak_count < 0:
            raise ValueError("streak_count must be nonnegative")
        if not 0 <= self.opacity <= 1:
            raise ValueError("opacity must lie in [0, 1]")
        object.__setattr__(self, "streak_length", tuple(self.streak_length))
        object.__setattr__(self, "streak_angle", tuple(self.streak_angle))
        object.__setattr__(self, "radius", tuple(self.radius))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("streak_length", "streak_angle", "radius"):
            d[k] = list(d[k])
        return d


def _render_streaks(h, w, spec, rng):
    layer = np.zeros((h, w), dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(spec.streak_count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        length = rng.uniform(*spec.streak_length)
        # angle measured from vertical
        theta = math.radians(rng.uniform(*spec.streak_angle))
        dy, dx = math.cos(theta), math.sin(theta)
        # distance from each pixel to the segment
        py, px = yy - cy, xx - cx
        t = np.clip(py * dy + px * dx, -length / 2, length / 2)
        dist2 = (py - t * dy) ** 2 + (px - t * dx) ** 2
        profile = np.exp(-dist2 / (2 * spec.streak_width**2))
        layer = 1 - (1 - layer) * (1 - profile)
    return layer


def _render_snow(h, w, spec, rng):
    layer = np.zeros((h, w), dtype=np.float64)
    n = int(round(spec.density * h * w))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(n):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(*spec.radius)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        # soft-edged disc
        disc = np.clip(r + 0.5 - d, 0.0, 1.0)
        layer = np.maximum(layer, disc)
    return layer


def synth_degrade(clean: np.ndarray, spec: DegradationSpec, seed: int | None = None) -> np.ndarray:
    """Apply a toy degradation to an ``H x W x C`` image, clamped to [0, 1].

    ``seed`` defaults to ``spec.seed``; pass a per-image value to vary
    realizations across a corpus.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    img = np.asarray(clean, dtype=np.float64)
    h, w = img.shape[:2]
    if spec.kind == "gaussian_noise":
        if spec.stddev == 0:
            return np.asarray(clean).copy()
        out = img + rng.normal(0.0, spec.stddev, size=img.shape)
    elif spec.kind == "rain_streaks":
        if spec.streak_count == 0 or spec.opacity == 0:
            return np.asarray(clean).copy()
        alpha = spec.opacity * _render_streaks(h, w, spec, rng)[:, :, None]
        out = 1 - (1 - img) * (1 - alpha)  # screen blend
    else:
        if spec.density == 0:
            return np.asarray(clean).copy()
        alpha = spec.opacity * _render_snow(h, w, spec, rng)[:, :, None]
        out = img * (1 - alpha) + alpha
    return np.clip(out, 0.0, 1.0).astype(np.asarray(clean).dtype)


def synth_clean_images(n: int, size: int = 64, channels: int = 3, seed: int = 0) -> list:
    """Piecewise-smooth synthetic scenes used as toy clean sources."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    images = []
    for _ in range(n):
        base = rng.uniform(0.2, 0.8, channels)
        gy, gx = rng.uniform(-0.3, 0.3, 2)
        img = base[None, None, :] + (gy * yy + gx * xx)[:, :, None]
        for _ in range(rng.integers(3, 7)):
            color = rng.uniform(0.05, 0.95, channels)
            if rng.random() < 0.5:
                y0, x0 = rng.uniform(0, 0.8, 2)
                hh, ww = rng.uniform(0.15, 0.5, 2)
                mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
            else:
                cy, cx = rng.uniform(0.1, 0.9, 2)
                r = rng.uniform(0.08, 0.3)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
            img[mask] = color
        freq = rng.uniform(4, 12)
        img += 0.05 * np.sin(2 * np.pi * freq * (xx + yy))[:, :, None]
        images.append(np.clip(img, 0, 1).astype(np.float32))
    return images


def list_images(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _load_dir(directory):
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no images in {directory}")
    kept, images = [], []
    for p in paths:
        try:
            img = read_image(p)
        except ValueError:
            log.warning("skipping undecodable file %s", p)
            continue
        img.setflags(write=False)
        kept.append(p)
        images.append(img)
    if not images:
        raise ValueError(f"no decodable images in {directory}")
    return tuple(kept), tuple(images)


@dataclass(frozen=True)
class UnpairedDataset:
    """Clean and degraded samples with no pairing relation between them."""

    clean_paths: tuple
    degraded_paths: tuple
    clean_images: tuple = field(repr=False)
    degraded_images: tuple = field(repr=False)

    @property
    def sizes(self) -> tuple:
        return len(self.clean_images), len(self.degraded_images)

    @property
    def channels(self) -> int:
        return self.clean_images[0].shape[2]


def load_unpaired(clean_dir, degraded_dir) -> UnpairedDataset:
    cp, ci = _load_dir(clean_dir)
    dp, di = _load_dir(degraded_dir)
    chans = {im.shape[2] for im in ci + di}
    if len(chans) != 1:
        raise ValueError(f"mixed channel counts in dataset: {sorted(chans)}")
    return UnpairedDataset(cp, dp, ci, di)


def load_unpaired_root(root) -> UnpairedDataset:
    root = Path(root)
    return load_unpaired(root / CLEAN_DIR, root / DEGRADED_DIR)


@dataclass
class PatchBatch:
    """Independently drawn clean (x) and degraded (y) patches, ``N x C x P x P``."""

    clean: torch.Tensor
    degraded: torch.Tensor
    patch_size: int
    seed: int

    def __len__(self):
        return self.clean.shape[0]


def _crop(images, rng, batch, patch):
    out = []
    idx = rng.integers(0, len(images), size=batch)
    for i in idx:
        img = images[i]
        h, w = img.shape[:2]
        top = rng.integers(0, h - patch + 1)
        left = rng.integers(0, w - patch + 1)
        out.append(to_tensor(img[top:top + patch, left:left + patch]))
    return torch.stack(out)


def sample_batch(ds: UnpairedDataset, batch: int, patch: int, seed: int) -> PatchBatch:
    """Uniform random crops; clean and degraded sides use independent streams."""
    smallest = min(min(im.shape[:2]) for im in ds.clean_images + ds.degraded_images)
    if patch > smallest:
        raise ValueError(f"patch {patch} exceeds smallest image side {smallest}")
    clean_rng, degraded_rng = (np.random.default_rng(s)
                               for s in np.random.SeedSequence(seed).spawn(2))
    return PatchBatch(
        clean=_crop(ds.clean_images, clean_rng, batch, patch),
        degraded=_crop(ds.degraded_images, degraded_rng, batch, patch),
        patch_size=patch,
        seed=seed,
    )


def make_toy_corpus(source_dir, spec: DegradationSpec, split_seed: int, out_root) -> tuple:
    """Split sources into disjoint halves and degrade the second half.

    Returns ``(clean_dir, degraded_dir)`` under ``out_root``.
    """
    sources = list_images(source_dir)
    if len(sources) < 2:
        raise ValueError(f"need at least 2 source images, found {len(sources)}")
    order = np.random.default_rng(split_seed).permutation(len(sources))
    half = len(sources) // 2
    out_root = Path(out_root)
    clean_dir, degraded_dir = out_root / CLEAN_DIR, out_root / DEGRADED_DIR
    clean_dir.mkdir(parents=True, exist_ok=True)
    degraded_dir.mkdir(parents=True, exist_ok=True)
    for rank, i in enumerate(order):
        src = sources[i]
        img = read_image(src)
        if rank < half:
            write_image(clean_dir / src.name, img, bits=16)
        else:
            deg = synth_degrade(img, spec, seed=spec.seed + rank)
            write_image(degraded_dir / src.name, deg, bits=16)
    return clean_dir, degraded_dir


def make_paired_set(source_dir, spec: DegradationSpec, out_root, seed_offset: int = 10_000):
    """Write aligned ``clean/`` and ``degraded/`` folders for evaluation."""
    out_root = Path(out_root)
    for i, src in enumerate(list_images(source_dir)):
        img = read_image(src)
        write_image(out_root / "clean" / src.name, img, bits=16)
        deg = synth_degrade(img, spec, seed=spec.seed + seed_offset + i)
        write_image(out_root / "degraded" / src.name, deg, bits=16)
    return out_root / "clean", out_root / "degraded"


def load_paired(root) -> list:
    """Aligned ``(clean, degraded)`` array pairs from a paired set."""
    root = Path(root)
    clean_dir, deg_dir = root / "clean", root / "degraded"
    if not clean_dir.is_dir() or not deg_dir.is_dir():
        raise ValueError(f"{root} is not a paired set (needs clean/ and degraded/)")
    deg = {p.name: p for p in list_images(deg_dir)}
    pairs = []
    for p in list_images(clean_dir):
        if p.name not in deg:
            raise ValueError(f"no degraded counterpart for {p.name}")
        pairs.append((read_image(p), read_image(deg[p.name])))
    if not pairs:
        raise ValueError(f"empty paired set {root}")
    return pairs


def write_sources(images, out_dir, bits: int = 16) -> Path:
    out_dir = Path(out_dir)
    for i, img in enumerate(images):
        write_image(out_dir / f"{i:04d}.png", img, bits=bits)
    return out_dir


def build_toy_dataset(out_root, spec: DegradationSpec, n_train: int = 24, n_val: int = 8,
                      size: int = 64, channels: int = 3, seed: int = 0) -> tuple:
    """Synthetic sources turned into an unpaired ``train/`` and a paired ``val/`` set.

    Returns ``(train_root, val_root)``.
    """
    out_root = Path(out_root)
    images = synth_clean_images(n_train + n_val, size, channels, seed)
    write_sources(images[:n_train], out_root / "sources" / "train")
    write_sources(images[n_train:], out_root / "sources" / "val")
    make_toy_corpus(out_root / "sources" / "train", spec, seed, out_root / "train")
    make_paired_set(out_root / "sources" / "val", spec, out_root / "val")
    return out_root / "train", out_root / "val"
