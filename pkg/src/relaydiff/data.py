"""Procedural toy dataset: two-tone shapes and band-limited noise textures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import downsample

CLASS_NAMES = ("disc", "square", "triangle", "texture")
NUM_CLASSES = len(CLASS_NAMES)


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, 1, S, S) in [0, 1]
    low: np.ndarray  # (N, 1, S/2, S/2), exact area downsample of ``images``
    labels: np.ndarray  # (N,) class ids

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return ToyDataset(self.images[idx], self.low[idx], self.labels[idx])


def _two_tone(rng):
    lo = rng.uniform(0.05, 0.45)
    hi = rng.uniform(lo + 0.3, 0.95)
    return (lo, hi) if rng.random() < 0.5 else (hi, lo)


def _shape_mask(kind, size, rng, supersample=4):
    """Fractional pixel coverage of a random shape (box-filtered edges)."""
    n = size * supersample
    yy, xx = (np.mgrid[0:n, 0:n] + 0.5) / supersample
    return _hard_mask(kind, size, yy, xx, rng).reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def _hard_mask(kind, size, yy, xx, rng):
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    r = rng.uniform(0.15, 0.32) * size
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        theta = rng.uniform(0, np.pi / 2)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        return (np.abs(u) <= r) & (np.abs(v) <= r)
    # triangle: intersection of three half-planes around the centre
    phase = rng.uniform(0, 2 * np.pi)
    mask = np.ones(yy.shape, dtype=bool)
    for k in range(3):
        ang = phase + 2 * np.pi * k / 3
        mask &= (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang) <= 0.6 * r
    return mask


def _texture(size, rng, max_freq=12):
    f = np.fft.fftfreq(size) * size
    fy, fx = np.meshgrid(f, f, indexing="ij")
    radius = np.hypot(fy, fx)
    spectrum = (rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))) * (
        (radius >= 1) & (radius <= max_freq)
    )
    field = np.real(np.fft.ifft2(spectrum))
    field = (field - field.min()) / (np.ptp(field) + 1e-12)
    lo, hi = sorted(_two_tone(rng))
    return lo + (hi - lo) * field


def make_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    kind = CLASS_NAMES[label]
    if kind == "texture":
        return _texture(size, rng)[None]
    fg, bg = _two_tone(rng)
    cover = _shape_mask(kind, size, rng)
    return (bg + (fg - bg) * cover)[None]


def make_dataset(n: int, seed: int = 0, size: int = 64) -> ToyDataset:
    """Balanced, seeded dataset of ``n`` images with their half-size versions."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % NUM_CLASSES
    rng.shuffle(labels)
    images = np.stack([make_image(int(c), size, rng) for c in labels])
    return ToyDataset(images, downsample(images, 2), labels.astype(np.int64))
