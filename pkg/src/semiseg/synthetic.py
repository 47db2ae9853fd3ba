"""Synthetic two-class segmentation data: textured blobs over textured noise."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import ndimage
from skimage import draw

from .data import DatasetSplit, Sample, split_samples

FG_MIN, FG_MAX = 0.02, 0.6


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 500
    size: int = 64
    shapes: tuple[str, ...] = ("ellipse", "polygon")
    max_shapes: int = 3
    noise: float = 0.05
    contrast: tuple[float, float] = (0.15, 0.35)
    distractors: int = 2
    prefix: str = "syn"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        d["contrast"] = list(self.contrast)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for k in ("shapes", "contrast"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _smooth_field(rng, size, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return f / (f.std() + 1e-8)


def _shape_mask(rng, kind, size) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    cy, cx = rng.uniform(0.15, 0.85, size=2) * size
    if kind == "ellipse":
        ry, rx = rng.uniform(0.06, 0.22, size=2) * size
        rr, cc = draw.ellipse(cy, cx, ry, rx, shape=m.shape, rotation=rng.uniform(0, np.pi))
    elif kind == "polygon":
        k = int(rng.integers(3, 7))
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        rad = rng.uniform(0.08, 0.22, size=k) * size
        rr, cc = draw.polygon(cy + rad * np.sin(ang), cx + rad * np.cos(ang), shape=m.shape)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    m[rr, cc] = True
    return m


def _render(rng, spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    s = spec.size
    base = rng.uniform(0.3, 0.6)
    img = base + 0.08 * _smooth_field(rng, s, 6.0) + 0.04 * _smooth_field(rng, s, 2.0)
    mask = np.zeros((s, s), dtype=bool)
    for _ in range(int(rng.integers(1, spec.max_shapes + 1))):
        mask |= _shape_mask(rng, spec.shapes[int(rng.integers(len(spec.shapes)))], s)
    # foreground: brighter, with a fine stripe texture
    delta = rng.uniform(*spec.contrast)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:s, 0:s]
    stripes = 0.05 * np.sin((np.cos(theta) * xx + np.sin(theta) * yy) * rng.uniform(1.0, 1.6))
    img = np.where(mask, img + delta + stripes, img)
    # distractors: equally bright, but smooth and not part of the foreground
    for _ in range(int(rng.integers(0, spec.distractors + 1))):
        d = _shape_mask(rng, "ellipse", s) & ~ndimage.binary_dilation(mask, iterations=2)
        img = np.where(d, img + rng.uniform(*spec.contrast), img)
    img = img + rng.normal(0, spec.noise, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32), mask.astype(np.int64)


def make_samples(spec: SyntheticSpec, seed: int) -> list[Sample]:
    """Deterministic list of ``spec.n`` samples; draws with out-of-range foreground are redrawn."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < spec.n:
        img, mask = _render(rng, spec)
        frac = mask.mean()
        if not FG_MIN <= frac <= FG_MAX:
            continue
        out.append(Sample(f"{spec.prefix}{len(out):05d}", torch.from_numpy(img)[None], torch.from_numpy(mask)))
    return out


def generate_synthetic_dataset(spec: SyntheticSpec | dict, seed: int,
                               labeled_fraction: float = 0.1) -> DatasetSplit:
    if isinstance(spec, dict):
        spec = SyntheticSpec.from_dict(spec)
    if spec.n < 10:
        raise ValueError(f"synthetic datasets need n >= 10, got {spec.n}")
    return split_samples(make_samples(spec, seed), labeled_fraction, num_classes=2, seed=seed)
