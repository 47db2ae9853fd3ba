"""Tensor conventions, dataset containers and on-disk dataset I/O.

Conventions used across the package (all torch tensors):

* image:        float ``(channels, H, W)`` with values in ``[0, 1]``
* label mask:   int64 ``(H, W)`` holding class indices in ``[0, C)``
* logits:       float ``(B, C, H, W)``
* probabilities: float ``(B, C, H, W)``, summing to one over ``C``

Batched maps carry a leading batch axis; a single map is simply ``B == 1``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image as PILImage

PATCH_GRID = 4
PROB_ATOL = 1e-5

_DEBUG = os.environ.get("SEMISEG_DEBUG", "0") not in ("", "0", "false", "False")


def set_debug(enabled: bool) -> None:
    """Toggle invariant checks on every produced probability map."""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


# ---------------------------------------------------------------------------
# validation


def check_image(x: torch.Tensor, divisor: int = PATCH_GRID) -> torch.Tensor:
    if x.ndim != 3:
        raise ValueError(f"image must be (channels, H, W), got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h <= 0 or w <= 0 or h % divisor or w % divisor:
        raise ValueError(f"image H, W must be positive multiples of {divisor}, got {h}x{w}")
    if not torch.isfinite(x).all():
        raise ValueError("image contains non-finite values")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return x


def check_label_mask(y: torch.Tensor, num_classes: int) -> torch.Tensor:
    if num_classes < 2:
        raise ValueError(f"class count must be >= 2, got {num_classes}")
    if y.dtype.is_floating_point:
        raise TypeError("label mask must be an integer tensor")
    bad = (y < 0) | (y >= num_classes)
    if bad.any():
        pos = tuple(int(i) for i in bad.nonzero()[0])
        raise ValueError(
            f"class index {int(y[pos])} at position {pos} outside [0, {num_classes})"
        )
    return y


def check_prob_map(p: torch.Tensor, atol: float = PROB_ATOL) -> torch.Tensor:
    if p.ndim != 4:
        raise ValueError(f"probability map must be (B, C, H, W), got {tuple(p.shape)}")
    with torch.no_grad():
        if (p < 0).any():
            raise ValueError("probability map has negative entries")
        err = (p.sum(dim=1) - 1).abs().max().item()
        if err > atol:
            raise ValueError(f"probability map does not sum to one (max error {err:.3g})")
    return p


def debug_check(p: torch.Tensor) -> torch.Tensor:
    if _DEBUG:
        check_prob_map(p)
    return p


# ---------------------------------------------------------------------------
# label encodings


def one_hot(mask: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Index-encoded mask ``(H, W)`` or ``(B, H, W)`` -> one-hot ``(B, C, H, W)`` float."""
    check_label_mask(mask, num_classes)
    if mask.ndim == 2:
        mask = mask.unsqueeze(0)
    oh = torch.nn.functional.one_hot(mask.long(), num_classes)
    return oh.permute(0, 3, 1, 2).to(torch.get_default_dtype())


def binarize(p: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Hard class map ``(B, H, W)`` from probabilities ``(B, C, H, W)``.

    Two-class maps use a strict foreground threshold (ties go to background);
    more classes fall back to argmax, where ties resolve to the lower index.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if p.shape[1] == 2:
        return (p[:, 1] > threshold).long()
    return p.argmax(dim=1)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Sample:
    id: str
    image: torch.Tensor
    mask: torch.Tensor | None = None


class SealedMasks:
    """Ground truth of unlabeled ids, held back from training code.

    Every read is counted so tests can prove that no training path touches it.
    """

    def __init__(self, masks: dict[str, torch.Tensor] | None = None):
        self._masks = dict(masks or {})
        self.reads = 0

    def __len__(self) -> int:
        return len(self._masks)

    def __contains__(self, key: str) -> bool:
        return key in self._masks

    def read(self, key: str) -> torch.Tensor:
        self.reads += 1
        return self._masks[key]


@dataclass
class DatasetSplit:
    labeled: list[Sample]
    unlabeled: list[Sample]
    num_classes: int = 2
    sealed: SealedMasks = field(default_factory=SealedMasks)

    def __post_init__(self):
        if len(self.labeled) < 1:
            raise ValueError("a split needs at least one labeled sample")
        lab_ids = {s.id for s in self.labeled}
        unl_ids = {s.id for s in self.unlabeled}
        if lab_ids & unl_ids:
            raise ValueError(f"labeled and unlabeled ids overlap: {sorted(lab_ids & unl_ids)[:5]}")
        for s in self.labeled:
            if s.mask is None:
                raise ValueError(f"labeled sample {s.id} has no mask")
        for s in self.unlabeled:
            if s.mask is not None:
                raise ValueError(f"unlabeled sample {s.id} carries a mask; seal it instead")

    @property
    def n_labeled(self) -> int:
        return len(self.labeled)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled)


def split_samples(
    samples: Sequence[Sample],
    labeled_fraction: float,
    num_classes: int = 2,
    seed: int = 0,
) -> DatasetSplit:
    """Randomly pick ``round(fraction * n)`` labeled samples; seal the rest's masks."""
    if not 0 < labeled_fraction <= 1:
        raise ValueError(f"labeled fraction must be in (0, 1], got {labeled_fraction}")
    n = len(samples)
    n_l = max(1, int(round(labeled_fraction * n)))
    order = np.random.default_rng(seed).permutation(n)
    lab_idx = sorted(order[:n_l].tolist())
    unl_idx = sorted(order[n_l:].tolist())
    labeled = [samples[i] for i in lab_idx]
    sealed = {samples[i].id: samples[i].mask for i in unl_idx if samples[i].mask is not None}
    unlabeled = [Sample(samples[i].id, samples[i].image) for i in unl_idx]
    return DatasetSplit(labeled, unlabeled, num_classes, SealedMasks(sealed))


# ---------------------------------------------------------------------------
# directory layout: <root>/images/<id>.png, <root>/masks/<id>.png, <root>/split.json


def load_image_png(path: str | os.PathLike) -> torch.Tensor:
    arr = np.asarray(PILImage.open(path))
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr[..., :3].transpose(2, 0, 1)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return torch.from_numpy(arr.astype(np.float32) / scale)


def load_mask_png(path: str | os.PathLike) -> torch.Tensor:
    # paletted PNGs decode to their index plane, which is what we want
    arr = np.asarray(PILImage.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return torch.from_numpy(arr.astype(np.int64))


def save_image_png(path: str | os.PathLike, x: torch.Tensor) -> None:
    arr = (x.clamp(0, 1).cpu().numpy() * 255).round().astype(np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    PILImage.fromarray(arr).save(path)


def save_mask_png(path: str | os.PathLike, y: torch.Tensor) -> None:
    PILImage.fromarray(y.cpu().numpy().astype(np.uint8)).save(path)


def load_dataset_dir(root: str | os.PathLike, num_classes: int = 2) -> DatasetSplit:
    root = Path(root)
    with open(root / "split.json") as f:
        split = json.load(f)
    labeled, unlabeled, sealed = [], [], {}
    for sid in split["labeled"]:
        x = check_image(load_image_png(root / "images" / f"{sid}.png"))
        y = check_label_mask(load_mask_png(root / "masks" / f"{sid}.png"), num_classes)
        if y.shape != x.shape[-2:]:
            raise ValueError(f"mask shape {tuple(y.shape)} != image shape for {sid}")
        labeled.append(Sample(sid, x, y))
    for sid in split["unlabeled"]:
        x = check_image(load_image_png(root / "images" / f"{sid}.png"))
        unlabeled.append(Sample(sid, x))
        mpath = root / "masks" / f"{sid}.png"
        if mpath.exists():
            sealed[sid] = mpath
    return DatasetSplit(labeled, unlabeled, num_classes, _LazySealed(sealed))


class _LazySealed(SealedMasks):
    def __init__(self, paths: dict[str, Path]):
        super().__init__()
        self._masks = paths

    def read(self, key: str) -> torch.Tensor:
        self.reads += 1
        return load_mask_png(self._masks[key])


def save_dataset_dir(
    root: str | os.PathLike,
    split: DatasetSplit,
    extra: Iterable[Sample] = (),
) -> None:
    """Write a split (and optional held-out samples listed under ``test``)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in split.labeled:
        save_image_png(root / "images" / f"{s.id}.png", s.image)
        save_mask_png(root / "masks" / f"{s.id}.png", s.mask)
    for s in split.unlabeled:
        save_image_png(root / "images" / f"{s.id}.png", s.image)
        if s.id in split.sealed:
            save_mask_png(root / "masks" / f"{s.id}.png", split.sealed.read(s.id))
    extra = list(extra)
    for s in extra:
        save_image_png(root / "images" / f"{s.id}.png", s.image)
        save_mask_png(root / "masks" / f"{s.id}.png", s.mask)
    manifest = {
        "labeled": [s.id for s in split.labeled],
        "unlabeled": [s.id for s in split.unlabeled],
    }
    if extra:
        manifest["test"] = [s.id for s in extra]
    with open(root / "split.json", "w") as f:
        json.dump(manifest, f, indent=2)


def load_test_samples(root: str | os.PathLike) -> list[Sample]:
    """Samples listed under ``test`` in split.json (falls back to all labeled ids)."""
    root = Path(root)
    with open(root / "split.json") as f:
        split = json.load(f)
    ids = split.get("test") or split["labeled"]
    return [
        Sample(sid, load_image_png(root / "images" / f"{sid}.png"),
               load_mask_png(root / "masks" / f"{sid}.png"))
        for sid in ids
    ]


def stack_images(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.stack([s.image for s in samples])


def stack_masks(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.stack([s.mask for s in samples])
