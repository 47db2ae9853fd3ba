"""Overlap and surface-distance metrics on index-encoded masks (numpy)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# 4-connectivity: a pixel is on the boundary if any edge neighbour is outside
_CROSS = ndimage.generate_binary_structure(2, 1)


def _as_np(a):
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a)


def dice_iou(pred, gt, cls: int = 1) -> tuple[float, float]:
    p = _as_np(pred) == cls
    g = _as_np(gt) == cls
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    inter = np.logical_and(p, g).sum()
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0, 1.0
    union = total - inter
    return float(2 * inter / total), float(inter / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    mask = mask.astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS)


def surface_distances(pred, gt, cls: int = 1) -> np.ndarray | None:
    """Symmetric boundary-to-boundary nearest-neighbour distances.

    Returns an empty array when both masks are empty and ``None`` when exactly
    one is empty (distance undefined).
    """
    p = _as_np(pred) == cls
    g = _as_np(gt) == cls
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if not p.any() and not g.any():
        return np.zeros(0)
    if not p.any() or not g.any():
        return None
    bp, bg = boundary(p), boundary(g)
    d_to_g = ndimage.distance_transform_edt(~bg)
    d_to_p = ndimage.distance_transform_edt(~bp)
    return np.concatenate([d_to_g[bp], d_to_p[bg]])


def _diag(shape) -> float:
    return math.hypot(*shape)


def hd95(pred, gt, cls: int = 1) -> float:
    """95th percentile (linear interpolation) of the symmetric surface distances, in pixels.

    Both masks empty gives 0; exactly one empty falls back to the image diagonal.
    """
    d = surface_distances(pred, gt, cls)
    if d is None:
        return _diag(_as_np(gt).shape)
    return float(np.percentile(d, 95)) if d.size else 0.0


def asd(pred, gt, cls: int = 1) -> float:
    """Mean symmetric surface distance, with the same empty-mask conventions as :func:`hd95`."""
    d = surface_distances(pred, gt, cls)
    if d is None:
        return _diag(_as_np(gt).shape)
    return float(d.mean()) if d.size else 0.0


@dataclass
class MetricReport:
    dice: float
    iou: float
    hd95: float
    asd: float
    undefined: bool = False
    per_class: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"dice": self.dice, "iou": self.iou, "hd95": self.hd95, "asd": self.asd,
                "undefined": self.undefined, "per_class": self.per_class}


def evaluate_pair(pred, gt, num_classes: int = 2) -> MetricReport:
    """Metrics averaged over the foreground classes ``1..C-1``."""
    pred, gt = _as_np(pred), _as_np(gt)
    rows = {}
    undefined = False
    for c in range(1, num_classes):
        d, i = dice_iou(pred, gt, c)
        if surface_distances(pred, gt, c) is None:
            undefined = True
        rows[c] = {"dice": d, "iou": i, "hd95": hd95(pred, gt, c), "asd": asd(pred, gt, c)}
    mean = {k: float(np.mean([r[k] for r in rows.values()])) for k in ("dice", "iou", "hd95", "asd")}
    return MetricReport(**mean, undefined=undefined,
                        per_class=rows if num_classes > 2 else {})


def aggregate(reports: list[MetricReport]) -> dict:
    out = {}
    for k in ("dice", "iou", "hd95", "asd"):
        vals = np.array([getattr(r, k) for r in reports], dtype=float)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    out["n"] = len(reports)
    out["undefined"] = int(sum(r.undefined for r in reports))
    return out
