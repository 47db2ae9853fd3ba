"""Segmentation losses, entropy regulariser, warm-up schedule and loss bookkeeping."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .data import one_hot

EPS_LOG = 1e-8
DICE_SMOOTH = 1e-5


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(EPS_LOG))


def entropy_map(p: torch.Tensor) -> torch.Tensor:
    """Per-pixel entropy ``(B, H, W)`` of a probability map ``(B, C, H, W)``, natural log."""
    # p == 0 contributes 0 * log(eps) == 0, i.e. 0 log 0 := 0
    return -(p * _log(p)).sum(dim=1)


def ce_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Pixel-mean cross-entropy of probabilities against an index mask ``(B, H, W)``."""
    picked = p.gather(1, y.long().unsqueeze(1)).squeeze(1)
    return -_log(picked).mean()


def dice_loss(p: torch.Tensor, y: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss averaged over classes; sums run over batch and pixels."""
    target = one_hot(y, p.shape[1]).to(p.dtype)
    dims = (0, 2, 3)
    inter = (p * target).sum(dims)
    denom = p.sum(dims) + target.sum(dims)
    dice = (2 * inter + smooth) / (denom + smooth)
    return (1 - dice).mean()


def seg_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Dice + CE, the supervised objective applied to every labeled prediction."""
    return dice_loss(p, y) + ce_loss(p, y)


def sup_loss(p_a, p_b, y_f, y) -> torch.Tensor:
    from .fusion import fuse_loss

    return seg_loss(p_a, y) + seg_loss(p_b, y) + fuse_loss(y_f, y)


def entropy_loss(p_a: torch.Tensor, p_b: torch.Tensor) -> torch.Tensor:
    """Pixel-mean summed entropy of both subnet predictions."""
    return (entropy_map(p_a) + entropy_map(p_b)).mean()


def warmup_lambda(t: int, t_max: int, beta: float = 1.0) -> float:
    """Gaussian ramp ``beta * exp(-5 (1 - t/t_max)^2)``; saturates at ``beta`` past ``t_max``."""
    if t < 0:
        raise ValueError(f"iteration must be non-negative, got {t}")
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    if t >= t_max:
        return float(beta)
    return float(beta) * math.exp(-5.0 * (1.0 - t / t_max) ** 2)


@dataclass
class LossReport:
    t: int
    sup: float = 0.0
    fuse: float = 0.0
    mutual: float = 0.0
    entropy: float = 0.0
    kd: float | None = None
    sam: float | None = None
    mix: float = 0.0
    total: float = 0.0
    lambda_m: float = 0.0
    lambda_e: float = 0.0

    FIELDS = ("t", "sup", "fuse", "mutual", "entropy", "kd", "sam", "mix",
              "total", "lambda_m", "lambda_e")

    def recompose(self) -> float:
        return (self.sup + (self.kd or 0.0) + self.lambda_e * self.entropy
                + self.lambda_m * self.mutual + self.mix)

    def as_row(self) -> dict:
        d = asdict(self)
        return {k: ("" if d[k] is None else d[k]) for k in self.FIELDS}


def total_loss(
    *,
    t: int,
    t_max: int,
    sup: torch.Tensor,
    fuse: torch.Tensor | None = None,
    mutual: torch.Tensor | None = None,
    entropy: torch.Tensor | None = None,
    kd: torch.Tensor | None = None,
    sam: torch.Tensor | None = None,
    mix: torch.Tensor | None = None,
    lambda_e: float = 0.9,
    beta: float = 1.0,
) -> tuple[torch.Tensor, LossReport]:
    """Combine subnet-side terms into the optimised total and a float report.

    Disabled terms are passed as ``None`` and contribute nothing. ``sam`` is
    only recorded: it trains the teacher and is never part of the subnet total.
    ``fuse`` is recorded for reference, it is already contained in ``sup``.
    """
    lam_m = warmup_lambda(t, t_max, beta)
    total = sup
    if kd is not None:
        total = total + kd
    if entropy is not None:
        total = total + lambda_e * entropy
    if mutual is not None:
        total = total + lam_m * mutual
    if mix is not None:
        total = total + mix

    def f(v):
        return None if v is None else float(v.detach())

    report = LossReport(
        t=t,
        sup=f(sup),
        fuse=f(fuse) or 0.0,
        mutual=f(mutual) or 0.0,
        entropy=f(entropy) or 0.0,
        kd=f(kd),
        sam=f(sam),
        mix=f(mix) or 0.0,
        total=f(total),
        lambda_m=lam_m,
        lambda_e=lambda_e,
    )
    return total, report
