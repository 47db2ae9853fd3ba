"""Multi-view co-training: uncertainty views, the hybrid aggregation module, fuse/mutual losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn as nn

from .data import binarize, debug_check
from .losses import ce_loss, entropy_map, seg_loss

VIEWS = ("pred", "H", "M")


@dataclass(frozen=True)
class UncertaintyBundle:
    entropy_a: torch.Tensor      # (B, H, W)
    entropy_b: torch.Tensor      # (B, H, W)
    dissimilarity: torch.Tensor  # (B, H, W), values in {0, 1}


def dissimilarity_map(p_a: torch.Tensor, p_b: torch.Tensor) -> torch.Tensor:
    """1 where the hard predictions of the two views disagree (float ``(B, H, W)``)."""
    if p_a.shape != p_b.shape:
        raise ValueError(f"shape mismatch: {tuple(p_a.shape)} vs {tuple(p_b.shape)}")
    return (binarize(p_a) != binarize(p_b)).to(p_a.dtype)


def uncertainty_bundle(p_a: torch.Tensor, p_b: torch.Tensor) -> UncertaintyBundle:
    return UncertaintyBundle(entropy_map(p_a), entropy_map(p_b), dissimilarity_map(p_a, p_b))


def cbl(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.LeakyReLU(0.1, inplace=True),
    )


class HybridAggregation(nn.Module):
    """Fuses both predictions, their entropy maps and the disagreement map.

    Each enabled view goes through its own Conv-BN-LeakyReLU stem; the stem
    outputs are concatenated and passed through two more such blocks and a
    1x1 projection to class logits.
    """

    def __init__(self, num_classes: int = 2, width: int = 16,
                 views: Iterable[str] = VIEWS, zero_init_head: bool = False):
        super().__init__()
        views = tuple(v for v in VIEWS if v in set(views))
        if "pred" not in views:
            raise ValueError("the prediction view is mandatory")
        self.views = views
        self.num_classes = num_classes
        stems = {"pred": cbl(2 * num_classes, width)}
        if "H" in views:
            stems["H"] = cbl(2, width)
        if "M" in views:
            stems["M"] = cbl(1, width)
        self.stems = nn.ModuleDict(stems)
        self.head = nn.Sequential(
            cbl(width * len(views), width),
            cbl(width, width),
            nn.Conv2d(width, num_classes, 1),
        )
        if zero_init_head:
            nn.init.zeros_(self.head[-1].weight)
            nn.init.zeros_(self.head[-1].bias)

    def forward(self, p_a: torch.Tensor, p_b: torch.Tensor,
                bundle: UncertaintyBundle | None = None) -> torch.Tensor:
        return self.logits(p_a, p_b, bundle).softmax(dim=1)

    def logits(self, p_a, p_b, bundle=None) -> torch.Tensor:
        if p_a.shape != p_b.shape:
            raise ValueError(f"shape mismatch: {tuple(p_a.shape)} vs {tuple(p_b.shape)}")
        if bundle is None:
            bundle = uncertainty_bundle(p_a, p_b)
        if bundle.entropy_a.shape[-2:] != p_a.shape[-2:]:
            raise ValueError("uncertainty maps and predictions differ in spatial shape")
        feats = [self.stems["pred"](torch.cat([p_a, p_b], dim=1))]
        if "H" in self.views:
            feats.append(self.stems["H"](torch.stack([bundle.entropy_a, bundle.entropy_b], dim=1)))
        if "M" in self.views:
            feats.append(self.stems["M"](bundle.dissimilarity.unsqueeze(1)))
        return self.head(torch.cat(feats, dim=1))


def ham_forward(ham: HybridAggregation, bundle: UncertaintyBundle,
                p_a: torch.Tensor, p_b: torch.Tensor) -> torch.Tensor:
    return debug_check(ham(p_a, p_b, bundle))


def fuse_loss(y_f: torch.Tensor, y: torch.Tensor | None) -> torch.Tensor:
    """Supervised loss of the fused map; only defined for labeled samples."""
    if y is None:
        raise ValueError("fuse loss requires ground truth; got an unlabeled sample")
    return seg_loss(y_f, y)


def mutual_loss(p_a: torch.Tensor, p_b: torch.Tensor) -> torch.Tensor:
    """Cross pseudo supervision: each view is trained on the other's hard argmax."""
    pseudo_a = p_a.detach().argmax(dim=1)
    pseudo_b = p_b.detach().argmax(dim=1)
    return ce_loss(p_a, pseudo_b) + ce_loss(p_b, pseudo_a)
