"""Uncertainty-guided copy-paste augmentation.

Weak/strong pixel pipelines, 4x4 patch uncertainty pooling, top-k patch
selection and the bidirectional labeled <-> unlabeled copy-paste.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.transforms.functional import gaussian_blur

from .data import PATCH_GRID

L2U = "L->U"
U2L = "U->L"


@dataclass(frozen=True)
class Geometry:
    flip_h: bool = False
    flip_v: bool = False
    rot90: int = 0

    @property
    def identity(self) -> bool:
        return not (self.flip_h or self.flip_v or self.rot90)

    def apply(self, t: torch.Tensor) -> torch.Tensor:
        """Transform the trailing two (spatial) axes."""
        if self.flip_h:
            t = t.flip(-1)
        if self.flip_v:
            t = t.flip(-2)
        if self.rot90:
            t = torch.rot90(t, self.rot90, dims=(-2, -1))
        return t


def sample_geometry(rng: np.random.Generator, square: bool = True) -> Geometry:
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    rot = int(rng.integers(4)) if square else 2 * int(rng.integers(2))
    return Geometry(flip_h, flip_v, rot)


def weak_augment(x: torch.Tensor, y: torch.Tensor, seed) -> tuple[torch.Tensor, torch.Tensor]:
    """Random flips (p=0.5 per axis) and a multiple-of-90 rotation, shared by image and mask."""
    geo = sample_geometry(np.random.default_rng(seed), x.shape[-1] == x.shape[-2])
    return geo.apply(x), geo.apply(y)


@dataclass(frozen=True)
class StrongAugConfig:
    geometric: bool = True
    brightness: float = 0.3
    contrast: float = 0.3
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    noise_std: float = 0.02

    @classmethod
    def zero(cls) -> "StrongAugConfig":
        return cls(geometric=False, brightness=0.0, contrast=0.0, blur_p=0.0, noise_std=0.0)


def adjust_brightness(x: torch.Tensor, delta: float) -> torch.Tensor:
    return x + delta


def adjust_contrast(x: torch.Tensor, factor: float) -> torch.Tensor:
    mean = x.mean(dim=(-2, -1), keepdim=True)
    return (x - mean) * factor + mean


def strong_augment(x: torch.Tensor, seed, cfg: StrongAugConfig = StrongAugConfig(),
                   return_geometry: bool = False):
    """Weak geometry plus brightness/contrast jitter, optional blur and Gaussian noise.

    The output is clipped to [0, 1]. With ``return_geometry`` the applied
    geometry is returned too so predictions can be mapped back if needed.
    """
    rng = np.random.default_rng(seed)
    geo = sample_geometry(rng, x.shape[-1] == x.shape[-2]) if cfg.geometric else Geometry()
    out = geo.apply(x)
    if cfg.brightness > 0:
        out = adjust_brightness(out, float(rng.uniform(-cfg.brightness, cfg.brightness)))
    if cfg.contrast > 0:
        out = adjust_contrast(out, 1.0 + float(rng.uniform(-cfg.contrast, cfg.contrast)))
    if cfg.blur_p > 0 and rng.random() < cfg.blur_p:
        sigma = float(rng.uniform(*cfg.blur_sigma))
        k = 2 * int(np.ceil(3 * sigma)) + 1
        out = gaussian_blur(out, [k, k], [sigma, sigma])
    if cfg.noise_std > 0:
        noise = rng.normal(0.0, cfg.noise_std, size=tuple(out.shape))
        out = out + torch.from_numpy(noise).to(out.dtype)
    out = out.clamp(0.0, 1.0)
    return (out, geo) if return_geometry else out


@dataclass(frozen=True)
class PatchGrid:
    means: torch.Tensor  # (grid * grid,), row-major
    height: int
    width: int
    grid: int = PATCH_GRID

    @property
    def patch_h(self) -> int:
        return self.height // self.grid

    @property
    def patch_w(self) -> int:
        return self.width // self.grid

    def region(self, idx: int) -> tuple[slice, slice]:
        r, c = divmod(int(idx), self.grid)
        return (slice(r * self.patch_h, (r + 1) * self.patch_h),
                slice(c * self.patch_w, (c + 1) * self.patch_w))

    def mask(self, indices) -> torch.Tensor:
        m = torch.zeros(self.height, self.width, dtype=torch.bool)
        for i in indices:
            m[self.region(i)] = True
        return m


def patch_uncertainty(entropy: torch.Tensor, grid: int = PATCH_GRID) -> PatchGrid:
    """Average-pool an ``(H, W)`` uncertainty map onto a ``grid x grid`` partition."""
    if entropy.ndim != 2:
        raise ValueError(f"expected an (H, W) map, got shape {tuple(entropy.shape)}")
    h, w = entropy.shape
    if h % grid or w % grid:
        raise ValueError(f"map {h}x{w} cannot be tiled by a {grid}x{grid} grid")
    pooled = F.avg_pool2d(entropy[None, None].detach(), (h // grid, w // grid))
    return PatchGrid(pooled.flatten(), h, w, grid)


def select_topk_patches(pg: PatchGrid, k: int = 5) -> list[int]:
    """Indices of the ``k`` most uncertain patches; ties go to the lower index."""
    n = pg.grid * pg.grid
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    vals = pg.means.tolist()
    return sorted(range(n), key=lambda i: (-vals[i], i))[:k]


@dataclass(frozen=True)
class MixedSample:
    image: torch.Tensor       # (channels, H, W)
    target: torch.Tensor      # (H, W) int
    provenance: torch.Tensor  # (H, W) bool, True where content came from the pasted source
    source_ids: tuple[str, str]
    direction: str


def copy_paste_mix(labeled, unlabeled, patches, direction: str,
                   ids: tuple[str, str] = ("", ""), grid: int = PATCH_GRID) -> MixedSample:
    """Paste the given patches from one sample into the other.

    ``labeled`` is ``(image, gt)``, ``unlabeled`` is ``(image, pseudo_label)``.
    ``L->U`` keeps the unlabeled sample as host and pastes labeled content
    (with its ground truth) into it; ``U->L`` does the reverse.
    """
    x_l, y_l = labeled
    x_u, y_u = unlabeled
    if x_l.shape != x_u.shape or y_l.shape != y_u.shape or x_l.shape[-2:] != y_l.shape:
        raise ValueError("labeled and unlabeled samples must share one shape")
    if direction == L2U:
        host, src = (x_u, y_u), (x_l, y_l)
    elif direction == U2L:
        host, src = (x_l, y_l), (x_u, y_u)
    else:
        raise ValueError(f"direction must be {L2U!r} or {U2L!r}, got {direction!r}")
    h, w = y_l.shape
    prov = PatchGrid(torch.zeros(grid * grid), h, w, grid).mask(patches)
    image = torch.where(prov, src[0], host[0])
    target = torch.where(prov, src[1], host[1])
    return MixedSample(image, target, prov, tuple(ids), direction)
