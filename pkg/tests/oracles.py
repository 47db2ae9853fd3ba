"""Brute-force reference implementations, written independently of the package."""
import math

import numpy as np
import torch


def boundary_loop(mask):
    """Foreground pixels with at least one 4-neighbour outside the mask (or off-image)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if not (0 <= a < h and 0 <= b < w) or not mask[a, b]:
                    pts.append((i, j))
                    break
    return np.array(pts, dtype=float).reshape(-1, 2)


def all_pairs_distances(pred, gt):
    bp, bg = boundary_loop(pred), boundary_loop(gt)
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    return np.concatenate([d.min(axis=1), d.min(axis=0)])


def percentile_linear(values, q):
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def entropy_scalar(ps):
    return -sum(p * math.log(p) for p in ps if p > 0)


def patch_means_loop(m, grid=4):
    h, w = len(m), len(m[0])
    ph, pw = h // grid, w // grid
    out = []
    for r in range(grid):
        for c in range(grid):
            s = 0.0
            for i in range(r * ph, (r + 1) * ph):
                for j in range(c * pw, (c + 1) * pw):
                    s += float(m[i][j])
            out.append(s / (ph * pw))
    return out


def fd_gradient_check(loss_fn, params, n_entries=6, h=1e-6, rtol=1e-3, atol=1e-8, gen=None):
    """Compare autodiff gradients of ``loss_fn()`` to central differences on random entries.

    Returns a list of ``(autodiff, finite_difference, ok)`` tuples.
    """
    gen = gen or torch.Generator().manual_seed(0)
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    results = []
    for _ in range(n_entries):
        k = int(torch.randint(len(params), (1,), generator=gen))
        p, g = params[k], grads[k]
        idx = int(torch.randint(p.numel(), (1,), generator=gen))
        flat = p.data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + h
            up = float(loss_fn())
            flat[idx] = orig - h
            down = float(loss_fn())
            flat[idx] = orig
        fd = (up - down) / (2 * h)
        ad = float(g.view(-1)[idx])
        ok = abs(ad - fd) <= max(rtol * max(abs(ad), abs(fd)), atol)
        results.append((ad, fd, ok))
    return results
