"""Run-directory aggregation, plots, and the augmentation preview figure."""
from __future__ import annotations

import csv
import json
import os
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .losses import entropy_map  # noqa: E402
from .ugda import L2U, copy_paste_mix, patch_uncertainty, select_topk_patches  # noqa: E402

REPORT_FIELDS = ["name", "seed", "labeled_fraction", "dice", "iou", "hd95", "asd"]


def collect_runs(runs_dir: str | os.PathLike) -> list[dict]:
    rows = []
    for path in sorted(Path(runs_dir).glob("**/metrics.json")):
        with open(path) as f:
            m = json.load(f)
        rows.append({
            "name": m.get("name", path.parent.name),
            "seed": m.get("seed", 0),
            "labeled_fraction": m.get("labeled_fraction", float("nan")),
            **{k: m[k]["mean"] for k in ("dice", "iou", "hd95", "asd")},
        })
    return rows


def write_report(runs_dir: str | os.PathLike, out_dir: str | os.PathLike | None = None) -> dict:
    """Write ``report.csv``, an ablation bar plot and a label-ratio line plot."""
    rows = collect_runs(runs_dir)
    if not rows:
        raise FileNotFoundError(f"no metrics.json found under {runs_dir}")
    out = Path(out_dir or runs_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        w.writeheader()
        w.writerows(rows)

    by_name = defaultdict(list)
    for r in rows:
        by_name[r["name"]].append(r["dice"])
    names = sorted(by_name)
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names) + 2), 3.5))
    means = [100 * np.mean(by_name[n]) for n in names]
    stds = [100 * np.std(by_name[n]) for n in names]
    ax.bar(range(len(names)), means, yerr=stds, capsize=3, color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=40, ha="right", fontsize=8)
    ax.set_ylabel("Dice (%)")
    lo = min(m - s for m, s in zip(means, stds))
    ax.set_ylim(max(0, lo - 5), 100)
    fig.tight_layout()
    fig.savefig(out / "ablation.png", dpi=120)
    plt.close(fig)

    by_ratio = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by_ratio[r["name"].split("@")[0]][r["labeled_fraction"]].append(r["dice"])
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    plotted = False
    for name, d in sorted(by_ratio.items()):
        if len(d) < 2:
            continue
        fr = sorted(d)
        ax.errorbar([100 * f for f in fr], [100 * np.mean(d[f]) for f in fr],
                    yerr=[100 * np.std(d[f]) for f in fr], marker="o", capsize=3, label=name)
        plotted = True
    ax.set_xlabel("labeled data (%)")
    ax.set_ylabel("Dice (%)")
    if plotted:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "label_ratio.png", dpi=120)
    plt.close(fig)
    return {"rows": len(rows), "out": str(out)}


def augment_preview(x_l, y_l, x_u, p_f_l, p_f_u, pseudo_u, path, k: int = 5):
    """Four panels: the input pair, patch uncertainty, chosen patches, and both mixes."""
    unc_u = entropy_map(p_f_u)[0]
    unc_l = entropy_map(p_f_l)[0]
    pg_u = patch_uncertainty(unc_u)
    pg_l = patch_uncertainty(unc_l)
    top_u = select_topk_patches(pg_u, k)
    top_l = select_topk_patches(pg_l, k)
    mix_lu = copy_paste_mix((x_l, y_l), (x_u, pseudo_u), top_u, L2U)
    mix_ul = copy_paste_mix((x_l, y_l), (x_u, pseudo_u), top_l, "U->L")

    g = pg_u.grid
    fig, axes = plt.subplots(2, 4, figsize=(12, 6))
    img = lambda t: t[0].cpu().numpy()  # noqa: E731
    axes[0, 0].imshow(img(x_l), cmap="gray", vmin=0, vmax=1)
    axes[0, 0].contour(y_l.numpy(), levels=[0.5], colors="lime", linewidths=0.8)
    axes[0, 0].set_title("labeled (weak) + GT")
    axes[1, 0].imshow(img(x_u), cmap="gray", vmin=0, vmax=1)
    axes[1, 0].contour(pseudo_u.numpy(), levels=[0.5], colors="orange", linewidths=0.8)
    axes[1, 0].set_title("unlabeled (strong) + pseudo")
    for row, (unc, pg) in enumerate(((unc_l, pg_l), (unc_u, pg_u))):
        ax = axes[row, 1]
        ax.imshow(unc.numpy(), cmap="magma")
        means = pg.means.view(g, g).numpy()
        for r in range(g):
            for c in range(g):
                ax.text((c + 0.5) * pg.patch_w, (r + 0.5) * pg.patch_h, f"{means[r, c]:.2f}",
                        ha="center", va="center", color="cyan", fontsize=7)
        ax.set_title("uncertainty / patch means")
    for row, (x, pg, top) in enumerate(((x_l, pg_l, top_l), (x_u, pg_u, top_u))):
        ax = axes[row, 2]
        ax.imshow(img(x), cmap="gray", vmin=0, vmax=1)
        ax.imshow(pg.mask(top).numpy(), cmap="Reds", alpha=0.35)
        ax.set_title(f"top-{k} patches")
    for row, m in enumerate((mix_ul, mix_lu)):
        ax = axes[row, 3]
        ax.imshow(img(m.image), cmap="gray", vmin=0, vmax=1)
        ax.contour(m.target.numpy(), levels=[0.5], colors="lime", linewidths=0.8)
        ax.contour(m.provenance.numpy().astype(float), levels=[0.5], colors="red", linewidths=0.6)
        ax.set_title(f"mixed {m.direction}")
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return mix_lu, mix_ul


@torch.no_grad()
def preview_from_state(state, labeled_sample, unlabeled_sample, path, seed: int = 0, k: int = 5):
    from .trainer import eval_mode
    from .ugda import strong_augment, weak_augment

    x_l, y_l = weak_augment(labeled_sample.image, labeled_sample.mask, seed)
    x_u = strong_augment(unlabeled_sample.image, seed + 1)
    x = torch.stack([x_l, x_u])
    with eval_mode(state.net_a, state.net_b, state.ham):
        _, p_a = state.net_a(x)
        _, p_b = state.net_b(x)
        p_f = state.ham(p_a, p_b)
    guide = p_f
    if state.teacher is not None:
        with eval_mode(state.teacher):
            _, guide = state.teacher(x, p_f)
    pseudo_u = guide[1].argmax(dim=0)
    return augment_preview(x_l, y_l, x_u, p_f[0:1], p_f[1:2], pseudo_u, path, k)
