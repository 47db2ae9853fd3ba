"""Training state, the joint student/teacher step, inference and checkpoints."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import ExperimentConfig
from .data import DatasetSplit, Sample, check_image
from .distill import kd_loss, temp_softmax
from .foundation import foundation_weights, load_foundation
from .fusion import HybridAggregation, fuse_loss, mutual_loss, uncertainty_bundle
from .losses import LossReport, entropy_loss, entropy_map, seg_loss, total_loss
from .subnets import ResVNet2d, SegNet, UNet2d
from .teacher import Teacher, sam_loss
from .ugda import L2U, U2L, StrongAugConfig, copy_paste_mix, patch_uncertainty, \
    select_topk_patches, strong_augment, weak_augment

log = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.pt"
MANIFEST_FILE = "manifest.json"


@dataclass
class TrainState:
    cfg: ExperimentConfig
    net_a: SegNet
    net_b: SegNet
    ham: HybridAggregation
    teacher: Teacher | None
    opt_student: torch.optim.Optimizer | None = None
    opt_teacher: torch.optim.Optimizer | None = None
    gen: torch.Generator | None = None
    t: int = 0

    def student_parameters(self):
        for m in (self.net_a, self.net_b, self.ham):
            yield from m.parameters()


@dataclass
class Batch:
    x_l: torch.Tensor
    y_l: torch.Tensor
    x_u: torch.Tensor | None
    ids_l: list[str]
    ids_u: list[str]


def build_models(cfg: ExperimentConfig, with_teacher: bool = True, init_teacher: bool = True):
    m = cfg.model
    kw = dict(in_channels=cfg.in_channels, num_classes=cfg.num_classes,
              depth=m.subnet_depth, base_width=m.subnet_width)
    net_a, net_b = UNet2d(**kw), ResVNet2d(**kw)
    ham = HybridAggregation(cfg.num_classes, m.ham_width, cfg.ham_views)
    teacher = None
    if with_teacher:
        teacher = Teacher(cfg.in_channels, cfg.num_classes, m.teacher_dim, m.num_prompts,
                          m.teacher_depth, m.teacher_heads, frozen_seed=cfg.seed)
        if init_teacher and cfg.teacher_init == "pretrained":
            path = foundation_weights(cfg.in_channels, cfg.num_classes, m.teacher_dim, m.teacher_depth,
                                      m.teacher_heads, cfg.image_size, cfg.foundation)
            load_foundation(teacher, path)
    return net_a, net_b, ham, teacher


def build_state(cfg: ExperimentConfig, init_teacher: bool = True) -> TrainState:
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    net_a, net_b, ham, teacher = build_models(cfg, cfg.use_sam_distill, init_teacher)
    state = TrainState(cfg, net_a, net_b, ham, teacher)
    o = cfg.optim
    state.opt_student = torch.optim.SGD(list(state.student_parameters()), lr=o.lr,
                                        momentum=o.momentum, weight_decay=o.weight_decay)
    if teacher is not None:
        state.opt_teacher = torch.optim.Adam(teacher.trainable_parameters(), lr=o.teacher_lr)
    state.gen = torch.Generator().manual_seed(cfg.seed)
    return state


# ---------------------------------------------------------------------------
# batches


def _seeds(gen: torch.Generator, n: int) -> list[int]:
    return torch.randint(0, 2**31 - 1, (n,), generator=gen).tolist()


def sample_batch(state: TrainState, split: DatasetSplit) -> Batch:
    """Weakly augmented labeled half and strongly augmented unlabeled half."""
    cfg = state.cfg
    g = state.gen
    bs = cfg.schedule.batch_size
    use_u = cfg.use_unlabeled and split.n_unlabeled > 0
    n_l = bs // 2 if use_u else bs
    n_u = bs - n_l if use_u else 0
    li = torch.randint(0, split.n_labeled, (n_l,), generator=g).tolist()
    xs, ys = [], []
    for i, seed in zip(li, _seeds(g, n_l)):
        s = split.labeled[i]
        x, y = weak_augment(s.image, s.mask, seed)
        xs.append(x)
        ys.append(y)
    x_u, ids_u = None, []
    if n_u:
        ui = torch.randint(0, split.n_unlabeled, (n_u,), generator=g).tolist()
        u = cfg.ugda
        scfg = StrongAugConfig(brightness=u.brightness, contrast=u.contrast,
                               blur_p=u.blur_p, noise_std=u.noise_std)
        x_u = torch.stack([strong_augment(split.unlabeled[i].image, seed, scfg)
                           for i, seed in zip(ui, _seeds(g, n_u))])
        ids_u = [split.unlabeled[i].id for i in ui]
    return Batch(torch.stack(xs), torch.stack(ys), x_u, [split.labeled[i].id for i in li], ids_u)


def make_mixed_batch(x_l, y_l, x_u, pseudo_u, unc_l, unc_u, k: int,
                     bidirectional: bool = True, ids_l=None, ids_u=None):
    """Build ``len(x_l)`` mixed samples from labeled/unlabeled pairs.

    Patches are chosen on the host's uncertainty map, so the host's least
    confident regions are the ones replaced. With ``bidirectional`` each pair
    yields both directions; otherwise directions alternate across pairs.
    """
    n = x_l.shape[0]
    ids_l = ids_l or [""] * n
    ids_u = ids_u or [""] * len(x_u)
    out = []
    i = 0
    while len(out) < n:
        j = i % len(x_u)
        li = i % n
        pair_l, pair_u = (x_l[li], y_l[li]), (x_u[j], pseudo_u[j])
        ids = (ids_l[li], ids_u[j])
        dirs = (L2U, U2L) if bidirectional else ((L2U,) if i % 2 == 0 else (U2L,))
        for d in dirs:
            host_unc = unc_u[j] if d == L2U else unc_l[li]
            patches = select_topk_patches(patch_uncertainty(host_unc), k)
            out.append(copy_paste_mix(pair_l, pair_u, patches, d, ids))
        i += 1
    return out[:n]


# ---------------------------------------------------------------------------
# the step


def _set_lr(state: TrainState):
    o = state.cfg.optim
    frac = min(state.t / state.cfg.schedule.t_max, 1.0)
    lr = o.lr * (1 - frac) ** o.poly_power
    for group in state.opt_student.param_groups:
        group["lr"] = lr


def train_step(state: TrainState, batch: Batch) -> tuple[TrainState, LossReport]:
    """One joint iteration: students + HAM (SGD) and, when enabled, the teacher (Adam).

    The teacher only sees the detached fused map and is trained by its
    supervised loss alone; students only see the detached teacher map.
    """
    cfg = state.cfg
    sch = cfg.schedule
    for m in (state.net_a, state.net_b, state.ham):
        m.train()
    n_l = batch.x_l.shape[0]
    x = batch.x_l if batch.x_u is None else torch.cat([batch.x_l, batch.x_u])
    y = batch.y_l

    logit_a, p_a = state.net_a(x)
    logit_b, p_b = state.net_b(x)
    bundle = uncertainty_bundle(p_a, p_b)
    p_f = state.ham(p_a, p_b, bundle)

    fuse = fuse_loss(p_f[:n_l], y)
    sup = seg_loss(p_a[:n_l], y) + seg_loss(p_b[:n_l], y) + fuse
    ent = entropy_loss(p_a, p_b) if cfg.use_entropy_loss else None
    mut = mutual_loss(p_a, p_b) if cfg.use_mutual_loss else None

    kd = sam = None
    p_s = None
    if cfg.use_sam_distill:
        state.teacher.train()
        z = state.teacher.encode(x)
        prompts = state.teacher.prompt_decoder(z)
        logit_s, p_s = state.teacher.decode(z, prompts, p_f.detach())
        sam = sam_loss(p_s[:n_l], y)
        T = sch.temperature
        kd = kd_loss(temp_softmax(logit_a, T), temp_softmax(logit_b, T), temp_softmax(logit_s, T),
                     direction=cfg.kd_direction, scale_t2=cfg.kd_scale_t2)

    mix = None
    if cfg.use_ugda and batch.x_u is not None:
        with torch.no_grad():
            guide = (p_s if p_s is not None else p_f).detach()
            pseudo_u = guide[n_l:].argmax(dim=1)
            unc = entropy_map(p_f.detach())
        mixed = make_mixed_batch(batch.x_l, y, batch.x_u, pseudo_u, unc[:n_l], unc[n_l:],
                                 cfg.ugda.topk, cfg.ugda.bidirectional, batch.ids_l, batch.ids_u)
        x_m = torch.stack([m.image for m in mixed])
        y_m = torch.stack([m.target for m in mixed])
        _, pa_m = state.net_a(x_m)
        _, pb_m = state.net_b(x_m)
        mix = seg_loss(pa_m, y_m) + seg_loss(pb_m, y_m)

    total, report = total_loss(t=state.t, t_max=sch.t_max, sup=sup, fuse=fuse, mutual=mut,
                               entropy=ent, kd=kd, sam=sam, mix=mix,
                               lambda_e=sch.lambda_e, beta=sch.beta)
    values = [v for v in (report.total, report.sam) if v is not None]
    if not all(math.isfinite(v) for v in values):
        raise FloatingPointError(f"non-finite loss at iteration {state.t}: {report}")

    state.opt_student.zero_grad(set_to_none=True)
    if state.opt_teacher is not None:
        state.opt_teacher.zero_grad(set_to_none=True)
    objective = total if sam is None else total + sam
    objective.backward()

    update_students = update_teacher = True
    if cfg.alternate_updates and sam is not None:
        update_teacher = state.t % 2 == 0
        update_students = not update_teacher
    if update_students:
        state.opt_student.step()
    if update_teacher and state.opt_teacher is not None:
        state.opt_teacher.step()
    state.t += 1
    _set_lr(state)
    return state, report


# ---------------------------------------------------------------------------
# inference


@contextlib.contextmanager
def eval_mode(*modules):
    flags = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        yield
    finally:
        for m, f in zip(modules, flags):
            m.train(f)


def infer(state, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Fused prediction of the two students; the teacher is never run here.

    ``x`` is ``(channels, H, W)`` or a batch. Returns ``(mask, probabilities)``.
    """
    single = x.ndim == 3
    if single:
        check_image(x, divisor=state.net_a.divisor)
        x = x.unsqueeze(0)
    with eval_mode(state.net_a, state.net_b, state.ham), torch.no_grad():
        _, p_a = state.net_a(x)
        _, p_b = state.net_b(x)
        p_f = state.ham(p_a, p_b)
    mask = p_f.argmax(dim=1)
    return (mask[0], p_f[0:1]) if single else (mask, p_f)


def predict_samples(state, samples: list[Sample], batch_size: int = 16) -> list[torch.Tensor]:
    preds = []
    for i in range(0, len(samples), batch_size):
        x = torch.stack([s.image for s in samples[i:i + batch_size]])
        preds.extend(infer(state, x)[0])
    return preds


# ---------------------------------------------------------------------------
# checkpoints


def _param_summary(state: TrainState) -> dict:
    out = {}
    for name in ("net_a", "net_b", "ham", "teacher"):
        m = getattr(state, name)
        if m is not None:
            out[name] = sum(p.numel() for p in m.parameters())
    return out


def manifest(state: TrainState) -> dict:
    return {
        "config_hash": state.cfg.hash(),
        "config": state.cfg.to_dict(),
        "iteration": state.t,
        "parameters": _param_summary(state),
        "teacher": state.teacher.sidecar() if state.teacher is not None else None,
        "files": [CHECKPOINT_FILE],
    }


def write_manifest(path: str | os.PathLike, data: dict) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def save_checkpoint(state: TrainState, run_dir: str | os.PathLike) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    blob = {
        "config": state.cfg.to_dict(),
        "t": state.t,
        "net_a": state.net_a.state_dict(),
        "net_b": state.net_b.state_dict(),
        "ham": state.ham.state_dict(),
        "teacher": state.teacher.state_dict() if state.teacher is not None else None,
        "opt_student": state.opt_student.state_dict() if state.opt_student else None,
        "opt_teacher": state.opt_teacher.state_dict() if state.opt_teacher else None,
        "gen_state": state.gen.get_state() if state.gen is not None else None,
        "torch_rng": torch.get_rng_state(),
    }
    torch.save(blob, run_dir / CHECKPOINT_FILE)
    write_manifest(run_dir / MANIFEST_FILE, manifest(state))
    return run_dir / CHECKPOINT_FILE


def load_checkpoint(path: str | os.PathLike, for_training: bool = True) -> TrainState:
    """Restore a run. A checkpoint without teacher weights loads for inference only."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = ExperimentConfig.from_dict(blob["config"])
    has_teacher = blob.get("teacher") is not None
    if for_training and cfg.use_sam_distill and not has_teacher:
        raise ValueError("checkpoint has no teacher weights; load it with for_training=False")
    if for_training:
        state = build_state(cfg, init_teacher=False)
    else:
        net_a, net_b, ham, teacher = build_models(cfg, has_teacher, init_teacher=False)
        state = TrainState(cfg, net_a, net_b, ham, teacher)
    state.net_a.load_state_dict(blob["net_a"])
    state.net_b.load_state_dict(blob["net_b"])
    state.ham.load_state_dict(blob["ham"])
    if has_teacher and state.teacher is not None:
        state.teacher.load_state_dict(blob["teacher"])
    state.t = blob["t"]
    if for_training:
        state.opt_student.load_state_dict(blob["opt_student"])
        if state.opt_teacher is not None and blob.get("opt_teacher"):
            state.opt_teacher.load_state_dict(blob["opt_teacher"])
        state.gen.set_state(blob["gen_state"])
        torch.set_rng_state(blob["torch_rng"])
    return state


# ---------------------------------------------------------------------------
# loop


class Trainer:
    def __init__(self, cfg: ExperimentConfig, split: DatasetSplit,
                 run_dir: str | os.PathLike | None = None, state: TrainState | None = None):
        self.cfg = cfg
        self.split = split
        self.run_dir = Path(run_dir) if run_dir else None
        self.state = state or build_state(cfg)
        self.history: list[LossReport] = []

    def step(self) -> LossReport:
        batch = sample_batch(self.state, self.split)
        _, report = train_step(self.state, batch)
        self.history.append(report)
        return report

    def fit(self, iterations: int | None = None, log_every: int = 100) -> list[LossReport]:
        n = self.cfg.iterations - self.state.t if iterations is None else iterations
        for _ in range(n):
            r = self.step()
            if log_every and r.t % log_every == 0:
                log.info("t=%d total=%.4f sup=%.4f kd=%s sam=%s mix=%.4f", r.t, r.total, r.sup,
                         r.kd, r.sam, r.mix)
        if self.run_dir:
            self.write_losses()
            save_checkpoint(self.state, self.run_dir)
        return self.history

    def write_losses(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with open(self.run_dir / "losses.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LossReport.FIELDS)
            w.writeheader()
            for r in self.history:
                w.writerow(r.as_row())
