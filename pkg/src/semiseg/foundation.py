"""Offline pretraining of the stand-in teacher on an external corpus.

A foundation teacher arrives with weights learned on data the downstream run
never sees. The stand-in mimics that: its encoder and mask decoder are trained
once, fully supervised, on a separate synthetic corpus with its own seed and
id prefix, so no image is shared with the training or test pools. By default
the corpus uses the same imaging settings as the target, like a foundation
model tuned for the modality at hand. The weights are cached on disk and loaded
before semi-supervised training, where the encoder is frozen again and only
adapters, the prompt decoder and the mask decoder adapt.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict
from pathlib import Path

import torch
import torch.nn.functional as F

from .config import FoundationConfig
from .data import one_hot
from .synthetic import SyntheticSpec, make_samples
from .teacher import Teacher, sam_loss
from .ugda import weak_augment

log = logging.getLogger(__name__)

CACHE_ENV = "SEMISEG_CACHE"


def corpus_spec(fcfg: FoundationConfig, size: int) -> SyntheticSpec:
    return SyntheticSpec(n=fcfg.n, size=size, contrast=fcfg.contrast, noise=fcfg.noise, prefix="fnd")


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "semiseg")


def _backbone_names(teacher: Teacher) -> list[str]:
    # everything a foundation model ships with; adapters and prompt decoder are added downstream
    return [n for n, _ in teacher.named_parameters()
            if "adapter" not in n and not n.startswith("prompt_decoder.")]


def _mask_prompts(y, num_classes, gen):
    """Half neutral prompts, half blurred ground truth, so the decoder learns to use both."""
    oh = one_hot(y, num_classes)
    soft = F.avg_pool2d(oh, 9, stride=1, padding=4, count_include_pad=False)
    soft = 0.5 * soft + 0.5 / num_classes
    neutral = torch.rand(len(y), 1, 1, 1, generator=gen) < 0.5
    return torch.where(neutral, torch.full_like(soft, 1.0 / num_classes), soft)


def pretrain_teacher(teacher: Teacher, fcfg: FoundationConfig, size: int) -> list[float]:
    """Train encoder + mask decoder in place; adapters stay at identity. Returns the loss curve."""
    names = set(_backbone_names(teacher))
    params = [p for n, p in teacher.named_parameters() if n in names]
    frozen = [p for p in teacher.encoder.parameters() if not p.requires_grad]
    for p in params:
        p.requires_grad_(True)
    corpus = make_samples(corpus_spec(fcfg, size), fcfg.seed)
    gen = torch.Generator().manual_seed(fcfg.seed)
    opt = torch.optim.Adam(params, lr=fcfg.lr)
    curve = []
    teacher.train()
    for it in range(fcfg.iterations):
        idx = torch.randint(0, len(corpus), (fcfg.batch_size,), generator=gen).tolist()
        seeds = torch.randint(0, 2**31 - 1, (fcfg.batch_size,), generator=gen).tolist()
        pairs = [weak_augment(corpus[i].image, corpus[i].mask, s) for i, s in zip(idx, seeds)]
        x = torch.stack([p[0] for p in pairs])
        y = torch.stack([p[1] for p in pairs])
        _, probs = teacher.decode(teacher.encode(x), None, _mask_prompts(y, teacher.num_classes, gen))
        loss = sam_loss(probs, y)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        curve.append(loss.item())
        if it % 250 == 0:
            log.info("foundation pretrain it=%d loss=%.4f", it, curve[-1])
    for p in frozen:
        p.requires_grad_(False)
        p.grad = None
    for p in teacher.parameters():
        p.grad = None
    return curve


def foundation_key(in_channels: int, num_classes: int, dim: int, depth: int, heads: int,
                   size: int, fcfg: FoundationConfig) -> str:
    d = dict(in_channels=in_channels, num_classes=num_classes, dim=dim, depth=depth,
             heads=heads, size=size, **asdict(fcfg))
    d["contrast"] = list(d["contrast"])
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def foundation_weights(in_channels: int, num_classes: int, dim: int, depth: int, heads: int,
                       size: int, fcfg: FoundationConfig = FoundationConfig(),
                       root: str | os.PathLike | None = None) -> Path:
    """Path to cached backbone weights, pretraining them first if needed.

    Pretraining runs under a forked RNG, so a cache hit and a cache miss leave
    the caller's random state identical.
    """
    key = foundation_key(in_channels, num_classes, dim, depth, heads, size, fcfg)
    path = Path(root or cache_dir()) / f"foundation-{key}.pt"
    if path.exists():
        return path
    log.info("pretraining stand-in foundation teacher (%s), cached at %s", key, path)
    with torch.random.fork_rng():
        torch.manual_seed(fcfg.seed)
        teacher = Teacher(in_channels, num_classes, dim, decoder_depth=depth, heads=heads,
                          frozen_seed=fcfg.seed)
        pretrain_teacher(teacher, fcfg, size)
    names = set(_backbone_names(teacher))
    state = {k: v for k, v in teacher.state_dict().items() if k in names or k.endswith("pe_basis")}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save({"key": key, "state": state}, tmp)
    tmp.replace(path)
    return path


def load_foundation(teacher: Teacher, path: str | os.PathLike) -> Teacher:
    """Copy pretrained backbone tensors into ``teacher``; frozen flags are left untouched."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    missing = set(_backbone_names(teacher)) - set(blob["state"])
    if missing:
        raise ValueError(f"foundation weights lack {len(missing)} tensors, e.g. {sorted(missing)[:3]}")
    with torch.no_grad():
        params = dict(teacher.named_parameters())
        buffers = dict(teacher.named_buffers())
        for k, v in blob["state"].items():
            target = params.get(k, buffers.get(k))
            if target is None or target.shape != v.shape:
                raise ValueError(f"foundation tensor {k} does not fit this teacher")
            target.copy_(v)
    return teacher
