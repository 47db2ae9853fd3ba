"""Promptable teacher: frozen image encoder + adapters, learnable dense prompts, mask decoder.

The encoder shipped here is a small convolutional stand-in for a foundation
image encoder. Anything exposing ``dim``, ``stride`` and
``forward(x) -> (B, dim, H/stride, W/stride)`` can replace it; only adapter
tensors should keep ``requires_grad=True``.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import debug_check


class Adapter(nn.Module):
    """Bottleneck residual MLP (D -> D/4 -> D) acting on the channel axis.

    The up-projection starts at zero so a fresh adapter is the identity.
    """

    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        hidden = max(1, dim // ratio)
        self.down = nn.Linear(dim, hidden)
        self.up = nn.Linear(hidden, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x, channel_dim: int = -1):
        if channel_dim != -1:
            x = x.movedim(channel_dim, -1)
        x = x + self.up(F.gelu(self.down(x)))
        if channel_dim != -1:
            x = x.movedim(-1, channel_dim)
        return x


class _ResStage(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.norm = nn.GroupNorm(1, dim)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(self.norm(x))))


class StandInEncoder(nn.Module):
    """Patchify (stride 4) -> two residual stages -> 1x1 neck, each followed by an adapter.

    Backbone weights are drawn from a fixed seed and frozen, playing the role
    of pretrained foundation weights.
    """

    stride = 4

    def __init__(self, in_channels: int = 1, dim: int = 64, frozen_seed: int = 0):
        super().__init__()
        self.dim = dim
        self.patch = nn.Conv2d(in_channels, dim, self.stride, stride=self.stride)
        self.stages = nn.ModuleList([_ResStage(dim), _ResStage(dim)])
        self.neck = nn.Conv2d(dim, dim, 1)
        self.adapters = nn.ModuleList(Adapter(dim) for _ in range(4))
        gen = torch.Generator().manual_seed(frozen_seed)
        for name, p in self.named_parameters():
            if name.startswith("adapters."):
                continue
            with torch.no_grad():
                if p.ndim > 1:
                    fan_in = p[0].numel()
                    p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            p.requires_grad_(False)

    def forward(self, x):
        z = self.adapters[0](self.patch(x), channel_dim=1)
        for stage, adapter in zip(self.stages, self.adapters[1:3]):
            z = adapter(stage(z), channel_dim=1)
        return self.adapters[3](self.neck(z), channel_dim=1)


class PromptDecoder(nn.Module):
    """Lightweight decoder turning the image embedding into ``num_prompts`` dense prompt tokens."""

    def __init__(self, dim: int = 64, num_prompts: int = 4, prompt_dim: int | None = None):
        super().__init__()
        self.num_prompts = num_prompts
        self.prompt_dim = prompt_dim or dim
        self.convs = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=1), nn.ReLU(),
            nn.Conv2d(dim, dim, 3, padding=1), nn.ReLU(),
        )
        self.proj = nn.Linear(dim, num_prompts * self.prompt_dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        pooled = self.convs(z).mean(dim=(2, 3))
        return self.proj(pooled).view(z.shape[0], self.num_prompts, self.prompt_dim)


def prompt_decode(pd: PromptDecoder, z: torch.Tensor) -> torch.Tensor:
    return pd(z)


class Attention(nn.Module):
    def __init__(self, dim, heads=2):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, q, k, v, key_mask=None):
        b, nq, d = q.shape
        h = self.heads
        q = self.q(q).view(b, nq, h, d // h).transpose(1, 2)
        k = self.k(k).view(b, -1, h, d // h).transpose(1, 2)
        v = self.v(v).view(b, -1, h, d // h).transpose(1, 2)
        att = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if key_mask is not None:
            att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = att.softmax(dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, nq, d))


class TwoWayLayer(nn.Module):
    def __init__(self, dim, heads=2):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.tok2img = Attention(dim, heads)
        self.img2tok = Attention(dim, heads)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(4))
        self.adapter = Adapter(dim)

    def forward(self, tokens, img, img_pe, tok_mask):
        n = self.norms
        tokens = n[0](tokens + self.self_attn(tokens, tokens, tokens, tok_mask))
        tokens = n[1](tokens + self.tok2img(tokens, img + img_pe, img))
        tokens = n[2](self.adapter(tokens + self.mlp(tokens)))
        img = n[3](img + self.img2tok(img + img_pe, tokens, tokens, tok_mask))
        return tokens, img


class PromptMaskDecoder(nn.Module):
    """Two-layer two-way attention decoder conditioned on dense prompt tokens and a mask prompt.

    Prompt tokens carry no positional code, so the output does not depend on
    their order. The mask prompt is pooled to the embedding grid, centred
    (``p - 1/C``) and projected without bias: a uniform mask prompt adds
    nothing. All-zero prompt tokens are masked out of attention. Together this
    makes ``(zero prompts, uniform mask)`` equivalent to decoding with no prompt.
    """

    def __init__(self, num_classes=2, dim=64, depth=2, heads=2, stride=4):
        super().__init__()
        self.num_classes = num_classes
        self.stride = stride
        self.class_tokens = nn.Parameter(torch.randn(num_classes, dim) * 0.02)
        self.mask_embed = nn.Conv2d(num_classes, dim, 1, bias=False)
        self.register_buffer("pe_basis", torch.randn(2, dim // 2, generator=torch.Generator().manual_seed(1)))
        self.layers = nn.ModuleList(TwoWayLayer(dim, heads) for _ in range(depth))
        self.final = Attention(dim, heads)
        self.final_norm = nn.LayerNorm(dim)
        up = max(1, dim // 8)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(dim, max(1, dim // 4), 2, stride=2), nn.GELU(),
            nn.ConvTranspose2d(max(1, dim // 4), up, 2, stride=2), nn.GELU(),
        )
        self.hyper = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, up))

    def _pos(self, h, w, ref):
        ys = (torch.arange(h, dtype=ref.dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=ref.dtype) + 0.5) / w
        grid = torch.stack(torch.meshgrid(ys, xs, indexing="ij"), dim=-1) * 2 - 1
        proj = 2 * math.pi * grid @ self.pe_basis.to(ref.dtype)
        return torch.cat([proj.sin(), proj.cos()], dim=-1).reshape(1, h * w, -1)

    def forward(self, z, prompts=None, mask_prompt=None):
        b, d, h, w = z.shape
        img = z
        if mask_prompt is not None:
            if mask_prompt.shape[-2:] != (h * self.stride, w * self.stride):
                raise ValueError(
                    f"mask prompt {tuple(mask_prompt.shape[-2:])} does not match embedding grid "
                    f"{h}x{w} at stride {self.stride}"
                )
            m = F.interpolate(mask_prompt.detach(), size=(h, w), mode="area")
            img = img + self.mask_embed(m - 1.0 / self.num_classes)
        img = img.flatten(2).transpose(1, 2)
        pe = self._pos(h, w, z)
        tokens = self.class_tokens.unsqueeze(0).expand(b, -1, -1)
        mask = torch.ones(b, self.num_classes, dtype=torch.bool, device=z.device)
        if prompts is not None:
            tokens = torch.cat([tokens, prompts], dim=1)
            mask = torch.cat([mask, prompts.detach().abs().sum(-1) > 0], dim=1)
        for layer in self.layers:
            tokens, img = layer(tokens, img, pe, mask)
        tokens = self.final_norm(tokens + self.final(tokens, img + pe, img))
        feat = self.upscale(img.transpose(1, 2).reshape(b, d, h, w))
        weights = self.hyper(tokens[:, : self.num_classes])
        return torch.einsum("bkc,bchw->bkhw", weights, feat)


class Teacher(nn.Module):
    """Frozen encoder + adapters, prompt decoder and prompt-conditioned mask decoder."""

    def __init__(self, in_channels=1, num_classes=2, dim=64, num_prompts=4,
                 decoder_depth=2, heads=2, frozen_seed=0, encoder: nn.Module | None = None):
        super().__init__()
        self.encoder = encoder if encoder is not None else StandInEncoder(in_channels, dim, frozen_seed)
        self.variant = "standin" if encoder is None else type(encoder).__name__
        self.dim = dim
        self.num_prompts = num_prompts
        self.num_classes = num_classes
        self.prompt_decoder = PromptDecoder(dim, num_prompts)
        self.decoder = PromptMaskDecoder(num_classes, dim, decoder_depth, heads, self.encoder.stride)

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z, prompts=None, mask_prompt=None):
        logits = self.decoder(z, prompts, mask_prompt)
        return logits, debug_check(logits.softmax(dim=1))

    def forward(self, x, mask_prompt=None):
        z = self.encode(x)
        return self.decode(z, self.prompt_decoder(z), mask_prompt)

    def frozen_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if not p.requires_grad]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def sidecar(self) -> dict:
        return {
            "variant": self.variant,
            "D": self.dim,
            "L": self.prompt_decoder.prompt_dim,
            "N_b": self.num_prompts,
            "stride": self.encoder.stride,
            "num_classes": self.num_classes,
            "frozen": self.frozen_names(),
        }


def teacher_encode(tp: Teacher, x):
    return tp.encode(x)


def teacher_decode(tp: Teacher, z, prompts, mask_prompt):
    return tp.decode(z, prompts, mask_prompt)


def sam_loss(y_s: torch.Tensor, y: torch.Tensor | None) -> torch.Tensor:
    """Teacher supervision; ground truth only."""
    from .losses import seg_loss

    if y is None:
        raise ValueError("teacher loss requires ground truth; got an unlabeled sample")
    return seg_loss(y_s, y)
