"""Temperature-softened maps and the teacher -> students distillation loss."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class SoftMap:
    log_probs: torch.Tensor  # (B, C, H, W)
    temperature: float

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()

    def detach(self) -> "SoftMap":
        return SoftMap(self.log_probs.detach(), self.temperature)


def temp_softmax(logits: torch.Tensor, temperature: float) -> SoftMap:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return SoftMap(F.log_softmax(logits / temperature, dim=1), float(temperature))


def _kl(ref: SoftMap, other: SoftMap) -> torch.Tensor:
    # KL(ref || other), summed over classes, mean over batch and pixels
    return (ref.probs * (ref.log_probs - other.log_probs)).sum(dim=1).mean()


def kd_loss(soft_a: SoftMap, soft_b: SoftMap, soft_s: SoftMap,
            direction: str = "teacher", scale_t2: bool = True) -> torch.Tensor:
    """Distill the teacher map ``soft_s`` into both students.

    ``direction="teacher"`` uses KL(teacher || student); ``"student"`` flips it.
    The teacher side is always detached, so no gradient reaches it.
    """
    temps = {soft_a.temperature, soft_b.temperature, soft_s.temperature}
    if len(temps) != 1:
        raise ValueError(f"temperature mismatch among distillation inputs: {sorted(temps)}")
    teacher = soft_s.detach()
    if direction == "teacher":
        loss = _kl(teacher, soft_a) + _kl(teacher, soft_b)
    elif direction == "student":
        loss = _kl(soft_a, teacher) + _kl(soft_b, teacher)
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    if scale_t2:
        loss = loss * soft_s.temperature ** 2
    return loss
