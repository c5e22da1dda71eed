"""Label-smoothed cross-entropy and the two phase objectives of the min-max game.

The classifier phase *maximizes* the adversarial terms, which is expressed
by subtracting them from a scalar that is minimized; the extractor phase
adds them. Both phases keep the clean-feature term.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import LabelOutOfRange, ShapeMismatch


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1   # erase
    lambda2: float = 0.15  # transform
    lambda3: float = 0.1   # noise

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def total(self) -> float:
        return self.lambda1 + self.lambda2 + self.lambda3

    def as_tuple(self):
        return (self.lambda1, self.lambda2, self.lambda3)


def smoothed_targets(labels: torch.Tensor, num_classes: int, epsilon: float = 0.1, dtype=torch.float32) -> torch.Tensor:
    """Targets with ``1 - (N-1)/N * eps`` on the true class and ``eps/N`` elsewhere."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if not 0 <= epsilon < 1:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes}), got range [{int(labels.min())}, {int(labels.max())}]")
    q = torch.full((labels.shape[0], num_classes), epsilon / num_classes, dtype=dtype)
    q[torch.arange(labels.shape[0]), labels] = 1 - (num_classes - 1) * epsilon / num_classes
    return q


def ce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``-sum_i q_i log softmax(logits)_i``."""
    if logits.shape != targets.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} differ")
    return -(targets.to(logits.dtype) * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def component_losses(logits_clean, logits_e, logits_t, logits_n, targets):
    return tuple(ce_loss(z, targets) for z in (logits_clean, logits_e, logits_t, logits_n))


def classifier_phase_objective(logits_clean, logits_e, logits_t, logits_n, targets, w: LossWeights = LossWeights()):
    clean, le, lt, ln = component_losses(logits_clean, logits_e, logits_t, logits_n, targets)
    return clean - w.lambda1 * le - w.lambda2 * lt - w.lambda3 * ln


def extractor_phase_objective(logits_clean, logits_e, logits_t, logits_n, targets, w: LossWeights = LossWeights()):
    clean, le, lt, ln = component_losses(logits_clean, logits_e, logits_t, logits_n, targets)
    return clean + w.lambda1 * le + w.lambda2 * lt + w.lambda3 * ln
