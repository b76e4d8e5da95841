"""Span heads and the training objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .config import LossWeights
from .encoding import NEG, SequenceEncoder
from .errors import ConfigError, InvalidInputError, TrainingDivergenceError


@dataclass
class BranchOutputs:
    start_logits: torch.Tensor   # [B, T]
    end_logits: torch.Tensor     # [B, T]
    saliency: torch.Tensor       # [B, T]


class SpanPredictor(nn.Module):
    """Stacked start/end predictor: the end encoder reads the start encoder's states."""

    def __init__(self, d: int, heads: int = 4, kernel: int = 7):
        super().__init__()
        self.start_encoder = SequenceEncoder(d, heads, kernel, positional=False)
        self.end_encoder = SequenceEncoder(d, heads, kernel, positional=False)
        self.start_out = nn.Linear(2 * d, 1)
        self.end_out = nn.Linear(2 * d, 1)

    def forward(self, x, mask):
        h_s = self.start_encoder(x, mask)
        h_e = self.end_encoder(h_s, mask)
        start = self.start_out(torch.cat([h_s, x], dim=-1)).squeeze(-1)
        end = self.end_out(torch.cat([h_e, x], dim=-1)).squeeze(-1)
        return start.masked_fill(~mask, NEG), end.masked_fill(~mask, NEG)


def _check_span_targets(start_idx, end_idx, T):
    if (start_idx < 0).any() or (end_idx >= T).any() or (start_idx > end_idx).any():
        raise InvalidInputError(f"span targets out of range for T={T}: "
                                f"start={start_idx.tolist()}, end={end_idx.tolist()}")


def span_retrieval_loss(start_logits, end_logits, start_idx, end_idx):
    """Cross-entropy of the start and end distributions against the target frames.

    Returns ``(batch_mean, per_sample)``.
    """
    _check_span_targets(start_idx, end_idx, start_logits.shape[-1])
    per_sample = (F.cross_entropy(start_logits, start_idx, reduction="none")
                  + F.cross_entropy(end_logits, end_idx, reduction="none"))
    return per_sample.mean(), per_sample


def _kl(student_logits, teacher_logits, tau, mask):
    log_s = F.log_softmax(student_logits / tau, dim=-1)
    log_t = F.log_softmax(teacher_logits / tau, dim=-1)
    terms = log_s.exp() * (log_s - log_t)
    if mask is not None:
        terms = terms.masked_fill(~mask, 0.0)
    return terms.sum(dim=-1)


def kd_loss(student_start, student_end, teacher_start, teacher_end, tau: float, mask=None):
    """``tau^2 * [KL(student || teacher)]`` over start and end, summed over the batch.

    Teacher logits are detached, so no gradient reaches the teacher branch.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    kl = (_kl(student_start, teacher_start.detach(), tau, mask)
          + _kl(student_end, teacher_end.detach(), tau, mask))
    return tau * tau * kl.sum()


def sample_saliency_pairs(start_idx, end_idx, mask, pairs: int = 1, generator=None):
    """Draw in-moment / out-of-moment frame indices per sample.

    Returns ``(pos [B, P], neg [B, P], valid [B])``; samples without both kinds
    of frame are marked invalid and contribute zero loss.
    """
    T = mask.shape[1]
    t = torch.arange(T, device=mask.device)
    inside = (t >= start_idx[:, None]) & (t <= end_idx[:, None]) & mask
    outside = ~inside & mask
    valid = inside.any(dim=1) & outside.any(dim=1)
    # invalid rows get a dummy uniform distribution so multinomial stays defined
    w_pos = torch.where(valid[:, None], inside.double(), torch.ones_like(inside, dtype=torch.double))
    w_neg = torch.where(valid[:, None], outside.double(), torch.ones_like(outside, dtype=torch.double))
    pos = torch.multinomial(w_pos, pairs, replacement=True, generator=generator)
    neg = torch.multinomial(w_neg, pairs, replacement=True, generator=generator)
    return pos, neg, valid


def saliency_loss(scores, pos, neg, valid, margin: float = 0.2):
    """Hinge ``max(0, margin + s_neg - s_pos)`` averaged over pairs and the batch."""
    s_pos = scores.gather(1, pos)
    s_neg = scores.gather(1, neg)
    hinge = F.relu(margin + s_neg - s_pos).mean(dim=1)
    return torch.where(valid, hinge, torch.zeros_like(hinge)).mean()


@dataclass
class LossParts:
    ret: torch.Tensor
    importance: torch.Tensor
    kd: torch.Tensor
    saliency: torch.Tensor
    details: dict = field(default_factory=dict)


def total_loss(parts: LossParts, weights: LossWeights) -> torch.Tensor:
    components = {"ret": parts.ret, "importance": parts.importance,
                  "kd": parts.kd, "saliency": parts.saliency}
    values = {k: float(v.detach()) for k, v in components.items()}
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise TrainingDivergenceError(f"non-finite loss components: {bad}", values)
    return (parts.ret + weights.lambda1 * parts.importance
            + weights.lambda2 * parts.kd + weights.lambda3 * parts.saliency)
