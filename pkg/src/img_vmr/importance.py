"""Per-sample audio importance: prediction, loss-derived targets, curriculum."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ImportanceConfig
from .errors import InvalidInputError

P_CLAMP = 1e-7
# Score buckets reported per epoch: <0.15, 0.15-0.25, 0.25-0.35, 0.35-0.45, >0.45
HISTOGRAM_EDGES = (0.15, 0.25, 0.35, 0.45)


class ImportancePredictor(nn.Module):
    """``p = sigmoid(MLP([a_global; v_global]))`` with an MLP of shape 2d -> d -> 1."""

    def __init__(self, d: int):
        super().__init__()
        self.hidden = nn.Linear(2 * d, d)
        self.out = nn.Linear(d, 1)

    def forward(self, v_global: torch.Tensor, a_global: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.hidden(torch.cat([a_global, v_global], dim=-1)))
        return torch.sigmoid(self.out(h)).squeeze(-1)


def _raw_score(loss_v: float, loss_a: float, gamma: float) -> float:
    # e^{Lv/g} / (e^{La/g} + e^{Lv/g}) written as a logistic of the loss gap.
    # The upper half is computed directly and the lower half as its complement;
    # 1 - y is exact for y in [0.5, 1], so swapping the losses sums to exactly 1.
    x = (loss_v - loss_a) / gamma
    y = 1.0 / (1.0 + math.exp(-abs(x)))
    return y if x >= 0 else 1.0 - y


def pseudo_importance_label(loss_v: float, loss_a: float, cfg: ImportanceConfig) -> float:
    """Audio importance target from the visual and audio retrieval losses of one sample.

    The raw score grows when the visual branch does worse than the audio
    branch; scores at or above ``eps_max`` snap to 1 and scores below
    ``eps_min`` snap to 0.
    """
    if not (math.isfinite(loss_v) and math.isfinite(loss_a)):
        raise InvalidInputError(f"non-finite branch loss ({loss_v}, {loss_a})")
    y = _raw_score(float(loss_v), float(loss_a), cfg.gamma)
    return threshold_score(y, cfg)


def threshold_score(y: float, cfg: ImportanceConfig) -> float:
    if y >= cfg.eps_max:
        return 1.0
    if y < cfg.eps_min:
        return 0.0
    return y


def pseudo_importance_labels(loss_v: torch.Tensor, loss_a: torch.Tensor,
                             cfg: ImportanceConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched labels from per-sample losses. Returns ``(y_raw, y_label)``, both detached."""
    loss_v, loss_a = loss_v.detach(), loss_a.detach()
    if not (torch.isfinite(loss_v).all() and torch.isfinite(loss_a).all()):
        raise InvalidInputError("non-finite branch loss in pseudo-label computation")
    x = (loss_v - loss_a) / cfg.gamma
    upper = torch.sigmoid(x.abs())
    y = torch.where(x >= 0, upper, 1.0 - upper)
    label = torch.where(y >= cfg.eps_max, torch.ones_like(y),
                        torch.where(y < cfg.eps_min, torch.zeros_like(y), y))
    return y, label


def importance_bce_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy, nonnegative, with ``p`` clamped away from 0 and 1."""
    if p.numel() == 0:
        raise InvalidInputError("empty batch")
    p = p.clamp(P_CLAMP, 1 - P_CLAMP)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def effective_weight(p, epoch: int, cfg: ImportanceConfig):
    """Blend the neutral 0.5 with ``p``, ramping linearly to ``p`` over the warmup."""
    alpha = min(1.0, max(epoch, 0) / cfg.warmup_epochs)
    return (1 - alpha) * 0.5 + alpha * p


def importance_stats(p_values) -> dict:
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return {"count": 0}
    idx = np.searchsorted(HISTOGRAM_EDGES, p, side="left")
    counts = np.bincount(idx, minlength=len(HISTOGRAM_EDGES) + 1)
    labels = ["<0.15", "0.15-0.25", "0.25-0.35", "0.35-0.45", ">0.45"]
    return {
        "count": int(p.size),
        "mean_p": float(p.mean()),
        "min_p": float(p.min()),
        "max_p": float(p.max()),
        "histogram": {lab: int(c) for lab, c in zip(labels, counts)},
    }
