"""Span decoding, temporal IoU and R1@mu / mIoU."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

# R1@mu thresholds for mu in {3, 5, 7}; a query counts when IoU is strictly larger.
THRESHOLDS = (0.3, 0.5, 0.7)


def _softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    x = np.where(mask, logits, -np.inf)
    x = x - x[mask].max()
    e = np.where(mask, np.exp(x), 0.0)
    return e / e.sum()


def decode_span_probs(p_start, p_end, mask=None) -> tuple[int, int]:
    """Most likely ``(i, j)`` with ``i <= j`` from start/end probabilities, in O(T).

    Ties go to the lexicographically smallest pair.
    """
    p_start = np.asarray(p_start, dtype=np.float64)
    p_end = np.asarray(p_end, dtype=np.float64)
    mask = np.ones(len(p_start), bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise InvalidInputError("decode_span: no valid position")
    valid = np.flatnonzero(mask)
    best_val, best = -1.0, None
    run_max, run_arg = -1.0, -1
    for j in valid:
        if p_start[j] > run_max:
            run_max, run_arg = p_start[j], j
        val = run_max * p_end[j]
        if val > best_val:
            best_val, best = val, (int(run_arg), int(j))
    if best_val <= 0.0:
        # every product underflowed; all pairs tie
        return int(valid[0]), int(valid[0])
    return best


def decode_span(start_logits, end_logits, mask=None) -> tuple[int, int]:
    start_logits = np.asarray(start_logits, dtype=np.float64)
    end_logits = np.asarray(end_logits, dtype=np.float64)
    mask = np.ones(len(start_logits), bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise InvalidInputError("decode_span: no valid position")
    return decode_span_probs(_softmax(start_logits, mask), _softmax(end_logits, mask), mask)


def span_to_seconds(span, num_frames: int, duration: float) -> tuple[float, float]:
    i, j = span
    if not 0 <= i <= j < num_frames:
        raise InvalidInputError(f"span {span} invalid for T={num_frames}")
    if num_frames == 1:
        return 0.0, float(duration)
    scale = duration / (num_frames - 1)
    return i * scale, j * scale


def temporal_iou(a, b) -> float:
    (s1, e1), (s2, e2) = a, b
    if s1 > e1 or s2 > e2:
        raise InvalidInputError(f"reversed span in IoU: {a}, {b}")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    if union <= 0.0:
        return 1.0 if (s1, e1) == (s2, e2) else 0.0
    return inter / union


@dataclass
class EvalReport:
    r1_at: dict[float, float]
    miou: float
    per_query: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "r1_at": {f"{k:.1f}": v for k, v in self.r1_at.items()},
            "miou": self.miou,
            "count": len(self.per_query),
            "threshold_rule": "IoU > mu (strict)",
            "per_query": self.per_query,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls({float(k): float(v) for k, v in obj["r1_at"].items()},
                   float(obj["miou"]), list(obj.get("per_query", [])))


def evaluate(preds, gts, ids=None) -> EvalReport:
    """R1@{0.3,0.5,0.7} and mIoU, in percent, for predicted spans in seconds."""
    if len(preds) != len(gts):
        raise InvalidInputError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise InvalidInputError("evaluate: empty prediction list")
    ious = []
    per_query = []
    for k, (pred, gt) in enumerate(zip(preds, gts)):
        gt_span = (gt.start_sec, gt.end_sec) if hasattr(gt, "start_sec") else tuple(gt)
        iou = temporal_iou(tuple(pred), gt_span)
        ious.append(iou)
        entry = {"pred": [float(pred[0]), float(pred[1])],
                 "gt": [float(gt_span[0]), float(gt_span[1])], "iou": iou}
        if ids is not None:
            entry["video_id"] = ids[k]
        per_query.append(entry)
    ious = np.asarray(ious)
    r1 = {th: 100.0 * float(np.count_nonzero(ious > th)) / len(ious) for th in THRESHOLDS}
    return EvalReport(r1, 100.0 * float(ious.mean()), per_query)
