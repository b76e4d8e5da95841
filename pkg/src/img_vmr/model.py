"""Full three-branch model and the per-batch objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .config import BRANCHES, ModelConfig
from .data import Batch
from .encoding import AttentionPool, ContextQueryAttention, ModalityEncoder, mask_rows
from .errors import InvalidInputError, TrainingDivergenceError
from .fusion import GranularityFeatures, MultiGranularityFusion
from .heads import (BranchOutputs, LossParts, SpanPredictor, kd_loss, saliency_loss,
                    sample_saliency_pairs, span_retrieval_loss, total_loss)
from .importance import ImportancePredictor, effective_weight, importance_bce_loss, pseudo_importance_labels


@dataclass
class ModelOutputs:
    branches: dict[str, BranchOutputs]
    v_hat: torch.Tensor | None = None
    a_hat: torch.Tensor | None = None
    p: torch.Tensor | None = None
    p_eff: torch.Tensor | None = None
    granularity: GranularityFeatures | None = None


class IMGModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, h, k, drop = cfg.d, cfg.heads, cfg.conv_kernel, cfg.dropout
        self.visual_encoder = ModalityEncoder(cfg.d_v, d, h, k, cfg.max_frames, drop)
        self.audio_encoder = ModalityEncoder(cfg.d_a, d, h, k, cfg.max_frames, drop)
        self.text_encoder_v = ModalityEncoder(cfg.d_q, d, h, k, cfg.max_tokens, drop)
        self.text_encoder_a = ModalityEncoder(cfg.d_q, d, h, k, cfg.max_tokens, drop)
        self.cqa_v = ContextQueryAttention(d, drop)
        self.cqa_a = ContextQueryAttention(d, drop)
        self.importance_pool_v = AttentionPool(d)
        self.importance_pool_a = AttentionPool(d)
        self.importance = ImportancePredictor(d)
        self.fusion = MultiGranularityFusion(d, cfg.kernel_bank, cfg.slots, cfg.slot_iters,
                                             h, cfg.cross_modal_events)
        self.heads = nn.ModuleDict({b: SpanPredictor(d, h, k) for b in BRANCHES})
        self.saliency = nn.ModuleDict({b: nn.Linear(d, 1) for b in BRANCHES})

    def encode_visual(self, batch: Batch) -> torch.Tensor:
        v = self.visual_encoder(batch.visual, batch.frame_mask)
        q = self.text_encoder_v(batch.query, batch.token_mask)
        return self.cqa_v(v, q, batch.frame_mask, batch.token_mask)

    def encode_audio(self, batch: Batch) -> torch.Tensor:
        if batch.audio is None:
            raise InvalidInputError("audio features are required for the audio and fusion branches")
        a = self.audio_encoder(batch.audio, batch.frame_mask)
        q = self.text_encoder_a(batch.query, batch.token_mask)
        return self.cqa_a(a, q, batch.frame_mask, batch.token_mask)

    def predict_importance(self, v_hat, a_hat, mask) -> torch.Tensor:
        return self.importance(self.importance_pool_v(v_hat, mask),
                               self.importance_pool_a(a_hat, mask))

    def _branch(self, name, feats, mask) -> BranchOutputs:
        start, end = self.heads[name](feats, mask)
        sal = self.saliency[name](mask_rows(feats, mask)).squeeze(-1)
        return BranchOutputs(start, end, sal)

    def forward(self, batch: Batch, epoch: int | None = None, p_override=None,
                branches=BRANCHES) -> ModelOutputs:
        """Run the requested branches.

        ``epoch=None`` means the warmup is over and the predicted importance is
        used directly. ``p_override`` replaces the fusion weight outright.
        """
        unknown = set(branches) - set(BRANCHES)
        if unknown:
            raise InvalidInputError(f"unknown branches {sorted(unknown)}")
        mask = batch.frame_mask
        out = ModelOutputs(branches={})
        if "visual" in branches or "fusion" in branches:
            out.v_hat = self.encode_visual(batch)
        if "audio" in branches or "fusion" in branches:
            out.a_hat = self.encode_audio(batch)
        if "visual" in branches:
            out.branches["visual"] = self._branch("visual", out.v_hat, mask)
        if "audio" in branches:
            out.branches["audio"] = self._branch("audio", out.a_hat, mask)
        if "fusion" in branches:
            out.p = self.predict_importance(out.v_hat, out.a_hat, mask)
            if p_override is not None:
                out.p_eff = torch.as_tensor(p_override, dtype=out.p.dtype).expand_as(out.p)
            elif epoch is None:
                out.p_eff = out.p
            else:
                out.p_eff = effective_weight(out.p, epoch, self.cfg.importance)
            out.granularity = self.fusion(out.v_hat, out.a_hat, out.p_eff, mask)
            out.branches["fusion"] = self._branch("fusion", out.granularity.fused, mask)
        return out


@dataclass
class FixedTargets:
    """Records the detached parts of the objective on first use and replays them.

    The importance labels, the distillation teacher and the saliency pairs are
    treated as constants by the gradient. Reusing one instance across calls
    keeps them fixed, which is what a finite-difference check needs.
    """

    y_label: torch.Tensor | None = None
    teacher: tuple[torch.Tensor, torch.Tensor] | None = None
    saliency_pairs: dict = field(default_factory=dict)


def compute_losses(outputs: ModelOutputs, batch: Batch, cfg: ModelConfig,
                   generator: torch.Generator | None = None,
                   fixed: FixedTargets | None = None) -> tuple[torch.Tensor, LossParts]:
    """Evaluate the training objective on one batch of full three-branch outputs."""
    fixed = fixed or FixedTargets()
    lw = cfg.loss
    mask = batch.frame_mask
    br = outputs.branches
    ret, per_sample = {}, {}
    for name in BRANCHES:
        ret[name], per_sample[name] = span_retrieval_loss(
            br[name].start_logits, br[name].end_logits, batch.start_idx, batch.end_idx)
    l_ret = ret["visual"] + ret["audio"] + ret["fusion"]
    if not torch.isfinite(l_ret.detach()):
        raise TrainingDivergenceError("non-finite retrieval loss",
                                      {f"ret_{k}": float(v.detach()) for k, v in ret.items()})

    y_raw, y_label = pseudo_importance_labels(per_sample["visual"], per_sample["audio"], cfg.importance)
    if fixed.y_label is None:
        fixed.y_label = y_label
    y_label = fixed.y_label
    l_p = importance_bce_loss(outputs.p, y_label)

    if fixed.teacher is None:
        fixed.teacher = (br["fusion"].start_logits.detach(), br["fusion"].end_logits.detach())
    t_start, t_end = fixed.teacher
    kd = {}
    for name in ("visual", "audio"):
        kd[name] = kd_loss(br[name].start_logits, br[name].end_logits, t_start, t_end, lw.tau, mask)
    l_kd = kd["visual"] + kd["audio"] if cfg.use_kd else l_ret.new_zeros(())

    sal = {}
    for name in BRANCHES:
        pairs = fixed.saliency_pairs.get(name)
        if pairs is None:
            pairs = sample_saliency_pairs(batch.start_idx, batch.end_idx, mask,
                                          lw.saliency_pairs, generator)
            fixed.saliency_pairs[name] = pairs
        sal[name] = saliency_loss(br[name].saliency, *pairs, margin=lw.saliency_margin)
    l_sal = sal["visual"] + sal["audio"] + sal["fusion"]

    parts = LossParts(l_ret, l_p, l_kd, l_sal, details={
        "ret": ret, "per_sample": per_sample, "kd": kd, "saliency": sal,
        "y_raw": y_raw, "y_label": y_label,
    })
    return total_loss(parts, lw), parts
