"""Importance-weighted audio-visual fusion at local, event and global granularity.

Each granularity produces a visual and an audio stream of width ``d`` that
are merged as ``(1 - p) * LN_v(visual) + p * LN_a(audio)``. The three merged
sequences are then related pairwise by bidirectional GRUs and mapped back
to width ``d``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoding import AttentionPool, FeedForward, TransformerBlock, mask_rows
from .errors import ConfigError


@dataclass
class GranularityFeatures:
    f_local: torch.Tensor
    f_event: torch.Tensor
    f_global: torch.Tensor
    fused: torch.Tensor


def _as_weight(p, like: torch.Tensor) -> torch.Tensor:
    p = torch.as_tensor(p, dtype=like.dtype, device=like.device)
    if p.dim() == 0:
        return p
    return p.reshape(-1, *([1] * (like.dim() - 1)))


class WeightedMerge(nn.Module):
    """``(1 - p) * LN(visual) + p * LN(audio)`` with one LayerNorm per modality."""

    def __init__(self, d: int):
        super().__init__()
        self.norm_v = nn.LayerNorm(d)
        self.norm_a = nn.LayerNorm(d)

    def forward(self, visual, audio, p, mask):
        w = _as_weight(p, visual)
        return mask_rows((1 - w) * self.norm_v(visual) + w * self.norm_a(audio), mask)


class ConvBank(nn.Module):
    """Parallel same-padded 1-D convolutions, concatenated and mapped back to ``d``."""

    def __init__(self, d: int, kernels=(1, 3, 5)):
        super().__init__()
        if any(k % 2 == 0 for k in kernels):
            raise ConfigError(f"kernel sizes must be odd: {kernels}")
        self.convs = nn.ModuleList(nn.Conv1d(d, d, k, padding=k // 2) for k in kernels)
        self.mlp = FeedForward(len(kernels) * d, hidden=d, out=d)

    def forward(self, x, mask):
        xt = mask_rows(x, mask).transpose(1, 2)
        feats = torch.cat([conv(xt) for conv in self.convs], dim=1).transpose(1, 2)
        return mask_rows(self.mlp(feats), mask)


class LocalFusion(nn.Module):
    def __init__(self, d: int, kernels=(1, 3, 5)):
        super().__init__()
        self.bank_v = ConvBank(d, kernels)
        self.bank_a = ConvBank(d, kernels)
        self.merge = WeightedMerge(d)

    def streams(self, v_hat, a_hat, mask):
        return self.bank_v(v_hat, mask), self.bank_a(a_hat, mask)

    def forward(self, v_hat, a_hat, p, mask):
        v_l, a_l = self.streams(v_hat, a_hat, mask)
        return self.merge(v_l, a_l, p, mask)


def permutation_exact_softmax(logits: torch.Tensor, dim: int) -> torch.Tensor:
    """Softmax whose result is bit-identical under any permutation along ``dim``.

    The normalizer is summed in sorted order, so it does not depend on where
    each entry sits.
    """
    e = torch.exp(logits - logits.amax(dim=dim, keepdim=True))
    return e / e.sort(dim=dim).values.sum(dim=dim, keepdim=True)


class SlotAttention(nn.Module):
    """Iterative slot attention with learnable initial slots.

    Attention is normalized over the slot axis, so every valid input position
    hands out a total weight of one; slot updates are weighted means of the
    input values over positions.
    """

    def __init__(self, d: int, num_slots: int = 3, iters: int = 3, eps: float = 1e-8):
        super().__init__()
        if iters < 1:
            raise ConfigError(f"slot iterations must be >= 1, got {iters}")
        if num_slots < 1:
            raise ConfigError(f"need at least one slot, got {num_slots}")
        self.iters = iters
        self.eps = eps
        self.scale = d ** -0.5
        self.slots_init = nn.Parameter(torch.randn(num_slots, d) * d ** -0.5)
        self.norm_input = nn.LayerNorm(d)
        self.norm_slots = nn.LayerNorm(d)
        self.norm_mlp = nn.LayerNorm(d)
        self.to_q = nn.Linear(d, d, bias=False)
        self.to_k = nn.Linear(d, d, bias=False)
        self.to_v = nn.Linear(d, d, bias=False)
        self.gru = nn.GRUCell(d, d)
        self.mlp = FeedForward(d)

    def forward(self, seq, mask, slots_init=None, iters=None, return_attn=False):
        iters = self.iters if iters is None else iters
        if iters < 1:
            raise ConfigError(f"slot iterations must be >= 1, got {iters}")
        init = self.slots_init if slots_init is None else slots_init
        B, _, d = seq.shape
        slots = init.unsqueeze(0).expand(B, -1, -1)
        inputs = self.norm_input(seq)
        k, v = self.to_k(inputs), self.to_v(inputs)
        valid = mask.unsqueeze(1).to(seq.dtype)                   # [B, 1, T]
        attn_history = []
        for _ in range(iters):
            prev = slots
            q = self.to_q(self.norm_slots(slots))
            logits = q @ k.transpose(1, 2) * self.scale             # [B, e, T]
            attn = permutation_exact_softmax(logits, dim=1) * valid
            attn_history.append(attn)
            weights = attn / (attn.sum(dim=-1, keepdim=True) + self.eps)
            updates = weights @ v                                   # [B, e, d]
            e = slots.shape[1]
            slots = self.gru(updates.reshape(B * e, d), prev.reshape(B * e, d)).view(B, e, d)
            slots = slots + self.mlp(self.norm_mlp(slots))
        return (slots, attn_history) if return_attn else slots


class EventFusion(nn.Module):
    """Slots summarize each modality into events; frames then attend to the events."""

    def __init__(self, d: int, num_slots: int = 3, iters: int = 3, heads: int = 4,
                 cross_modal: bool = False):
        super().__init__()
        self.cross_modal = cross_modal
        self.slots_v = SlotAttention(d, num_slots, iters)
        self.slots_a = SlotAttention(d, num_slots, iters)
        self.attend_v = TransformerBlock(d, heads)
        self.attend_a = TransformerBlock(d, heads)
        self.merge = WeightedMerge(d)

    def streams(self, v_hat, a_hat, mask):
        ev_v = self.slots_v(v_hat, mask)
        ev_a = self.slots_a(a_hat, mask)
        if self.cross_modal:
            ev_v, ev_a = ev_a, ev_v
        slot_mask = torch.ones(ev_v.shape[:2], dtype=torch.bool, device=v_hat.device)
        v_e = self.attend_v(v_hat, mask, memory=ev_v, memory_mask=slot_mask)
        a_e = self.attend_a(a_hat, mask, memory=ev_a, memory_mask=slot_mask)
        return v_e, a_e

    def forward(self, v_hat, a_hat, p, mask):
        v_e, a_e = self.streams(v_hat, a_hat, mask)
        return self.merge(v_e, a_e, p, mask)


class GlobalFusion(nn.Module):
    """Append the attention-pooled summary to every frame, then an MLP."""

    def __init__(self, d: int):
        super().__init__()
        self.pool_v = AttentionPool(d)
        self.pool_a = AttentionPool(d)
        self.mlp_v = FeedForward(2 * d, hidden=d, out=d)
        self.mlp_a = FeedForward(2 * d, hidden=d, out=d)
        self.merge = WeightedMerge(d)

    @staticmethod
    def _with_summary(seq, summary):
        return torch.cat([seq, summary.unsqueeze(1).expand_as(seq)], dim=-1)

    def streams(self, v_hat, a_hat, mask):
        v_g = self.mlp_v(self._with_summary(v_hat, self.pool_v(v_hat, mask)))
        a_g = self.mlp_a(self._with_summary(a_hat, self.pool_a(a_hat, mask)))
        return mask_rows(v_g, mask), mask_rows(a_g, mask)

    def forward(self, v_hat, a_hat, p, mask):
        v_g, a_g = self.streams(v_hat, a_hat, mask)
        return self.merge(v_g, a_g, p, mask)


def reverse_within_length(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each sequence over its first ``lengths[b]`` steps; the tail stays in place."""
    T = x.shape[1]
    t = torch.arange(T, device=x.device)
    L = lengths.to(x.device)[:, None]
    idx = torch.where(t < L, L - 1 - t, t)
    return x.gather(1, idx.unsqueeze(-1).expand_as(x))


class MultiScaleMerge(nn.Module):
    """Pairwise Bi-GRUs over (local, event), (local, global), (event, global).

    The parameters live in ordinary ``nn.GRU`` modules. The forward pass runs
    all six recurrences (three pairs, two directions) as one batched
    recurrence, which is numerically the same as calling each GRU on packed
    sequences but issues far fewer kernels per time step.
    """

    PAIRS = ((0, 1), (0, 2), (1, 2))

    def __init__(self, d: int):
        super().__init__()
        if d % 2:
            raise ConfigError(f"d must be even for the bidirectional split, got {d}")
        self.hidden = d // 2
        self.grus = nn.ModuleList(
            nn.GRU(2 * d, d // 2, batch_first=True, bidirectional=True) for _ in self.PAIRS)
        self.mlp = FeedForward(3 * d, hidden=2 * d, out=d)

    def _stacked(self, name):
        return torch.stack([getattr(g, name + sfx) for g in self.grus for sfx in ("_l0", "_l0_reverse")])

    def recurrences(self, pairs: list[torch.Tensor], lengths: torch.Tensor) -> list[torch.Tensor]:
        """Bidirectional GRU outputs ``[B, T, d]`` for each pair input ``[B, T, 2d]``."""
        B, T, _ = pairs[0].shape
        h = self.hidden
        full = bool((lengths == T).all())
        seqs = []
        for x in pairs:
            seqs.append(x)
            seqs.append(x.flip(1) if full else reverse_within_length(x, lengths))
        X = torch.stack(seqs)                                        # [K, B, T, I]
        W_ih, W_hh = self._stacked("weight_ih"), self._stacked("weight_hh")
        b_ih, b_hh = self._stacked("bias_ih"), self._stacked("bias_hh")
        gi = torch.einsum("kbti,kgi->ktbg", X, W_ih) + b_ih[:, None, None, :]
        W_hh_t = W_hh.transpose(1, 2)                                # [K, h, 3h]
        state = X.new_zeros(X.shape[0], B, h)
        outs = []
        # unbind keeps the backward to one stack instead of T zero-filled slices
        for gi_t in gi.unbind(1):
            gh = torch.baddbmm(b_hh.unsqueeze(1), state, W_hh_t)     # [K, B, 3h]
            i_r, i_z, i_n = gi_t.split(h, dim=-1)
            h_r, h_z, h_n = gh.split(h, dim=-1)
            r = torch.sigmoid(i_r + h_r)
            z = torch.sigmoid(i_z + h_z)
            n = torch.tanh(i_n + r * h_n)
            state = n + z * (state - n)
            outs.append(state)
        H = torch.stack(outs, dim=2)                                 # [K, B, T, h]
        results = []
        for k in range(0, H.shape[0], 2):
            back = H[k + 1].flip(1) if full else reverse_within_length(H[k + 1], lengths)
            results.append(torch.cat([H[k], back], dim=-1))
        return results

    def forward(self, f_local, f_event, f_global, mask):
        feats = (f_local, f_event, f_global)
        T = mask.shape[1]
        # each sequence runs up to its last valid frame; masked rows inside are zero
        idx = torch.arange(1, T + 1, device=mask.device)
        lengths = (mask.long() * idx).max(dim=1).values
        pairs = [mask_rows(torch.cat([feats[i], feats[j]], dim=-1), mask) for i, j in self.PAIRS]
        outs = self.recurrences(pairs, lengths)
        return mask_rows(self.mlp(torch.cat(outs, dim=-1)), mask)


class MultiGranularityFusion(nn.Module):
    def __init__(self, d: int, kernels=(1, 3, 5), num_slots: int = 3, slot_iters: int = 3,
                 heads: int = 4, cross_modal_events: bool = False):
        super().__init__()
        self.local = LocalFusion(d, kernels)
        self.event = EventFusion(d, num_slots, slot_iters, heads, cross_modal_events)
        self.global_ = GlobalFusion(d)
        self.merge = MultiScaleMerge(d)

    def forward(self, v_hat, a_hat, p, mask) -> GranularityFeatures:
        f_l = self.local(v_hat, a_hat, p, mask)
        f_e = self.event(v_hat, a_hat, p, mask)
        f_g = self.global_(v_hat, a_hat, p, mask)
        return GranularityFeatures(f_l, f_e, f_g, self.merge(f_l, f_e, f_g, mask))
