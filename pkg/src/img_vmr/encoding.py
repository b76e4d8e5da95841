"""Modality encoders and text-conditioned fusion of each modality with the query.

All modules work on batched tensors ``[B, T, d]`` with boolean masks ``[B, T]``
(True = valid). Masked rows are zeroed on the way in and on the way out of
every block, and masked attention keys get a logit of ``NEG``; together this
makes every output at a valid position independent of the padded content.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InvalidInputError

NEG = -1e30


def mask_rows(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return x.masked_fill(~mask.unsqueeze(-1), 0.0)


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(logits.masked_fill(~mask, NEG), dim=dim)


def check_mask(mask: torch.Tensor, what: str = "mask") -> None:
    if not mask.any(dim=-1).all():
        raise InvalidInputError(f"{what} has no valid position for some sample")


class Projection(nn.Linear):
    """Affine map of raw features into the shared width ``d``."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise ConfigError(f"expected feature width {self.in_features}, got {x.shape[-1]}")
        return super().forward(x)


class FeedForward(nn.Sequential):
    def __init__(self, d: int, hidden: int | None = None, out: int | None = None):
        hidden = hidden or 2 * d
        super().__init__(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, out or d))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with boolean key masking."""

    def __init__(self, d: int, heads: int = 4):
        super().__init__()
        if d % heads:
            raise ConfigError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, query, key, value, key_mask, return_weights=False):
        B, Tq, d = query.shape
        Tk = key.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(query).view(B, Tq, h, dh).transpose(1, 2)
        k = self.k(key).view(B, Tk, h, dh).transpose(1, 2)
        v = self.v(value).view(B, Tk, h, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        weights = masked_softmax(logits, key_mask[:, None, None, :])
        ctx = (weights @ v).transpose(1, 2).reshape(B, Tq, d)
        out = self.out(ctx)
        return (out, weights) if return_weights else out


class ConvBlock(nn.Module):
    """Depthwise-separable same-padded convolution with a residual connection."""

    def __init__(self, d: int, kernel: int = 7):
        super().__init__()
        self.depthwise = nn.Conv1d(d, d, kernel, padding=kernel // 2, groups=d)
        self.pointwise = nn.Linear(d, d)
        self.norm = nn.LayerNorm(d)

    def forward(self, x, mask):
        x = mask_rows(x, mask)
        h = self.pointwise(self.depthwise(x.transpose(1, 2)).transpose(1, 2))
        return mask_rows(self.norm(x + F.gelu(h)), mask)


class TransformerBlock(nn.Module):
    """Post-norm self- or cross-attention block followed by a feed-forward block."""

    def __init__(self, d: int, heads: int = 4):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = FeedForward(d)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x, mask, memory=None, memory_mask=None):
        if memory is None:
            memory, memory_mask = x, mask
        x = mask_rows(self.norm1(x + self.attn(x, memory, memory, memory_mask)), mask)
        return mask_rows(self.norm2(x + self.ffn(x)), mask)


class SequenceEncoder(nn.Module):
    """Convolution block, learned positions, one transformer block."""

    def __init__(self, d: int, heads: int = 4, kernel: int = 7, max_len: int = 128,
                 positional: bool = True):
        super().__init__()
        self.conv = ConvBlock(d, kernel)
        self.pos = nn.Parameter(torch.empty(max_len, d).uniform_(-0.02, 0.02)) if positional else None
        self.block = TransformerBlock(d, heads)

    def forward(self, x, mask):
        check_mask(mask)
        if self.pos is not None and x.shape[1] > self.pos.shape[0]:
            raise InvalidInputError(f"sequence length {x.shape[1]} exceeds {self.pos.shape[0]}")
        h = self.conv(x, mask)
        if self.pos is not None:
            h = mask_rows(h + self.pos[: x.shape[1]], mask)
        return self.block(h, mask)


class ModalityEncoder(nn.Module):
    """Raw features -> projection -> sequence encoder."""

    def __init__(self, d_in: int, d: int, heads: int = 4, kernel: int = 7, max_len: int = 128,
                 dropout: float = 0.0):
        super().__init__()
        self.project = Projection(d_in, d)
        self.dropout = nn.Dropout(dropout)
        self.encode = SequenceEncoder(d, heads, kernel, max_len)

    def forward(self, x, mask):
        return self.encode(mask_rows(self.dropout(self.project(x)), mask), mask)


class ContextQueryAttention(nn.Module):
    """Bidirectional context/query attention with a trilinear similarity.

    ``S[t, n] = w_c . c_t + w_q . q_n + w_m . (c_t * q_n)``; the output is a
    linear map of ``[c; A; c*A; c*B]`` with context-to-query attention
    ``A = softmax_N(S) Q`` and query-to-context attention
    ``B = softmax_N(S) softmax_T(S)^T C``.
    """

    def __init__(self, d: int, dropout: float = 0.0):
        super().__init__()
        bound = 1.0 / math.sqrt(d)
        self.w_c = nn.Parameter(torch.empty(d).uniform_(-bound, bound))
        self.w_q = nn.Parameter(torch.empty(d).uniform_(-bound, bound))
        self.w_m = nn.Parameter(torch.empty(d).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(()))
        self.out = nn.Linear(4 * d, d)
        self.dropout = nn.Dropout(dropout)

    def similarity(self, context, query):
        s_c = (context @ self.w_c).unsqueeze(2)               # [B, T, 1]
        s_q = (query @ self.w_q).unsqueeze(1)                 # [B, 1, N]
        s_m = (context * self.w_m) @ query.transpose(1, 2)    # [B, T, N]
        return s_c + s_q + s_m + self.bias

    def forward(self, context, query, frame_mask, token_mask):
        context = mask_rows(context, frame_mask)
        query = mask_rows(query, token_mask)
        S = self.similarity(context, query)
        s_row = masked_softmax(S, token_mask.unsqueeze(1), dim=2)
        s_col = masked_softmax(S, frame_mask.unsqueeze(2), dim=1)
        a = s_row @ query
        b = s_row @ s_col.transpose(1, 2) @ context
        fused = self.out(torch.cat([context, a, context * a, context * b], dim=-1))
        return mask_rows(self.dropout(fused), frame_mask)


class AttentionPool(nn.Module):
    """Additive attention pooling of a sequence into one vector."""

    def __init__(self, d: int):
        super().__init__()
        self.hidden = nn.Linear(d, d)
        self.score = nn.Linear(d, 1, bias=False)

    def weights(self, seq, mask):
        check_mask(mask, "attention_pool mask")
        logits = self.score(torch.tanh(self.hidden(seq))).squeeze(-1)
        return masked_softmax(logits, mask)

    def forward(self, seq, mask, return_weights=False):
        w = self.weights(seq, mask)
        pooled = (w.unsqueeze(-1) * mask_rows(seq, mask)).sum(dim=1)
        return (pooled, w) if return_weights else pooled
