import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from img_vmr.config import LossWeights
from img_vmr.encoding import NEG
from img_vmr.errors import ConfigError, InvalidInputError, TrainingDivergenceError
from img_vmr.heads import (LossParts, SpanPredictor, kd_loss, saliency_loss, sample_saliency_pairs,
                           span_retrieval_loss, total_loss)


def _log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    m = x.max()
    return x - m - math.log(np.exp(x - m).sum())


def test_span_loss_against_hand_computation():
    start = torch.tensor([[0.0, 1.0, 2.0]], dtype=torch.double)
    end = torch.tensor([[3.0, 0.0, 0.0]], dtype=torch.double)
    mean, per = span_retrieval_loss(start, end, torch.tensor([1]), torch.tensor([2]))
    expected = -_log_softmax([0, 1, 2])[1] - _log_softmax([3, 0, 0])[2]
    assert per.item() == pytest.approx(expected, abs=1e-12)
    assert mean.item() == pytest.approx(expected, abs=1e-12)


def test_span_loss_rejects_bad_targets():
    logits = torch.zeros(1, 4)
    with pytest.raises(InvalidInputError):
        span_retrieval_loss(logits, logits, torch.tensor([2]), torch.tensor([1]))
    with pytest.raises(InvalidInputError):
        span_retrieval_loss(logits, logits, torch.tensor([0]), torch.tensor([4]))


def test_span_predictor_masks_logits():
    torch.manual_seed(0)
    head = SpanPredictor(8, 2, 3)
    mask = torch.tensor([[True] * 5 + [False] * 2])
    s, e = head(torch.randn(1, 7, 8), mask)
    assert (s[0, 5:] == NEG).all() and (e[0, 5:] == NEG).all()
    assert torch.isfinite(s[0, :5]).all()


def test_kd_matches_numpy_kl():
    rng = np.random.default_rng(0)
    s_st, s_en, t_st, t_en = (rng.standard_normal((3, 6)) for _ in range(4))
    tau = 2.0

    def kl(student, teacher):
        ls, lt = _log_softmax(student / tau), _log_softmax(teacher / tau)
        return float((np.exp(ls) * (ls - lt)).sum())

    expected = tau ** 2 * sum(kl(s_st[b], t_st[b]) + kl(s_en[b], t_en[b]) for b in range(3))
    got = kd_loss(*(torch.from_numpy(x) for x in (s_st, s_en, t_st, t_en)), tau=tau)
    assert got.item() == pytest.approx(expected, abs=1e-12)


def test_kd_zero_for_identical_and_teacher_detached():
    x = torch.randn(2, 5, requires_grad=True)
    teacher = torch.randn(2, 5, requires_grad=True)
    assert kd_loss(x, x, x, x, tau=2.0).item() == pytest.approx(0.0, abs=1e-6)
    kd_loss(x, x, teacher, teacher, tau=2.0).backward()
    assert teacher.grad is None and x.grad is not None


def test_kd_respects_mask():
    s = torch.tensor([[0.0, 1.0, 5.0]])
    t = torch.tensor([[1.0, 0.0, -3.0]])
    mask = torch.tensor([[True, True, False]])
    masked = kd_loss(s.masked_fill(~mask, NEG), s.masked_fill(~mask, NEG),
                     t.masked_fill(~mask, NEG), t.masked_fill(~mask, NEG), tau=1.0, mask=mask)
    short = kd_loss(s[:, :2], s[:, :2], t[:, :2], t[:, :2], tau=1.0)
    assert masked.item() == pytest.approx(short.item(), abs=1e-6)


def test_kd_rejects_nonpositive_tau():
    x = torch.zeros(1, 3)
    with pytest.raises(ConfigError):
        kd_loss(x, x, x, x, tau=0.0)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_kd_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    s, t = torch.randn(4, 9, generator=g) * 3, torch.randn(4, 9, generator=g) * 3
    assert kd_loss(s, s, t, t, tau=2.0).item() >= -1e-6


def test_saliency_pairs_land_inside_and_outside():
    g = torch.Generator().manual_seed(0)
    start, end = torch.tensor([2, 0, 0]), torch.tensor([4, 5, 2])
    mask = torch.tensor([[True] * 8, [True] * 6 + [False] * 2, [True] * 6 + [False] * 2])
    pos, neg, valid = sample_saliency_pairs(start, end, mask, pairs=64, generator=g)
    assert valid.tolist() == [True, False, True]
    assert ((pos[0] >= 2) & (pos[0] <= 4)).all()
    assert ((neg[0] < 2) | (neg[0] > 4)).all()
    assert ((neg[2] > 2) & (neg[2] < 6)).all()


def test_saliency_pairs_are_seeded():
    start, end, mask = torch.tensor([1]), torch.tensor([3]), torch.ones(1, 10, dtype=torch.bool)
    a = sample_saliency_pairs(start, end, mask, 5, torch.Generator().manual_seed(4))
    b = sample_saliency_pairs(start, end, mask, 5, torch.Generator().manual_seed(4))
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_saliency_loss_hand_values():
    scores = torch.tensor([[1.0, 0.5, 0.0], [0.0, 0.0, 0.0]])
    pos, neg = torch.tensor([[0], [0]]), torch.tensor([[1], [2]])
    valid = torch.tensor([True, True])
    # sample 0: max(0, 0.2 + 0.5 - 1.0) = 0; sample 1: 0.2
    assert saliency_loss(scores, pos, neg, valid, margin=0.2).item() == pytest.approx(0.1)
    valid = torch.tensor([True, False])
    assert saliency_loss(scores, pos, neg, valid, margin=0.2).item() == pytest.approx(0.0)


def test_total_loss_weights_and_divergence():
    parts = LossParts(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), torch.tensor(4.0))
    assert total_loss(parts, LossWeights()).item() == pytest.approx(1 + 5 * 2 + 10 * 3 + 0.5 * 4)
    parts.kd = torch.tensor(float("nan"))
    with pytest.raises(TrainingDivergenceError) as info:
        total_loss(parts, LossWeights())
    assert math.isnan(info.value.diagnostics["kd"])
