import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from fes import margin as mg
from fes import tensor_core as tc
from fes.text import BOS, EOS

prob = st.floats(0.0, 1.0)


def test_margin_term_hand_values():
    assert float(mg.max_margin_term(0.9, mg.margin(0.9, 0.2))) == pytest.approx(0.0415965, abs=1e-7)
    assert float(mg.max_margin_term(0.2, mg.margin(0.2, 0.5))) == pytest.approx(0.400972, abs=1e-6)
    assert mg.max_margin_term(1.0, mg.margin(1.0, 0.3)) == 0.0
    assert mg.max_margin_term(0.4, mg.margin(0.4, 0.4)) == pytest.approx(0.3)


@given(prob, prob)
def test_margin_term_bounded(p, q):
    m = mg.margin(p, q)
    assert -1 <= m <= 1
    assert 0 <= mg.max_margin_term(p, m) <= 1


@given(prob, prob, prob)
def test_margin_term_decreases_with_margin(p, q1, q2):
    lo, hi = sorted((q1, q2))
    # larger LM probability means smaller margin and larger penalty
    assert mg.max_margin_term(p, mg.margin(p, hi)) >= mg.max_margin_term(p, mg.margin(p, lo)) - 1e-15


def test_loss_treats_lm_as_constant():
    p = tc.tensor([0.3, 0.8], requires_grad=True)
    q = tc.tensor([0.5, 0.1], requires_grad=True)
    loss = mg.max_margin_loss(p, q, torch.tensor([True, False]))
    tc.backward(loss)
    assert q.grad is None
    m = 0.3 - 0.5
    # d/dp of (1-p)(1-(p-q)^5)/2 at the masked-in position
    expect = (-(1 - m**5) - (1 - 0.3) * 5 * m**4) / 2
    assert p.grad.tolist() == pytest.approx([expect, 0.0], abs=1e-12)


def test_stats_recount_and_histogram():
    vals = [(0.9, 0.2, True), (0.1, 0.6, False), (0.5, 0.5, True), (0.3, 0.9, True)]
    recs = [mg.MarginRecord("d", i, 5, p, q, e) for i, (p, q, e) in enumerate(vals)]
    stats = mg.margin_stats(recs)
    ms = [p - q for p, q, _ in vals]
    assert stats["all"].count == 4
    assert stats["all"].fraction_negative == 0.5
    assert stats["all"].mean_margin == pytest.approx(sum(ms) / 4)
    assert sum(stats["all"].histogram) == 4 and len(stats["all"].histogram) == mg.HIST_BINS
    assert stats["entity"].count == 3
    assert stats["entity"].fraction_negative == pytest.approx(1 / 3)
    assert mg.margin_stats(recs[1:2]).keys() == {"all"}
    with pytest.raises(ValueError):
        mg.margin_stats([])


def test_histogram_edges():
    stats = mg.margin_stats([mg.MarginRecord("d", 0, 5, 1.0, 0.0, False), mg.MarginRecord("d", 1, 5, 0.0, 1.0, False)])
    h = stats["all"].histogram
    assert h[0] == 1 and h[-1] == 1


def test_lm_is_causal():
    cfg = mg.LMConfig(vocab_size=20, d_model=8, heads=2, layers=1, ffn_hidden=12)
    params = mg.init_lm(cfg, 0)
    a = torch.tensor([[BOS, 5, 6, 7, 8]])
    b = torch.tensor([[BOS, 5, 6, 11, 12]])
    Pa = mg.lm_forward(a, a != 0, params, cfg)
    Pb = mg.lm_forward(b, b != 0, params, cfg)
    assert torch.equal(Pa[:, :3], Pb[:, :3])
    assert not torch.equal(Pa[:, 3], Pb[:, 3])
    assert torch.allclose(Pa.sum(-1), torch.ones(1, 5, dtype=tc.DTYPE), atol=1e-12)


def test_pretraining_lowers_perplexity_and_freezes():
    cfg = mg.LMConfig(vocab_size=20, d_model=8, heads=2, layers=1, ffn_hidden=12)
    data = [[5, 6, 7, 8], [5, 6, 9, 8], [10, 6, 7, 8]] * 8
    params, curve = mg.pretrain_lm(data, cfg, seed=0, epochs=5, lr=1e-2, heldout=data[:3])
    assert curve[-1] < 0.5 * curve[0]
    assert all(not p.requires_grad for p in params.values())
    inp, tgt, mask = mg.summary_tensors([[5, 6], [7]])
    assert inp.tolist() == [[BOS, 5, 6], [BOS, 7, 0]]
    assert tgt.tolist() == [[5, 6, EOS], [7, EOS, 0]]
