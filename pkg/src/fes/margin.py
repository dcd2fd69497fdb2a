"""Summary-only language model, the summarizer/LM margin, the max-margin loss
and margin statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch

from . import tensor_core as tc
from .layers import causal_mask, embed, ffn, init_ffn, init_ln, ln
from .tensor_core import ParamSet
from .text import BOS, EOS, PAD, Document

HIST_BINS = 40


@dataclass
class LMConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    ffn_hidden: int = 128


def init_lm(cfg: LMConfig, seed: int) -> ParamSet:
    gen = torch.Generator().manual_seed(seed)
    d = cfg.d_model
    params: ParamSet = {"lm.emb": tc.xavier_uniform(cfg.vocab_size, d, gen), "lm.out.b": tc.zeros(cfg.vocab_size)}
    for layer in range(cfg.layers):
        p = f"lm.{layer}"
        tc.init_attention(params, f"{p}.sa.", d, gen)
        init_ln(params, f"{p}.ln1", d)
        init_ln(params, f"{p}.ln2", d)
        init_ffn(params, f"{p}.ffn", d, cfg.ffn_hidden, gen)
    init_ln(params, "lm.ln_f", d)
    return params


def lm_forward(prefix: torch.Tensor, mask: torch.Tensor, params: ParamSet, cfg: LMConfig) -> torch.Tensor:
    """Next-token distributions (B, T, V) from the summary prefix alone."""
    T = prefix.shape[1]
    self_mask = causal_mask(T).unsqueeze(0) & mask.unsqueeze(1)
    x = embed(prefix, params, cfg.d_model, key="lm.emb")
    for layer in range(cfg.layers):
        p = f"lm.{layer}"
        h = ln(x, params, f"{p}.ln1")
        a, _ = tc.multi_head_attention(h, h, h, params, cfg.heads, prefix=f"{p}.sa.", mask=self_mask)
        x = x + a
        x = x + ffn(ln(x, params, f"{p}.ln2"), params, f"{p}.ffn")
    x = ln(x, params, "lm.ln_f")
    return tc.softmax(x @ params["lm.emb"].T + params["lm.out.b"], axis=-1)


def summary_tensors(summaries: Sequence[Sequence[int]]):
    """(input, target, mask) with BOS-shifted inputs and EOS-terminated targets."""
    T = max(len(s) for s in summaries) + 1
    inp = torch.full((len(summaries), T), PAD, dtype=torch.long)
    tgt = torch.full((len(summaries), T), PAD, dtype=torch.long)
    for i, s in enumerate(summaries):
        seq = list(s)
        inp[i, : len(seq) + 1] = torch.tensor([BOS] + seq)
        tgt[i, : len(seq) + 1] = torch.tensor(seq + [EOS])
    return inp, tgt, tgt != PAD


def lm_nll(params: ParamSet, cfg: LMConfig, summaries: Sequence[Sequence[int]]):
    inp, tgt, mask = summary_tensors(summaries)
    P = lm_forward(inp, mask, params, cfg)
    picked = P.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    return -(torch.log(picked + tc.LOG_EPS) * mask).sum(), int(mask.sum())


def perplexity(params: ParamSet, cfg: LMConfig, summaries: Sequence[Sequence[int]]) -> float:
    with torch.no_grad():
        nll, n = lm_nll(params, cfg, summaries)
    return math.exp(float(nll) / n)


def pretrain_lm(
    train: Sequence[Sequence[int]],
    cfg: LMConfig,
    seed: int = 0,
    epochs: int = 8,
    batch_size: int = 16,
    lr: float = 1e-3,
    heldout: Optional[Sequence[Sequence[int]]] = None,
):
    """Fit the LM on summaries; returns (params, per-epoch held-out perplexity)."""
    params = init_lm(cfg, seed)
    state = tc.AdamState()
    gen = torch.Generator().manual_seed(seed + 1)
    curve = []
    if heldout:
        curve.append(perplexity(params, cfg, heldout))
    for _ in range(epochs):
        order = torch.randperm(len(train), generator=gen).tolist()
        for i in range(0, len(order), batch_size):
            chunk = [train[j] for j in order[i : i + batch_size]]
            tc.zero_grad(params)
            nll, n = lm_nll(params, cfg, chunk)
            tc.backward(nll / len(chunk))
            tc.adam_step(params, state, lr=lr)
        if heldout:
            curve.append(perplexity(params, cfg, heldout))
    for p in params.values():
        p.requires_grad_(False)
    return params, curve


# ---------------------------------------------------------------------------
# margin
# ---------------------------------------------------------------------------


def margin(p_model, p_lm):
    """m_t = P_t(y_t | y_<t, X) - P^LM_t(y_t | y_<t)."""
    return p_model - p_lm


def max_margin_term(p_model, m, exponent: int = 5):
    """(1 - P_t) * (1 - m_t ** exponent) / 2."""
    return (1 - p_model) * (1 - m**exponent) / 2


def max_margin_loss(
    p_model: torch.Tensor, p_lm: torch.Tensor, mask: Optional[torch.Tensor] = None, exponent: int = 5
) -> torch.Tensor:
    """Sum of the max-margin terms; the LM probabilities are treated as constants."""
    m = margin(p_model, p_lm.detach())
    terms = max_margin_term(p_model, m, exponent)
    if mask is not None:
        terms = terms * mask.to(terms.dtype)
    return terms.sum()


@dataclass
class MarginRecord:
    doc_id: str
    position: int
    token: int
    p_model: float
    p_lm: float
    is_entity: bool

    @property
    def m(self) -> float:
        return margin(self.p_model, self.p_lm)


@dataclass
class MarginStats:
    count: int
    fraction_negative: float
    mean_margin: float
    histogram: List[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "fraction_negative": self.fraction_negative,
            "mean_margin": self.mean_margin,
            "histogram": self.histogram,
        }


def _stats(values: Sequence[float]) -> MarginStats:
    if not values:
        raise ValueError("no margin records")
    hist = [0] * HIST_BINS
    for m in values:
        b = int((m + 1.0) / 2.0 * HIST_BINS)
        hist[min(max(b, 0), HIST_BINS - 1)] += 1
    return MarginStats(
        count=len(values),
        fraction_negative=sum(m < 0 for m in values) / len(values),
        mean_margin=sum(values) / len(values),
        histogram=hist,
    )


def margin_stats(records: Sequence[MarginRecord]) -> Dict[str, MarginStats]:
    """Statistics over all tokens and over entity tokens only."""
    out = {"all": _stats([r.m for r in records])}
    ent = [r.m for r in records if r.is_entity]
    if ent:
        out["entity"] = _stats(ent)
    return out


def entity_positions(doc: Document) -> set:
    return {i for _, (s, t) in doc.summary_mentions for i in range(s, t)}
