"""QA-attention-enhanced decoder, its losses, and decoding.

Each layer runs masked self-attention, entity-level cross-attention, then
word-level cross-attention queried by the entity context, then a
feed-forward block.  The entity attention of the top layer, averaged over
the alignment heads, is what the KL term aligns with the QA answers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import torch

from . import tensor_core as tc
from .layers import causal_mask, dropout, embed, ffn, init_ffn, init_ln, ln
from .tensor_core import LOG_EPS, ContractError, ParamSet, ShapeError
from .text import BOS, EOS


def init_params(params: ParamSet, cfg, gen: torch.Generator) -> None:
    d = cfg.d_model
    for layer in range(cfg.dec_layers):
        p = f"dec.{layer}"
        for block in ("sa", "ca_e", "ca_w"):
            tc.init_attention(params, f"{p}.{block}.", d, gen)
        for i in range(1, 5):
            init_ln(params, f"{p}.ln{i}", d)
        init_ffn(params, f"{p}.ffn", d, cfg.ffn_hidden, gen)
    init_ln(params, "dec.ln_f", d)
    params["out.b"] = tc.zeros(cfg.vocab_size)


def align_heads(cfg) -> int:
    return max(1, int(math.ceil(cfg.heads * cfg.align_head_fraction)))


@dataclass
class DecoderOutput:
    logits: torch.Tensor  # (B, T, V)
    probs: torch.Tensor  # (B, T, V)
    entity_attention: torch.Tensor  # (B, T, E), alignment heads of the top layer
    entity_attention_heads: torch.Tensor  # (B, heads, T, E), top layer


def decoder_forward(
    dec_in: torch.Tensor,
    dec_mask: torch.Tensor,
    H_e: torch.Tensor,
    ent_mask: torch.Tensor,
    H_w: torch.Tensor,
    doc_mask: torch.Tensor,
    params: ParamSet,
    cfg,
    rng: Optional[torch.Generator] = None,
) -> DecoderOutput:
    """Teacher-forced pass over all positions at once (causal mask)."""
    if H_e is None or H_w is None:
        raise ContractError("decoder needs encoder outputs")
    if H_e.shape[0] != dec_in.shape[0] or H_w.shape[0] != dec_in.shape[0]:
        raise ShapeError("batch sizes of decoder input and encoder output differ")
    T = dec_in.shape[1]
    self_mask = causal_mask(T).unsqueeze(0) & dec_mask.unsqueeze(1)
    ent_keys = ent_mask.unsqueeze(1)
    word_keys = doc_mask.unsqueeze(1)
    x = dropout(embed(dec_in, params, cfg.d_model), cfg.dropout, rng)
    ent_w = None
    for layer in range(cfg.dec_layers):
        p = f"dec.{layer}"
        h = ln(x, params, f"{p}.ln1")
        u, _ = tc.multi_head_attention(h, h, h, params, cfg.heads, prefix=f"{p}.sa.", mask=self_mask)
        x = x + dropout(u, cfg.dropout, rng)
        c, ent_w = tc.multi_head_attention(
            ln(x, params, f"{p}.ln2"), H_e, H_e, params, cfg.heads, prefix=f"{p}.ca_e.", mask=ent_keys
        )
        x = x + dropout(c, cfg.dropout, rng)
        v, _ = tc.multi_head_attention(
            ln(x, params, f"{p}.ln3"), H_w, H_w, params, cfg.heads, prefix=f"{p}.ca_w.", mask=word_keys
        )
        x = x + dropout(v, cfg.dropout, rng)
        x = x + dropout(ffn(ln(x, params, f"{p}.ln4"), params, f"{p}.ffn"), cfg.dropout, rng)
    x = ln(x, params, "dec.ln_f")
    logits = x @ params["emb"].T + params["out.b"]
    probs = tc.softmax(logits, axis=-1)
    e_t = ent_w[:, : align_heads(cfg)].mean(dim=1)
    return DecoderOutput(logits, probs, e_t, ent_w)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def aggregate(dists: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Renormalised sum of (B, n, E) distributions over the rows flagged valid."""
    total = (dists * valid.unsqueeze(-1).to(dists.dtype)).sum(1)
    mass = total.sum(-1, keepdim=True)
    if (mass.detach() <= 0).any():
        raise ContractError("attention aggregate has zero mass")
    return total / mass


def kl_alignment_loss(
    A: torch.Tensor,
    q_valid: torch.Tensor,
    E: torch.Tensor,
    t_mask: torch.Tensor,
    bidirectional: bool = True,
) -> torch.Tensor:
    """KL between the aggregated QA answers and aggregated decoder entity attention.

    A: (B, Q, E); E: (B, T, E).  With ``bidirectional`` the symmetric
    0.5 * (KL(p||q) + KL(q||p)) is used, otherwise KL(p||q).
    """
    if A.shape[-1] != E.shape[-1]:
        raise ShapeError("QA and decoder attention cover different entity sets")
    p = aggregate(A, q_valid)
    q = aggregate(E, t_mask)
    kl = tc.kl_divergence(p, q)
    if bidirectional:
        kl = 0.5 * (kl + tc.kl_divergence(q, p))
    return kl.sum()


def gold_probs(P: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return P.gather(-1, target.unsqueeze(-1)).squeeze(-1)


def summarization_loss(P: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """-sum_t ln P_t(y_t) over non-PAD target positions."""
    if P.shape[:-1] != target.shape or target.shape != mask.shape:
        raise ShapeError("distribution, target and mask lengths differ")
    nll = -torch.log(gold_probs(P, target) + LOG_EPS)
    return (nll * mask.to(P.dtype)).sum()


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

StepFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class Hypothesis:
    tokens: List[int]  # without BOS, ending in EOS
    log_prob: float

    @property
    def score(self) -> float:
        return self.log_prob / max(len(self.tokens), 1)


def beam_search(step_fn: StepFn, beam: int, max_len: int, bos: int = BOS, eos: int = EOS) -> Hypothesis:
    """Length-normalised beam search.

    ``step_fn`` maps (n, t) prefixes to (n, V) next-token log-probabilities.
    Each step keeps the ``beam`` best candidates by cumulative log-prob
    (ties: lower token id, then earlier beam); candidates ending in EOS are
    finished.  At ``max_len`` EOS is forced.  The finished hypothesis with
    the best per-token log-prob wins.
    """
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be >= 1")
    live: List[Tuple[List[int], float]] = [([], 0.0)]
    finished: List[Hypothesis] = []
    for t in range(max_len):
        prefixes = torch.tensor([[bos] + seq for seq, _ in live], dtype=torch.long)
        logp = step_fn(prefixes)
        last = t == max_len - 1
        cands = []
        for b, (seq, score) in enumerate(live):
            row = logp[b].tolist()
            toks = [eos] if last else range(len(row))
            for tok in toks:
                cands.append((score + row[tok], tok, b))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_live = []
        for score, tok, b in cands[:beam]:
            seq = live[b][0] + [tok]
            if tok == eos:
                finished.append(Hypothesis(seq, score))
            else:
                new_live.append((seq, score))
        if last:
            for score, tok, b in cands[beam:]:
                finished.append(Hypothesis(live[b][0] + [tok], score))
        live = new_live
        if not live:
            break
    return max(finished, key=lambda h: (h.score, [-x for x in h.tokens]))


def exhaustive_search(step_fn: StepFn, max_len: int, vocab_size: int, bos: int = BOS, eos: int = EOS) -> Hypothesis:
    """Score every sequence up to ``max_len`` (EOS forced at the end)."""
    best: Optional[Hypothesis] = None

    def visit(seq: List[int], score: float) -> None:
        nonlocal best
        logp = step_fn(torch.tensor([[bos] + seq], dtype=torch.long))[0].tolist()
        toks = [eos] if len(seq) == max_len - 1 else range(vocab_size)
        for tok in toks:
            s = score + logp[tok]
            if tok == eos:
                h = Hypothesis(seq + [tok], s)
                if best is None or (h.score, [-x for x in h.tokens]) > (best.score, [-x for x in best.tokens]):
                    best = h
            else:
                visit(seq + [tok], s)

    visit([], 0.0)
    return best


def greedy_batch(step_fn: StepFn, batch: int, max_len: int, bos: int = BOS, eos: int = EOS) -> List[Hypothesis]:
    """Greedy decoding of ``batch`` independent sequences in lock-step."""
    seqs = torch.full((batch, 1), bos, dtype=torch.long)
    done = torch.zeros(batch, dtype=torch.bool)
    scores = torch.zeros(batch, dtype=tc.DTYPE)
    for t in range(max_len):
        logp = step_fn(seqs)
        if t == max_len - 1:
            nxt = torch.full((batch,), eos, dtype=torch.long)
        else:
            nxt = logp.argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, eos), nxt)
        scores = scores + torch.where(done, torch.zeros_like(scores), logp.gather(-1, nxt[:, None]).squeeze(-1))
        seqs = torch.cat([seqs, nxt[:, None]], dim=1)
        done = done | (nxt == eos)
        if done.all():
            break
    out = []
    for b in range(batch):
        toks = seqs[b, 1:].tolist()
        toks = toks[: toks.index(eos) + 1] if eos in toks else toks
        out.append(Hypothesis(toks, float(scores[b])))
    return out


def strip_special(tokens: Sequence[int]) -> List[int]:
    return [t for t in tokens if t not in (BOS, EOS)]
