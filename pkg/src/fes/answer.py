"""QA head: question-aware entity representations and answer distributions."""

from __future__ import annotations

from typing import Optional

import torch

from . import tensor_core as tc
from .layers import ffn, init_ffn
from .tensor_core import LOG_EPS, ParamSet, ShapeError
from .encoder import StructureError


def init_params(params: ParamSet, cfg, gen: torch.Generator) -> None:
    tc.init_attention(params, "qa.att.", cfg.d_model, gen)
    init_ffn(params, "qa.ffn", cfg.d_model, cfg.ffn_hidden, gen, d_out=1)


def question_aware_entities(
    H_e: torch.Tensor, H_u: torch.Tensor, q_mask: torch.Tensor, params: ParamSet, cfg
):
    """Entities attend over each question's tokens.

    H_e: (B, E, d); H_u: (B, Q, Lq, d); q_mask: (B, Q, Lq).
    Returns h_qe (B, Q, E, d) = H_e + MHAtt(H_e, H_u^i, H_u^i) and the
    attention weights (B, Q, heads, E, Lq).
    """
    if H_e.shape[0] != H_u.shape[0] or H_e.shape[-1] != H_u.shape[-1]:
        raise ShapeError("entity and question features do not line up")
    B, Q = H_u.shape[:2]
    query = H_e.unsqueeze(1).expand(B, Q, *H_e.shape[1:])
    out, weights = tc.multi_head_attention(
        query, H_u, H_u, params, cfg.heads, prefix="qa.att.", mask=q_mask.unsqueeze(-2)
    )
    return query + out, weights


def answer_logits(h_qe: torch.Tensor, params: ParamSet) -> torch.Tensor:
    return ffn(h_qe, params, "qa.ffn").squeeze(-1)


def answer_probs(h_qe: torch.Tensor, params: ParamSet, ent_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """A^i: softmax over the entity axis of FFN(h_qe); returns (B, Q, E)."""
    logits = answer_logits(h_qe, params)
    if logits.shape[-1] == 0:
        raise StructureError("no entities to answer with")
    mask = None if ent_mask is None else ent_mask.unsqueeze(-2)
    return tc.softmax(logits, axis=-1, mask=mask)


def qa_loss(A: torch.Tensor, gold: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Negative log-likelihood of the gold entity, summed over questions."""
    if gold.shape != A.shape[:-1]:
        raise ShapeError(f"gold shape {tuple(gold.shape)} does not match answers {tuple(A.shape[:-1])}")
    if valid is None:
        valid = torch.ones_like(gold, dtype=torch.bool)
    if ((gold < 0) | (gold >= A.shape[-1]))[valid].any():
        raise IndexError("gold entity index out of range")
    picked = A.gather(-1, gold.clamp(0, A.shape[-1] - 1).unsqueeze(-1)).squeeze(-1)
    nll = -torch.log(picked + LOG_EPS)
    return (nll * valid.to(A.dtype)).sum()
