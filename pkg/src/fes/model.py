"""Model configuration, parameter initialisation, batching, and the joint
forward pass (encoder -> answer selector + decoder)."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Sequence

import torch

from . import answer, decoder, encoder
from . import tensor_core as tc
from .tensor_core import ParamSet, ShapeError
from .text import BOS, EOS, PAD, Document


@dataclass
class ModelConfig:
    vocab_size: int = 200
    d_model: int = 64
    heads: int = 4
    ffn_hidden: int = 128
    enc_layers: int = 2
    gat_layers: int = 2
    dec_layers: int = 2
    leaky_slope: float = 0.01
    dropout: float = 0.1
    align_head_fraction: float = 0.5
    max_doc_len: int = 160
    max_question_len: int = 16
    max_summary_len: int = 40

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, seed: int) -> ParamSet:
    gen = torch.Generator().manual_seed(seed)
    params: ParamSet = {"emb": tc.xavier_uniform(cfg.vocab_size, cfg.d_model, gen)}
    encoder.init_params(params, cfg, gen)
    answer.init_params(params, cfg, gen)
    decoder.init_params(params, cfg, gen)
    return dict(sorted(params.items()))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def truncate_document(doc: Document, max_len: int, questions: Sequence = ()):
    """Drop trailing sentences past ``max_len`` tokens (warns).

    Entities left without mentions are removed and indices remapped; QA pairs
    whose answer disappears are dropped.
    """
    if len(doc.tokens) <= max_len:
        return doc, list(questions)
    warnings.warn(f"{doc.id}: {len(doc.tokens)} tokens exceed max length {max_len}; truncating", stacklevel=2)
    sents = [s for s in doc.sentences if s[1] <= max_len] or [(0, max_len)]
    end = sents[-1][1]
    mentions = [(e, sp) for e, sp in doc.mentions if sp[1] <= end]
    keep = sorted({e for e, _ in mentions})
    remap = {old: new for new, old in enumerate(keep)}
    new_doc = replace(
        doc,
        tokens=doc.tokens[:end],
        sentences=sents,
        entities=[doc.entities[e] for e in keep],
        mentions=[(remap[e], sp) for e, sp in mentions],
        facts=[
            replace(f, subject=remap[f.subject], object=remap[f.object], place=remap[f.place])
            for f in doc.facts
            if f.sentence < len(sents)
        ],
        summary_mentions=[(remap[e], sp) for e, sp in doc.summary_mentions if e in remap],
    )
    qs = [replace(q, answer_entity=remap[q.answer_entity]) for q in questions if q.answer_entity in remap]
    return new_doc, qs


@dataclass
class Batch:
    docs: List[Document]
    questions: List[list]
    doc_tokens: torch.Tensor  # (B, Lw)
    doc_mask: torch.Tensor
    ent_pool: torch.Tensor  # (B, E, Lw)
    ent_mask: torch.Tensor  # (B, E)
    sent_pool: torch.Tensor  # (B, S, Lw)
    sent_mask: torch.Tensor
    q_tokens: torch.Tensor  # (B, Q, Lq); padded slots hold a lone BOS
    q_mask: torch.Tensor
    q_valid: torch.Tensor  # (B, Q)
    answers: torch.Tensor  # (B, Q)
    adj: torch.Tensor  # (B, N, N), N = E + S + Q
    dec_in: torch.Tensor  # (B, T)
    dec_target: torch.Tensor
    dec_mask: torch.Tensor

    @property
    def n_questions(self) -> int:
        return self.q_tokens.shape[1]

    @property
    def size(self) -> int:
        return len(self.docs)


def collate(docs: Sequence[Document], questions: Optional[Sequence[Sequence]] = None,
            cfg: Optional[ModelConfig] = None) -> Batch:
    cfg = cfg or ModelConfig()
    questions = [list(q) for q in questions] if questions is not None else [[] for _ in docs]
    if len(questions) != len(docs):
        raise ShapeError("one question list per document required")
    pairs = [truncate_document(d, cfg.max_doc_len, q) for d, q in zip(docs, questions)]
    docs = [d for d, _ in pairs]
    questions = [q for _, q in pairs]
    B = len(docs)
    Lw = max(len(d.tokens) for d in docs)
    E = max(d.n_entities for d in docs)
    S = max(len(d.sentences) for d in docs)
    Q = max(len(q) for q in questions)
    Lq = max([len(p.question_tokens) for q in questions for p in q] + [1])
    if Lq > cfg.max_question_len:
        warnings.warn(f"question longer than {cfg.max_question_len} tokens; truncating", stacklevel=2)
        Lq = cfg.max_question_len
    T = max(min(len(d.summary), cfg.max_summary_len - 1) for d in docs) + 1
    N = E + S + Q

    doc_tokens = torch.full((B, Lw), PAD, dtype=torch.long)
    ent_pool = torch.zeros(B, E, Lw, dtype=tc.DTYPE)
    sent_pool = torch.zeros(B, S, Lw, dtype=tc.DTYPE)
    ent_mask = torch.zeros(B, E, dtype=torch.bool)
    sent_mask = torch.zeros(B, S, dtype=torch.bool)
    q_tokens = torch.full((B, Q, Lq), PAD, dtype=torch.long)
    q_tokens[:, :, 0] = BOS
    q_valid = torch.zeros(B, Q, dtype=torch.bool)
    answers = torch.zeros(B, Q, dtype=torch.long)
    adj = torch.eye(N, dtype=torch.bool).repeat(B, 1, 1)
    dec_in = torch.full((B, T), PAD, dtype=torch.long)
    dec_target = torch.full((B, T), PAD, dtype=torch.long)

    for b, (doc, qs) in enumerate(zip(docs, questions)):
        n = len(doc.tokens)
        doc_tokens[b, :n] = torch.tensor(doc.tokens)
        ep, sp = encoder.pooling_weights(doc, n)
        ent_pool[b, : doc.n_entities, :n] = ep
        sent_pool[b, : len(doc.sentences), :n] = sp
        ent_mask[b, : doc.n_entities] = True
        sent_mask[b, : len(doc.sentences)] = True
        for i, pair in enumerate(qs):
            toks = pair.question_tokens[:Lq]
            if not any(t != PAD for t in toks):
                raise ShapeError(f"{doc.id}: question {i} is empty")
            q_tokens[b, i, :] = PAD
            q_tokens[b, i, : len(toks)] = torch.tensor(toks)
            q_valid[b, i] = True
            answers[b, i] = pair.answer_entity
        graph = encoder.build_graph(doc, qs)
        n_e, n_s = doc.n_entities, len(doc.sentences)

        def slot(k: int) -> int:
            if k < n_e:
                return k
            if k < n_e + n_s:
                return E + (k - n_e)
            return E + S + (k - n_e - n_s)

        for src, dst in graph.edges:
            adj[b, slot(dst), slot(src)] = True
        y = doc.summary[: cfg.max_summary_len - 1]
        dec_in[b, : len(y) + 1] = torch.tensor([BOS] + y)
        dec_target[b, : len(y) + 1] = torch.tensor(y + [EOS])

    return Batch(
        docs=list(docs),
        questions=questions,
        doc_tokens=doc_tokens,
        doc_mask=doc_tokens != PAD,
        ent_pool=ent_pool,
        ent_mask=ent_mask,
        sent_pool=sent_pool,
        sent_mask=sent_mask,
        q_tokens=q_tokens,
        q_mask=q_tokens != PAD,
        q_valid=q_valid,
        answers=answers,
        adj=adj,
        dec_in=dec_in,
        dec_target=dec_target,
        dec_mask=dec_target != PAD,
    )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    enc: encoder.EncoderOutput
    A: Optional[torch.Tensor]  # (B, Q, E) or None without questions
    dec: decoder.DecoderOutput


def forward(params: ParamSet, batch: Batch, cfg: ModelConfig, rng: Optional[torch.Generator] = None) -> ForwardOutput:
    """Joint pass; dropout is active only when ``rng`` is given."""
    enc = encoder.encode(batch, params, cfg, rng)
    A = None
    if batch.n_questions:
        h_qe, _ = answer.question_aware_entities(enc.H_e, enc.H_u, batch.q_mask, params, cfg)
        A = answer.answer_probs(h_qe, params, batch.ent_mask)
    dec = decoder.decoder_forward(
        batch.dec_in, batch.dec_mask, enc.H_e, batch.ent_mask, enc.H_w, batch.doc_mask, params, cfg, rng
    )
    return ForwardOutput(enc, A, dec)


def expand_encoding(enc: encoder.EncoderOutput, batch: Batch, index: int, n: int):
    """Encoder tensors of document ``index`` repeated ``n`` times (for decoding)."""
    return (
        enc.H_e[index : index + 1].expand(n, -1, -1),
        batch.ent_mask[index : index + 1].expand(n, -1),
        enc.H_w[index : index + 1].expand(n, -1, -1),
        batch.doc_mask[index : index + 1].expand(n, -1),
    )


def step_function(params: ParamSet, cfg: ModelConfig, enc: encoder.EncoderOutput, batch: Batch, index: int):
    """Next-token log-probabilities for prefixes of one document."""

    def step(prefixes: torch.Tensor) -> torch.Tensor:
        H_e, ent_mask, H_w, doc_mask = expand_encoding(enc, batch, index, prefixes.shape[0])
        out = decoder.decoder_forward(prefixes, prefixes != PAD, H_e, ent_mask, H_w, doc_mask, params, cfg)
        return torch.log_softmax(out.logits[:, -1], dim=-1)

    return step


def batch_step_function(params: ParamSet, cfg: ModelConfig, enc: encoder.EncoderOutput, batch: Batch):
    """Next-token log-probabilities for one prefix per document of ``batch``."""

    def step(prefixes: torch.Tensor) -> torch.Tensor:
        out = decoder.decoder_forward(
            prefixes, prefixes != PAD, enc.H_e, batch.ent_mask, enc.H_w, batch.doc_mask, params, cfg
        )
        return torch.log_softmax(out.logits[:, -1], dim=-1)

    return step
