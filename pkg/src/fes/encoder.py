"""Multi-task graph encoder.

Token-level transformer over the document and each question, then a graph
with one node per entity, sentence and question, initialised by mean
pooling and refined by GAT + feed-forward iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Set, Tuple

import torch

from . import tensor_core as tc
from .layers import dropout, embed, ffn, init_ffn, init_ln, ln
from .tensor_core import ParamSet, ShapeError
from .text import Document


class StructureError(ValueError):
    pass


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


@dataclass
class SemanticGraph:
    nodes: List[Tuple[str, int]]  # (kind, index within kind)
    edges: Set[Tuple[int, int]]  # directed (src, dst); messages flow src -> dst
    n_entities: int
    n_sentences: int
    n_questions: int
    node_features: Optional[torch.Tensor] = field(default=None, repr=False)

    def neighbors(self, i: int) -> List[int]:
        return sorted(j for j, k in self.edges if k == i)

    def adjacency(self) -> torch.Tensor:
        """Bool matrix ``adj[i, j]`` = node j is in the neighbourhood of node i."""
        n = len(self.nodes)
        adj = torch.zeros(n, n, dtype=torch.bool)
        for j, i in self.edges:
            adj[i, j] = True
        return adj


def linked_sentences(question: Sequence[int], doc: Document) -> List[int]:
    """Sentences sharing the most distinctive tokens with ``question``.

    Tokens present in every sentence carry no signal and are ignored; with
    no overlap at all the question links to every sentence.
    """
    sent_sets = [set(doc.tokens[s:e]) for s, e in doc.sentences]
    common = set.intersection(*sent_sets) if sent_sets else set()
    q = set(question) - common
    overlap = [len(q & s) for s in sent_sets]
    best = max(overlap, default=0)
    if best == 0:
        return list(range(len(sent_sets)))
    return [i for i, o in enumerate(overlap) if o == best]


def build_graph(doc: Document, questions: Sequence = ()) -> SemanticGraph:
    """Entity, sentence and question nodes with reverse edges and self-loops.

    ``questions`` are QAPair objects (or raw token lists), already in
    alphabetical order.
    """
    n_e, n_s, n_q = doc.n_entities, len(doc.sentences), len(questions)
    nodes = [("entity", i) for i in range(n_e)] + [("sentence", i) for i in range(n_s)] + [
        ("question", i) for i in range(n_q)
    ]
    edges: Set[Tuple[int, int]] = set()
    for e, span in doc.mentions:
        s = doc.sentence_of(span)
        edges.add((n_e + s, e))
    for qi, q in enumerate(questions):
        toks = getattr(q, "question_tokens", q)
        for s in linked_sentences(toks, doc):
            edges.add((n_e + n_s + qi, n_e + s))
    edges |= {(dst, src) for src, dst in edges}
    edges |= {(i, i) for i in range(len(nodes))}
    for e in range(n_e):
        if not any((n_e + s, e) in edges for s in range(n_s)):
            raise StructureError(f"{doc.id}: entity {doc.entities[e]!r} has no mention")
    return SemanticGraph(nodes, edges, n_e, n_s, n_q)


def pooling_weights(doc: Document, length: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Rows averaging token vectors into entity and sentence nodes.

    Entity rows average span means (token-level then span-level pooling).
    """
    ent = torch.zeros(doc.n_entities, length, dtype=tc.DTYPE)
    counts = [0] * doc.n_entities
    for e, _ in doc.mentions:
        counts[e] += 1
    for e, (s, t) in doc.mentions:
        if t <= s:
            raise StructureError(f"{doc.id}: empty mention span")
        ent[e, s:t] += 1.0 / ((t - s) * counts[e])
    sent = torch.zeros(len(doc.sentences), length, dtype=tc.DTYPE)
    for i, (s, t) in enumerate(doc.sentences):
        if t <= s:
            raise StructureError(f"{doc.id}: empty sentence span")
        sent[i, s:t] = 1.0 / (t - s)
    return ent, sent


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(params: ParamSet, cfg, gen: torch.Generator) -> None:
    d = cfg.d_model
    for layer in range(cfg.enc_layers):
        p = f"enc.{layer}"
        tc.init_attention(params, f"{p}.sa.", d, gen)
        init_ln(params, f"{p}.ln1", d)
        init_ln(params, f"{p}.ln2", d)
        init_ffn(params, f"{p}.ffn", d, cfg.ffn_hidden, gen)
    init_ln(params, "enc.ln_f", d)
    for layer in range(cfg.gat_layers):
        p = f"gat.{layer}"
        params[f"{p}.W_a"] = tc.xavier_uniform(2 * d, 1, gen)
        for name in ("W_b", "W_c", "W_d"):
            params[f"{p}.{name}"] = tc.xavier_uniform(d, d, gen)
        init_ln(params, f"{p}.ln", d)
        init_ffn(params, f"{p}.ffn", d, cfg.ffn_hidden, gen)
    init_ln(params, "graph.ln_f", d)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def encode_tokens(tokens: torch.Tensor, mask: torch.Tensor, params: ParamSet, cfg, rng=None) -> torch.Tensor:
    """Pre-LN transformer encoder; ``tokens``/``mask`` are (..., L)."""
    if (mask.sum(-1) == 0).any():
        raise ShapeError("cannot encode an all-PAD sequence")
    lead = tokens.shape[:-1]
    tokens = tokens.reshape(-1, tokens.shape[-1])
    key_mask = mask.reshape(-1, 1, mask.shape[-1])
    x = dropout(embed(tokens, params, cfg.d_model), cfg.dropout, rng)
    for layer in range(cfg.enc_layers):
        p = f"enc.{layer}"
        h, _ = tc.multi_head_attention(
            *(ln(x, params, f"{p}.ln1"),) * 3, params, cfg.heads, prefix=f"{p}.sa.", mask=key_mask
        )
        x = x + dropout(h, cfg.dropout, rng)
        x = x + dropout(ffn(ln(x, params, f"{p}.ln2"), params, f"{p}.ffn"), cfg.dropout, rng)
    x = ln(x, params, "enc.ln_f")
    return x.reshape(*lead, *x.shape[-2:])


def init_node_features(
    H_w: torch.Tensor,
    ent_pool: torch.Tensor,
    sent_pool: torch.Tensor,
    H_u: Optional[torch.Tensor] = None,
    q_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean-pooled node features laid out as [entities | sentences | questions].

    H_w: (B, L, d); pools: (B, n, L); H_u: (B, Q, Lq, d); q_mask: (B, Q, Lq).
    """
    parts = [ent_pool @ H_w, sent_pool @ H_w]
    if H_u is not None and H_u.shape[1] > 0:
        w = q_mask.to(tc.DTYPE)
        denom = w.sum(-1, keepdim=True).clamp_min(1.0)
        parts.append((w.unsqueeze(-1) * H_u).sum(-2) / denom)
    return torch.cat(parts, dim=1)


def gat_attention(h: torch.Tensor, adj: torch.Tensor, params: ParamSet, layer: int, slope: float) -> torch.Tensor:
    """alpha[b, i, j] over the neighbourhood of node i."""
    p = f"gat.{layer}"
    d = h.shape[-1]
    w_a = params[f"{p}.W_a"]
    own = (h @ params[f"{p}.W_b"]) @ w_a[:d]  # (B, N, 1), node i
    nbr = (h @ params[f"{p}.W_c"]) @ w_a[d:]  # (B, N, 1), neighbour j
    z = torch.nn.functional.leaky_relu(own + nbr.transpose(-1, -2), negative_slope=slope)
    return tc.softmax(z, axis=-1, mask=adj)


def gat_layer(h: torch.Tensor, adj: torch.Tensor, params: ParamSet, layer: int, slope: float = 0.01):
    """One GAT update with residual: h_i + sigmoid(sum_j alpha_ij W_d h_j).

    Returns the updated features and the attention matrix.
    """
    if (adj.sum(-1) == 0).any():
        raise StructureError("isolated node in graph")
    alpha = gat_attention(h, adj, params, layer, slope)
    msg = alpha @ (h @ params[f"gat.{layer}.W_d"])
    return h + torch.sigmoid(msg), alpha


def graph_forward(h: torch.Tensor, adj: torch.Tensor, params: ParamSet, cfg, rng=None):
    alphas = []
    for layer in range(cfg.gat_layers):
        h, alpha = gat_layer(h, adj, params, layer, cfg.leaky_slope)
        alphas.append(alpha)
        h = h + dropout(ffn(ln(h, params, f"gat.{layer}.ln"), params, f"gat.{layer}.ffn"), cfg.dropout, rng)
    return ln(h, params, "graph.ln_f"), alphas


@dataclass
class EncoderOutput:
    H_w: torch.Tensor  # (B, Lw, d)
    H_e: torch.Tensor  # (B, E, d)
    H_s: torch.Tensor  # (B, S, d)
    H_q: torch.Tensor  # (B, Q, d)
    H_u: Optional[torch.Tensor]  # (B, Q, Lq, d)
    gat_alphas: List[torch.Tensor]


def encode(batch, params: ParamSet, cfg, rng=None) -> EncoderOutput:
    H_w = encode_tokens(batch.doc_tokens, batch.doc_mask, params, cfg, rng)
    H_u = None
    n_q = batch.n_questions
    if n_q:
        H_u = encode_tokens(batch.q_tokens, batch.q_mask, params, cfg, rng)
    h0 = init_node_features(H_w, batch.ent_pool, batch.sent_pool, H_u, batch.q_mask)
    h, alphas = graph_forward(h0, batch.adj, params, cfg, rng)
    E, S = batch.ent_pool.shape[1], batch.sent_pool.shape[1]
    return EncoderOutput(H_w, h[:, :E], h[:, E : E + S], h[:, E + S :], H_u, alphas)
