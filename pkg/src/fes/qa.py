"""QA-pair construction: candidates, template questions, answerability filter,
ROUGE-L oracle selection, and the lightweight importance ranker used at
validation/test time."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from . import tensor_core as tc
from .metrics import rouge_l
from .text import WH_WORDS, DataError, Document, Fact, Vocabulary, detokenize, tokenize

DEFAULT_K = 8
SLOTS = ("subject", "object", "place")


class QuestionGenerationError(ValueError):
    pass


@dataclass
class QAPair:
    question_tokens: List[int]
    answer_entity: int
    answer_tokens: List[int]
    oracle_score: float = 0.0
    is_oracle: bool = False

    def to_json(self, vocab: Vocabulary) -> dict:
        return {
            "question": detokenize(self.question_tokens, vocab),
            "answer": self.answer_entity,
            "oracle_score": self.oracle_score,
            "is_oracle": self.is_oracle,
        }

    @classmethod
    def from_json(cls, obj: dict, vocab: Vocabulary, doc: Document) -> "QAPair":
        answer = int(obj["answer"])
        if not 0 <= answer < doc.n_entities:
            raise ValueError(f"answer entity {answer} out of range")
        return cls(
            question_tokens=tokenize(obj["question"], vocab),
            answer_entity=answer,
            answer_tokens=tokenize(doc.entities[answer], vocab),
            oracle_score=float(obj.get("oracle_score", 0.0)),
            is_oracle=bool(obj.get("is_oracle", False)),
        )


def question_text(pair: QAPair, vocab: Vocabulary) -> str:
    return detokenize(pair.question_tokens, vocab)


def propose_candidates(doc: Document) -> List[int]:
    """All distinct mentioned entities in alphabetical order."""
    present = {e for e, _ in doc.mentions}
    return sorted(present, key=lambda e: doc.entities[e])


def _question_words(doc: Document, fact: Fact, slot: str) -> List[str]:
    words = []
    for name in SLOTS:
        if name == slot:
            words.append(WH_WORDS[slot])
        else:
            words.extend(doc.entities[fact.slot(name)].split())
        if name == "subject":
            words.append(fact.verb)
        elif name == "object":
            words.append("in")
    if slot == "place":
        words.remove("in")
    return words + ["?"]


def generate_question(doc: Document, answer: int, vocab: Vocabulary) -> List[int]:
    """Blank the answer's slot in the earliest fact that contains it."""
    for fact in doc.facts:
        for slot in SLOTS:
            if fact.slot(slot) == answer:
                return [vocab.id(w) for w in _question_words(doc, fact, slot)]
    raise QuestionGenerationError(f"{doc.id}: entity {doc.entities[answer]!r} appears in no fact")


def make_pair(doc: Document, answer: int, vocab: Vocabulary) -> QAPair:
    return QAPair(generate_question(doc, answer, vocab), answer, tokenize(doc.entities[answer], vocab))


def filter_answerable(pairs: Sequence[QAPair], doc: Document, vocab: Vocabulary) -> List[QAPair]:
    """Keep pairs whose question resolves to exactly their own answer."""
    templates = [
        ([vocab.id(w) for w in _question_words(doc, fact, slot)], fact.slot(slot))
        for fact in doc.facts
        for slot in SLOTS
    ]
    kept = []
    for pair in pairs:
        answers = {ans for q, ans in templates if q == pair.question_tokens}
        if answers == {pair.answer_entity}:
            kept.append(pair)
    return kept


def score_pairs(pairs: Sequence[QAPair], summary: Sequence[int]) -> List[QAPair]:
    return [replace(p, oracle_score=rouge_l(p.answer_tokens, summary).f1) for p in pairs]


def select_oracle(pairs: Sequence[QAPair], summary: Sequence[int], k: int = DEFAULT_K,
                  vocab: Optional[Vocabulary] = None) -> List[QAPair]:
    """Top-``k`` pairs by ROUGE-L F1 of the answer against ``summary``.

    Ties are broken alphabetically on the answer string (token ids when no
    vocabulary is given).  The returned pairs are flagged ``is_oracle``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = score_pairs(pairs, summary)
    if vocab is not None:
        key = lambda p: (-p.oracle_score, detokenize(p.answer_tokens, vocab), detokenize(p.question_tokens, vocab))
    else:
        key = lambda p: (-p.oracle_score, p.answer_tokens, p.question_tokens)
    ranked = sorted(scored, key=key)
    return [replace(p, is_oracle=True) for p in ranked[:k]]


def build_qa_pairs(doc: Document, vocab: Vocabulary, k: int = DEFAULT_K) -> List[QAPair]:
    """Full pipeline for one document: every answerable pair, oracle-flagged,
    in alphabetical question order."""
    candidates = [make_pair(doc, e, vocab) for e in propose_candidates(doc) if _in_fact(doc, e)]
    pairs = score_pairs(filter_answerable(candidates, doc, vocab), doc.summary)
    oracle = {(tuple(p.question_tokens), p.answer_entity) for p in select_oracle(pairs, doc.summary, k, vocab)}
    flagged = [replace(p, is_oracle=(tuple(p.question_tokens), p.answer_entity) in oracle) for p in pairs]
    return sorted(flagged, key=lambda p: question_text(p, vocab))


def _in_fact(doc: Document, entity: int) -> bool:
    return any(entity in (f.subject, f.object, f.place) for f in doc.facts)


# ---------------------------------------------------------------------------
# importance ranker
# ---------------------------------------------------------------------------

N_FEATURES = 5


def pair_features(pair: QAPair, doc: Document) -> List[float]:
    """[mention count, first-mention position, first-mention sentence position,
    hub frequency, bias]; positions are fractions of document length."""
    counts = [0] * doc.n_entities
    for e, _ in doc.mentions:
        counts[e] += 1
    spans = doc.entity_spans(pair.answer_entity)
    first = min(spans)
    n_tok = max(len(doc.tokens), 1)
    n_sent = max(len(doc.sentences), 1)
    sent_ids = {doc.sentence_of(s) for s in spans}
    # strongest co-mentioned entity frequency across the answer's sentences
    hub = 0
    for e, span in doc.mentions:
        if doc.sentence_of(span) in sent_ids:
            hub = max(hub, counts[e])
    return [
        float(counts[pair.answer_entity]),
        first[0] / n_tok,
        doc.sentence_of(first) / n_sent,
        float(hub),
        1.0,
    ]


class Ranker:
    """Logistic scorer over :func:`pair_features`, trained on oracle membership."""

    def __init__(self, weights: Optional[torch.Tensor] = None, mean=None, std=None):
        self.weights = weights
        self.mean = mean
        self.std = std

    @property
    def trained(self) -> bool:
        return self.weights is not None

    def _standardize(self, x: torch.Tensor) -> torch.Tensor:
        z = (x - self.mean) / self.std
        z[:, -1] = 1.0
        return z

    def fit(self, features: Sequence[Sequence[float]], labels: Sequence[float], steps: int = 500,
            lr: float = 0.1, l2: float = 1e-4) -> "Ranker":
        x = tc.tensor(features)
        y = tc.tensor(labels)
        self.mean = x.mean(0)
        self.std = x.std(0, unbiased=False).clamp_min(1e-6)
        x = self._standardize(x)
        w = torch.zeros(x.shape[1], dtype=tc.DTYPE, requires_grad=True)
        params = {"w": w}
        state = tc.AdamState()
        for _ in range(steps):
            tc.zero_grad(params)
            logits = x @ w
            loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, y) + l2 * (w * w).sum()
            tc.backward(loss)
            tc.adam_step(params, state, lr=lr)
        self.weights = w.detach()
        return self

    def score(self, features: Sequence[Sequence[float]]) -> List[float]:
        if not self.trained:
            raise tc.ContractError("ranker used before training")
        x = self._standardize(tc.tensor(features))
        return (x @ self.weights).tolist()

    def state_dict(self) -> dict:
        return {"weights": self.weights, "mean": self.mean, "std": self.std}

    @classmethod
    def from_state_dict(cls, state: dict) -> "Ranker":
        return cls(state["weights"], state["mean"], state["std"])


def fit_ranker(docs: Sequence[Document]) -> Ranker:
    feats, labels = [], []
    for doc in docs:
        for pair in doc.qa_pairs:
            feats.append(pair_features(pair, doc))
            labels.append(1.0 if pair.is_oracle else 0.0)
    if not feats:
        raise ValueError("no QA pairs to train the ranker on")
    return Ranker().fit(feats, labels)


def rank_for_inference(pairs: Sequence[QAPair], doc: Document, ranker: Ranker,
                       k: Optional[int] = None) -> List[QAPair]:
    """Pairs by predicted importance (stable: input order breaks ties)."""
    if not ranker.trained:
        raise tc.ContractError("ranker used before training")
    if not pairs:
        return []
    scores = ranker.score([pair_features(p, doc) for p in pairs])
    order = sorted(range(len(pairs)), key=lambda i: -scores[i])
    ranked = [pairs[i] for i in order]
    return ranked if k is None else ranked[:k]


# ---------------------------------------------------------------------------
# file format: one JSON line per document {"id": ..., "pairs": [...]}
# ---------------------------------------------------------------------------


def write_qa(path, docs: Sequence[Document], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            rec = {"id": doc.id, "pairs": [p.to_json(vocab) for p in doc.qa_pairs]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_qa(path, docs: Sequence[Document], vocab: Vocabulary) -> None:
    """Attach QA pairs from ``path`` to ``docs`` (matched by id)."""
    by_id = {d.id: d for d in docs}
    path = Path(path)
    if not path.exists():
        raise DataError(f"QA file not found: {path}")
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        doc = by_id.get(rec["id"])
        if doc is None:
            raise DataError(f"QA file refers to unknown document {rec['id']!r}")
        try:
            doc.qa_pairs = [QAPair.from_json(p, vocab, doc) for p in rec["pairs"]]
        except ValueError as exc:
            raise DataError(f"{doc.id}: {exc}") from exc
