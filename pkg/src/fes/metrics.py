"""Full-length ROUGE-1/2/L F1 and QA exact match / token F1.

No stemming or stopword removal; inputs are token sequences (ids or strings).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Hashable, List, Sequence, Tuple


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: float, hyp_total: int, ref_total: int) -> "RougeScore":
        p = overlap / hyp_total if hyp_total else 0.0
        r = overlap / ref_total if ref_total else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(hyp: Sequence[Hashable], ref: Sequence[Hashable], n: int = 1) -> RougeScore:
    if n < 1:
        raise ValueError("n must be >= 1")
    h, r = _ngrams(hyp, n), _ngrams(ref, n)
    overlap = sum((h & r).values())
    return RougeScore.from_counts(overlap, sum(h.values()), sum(r.values()))


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> RougeScore:
    return RougeScore.from_counts(lcs_length(hyp, ref), len(hyp), len(ref))


def token_f1(pred: Sequence[Hashable], gold: Sequence[Hashable]) -> float:
    common = sum((Counter(pred) & Counter(gold)).values())
    if common == 0:
        return 0.0
    p = common / len(pred)
    r = common / len(gold)
    return 2 * p * r / (p + r)


def qa_em_f1(predicted: int, gold: int, entity_strings: Sequence[str]) -> Tuple[int, float]:
    """Exact match on entity identity; F1 on whitespace tokens of the entity strings."""
    em = int(predicted == gold)
    f1 = 1.0 if em else token_f1(entity_strings[predicted].split(), entity_strings[gold].split())
    return em, f1


def average_rouge(hyps: List[Sequence[Hashable]], refs: List[Sequence[Hashable]]) -> dict:
    if len(hyps) != len(refs):
        raise ValueError("hypothesis/reference counts differ")
    if not hyps:
        raise ValueError("no summaries to score")
    out = {"rouge1": 0.0, "rouge2": 0.0, "rougeL": 0.0}
    for h, r in zip(hyps, refs):
        out["rouge1"] += rouge_n(h, r, 1).f1
        out["rouge2"] += rouge_n(h, r, 2).f1
        out["rougeL"] += rouge_l(h, r).f1
    return {k: v / len(hyps) for k, v in out.items()}
