import random

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from fes import qa
from fes import tensor_core as tc
from fes.metrics import rouge_l
from fes.text import Vocabulary, _assemble, detokenize, tokenize

WORDS = ["alice", "bob", "carol", "dave", "paris", "rome", "oslo", "visited", "praised", "signed", "funded",
         "in", "at", "was", "by", ",", ".", "?", "who", "what", "where", "new", "york"]


@pytest.fixture
def vocab():
    return Vocabulary(WORDS)


def make_doc(vocab, facts, topic=(0,)):
    return _assemble("toy", facts, list(topic), vocab)


def question(doc, answer_name, vocab):
    return detokenize(qa.generate_question(doc, doc.entities.index(answer_name), vocab), vocab)


def test_template_question(vocab):
    doc = make_doc(vocab, [("alice", "visited", "bob", "paris")])
    assert question(doc, "alice", vocab) == "who visited bob in paris ?"
    assert question(doc, "bob", vocab) == "alice visited what in paris ?"
    assert question(doc, "paris", vocab) == "alice visited bob where ?"
    a = qa.generate_question(doc, 0, vocab)
    assert a == qa.generate_question(doc, 0, vocab)


def test_question_from_earliest_fact(vocab):
    facts = [("carol", "praised", "dave", "rome"), ("alice", "visited", "bob", "paris"), ("bob", "signed", "dave", "oslo")]
    doc = make_doc(vocab, facts)
    # bob appears in facts 1 and 2; fact 1 comes first
    assert question(doc, "bob", vocab) == "alice visited what in paris ?"
    assert question(doc, "dave", vocab) == "carol praised what in rome ?"


def test_generation_error_for_entity_outside_facts(vocab):
    doc = make_doc(vocab, [("alice", "visited", "bob", "paris")])
    doc.facts = []
    with pytest.raises(qa.QuestionGenerationError):
        qa.generate_question(doc, 0, vocab)


def test_candidates_sorted_and_deduplicated(vocab):
    doc = make_doc(vocab, [("carol", "visited", "bob", "paris"), ("alice", "praised", "bob", "new york")])
    names = [doc.entities[e] for e in qa.propose_candidates(doc)]
    assert names == sorted(set(names)) == ["alice", "bob", "carol", "new york", "paris"]
    single = make_doc(vocab, [("alice", "visited", "bob", "paris")])
    single.mentions = [m for m in single.mentions if m[0] == 0]
    assert qa.propose_candidates(single) == [0]


def test_filter_drops_ambiguous_pairs(vocab):
    facts = [("alice", "visited", "bob", "paris"), ("carol", "visited", "bob", "paris")]
    doc = make_doc(vocab, facts)
    pairs = [qa.make_pair(doc, e, vocab) for e in qa.propose_candidates(doc)]
    kept = {doc.entities[p.answer_entity] for p in qa.filter_answerable(pairs, doc, vocab)}
    assert kept == {"bob", "paris"}
    assert qa.filter_answerable([], doc, vocab) == []
    unique = make_doc(vocab, [("alice", "visited", "bob", "paris")])
    pairs = [qa.make_pair(unique, e, vocab) for e in qa.propose_candidates(unique)]
    assert len(qa.filter_answerable(pairs, unique, vocab)) == 3


def random_pairs(rng, n):
    pairs = []
    for i in range(n):
        ans = [rng.randrange(4, 30) for _ in range(rng.randint(1, 2))]
        pairs.append(qa.QAPair([rng.randrange(4, 30) for _ in range(4)] + [i + 30], i, ans))
    return pairs


def brute_force_oracle(pairs, summary, k, vocab):
    scored = [(rouge_l(p.answer_tokens, summary).f1, detokenize(p.answer_tokens, vocab),
               detokenize(p.question_tokens, vocab), idx) for idx, p in enumerate(pairs)]
    best = []
    remaining = list(scored)
    for _ in range(min(k, len(pairs))):
        top = remaining[0]
        for s in remaining[1:]:
            if s[0] > top[0] or (s[0] == top[0] and (s[1], s[2]) < (top[1], top[2])):
                top = s
        best.append(top[3])
        remaining.remove(top)
    return best


def test_oracle_matches_brute_force():
    vocab = Vocabulary([f"w{i}" for i in range(60)])
    rng = random.Random(0)
    for _ in range(100):
        pairs = random_pairs(rng, 12)
        summary = [rng.randrange(4, 30) for _ in range(rng.randint(3, 15))]
        got = qa.select_oracle(pairs, summary, 8, vocab)
        want = brute_force_oracle(pairs, summary, 8, vocab)
        assert [p.answer_entity for p in got] == [pairs[i].answer_entity for i in want]
        assert all(p.is_oracle for p in got)
        assert all(0 <= p.oracle_score <= 1 for p in got)


@given(st.integers(0, 10_000), st.integers(1, 15))
def test_oracle_permutation_invariant_and_bounded(seed, k):
    vocab = Vocabulary([f"w{i}" for i in range(60)])
    rng = random.Random(seed)
    pairs = random_pairs(rng, rng.randint(0, 12))
    summary = [rng.randrange(4, 30) for _ in range(8)]
    a = qa.select_oracle(pairs, summary, k, vocab)
    shuffled = list(pairs)
    rng.shuffle(shuffled)
    b = qa.select_oracle(shuffled, summary, k, vocab)
    assert [p.answer_entity for p in a] == [p.answer_entity for p in b]
    assert len(a) == min(k, len(pairs))


def test_oracle_prefers_answers_in_summary(vocab):
    present = qa.QAPair(tokenize("who ?", vocab), 0, tokenize("alice", vocab))
    absent = qa.QAPair(tokenize("what ?", vocab), 1, tokenize("bob", vocab))
    summary = tokenize("alice visited rome", vocab)
    top = qa.select_oracle([absent, present], summary, 1, vocab)
    assert top[0].answer_entity == 0
    with pytest.raises(ValueError):
        qa.select_oracle([present], summary, 0)


def test_default_k_is_eight():
    assert qa.DEFAULT_K == 8


def test_build_qa_pairs_on_corpus(small_corpus):
    vocab, docs = small_corpus
    for doc in docs:
        pairs = doc.qa_pairs
        texts = [qa.question_text(p, vocab) for p in pairs]
        assert texts == sorted(texts)
        assert sum(p.is_oracle for p in pairs) == min(8, len(pairs))
        for p in pairs:
            assert 0 <= p.answer_entity < doc.n_entities
            assert p.oracle_score == pytest.approx(rouge_l(p.answer_tokens, doc.summary).f1)


def test_ranker_recovers_separable_ordering():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(200, 4, generator=g, dtype=tc.DTYPE)
    labels = (x[:, 0] + 0.5 * x[:, 2] > 0).to(tc.DTYPE)
    feats = torch.cat([x, torch.ones(200, 1, dtype=tc.DTYPE)], 1).tolist()
    ranker = qa.Ranker().fit(feats, labels.tolist(), steps=1500)
    scores = torch.tensor(ranker.score(feats))
    assert scores[labels == 1].min() > scores[labels == 0].max()


def test_rank_for_inference_contract(small_corpus):
    vocab, docs = small_corpus
    doc = docs[0]
    with pytest.raises(tc.ContractError):
        qa.rank_for_inference(doc.qa_pairs, doc, qa.Ranker())
    flat = qa.Ranker(torch.zeros(5, dtype=tc.DTYPE), torch.zeros(5, dtype=tc.DTYPE), torch.ones(5, dtype=tc.DTYPE))
    assert qa.rank_for_inference(doc.qa_pairs, doc, flat) == doc.qa_pairs
    assert qa.rank_for_inference(doc.qa_pairs, doc, flat, k=1000) == doc.qa_pairs
    ranker = qa.fit_ranker(docs)
    top = qa.rank_for_inference(doc.qa_pairs, doc, ranker, k=3)
    scores = ranker.score([qa.pair_features(p, doc) for p in top])
    assert scores == sorted(scores, reverse=True)


def test_qa_file_round_trip(tmp_path, small_corpus):
    vocab, docs = small_corpus
    path = tmp_path / "qa.jsonl"
    qa.write_qa(path, docs, vocab)
    import copy

    fresh = [copy.copy(d) for d in docs]
    for d in fresh:
        d.qa_pairs = []
    qa.read_qa(path, fresh, vocab)
    for a, b in zip(docs, fresh):
        assert [(p.question_tokens, p.answer_entity, p.is_oracle) for p in a.qa_pairs] == [
            (p.question_tokens, p.answer_entity, p.is_oracle) for p in b.qa_pairs
        ]
