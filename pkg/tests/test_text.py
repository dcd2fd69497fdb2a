import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fes import text
from fes.text import (
    BOS, EOS, PAD, UNK, ConfigurationError, CorpusSpec, DataError, Vocabulary, detokenize, generate_corpus, tokenize,
)


@pytest.fixture(scope="module")
def corpus500():
    return generate_corpus(CorpusSpec())


def test_vocabulary_reserved_ids():
    v = Vocabulary(["a", "b"])
    assert [v.id(t) for t in text.RESERVED] == [PAD, BOS, EOS, UNK] == [0, 1, 2, 3]
    assert len(v) == 6
    assert Vocabulary.from_json(v.to_json()).itos == v.itos
    with pytest.raises(ConfigurationError):
        Vocabulary(["a", "a"])
    with pytest.raises(DataError):
        Vocabulary.from_json(["a", "b"])


def test_tokenize_contract(corpus500):
    vocab, _ = corpus500
    assert tokenize("", vocab) == []
    sent = "maze visited suba in port kibo ."
    ids = tokenize(sent, vocab)
    assert ids[-1] == vocab.id(".")
    assert tokenize("zzzz", vocab) == [UNK]
    assert tokenize("In .", vocab) == [vocab.id("in"), vocab.id(".")]


@settings(max_examples=1000)
@given(st.data())
def test_round_trip_in_vocab(data):
    vocab, _ = text.build_lexicon(200)
    words = data.draw(st.lists(st.sampled_from(vocab.itos[4:]), max_size=20))
    s = " ".join(words)
    assert detokenize(tokenize(s, vocab), vocab) == s


def test_corpus_is_deterministic(tmp_path):
    spec = CorpusSpec(n_documents=20, seed=7)
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    text.write_corpus(a, generate_corpus(spec)[1], generate_corpus(spec)[0])
    text.write_corpus(b, generate_corpus(spec)[1], generate_corpus(spec)[0])
    assert a.read_bytes() == b.read_bytes()
    other = generate_corpus(CorpusSpec(n_documents=20, seed=8))[1]
    assert [d.tokens for d in other] != [d.tokens for d in generate_corpus(spec)[1]]


def test_single_fact_document():
    vocab, docs = generate_corpus(CorpusSpec(n_documents=1, sentences=(1, 1), facts_per_summary=1))
    (doc,) = docs
    fact = doc.facts[0]
    expect = text.render_paraphrase(
        doc.entities[fact.subject], fact.verb, doc.entities[fact.object], doc.entities[fact.place]
    )
    assert detokenize(doc.summary, vocab) == " ".join(expect)
    assert doc.n_entities == 3


def test_corpus_invariants(corpus500):
    vocab, docs = corpus500
    assert len(docs) == 500
    assert len(vocab) <= 200
    for doc in docs:
        text.validate_document(doc)
        assert 4 <= len(doc.sentences) <= 8
        # every summary entity appears in the source
        for e, (s, t) in doc.summary_mentions:
            name = doc.entities[e].split()
            assert [vocab.itos[x] for x in doc.summary[s:t]] == name
            assert doc.entity_spans(e)
        # one topic person is the subject of exactly two facts
        counts = sorted((sum(f.subject == s for f in doc.facts) for s in {f.subject for f in doc.facts}), reverse=True)
        assert counts[0] == 2 and all(c == 1 for c in counts[1:])


def test_summary_only_restates_source_facts(corpus500):
    vocab, docs = corpus500
    for doc in docs[:100]:
        rendered = []
        for f in doc.facts:
            para = text.render_paraphrase(
                doc.entities[f.subject], f.verb, doc.entities[f.object], doc.entities[f.place]
            )
            rendered.append([vocab.id(w) for w in para])
        # the summary is a concatenation of paraphrases of source facts, in order
        rest = list(doc.summary)
        used = 0
        for para in rendered:
            if rest[: len(para)] == para:
                rest = rest[len(para):]
                used += 1
        assert rest == [] and used == 2


def test_spec_errors():
    with pytest.raises(ConfigurationError):
        CorpusSpec(n_documents=0).validate()
    with pytest.raises(ConfigurationError):
        CorpusSpec(sentences=(5, 2)).validate()
    with pytest.raises(ConfigurationError):
        generate_corpus(CorpusSpec(vocab_size=30))
    with pytest.raises(ConfigurationError):
        CorpusSpec(entities=(100, 120)).validate()


def test_validate_document_rejects_bad_spans(corpus500):
    _, docs = corpus500
    import dataclasses

    bad = dataclasses.replace(docs[0], sentences=[(0, 2)] + docs[0].sentences[1:])
    with pytest.raises(DataError):
        text.validate_document(bad)
    bad = dataclasses.replace(docs[0], mentions=docs[0].mentions + [(0, (3, 9))])
    with pytest.raises(DataError):
        text.validate_document(bad)


def test_jsonl_round_trip(tmp_path, small_corpus):
    vocab, docs = small_corpus
    path = tmp_path / "c.jsonl"
    text.write_corpus(path, docs, vocab)
    raw = path.read_bytes()
    assert b"\r\n" not in raw
    first = json.loads(raw.splitlines()[0])
    assert {"tokens", "sentences", "entities", "summary", "qa_pairs"} <= set(first)
    vocab2, docs2 = text.read_corpus(path)
    assert vocab2.itos == vocab.itos
    for a, b in zip(docs, docs2):
        assert (a.tokens, a.sentences, a.entities, a.mentions, a.summary) == (
            b.tokens, b.sentences, b.entities, b.mentions, b.summary
        )
        assert [(p.question_tokens, p.answer_entity, p.is_oracle) for p in a.qa_pairs] == [
            (p.question_tokens, p.answer_entity, p.is_oracle) for p in b.qa_pairs
        ]


def test_read_corpus_errors(tmp_path):
    with pytest.raises(DataError):
        text.read_corpus(tmp_path / "missing.jsonl")
    p = tmp_path / "bad.jsonl"
    p.write_text('{"tokens": ["a"]}\n')
    with pytest.raises(DataError):
        text.read_corpus(p)


def test_heuristic_entities():
    raw = "Yesterday Alice Smith met Bob in New York . They left ."
    vocab = Vocabulary(sorted(set(raw.lower().split())))
    doc = text.document_from_text("x", raw, "alice met bob", vocab, lexicon=["new york"])
    assert doc.entities == ["alice smith", "bob", "new york"]
    assert [span for _, span in doc.mentions] == [(1, 3), (4, 5), (6, 8)]
    assert doc.sentences == [(0, 9), (9, 12)]
