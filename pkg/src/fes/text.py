"""Tokenizer, document model, and the synthetic fact-news corpus.

Each synthetic document is a list of fact sentences of the form
``<person> <verb> <object> in <place> .``.  One *topic* person is the subject
of ``facts_per_summary`` of them; the reference summary restates exactly
those facts through verb-dependent paraphrase templates.  Entity mentions,
facts, and summary mentions are annotated at generation time, so QA answers
and summary faithfulness can be checked exactly.
"""

from __future__ import annotations

import itertools
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

FUNCTION_WORDS = (".", "?", ",", "in", "was", "by", "at", "who", "what", "where")
VERBS = (
    "visited", "praised", "funded", "joined", "hired", "called",
    "helped", "watched", "backed", "signed", "thanked", "greeted",
)
PLACE_PREFIXES = ("new", "port", "san")
WH_WORDS = {"subject": "who", "object": "what", "place": "where"}

Span = Tuple[int, int]


class ConfigurationError(ValueError):
    pass


class DataError(ValueError):
    pass


class Vocabulary:
    """Bijective token <-> id map with PAD/BOS/EOS/UNK at ids 0-3."""

    def __init__(self, tokens: Iterable[str]):
        self.itos: List[str] = list(RESERVED)
        for tok in tokens:
            if tok not in RESERVED:
                self.itos.append(tok)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigurationError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def to_json(self) -> List[str]:
        return list(self.itos)

    @classmethod
    def from_json(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[:4]) != RESERVED:
            raise DataError("vocabulary file does not start with the reserved tokens")
        return cls(tokens[4:])


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    return [vocab.id(tok) for tok in text.lower().split()]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.itos[i] for i in ids)


# ---------------------------------------------------------------------------
# documents
# ---------------------------------------------------------------------------


@dataclass
class Fact:
    sentence: int
    subject: int
    verb: str
    object: int
    place: int

    def slot(self, name: str) -> int:
        return getattr(self, name)


@dataclass
class Document:
    id: str
    tokens: List[int]
    sentences: List[Span]
    entities: List[str]  # canonical, alphabetically sorted
    mentions: List[Tuple[int, Span]]
    summary: List[int]
    facts: List[Fact] = field(default_factory=list)
    summary_mentions: List[Tuple[int, Span]] = field(default_factory=list)
    qa_pairs: list = field(default_factory=list)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    def entity_spans(self, entity: int) -> List[Span]:
        return [span for e, span in self.mentions if e == entity]

    def sentence_of(self, span: Span) -> int:
        for i, (s, e) in enumerate(self.sentences):
            if s <= span[0] and span[1] <= e:
                return i
        raise DataError(f"{self.id}: span {span} crosses a sentence boundary")


def validate_document(doc: Document) -> None:
    """Raise DataError unless the structural invariants hold."""
    pos = 0
    for s, e in doc.sentences:
        if s != pos or e <= s:
            raise DataError(f"{doc.id}: sentence spans must be sorted, contiguous and non-empty")
        pos = e
    if pos != len(doc.tokens):
        raise DataError(f"{doc.id}: sentence spans do not cover all tokens")
    if sorted(doc.entities) != doc.entities or len(set(doc.entities)) != len(doc.entities):
        raise DataError(f"{doc.id}: entities must be unique and alphabetically sorted")
    for e, span in doc.mentions:
        if not 0 <= e < doc.n_entities:
            raise DataError(f"{doc.id}: mention of unknown entity {e}")
        doc.sentence_of(span)
    seen = {e for e, _ in doc.mentions}
    if seen != set(range(doc.n_entities)):
        raise DataError(f"{doc.id}: every entity needs at least one mention")


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class CorpusSpec:
    n_documents: int = 500
    vocab_size: int = 200
    sentences: Tuple[int, int] = (4, 8)
    entities: Tuple[int, int] = (1, 64)
    facts_per_summary: int = 2
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.sentences
        if self.n_documents < 1 or self.vocab_size < 1 or self.facts_per_summary < 1:
            raise ConfigurationError("corpus counts must be positive")
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"bad sentence range {self.sentences}")
        elo, ehi = self.entities
        f = self.facts_per_summary
        if not 1 <= elo <= ehi or 3 * hi - min(f, hi) + 1 < elo or 3 * lo - min(f, lo) + 1 > ehi:
            raise ConfigurationError(f"entity range {self.entities} unreachable with {self.sentences} sentences")


@dataclass
class Lexicon:
    persons: List[str]
    objects: List[str]
    places: List[str]  # may contain two-token names

    def all_entities(self) -> List[str]:
        return self.persons + self.objects + self.places


def _syllable_names() -> Iterable[str]:
    onsets = "bdfgklmnprstvz"
    vowels = "aeiou"
    sylls = [c + v for c in onsets for v in vowels]
    names = ["".join(p) for p in itertools.product(sylls, repeat=2)]
    random.Random(1234).shuffle(names)
    return names


def build_lexicon(vocab_size: int, min_per_kind: int = 1) -> Tuple[Vocabulary, Lexicon]:
    """Fixed function words and verbs, then entity names up to ``vocab_size``."""
    fixed = len(RESERVED) + len(FUNCTION_WORDS) + len(VERBS) + len(PLACE_PREFIXES)
    budget = vocab_size - fixed
    n_person = int(budget * 0.4)
    n_object = int(budget * 0.3)
    n_place_tok = budget - n_person - n_object
    n_compound = min(len(PLACE_PREFIXES) * 4, n_place_tok // 4)
    if min(n_person, n_object, n_place_tok) < min_per_kind:
        raise ConfigurationError(
            f"vocab size {vocab_size} leaves too few entity names "
            f"(need {min_per_kind} per kind, {fixed} ids are reserved for fixed words)"
        )
    names = iter(_syllable_names())
    persons = [next(names) for _ in range(n_person)]
    objects = [next(names) for _ in range(n_object)]
    place_toks = [next(names) for _ in range(n_place_tok)]
    single = place_toks[n_compound:]
    compound = [f"{PLACE_PREFIXES[i % len(PLACE_PREFIXES)]} {t}" for i, t in enumerate(place_toks[:n_compound])]
    vocab = Vocabulary(list(FUNCTION_WORDS) + list(VERBS) + list(PLACE_PREFIXES) + persons + objects + place_toks)
    return vocab, Lexicon(persons, objects, single + compound)


def summary_template(verb: str) -> int:
    return VERBS.index(verb) % 3 if verb in VERBS else 2


def render_fact(subj: str, verb: str, obj: str, place: str) -> List[str]:
    return [subj, verb, obj, "in", *place.split(), "."]


def render_paraphrase(subj: str, verb: str, obj: str, place: str) -> List[str]:
    kind = summary_template(verb)
    if kind == 0:
        return [obj, "was", verb, "by", subj, "in", *place.split(), "."]
    if kind == 1:
        return ["in", *place.split(), ",", subj, verb, obj, "."]
    return [subj, verb, obj, "at", *place.split(), "."]


def _assemble(doc_id: str, raw_facts: List[Tuple[str, str, str, str]], topic_idx: List[int], vocab: Vocabulary) -> Document:
    names = sorted({x for s, _, o, p in raw_facts for x in (s, o, p)})
    eid = {n: i for i, n in enumerate(names)}
    tokens: List[str] = []
    sentences: List[Span] = []
    mentions: List[Tuple[int, Span]] = []
    facts: List[Fact] = []
    for si, (s, v, o, p) in enumerate(raw_facts):
        start = len(tokens)
        sent = render_fact(s, v, o, p)
        mentions.append((eid[s], (start, start + len(s.split()))))
        mentions.append((eid[o], (start + 2, start + 2 + len(o.split()))))
        mentions.append((eid[p], (start + 4, start + 4 + len(p.split()))))
        tokens.extend(sent)
        sentences.append((start, len(tokens)))
        facts.append(Fact(si, eid[s], v, eid[o], eid[p]))
    summary: List[str] = []
    summary_mentions: List[Tuple[int, Span]] = []
    for i in topic_idx:
        s, v, o, p = raw_facts[i]
        para = render_paraphrase(s, v, o, p)
        base = len(summary)
        for name in (s, o, p):
            ntoks = name.split()
            for j in range(len(para) - len(ntoks) + 1):
                if para[j : j + len(ntoks)] == ntoks:
                    summary_mentions.append((eid[name], (base + j, base + j + len(ntoks))))
                    break
        summary.extend(para)
    return Document(
        id=doc_id,
        tokens=[vocab.id(t) for t in tokens],
        sentences=sentences,
        entities=names,
        mentions=sorted(mentions, key=lambda m: m[1]),
        summary=[vocab.id(t) for t in summary],
        facts=facts,
        summary_mentions=sorted(summary_mentions, key=lambda m: m[1]),
    )


def generate_corpus(spec: CorpusSpec) -> Tuple[Vocabulary, List[Document]]:
    """Deterministic synthetic corpus; the same spec always yields the same documents."""
    spec.validate()
    lo, hi = spec.sentences
    vocab, lex = build_lexicon(spec.vocab_size, min_per_kind=hi)
    if len(lex.places) < hi:
        raise ConfigurationError(f"vocab size {spec.vocab_size} hosts only {len(lex.places)} places, need {hi}")
    rng = random.Random(spec.seed)
    docs = []
    for d in range(spec.n_documents):
        while True:
            n_s = rng.randint(lo, hi)
            f = min(spec.facts_per_summary, n_s)
            n_e = 3 * n_s - f + 1
            if spec.entities[0] <= n_e <= spec.entities[1]:
                break
        people = rng.sample(lex.persons, n_s - f + 1)
        objs = rng.sample(lex.objects, n_s)
        places = rng.sample(lex.places, n_s)
        topic_idx = sorted(rng.sample(range(n_s), f))
        others = iter(people[1:])
        raw = []
        for i in range(n_s):
            subj = people[0] if i in topic_idx else next(others)
            raw.append((subj, rng.choice(VERBS), objs[i], places[i]))
        docs.append(_assemble(f"doc-{d:05d}", raw, topic_idx, vocab))
    return vocab, docs


# ---------------------------------------------------------------------------
# heuristic entities for raw text
# ---------------------------------------------------------------------------

_SENT_END = re.compile(r"(?<=[.?!])\s+")


def extract_mentions(raw_tokens: Sequence[str], lexicon: Iterable[str] = ()) -> List[Tuple[str, Span]]:
    """Entity mentions from capitalisation plus an entity lexicon.

    Lexicon entries (longest match first, case-insensitive) win; remaining
    runs of capitalised tokens that are not sentence-initial become mentions.
    """
    lex = sorted({tuple(e.lower().split()) for e in lexicon}, key=len, reverse=True)
    lowered = [t.lower() for t in raw_tokens]
    taken = [False] * len(raw_tokens)
    found: List[Tuple[str, Span]] = []
    for i in range(len(raw_tokens)):
        for entry in lex:
            j = i + len(entry)
            if tuple(lowered[i:j]) == entry and not any(taken[i:j]):
                found.append((" ".join(entry), (i, j)))
                for k in range(i, j):
                    taken[k] = True
                break
    i = 0
    while i < len(raw_tokens):
        sentence_initial = i == 0 or raw_tokens[i - 1] in {".", "?", "!"}
        if raw_tokens[i][:1].isupper() and not taken[i] and not sentence_initial:
            j = i
            while j < len(raw_tokens) and raw_tokens[j][:1].isupper() and not taken[j]:
                j += 1
            found.append((" ".join(lowered[i:j]), (i, j)))
            i = j
        else:
            i += 1
    return sorted(found, key=lambda m: m[1])


def document_from_text(doc_id: str, text: str, summary: str, vocab: Vocabulary, lexicon: Iterable[str] = ()) -> Document:
    """Build a Document from raw text with heuristic entity annotation (no facts)."""
    raw: List[str] = []
    sentences: List[Span] = []
    for sent in _SENT_END.split(text.strip()):
        toks = sent.replace(".", " .").replace("?", " ?").replace("!", " !").split()
        if toks:
            sentences.append((len(raw), len(raw) + len(toks)))
            raw.extend(toks)
    found = extract_mentions(raw, lexicon)
    names = sorted({name for name, _ in found})
    eid = {n: i for i, n in enumerate(names)}
    return Document(
        id=doc_id,
        tokens=[vocab.id(t) for t in (x.lower() for x in raw)],
        sentences=sentences,
        entities=names,
        mentions=[(eid[n], span) for n, span in found],
        summary=tokenize(summary, vocab),
    )


# ---------------------------------------------------------------------------
# JSON-lines corpus files
# ---------------------------------------------------------------------------


def vocab_path_for(corpus_path: Path) -> Path:
    return Path(str(corpus_path) + ".vocab.json")


def document_to_json(doc: Document, vocab: Vocabulary) -> dict:
    return {
        "id": doc.id,
        "tokens": [vocab.itos[t] for t in doc.tokens],
        "sentences": [list(s) for s in doc.sentences],
        "entities": doc.entities,
        "mentions": [[e, s, t] for e, (s, t) in doc.mentions],
        "facts": [
            {"sentence": f.sentence, "subject": f.subject, "verb": f.verb, "object": f.object, "place": f.place}
            for f in doc.facts
        ],
        "summary": [vocab.itos[t] for t in doc.summary],
        "summary_mentions": [[e, s, t] for e, (s, t) in doc.summary_mentions],
        "qa_pairs": [p.to_json(vocab) for p in doc.qa_pairs],
    }


def document_from_json(obj: dict, vocab: Vocabulary) -> Document:
    from .qa import QAPair

    try:
        doc = Document(
            id=obj.get("id", ""),
            tokens=[vocab.id(t) for t in obj["tokens"]],
            sentences=[tuple(s) for s in obj["sentences"]],
            entities=list(obj["entities"]),
            mentions=[(e, (s, t)) for e, s, t in obj.get("mentions", [])],
            summary=[vocab.id(t) for t in obj["summary"]],
            facts=[Fact(**f) for f in obj.get("facts", [])],
            summary_mentions=[(e, (s, t)) for e, s, t in obj.get("summary_mentions", [])],
        )
        doc.qa_pairs = [QAPair.from_json(p, vocab, doc) for p in obj.get("qa_pairs", [])]
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed corpus record {obj.get('id', '?')}: {exc}") from exc
    validate_document(doc)
    return doc


def write_corpus(path: Path, docs: Sequence[Document], vocab: Vocabulary) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            fh.write(json.dumps(document_to_json(doc, vocab), separators=(",", ":")) + "\n")
    with open(vocab_path_for(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(vocab.to_json(), fh)


def read_corpus(path: Path, vocab: Optional[Vocabulary] = None) -> Tuple[Vocabulary, List[Document]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    try:
        records = [json.loads(line) for line in lines if line.strip()]
        if vocab is None:
            vp = vocab_path_for(path)
            if vp.exists():
                vocab = Vocabulary.from_json(json.loads(vp.read_text(encoding="utf-8")))
            else:
                words = sorted({t for r in records for t in r["tokens"] + r["summary"]} | set(FUNCTION_WORDS))
                vocab = Vocabulary(words)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed corpus file {path}: {exc}") from exc
    return vocab, [document_from_json(r, vocab) for r in records]
