import warnings

import pytest
import torch
from hypothesis import HealthCheck, settings

from fes import model
from fes.qa import build_qa_pairs
from fes.text import CorpusSpec, generate_corpus

settings.register_profile(
    "repo", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


def tiny_config(**kw) -> model.ModelConfig:
    base = dict(
        d_model=8, heads=2, ffn_hidden=12, enc_layers=1, gat_layers=1, dec_layers=1, dropout=0.0
    )
    base.update(kw)
    return model.ModelConfig(**base)


@pytest.fixture(scope="session")
def small_corpus():
    vocab, docs = generate_corpus(CorpusSpec(n_documents=40, seed=3))
    for d in docs:
        d.qa_pairs = build_qa_pairs(d, vocab)
    return vocab, docs


@pytest.fixture(scope="session")
def tiny_batch(small_corpus):
    """Two short documents with oracle questions, for gradient and contract checks."""
    vocab, docs = small_corpus
    short = sorted(docs, key=lambda d: len(d.tokens))[:2]
    cfg = tiny_config(vocab_size=len(vocab))
    qs = [[p for p in d.qa_pairs if p.is_oracle][:3] for d in short]
    return cfg, model.collate(short, qs, cfg)


@pytest.fixture(autouse=True)
def _quiet_truncation():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


def tiny_train_config(**kw):
    from fes.trainer import TrainConfig

    base = dict(
        model=tiny_config(), split=(24, 8, 8), batch_size=4, epochs=1, warmup_steps=0, lr=5e-3,
        lm_epochs=1, lm={"d_model": 8, "heads": 2, "layers": 1, "ffn_hidden": 12},
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def make_trainer(small_corpus):
    from fes.trainer import Trainer

    def build(**kw):
        vocab, docs = small_corpus
        return Trainer(tiny_train_config(**kw), vocab, docs)

    return build
