"""Training orchestration: combined objective, optimisation schedule,
checkpointing, validation-based model selection and evaluation reports."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from . import answer, decoder, encoder, margin, model
from . import tensor_core as tc
from .metrics import average_rouge, qa_em_f1
from .qa import DEFAULT_K, Ranker, build_qa_pairs, fit_ranker, question_text, rank_for_inference
from .text import ConfigurationError, DataError, Document, Vocabulary, detokenize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fes-checkpoint"
CHECKPOINT_VERSION = 1
ABLATIONS = ("full", "no_multi", "no_qa_attention", "no_margin", "random_qa")


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: model.ModelConfig = field(default_factory=model.ModelConfig)
    lambda_c: float = 1.0
    lambda_kl: float = 1.0
    lambda_m: float = 1.0
    ablation: str = "full"
    lr: float = 2e-3
    warmup_steps: int = 50
    batch_size: int = 8
    grad_accum: int = 1
    epochs: int = 45
    beam_size: int = 4
    decode: str = "greedy"
    qa_k: int = DEFAULT_K
    seed: int = 0
    margin_exponent: int = 5
    margin_delay_steps: int = 0
    kl_bidirectional: bool = True
    split: Tuple[int, int, int] = (400, 50, 50)
    lm_epochs: int = 8
    lm_lr: float = 1e-3
    lm: dict = field(default_factory=lambda: {"d_model": 64, "heads": 4, "layers": 2, "ffn_hidden": 128})

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = model.ModelConfig(**self.model)
        self.split = tuple(self.split)
        self.validate()

    def validate(self) -> None:
        if min(self.lambda_c, self.lambda_kl, self.lambda_m) < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.qa_k < 1:
            raise ConfigurationError("qa_k must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.decode not in ("greedy", "beam"):
            raise ConfigurationError("decode must be 'greedy' or 'beam'")
        if self.lr <= 0 or self.batch_size < 1 or self.grad_accum < 1 or self.beam_size < 1:
            raise ConfigurationError("lr, batch_size, grad_accum and beam_size must be positive")
        if self.epochs < 0 or self.warmup_steps < 0 or self.margin_delay_steps < 0:
            raise ConfigurationError("epochs and step counts must be >= 0")
        if len(self.split) != 3 or min(self.split) < 1:
            raise ConfigurationError("split needs three positive sizes")

    # effective weights after the ablation switch
    @property
    def weights(self) -> Tuple[float, float, float]:
        lc, lk, lm = self.lambda_c, self.lambda_kl, self.lambda_m
        if self.ablation == "no_multi":
            lc = lk = 0.0
        elif self.ablation == "no_qa_attention":
            lk = 0.0
        elif self.ablation == "no_margin":
            lm = 0.0
        return lc, lk, lm

    @property
    def uses_questions(self) -> bool:
        return self.ablation != "no_multi"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def lm_config(cfg: TrainConfig) -> margin.LMConfig:
    return margin.LMConfig(vocab_size=cfg.model.vocab_size, **cfg.lm)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


@dataclass
class LossParts:
    total: torch.Tensor
    summarization: torch.Tensor
    qa: torch.Tensor
    kl: torch.Tensor
    margin: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {k: float(getattr(self, k)) for k in ("total", "summarization", "qa", "kl", "margin")}


def combine(ls, lc, lk, lm, weights: Tuple[float, float, float]) -> torch.Tensor:
    """L = L_s + w_c L_c + w_kl L_KL + w_m L_m."""
    wc, wk, wm = weights
    return ls + wc * lc + wk * lk + wm * lm


def combined_loss(
    params: tc.ParamSet,
    batch: model.Batch,
    cfg: TrainConfig,
    p_lm: Optional[torch.Tensor] = None,
    rng: Optional[torch.Generator] = None,
    use_margin: bool = True,
) -> LossParts:
    """All four losses on one batch plus their weighted sum.

    ``p_lm`` (B, T) holds the frozen LM's gold-token probabilities; without it
    the margin term is zero.
    """
    out = model.forward(params, batch, cfg.model, rng)
    zero = tc.zeros(())
    ls = decoder.summarization_loss(out.dec.probs, batch.dec_target, batch.dec_mask)
    lc = lk = lm = zero
    if out.A is not None:
        lc = answer.qa_loss(out.A, batch.answers, batch.q_valid)
        lk = decoder.kl_alignment_loss(
            out.A, batch.q_valid, out.dec.entity_attention, batch.dec_mask, cfg.kl_bidirectional
        )
    if p_lm is not None and use_margin:
        gold = decoder.gold_probs(out.dec.probs, batch.dec_target)
        lm = margin.max_margin_loss(gold, p_lm, batch.dec_mask, cfg.margin_exponent)
    parts = LossParts(combine(ls, lc, lk, lm, cfg.weights), ls, lc, lk, lm)
    for name, value in parts.as_floats().items():
        if not math.isfinite(value):
            raise NumericalError(f"non-finite {name} loss ({value}) in batch {[d.id for d in batch.docs]}")
    return parts


# ---------------------------------------------------------------------------
# QA pair selection per regime
# ---------------------------------------------------------------------------


def oracle_pairs(doc: Document) -> list:
    return [p for p in doc.qa_pairs if p.is_oracle]


def random_pairs(doc: Document, k: int, seed: int) -> list:
    pairs = list(doc.qa_pairs)
    rnd = random.Random(f"{seed}:{doc.id}")
    return [pairs[i] for i in sorted(rnd.sample(range(len(pairs)), min(k, len(pairs))))]


def inference_pairs(doc: Document, ranker: Ranker, k: int, vocab: Vocabulary) -> list:
    """Ranker top-k, restored to alphabetical question order."""
    top = rank_for_inference(doc.qa_pairs, doc, ranker, k)
    return sorted(top, key=lambda p: question_text(p, vocab))


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


def split_corpus(docs: Sequence[Document], sizes: Tuple[int, int, int]):
    n_train, n_val, n_test = sizes
    if n_train + n_val + n_test > len(docs):
        raise DataError(f"corpus has {len(docs)} documents; split needs {n_train + n_val + n_test}")
    return (
        list(docs[:n_train]),
        list(docs[n_train : n_train + n_val]),
        list(docs[n_train + n_val : n_train + n_val + n_test]),
    )


class Trainer:
    """Owns parameters, optimiser state, RNG state and the frozen LM."""

    def __init__(self, config: TrainConfig, vocab: Vocabulary, docs: Sequence[Document],
                 log_path: Optional[Path] = None, _restore: Optional[dict] = None):
        if config.model.vocab_size != len(vocab):
            config.model.vocab_size = len(vocab)
        self.config = config
        self.vocab = vocab
        for doc in docs:
            if not doc.qa_pairs:
                doc.qa_pairs = build_qa_pairs(doc, vocab, config.qa_k)
        self.train_docs, self.val_docs, self.test_docs = split_corpus(docs, config.split)
        self.log_path = Path(log_path) if log_path else None
        self.metrics: List[dict] = []
        self.lm_cfg = lm_config(config)
        if _restore is None:
            self.ranker = fit_ranker(self.train_docs)
            self.lm_params, self.lm_curve = margin.pretrain_lm(
                [d.summary for d in self.train_docs], self.lm_cfg, seed=config.seed,
                epochs=config.lm_epochs, lr=config.lm_lr, heldout=[d.summary for d in self.val_docs],
            )
            self.params = model.init_params(config.model, config.seed)
            self.adam = tc.AdamState()
            self.step_count = 0
            self.epoch = 0
            self.order: List[int] = []
            self.cursor = 0
            self.best_score = -1.0
            self.best_params = None
            self.dropout_rng = torch.Generator().manual_seed(config.seed + 101)
            self.shuffle_rng = torch.Generator().manual_seed(config.seed + 202)
        else:
            self._restore(_restore)
        self._p_lm_cache: Dict[tuple, torch.Tensor] = {}

    # -- data ---------------------------------------------------------------

    def train_questions(self, doc: Document) -> list:
        if not self.config.uses_questions:
            return []
        if self.config.ablation == "random_qa":
            return random_pairs(doc, self.config.qa_k, self.config.seed)
        return oracle_pairs(doc)

    def eval_questions(self, doc: Document) -> list:
        if not self.config.uses_questions:
            return []
        if self.config.ablation == "random_qa":
            return random_pairs(doc, self.config.qa_k, self.config.seed)
        return inference_pairs(doc, self.ranker, self.config.qa_k, self.vocab)

    def batch_for(self, docs: Sequence[Document], train: bool) -> model.Batch:
        pick = self.train_questions if train else self.eval_questions
        return model.collate(docs, [pick(d) for d in docs], self.config.model)

    def lm_probs(self, batch: model.Batch) -> torch.Tensor:
        """Frozen-LM gold-token probabilities (B, T), cached per summary."""
        out = torch.zeros(batch.dec_target.shape, dtype=tc.DTYPE)
        for b in range(batch.size):
            n = int(batch.dec_mask[b].sum())
            key = tuple(batch.dec_target[b, :n].tolist())
            cached = self._p_lm_cache.get(key)
            if cached is None:
                with torch.no_grad():
                    inp, msk = batch.dec_in[b : b + 1, :n], batch.dec_mask[b : b + 1, :n]
                    P = margin.lm_forward(inp, msk, self.lm_params, self.lm_cfg)
                    cached = decoder.gold_probs(P, batch.dec_target[b : b + 1, :n])[0]
                self._p_lm_cache[key] = cached
            out[b, :n] = cached
        return out

    # -- optimisation -------------------------------------------------------

    def lr_at(self, step: int) -> float:
        warm = self.config.warmup_steps
        return self.config.lr * (min(1.0, (step + 1) / warm) if warm else 1.0)

    def _next_indices(self) -> List[int]:
        if self.cursor >= len(self.order):
            self.order = torch.randperm(len(self.train_docs), generator=self.shuffle_rng).tolist()
            self.cursor = 0
        n = self.config.batch_size * self.config.grad_accum
        idx = self.order[self.cursor : self.cursor + n]
        self.cursor += len(idx)
        return idx

    @property
    def epoch_done(self) -> bool:
        return self.cursor >= len(self.order)

    def step(self) -> dict:
        """One optimiser update over ``grad_accum`` micro-batches."""
        cfg = self.config
        idx = self._next_indices()
        total = len(idx)
        use_margin = self.step_count >= cfg.margin_delay_steps and cfg.weights[2] > 0
        tc.zero_grad(self.params)
        sums = {"total": 0.0, "summarization": 0.0, "qa": 0.0, "kl": 0.0, "margin": 0.0}
        for start in range(0, total, cfg.batch_size):
            docs = [self.train_docs[i] for i in idx[start : start + cfg.batch_size]]
            batch = self.batch_for(docs, train=True)
            p_lm = self.lm_probs(batch) if use_margin else None
            parts = combined_loss(self.params, batch, cfg, p_lm, self.dropout_rng, use_margin)
            tc.backward(parts.total / total)
            for k, v in parts.as_floats().items():
                sums[k] += v
        if not cfg.uses_questions:
            # the QA head is outside the objective; a zero gradient leaves it untouched
            for name, p in self.params.items():
                if name.startswith("qa.") and p.grad is None:
                    p.grad = torch.zeros_like(p)
        lr = self.lr_at(self.step_count)
        tc.adam_step(self.params, self.adam, lr=lr)
        self.step_count += 1
        record = {"step": self.step_count, "epoch": self.epoch, "lr": lr, "docs": total}
        record.update({k: v / total for k, v in sums.items()})
        self._log(record)
        return record

    def _log(self, record: dict) -> None:
        self.metrics.append(record)
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def train(self, epochs: Optional[int] = None, checkpoint: Optional[Path] = None) -> "Trainer":
        """Run ``epochs`` more epochs with validation after each one."""
        epochs = self.config.epochs if epochs is None else epochs
        for _ in range(epochs):
            while True:
                self.step()
                if self.epoch_done:
                    break
            self.epoch += 1
            score = self.validate()
            if score > self.best_score:
                self.best_score = score
                self.best_params = {k: v.detach().clone() for k, v in self.params.items()}
            self._log({"epoch": self.epoch, "step": self.step_count, "val_rougeL": score, "best": self.best_score})
            log.info("epoch %d val ROUGE-L %.4f", self.epoch, score)
            if checkpoint:
                self.save(checkpoint)
        return self

    # -- evaluation ---------------------------------------------------------

    def eval_params(self) -> tc.ParamSet:
        return self.best_params if self.best_params is not None else self.params

    def validate(self) -> float:
        with torch.no_grad():
            hyps = self.decode(self.val_docs, self.params, method="greedy")
        return average_rouge(hyps, [d.summary for d in self.val_docs])["rougeL"]

    def decode(self, docs: Sequence[Document], params: Optional[tc.ParamSet] = None,
               method: Optional[str] = None) -> List[List[int]]:
        """Summaries (token ids without BOS/EOS) for ``docs``."""
        return [decoder.strip_special(h.tokens) for h in self.hypotheses(docs, method, params)]

    def hypotheses(self, docs: Sequence[Document], method: Optional[str] = None,
                   params: Optional[tc.ParamSet] = None, chunk: int = 50) -> List[decoder.Hypothesis]:
        params = params if params is not None else self.eval_params()
        method = method or self.config.decode
        max_len = self.config.model.max_summary_len
        out: List[decoder.Hypothesis] = []
        with torch.no_grad():
            for s in range(0, len(docs), chunk):
                batch = self.batch_for(docs[s : s + chunk], train=False)
                out.extend(self._decode_batch(batch, params, method, max_len))
        return out

    def _decode_batch(self, batch, params, method, max_len) -> List[decoder.Hypothesis]:
        enc = encoder.encode(batch, params, self.config.model)
        if method == "greedy":
            return decoder.greedy_batch(model.batch_step_function(params, self.config.model, enc, batch),
                                        batch.size, max_len)
        return [
            decoder.beam_search(model.step_function(params, self.config.model, enc, batch, i),
                                self.config.beam_size, max_len)
            for i in range(batch.size)
        ]

    def split_docs(self, split: str) -> List[Document]:
        try:
            return {"train": self.train_docs, "val": self.val_docs, "test": self.test_docs}[split]
        except KeyError:
            raise ConfigurationError(f"unknown split {split!r}") from None

    def margin_records(self, docs: Sequence[Document], params: Optional[tc.ParamSet] = None) -> List[margin.MarginRecord]:
        """Teacher-forced summarizer vs LM gold-token probabilities."""
        params = params if params is not None else self.eval_params()
        records = []
        with torch.no_grad():
            batch = self.batch_for(docs, train=False)
            out = model.forward(params, batch, self.config.model)
            P = decoder.gold_probs(out.dec.probs, batch.dec_target)
            P_lm = self.lm_probs(batch)
        for b, doc in enumerate(batch.docs):
            ents = margin.entity_positions(doc)
            n = int(batch.dec_mask[b].sum()) - 1  # summary tokens, EOS excluded
            for t in range(n):
                records.append(margin.MarginRecord(
                    doc.id, t, int(batch.dec_target[b, t]), float(P[b, t]), float(P_lm[b, t]), t in ents
                ))
        return records

    def evaluate(self, split: str = "test", method: Optional[str] = None, docs: Optional[Sequence[Document]] = None) -> dict:
        docs = list(docs) if docs is not None else self.split_docs(split)
        if not docs:
            raise DataError(f"split {split!r} is empty")
        params = self.eval_params()
        hyps = self.decode(docs, params, method)
        rouge = average_rouge(hyps, [d.summary for d in docs])
        per_doc = []
        em_sum = f1_sum = 0.0
        n_q = 0
        with torch.no_grad():
            batch = self.batch_for(docs, train=False)
            out = model.forward(params, batch, self.config.model)
        for b, doc in enumerate(batch.docs):
            qa_rows = []
            if out.A is not None:
                pred = out.A[b].argmax(-1).tolist()
                for i, pair in enumerate(batch.questions[b]):
                    em, f1 = qa_em_f1(pred[i], pair.answer_entity, doc.entities)
                    em_sum += em
                    f1_sum += f1
                    n_q += 1
                    qa_rows.append({
                        "question": question_text(pair, self.vocab),
                        "predicted": doc.entities[pred[i]],
                        "gold": doc.entities[pair.answer_entity],
                    })
            per_doc.append({
                "id": doc.id,
                "summary": detokenize(hyps[b], self.vocab),
                "reference": detokenize(doc.summary, self.vocab),
                "qa": qa_rows,
            })
        stats = margin.margin_stats(self.margin_records(docs, params))
        return {
            "split": split,
            "ablation": self.config.ablation,
            "n_documents": len(docs),
            "rouge": rouge,
            "qa": {"em": em_sum / n_q, "f1": f1_sum / n_q, "n_questions": n_q} if n_q else None,
            "margin": {k: v.to_json() for k, v in stats.items()},
            "documents": per_doc,
        }

    # -- checkpointing ------------------------------------------------------

    def state_dict(self) -> dict:
        detach = lambda d: {k: v.detach().clone() for k, v in d.items()}
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "vocab": self.vocab.to_json(),
            "params": detach(self.params),
            "best_params": detach(self.best_params) if self.best_params is not None else None,
            "best_score": self.best_score,
            "adam": {"step": self.adam.step, "m": detach(self.adam.m), "v": detach(self.adam.v)},
            "step": self.step_count,
            "epoch": self.epoch,
            "order": list(self.order),
            "cursor": self.cursor,
            "dropout_rng": self.dropout_rng.get_state(),
            "shuffle_rng": self.shuffle_rng.get_state(),
            "lm_params": detach(self.lm_params),
            "lm_curve": list(self.lm_curve),
            "ranker": self.ranker.state_dict(),
        }

    def _restore(self, state: dict) -> None:
        self.params = {k: v.clone().requires_grad_(True) for k, v in state["params"].items()}
        self.best_params = state["best_params"]
        self.best_score = state["best_score"]
        self.adam = tc.AdamState(state["adam"]["step"], dict(state["adam"]["m"]), dict(state["adam"]["v"]))
        self.step_count = state["step"]
        self.epoch = state["epoch"]
        self.order = list(state["order"])
        self.cursor = state["cursor"]
        self.dropout_rng = torch.Generator()
        self.dropout_rng.set_state(state["dropout_rng"])
        self.shuffle_rng = torch.Generator()
        self.shuffle_rng.set_state(state["shuffle_rng"])
        self.lm_params = {k: v.clone() for k, v in state["lm_params"].items()}
        self.lm_curve = list(state["lm_curve"])
        self.ranker = Ranker.from_state_dict(state["ranker"])

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path, docs: Sequence[Document], log_path: Optional[Path] = None) -> "Trainer":
        state = read_checkpoint(path)
        config = TrainConfig.from_dict(state["config"])
        vocab = Vocabulary.from_json(state["vocab"])
        return cls(config, vocab, docs, log_path=log_path, _restore=state)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        state = torch.load(path, weights_only=True)
    except Exception as exc:  # corrupt or foreign file
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a checkpoint of this package")
    if state.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {state.get('version')}")
    return state


def copy_config(cfg: TrainConfig, **overrides) -> TrainConfig:
    d = copy.deepcopy(cfg.to_dict())
    d.update(overrides)
    return TrainConfig.from_dict(d)
