"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import List, Optional

from . import qa as qa_mod
from . import text
from .decoder import strip_special
from .encoder import StructureError
from .tensor_core import ShapeError
from .margin import margin_stats
from .trainer import NumericalError, TrainConfig, Trainer, copy_config, read_checkpoint
from .text import ConfigurationError, DataError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_docs(corpus: str, qa_path: Optional[str], vocab=None):
    vocab, docs = text.read_corpus(Path(corpus), vocab)
    for doc in docs:
        text.validate_document(doc)
    if qa_path:
        qa_mod.read_qa(Path(qa_path), docs, vocab)
    return vocab, docs


def _write_json(obj, path: Optional[str]) -> None:
    payload = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)


# -- verbs -------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    spec = text.CorpusSpec(
        n_documents=args.n_documents,
        vocab_size=args.vocab_size,
        sentences=tuple(args.sentences),
        entities=tuple(args.entities),
        facts_per_summary=args.facts_per_summary,
        seed=args.seed,
    )
    vocab, docs = text.generate_corpus(spec)
    text.write_corpus(Path(args.out), docs, vocab)
    print(f"wrote {len(docs)} documents to {args.out} (vocab {len(vocab)})")
    return EXIT_OK


def cmd_build_qa(args) -> int:
    vocab, docs = _load_docs(args.corpus, None)
    for doc in docs:
        doc.qa_pairs = qa_mod.build_qa_pairs(doc, vocab, args.k)
    qa_mod.write_qa(Path(args.out), docs, vocab)
    n = sum(len(d.qa_pairs) for d in docs)
    print(f"wrote {n} QA pairs for {len(docs)} documents to {args.out}")
    return EXIT_OK


_OVERRIDES = ("epochs", "seed", "lr", "batch_size", "grad_accum", "warmup_steps", "ablation",
              "lambda_c", "lambda_kl", "lambda_m", "decode", "beam_size", "qa_k")


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k) is not None}
    if overrides:
        cfg = copy_config(cfg, **overrides)
    vocab, docs = _load_docs(args.corpus, args.qa)
    if args.resume:
        trainer = Trainer.load(args.resume, docs, log_path=args.log)
        remaining = max(cfg.epochs - trainer.epoch, 0)
    else:
        trainer = Trainer(cfg, vocab, docs, log_path=args.log)
        remaining = cfg.epochs
    trainer.train(remaining, checkpoint=Path(args.out))
    trainer.save(Path(args.out))
    print(f"trained {trainer.epoch} epochs ({trainer.step_count} steps); best val ROUGE-L {trainer.best_score:.4f}")
    return EXIT_OK


def _trainer_from(args) -> Trainer:
    state = read_checkpoint(Path(args.checkpoint))
    vocab = text.Vocabulary.from_json(state["vocab"])
    _, docs = _load_docs(args.corpus, args.qa, vocab)
    return Trainer.load(Path(args.checkpoint), docs)


def cmd_eval(args) -> int:
    trainer = _trainer_from(args)
    report = trainer.evaluate(args.split, method=args.method)
    if not args.per_document:
        report.pop("documents")
    _write_json(report, args.out)
    return EXIT_OK


def cmd_decode(args) -> int:
    trainer = _trainer_from(args)
    docs = trainer.split_docs(args.split)
    if args.ids:
        wanted = set(args.ids)
        docs = [d for d in docs if d.id in wanted]
        if not docs:
            raise DataError("none of the requested documents are in the split")
    for doc, hyp in zip(docs, trainer.hypotheses(docs, method=args.method)):
        summary = text.detokenize(strip_special(hyp.tokens), trainer.vocab)
        print(json.dumps({"id": doc.id, "summary": summary, "log_prob": hyp.log_prob}))
    return EXIT_OK


def cmd_analyze_margin(args) -> int:
    trainer = _trainer_from(args)
    records = trainer.margin_records(trainer.split_docs(args.split))
    out = open(args.csv, "w", newline="", encoding="utf-8") if args.csv else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["doc_id", "token_pos", "token", "P_t", "P_lm", "m_t", "is_entity"])
        for r in records:
            writer.writerow([r.doc_id, r.position, trainer.vocab.itos[r.token],
                             f"{r.p_model:.6f}", f"{r.p_lm:.6f}", f"{r.m:.6f}", int(r.is_entity)])
    finally:
        if args.csv:
            out.close()
    stats = {k: v.to_json() for k, v in margin_stats(records).items()}
    if args.json:
        _write_json(stats, args.json)
    elif args.csv:
        _write_json(stats, None)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fes", description="Faithfulness-enhanced summarization on a synthetic corpus.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n-documents", type=int, default=500)
    g.add_argument("--vocab-size", type=int, default=200)
    g.add_argument("--sentences", type=int, nargs=2, default=(4, 8), metavar=("MIN", "MAX"))
    g.add_argument("--entities", type=int, nargs=2, default=(1, 64), metavar=("MIN", "MAX"))
    g.add_argument("--facts-per-summary", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_corpus)

    b = sub.add_parser("build-qa", help="build and oracle-rank QA pairs")
    b.add_argument("--corpus", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--k", type=int, default=qa_mod.DEFAULT_K)
    b.set_defaults(func=cmd_build_qa)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--qa", help="QA file from build-qa (built on the fly if omitted)")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="JSON-lines metrics log")
    t.add_argument("--resume", help="checkpoint to continue from")
    for name in _OVERRIDES:
        kind = {"ablation": str, "decode": str, "lr": float}.get(name, int)
        if name.startswith("lambda"):
            kind = float
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate a checkpoint"),
        ("decode", cmd_decode, "decode summaries"),
        ("analyze-margin", cmd_analyze_margin, "summarizer/LM margin analysis"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--corpus", required=True)
        s.add_argument("--qa")
        s.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name != "analyze-margin":
            s.add_argument("--method", choices=("greedy", "beam"))
        if name == "eval":
            s.add_argument("--out")
            s.add_argument("--per-document", action="store_true")
        elif name == "decode":
            s.add_argument("--ids", nargs="*")
        else:
            s.add_argument("--csv")
            s.add_argument("--json")
        s.set_defaults(func=func)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"fes: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"fes: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, StructureError, ShapeError, qa_mod.QuestionGenerationError, json.JSONDecodeError, KeyError) as exc:
        print(f"fes: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"fes: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
