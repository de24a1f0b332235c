"""Command-line entry point binding data, training, evaluation and oracles.

Subcommands: gen-data, pretrain-lm, train, eval, sweep, verify, overlap-stats.
Every run resolves its configuration (flags > config file > defaults), writes
a manifest sufficient to replay it, and exits 0 on success, 2 on usage
errors, 3 on configuration/validation errors, 1 otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .corpus import (
    SynthConfig,
    Vocabulary,
    build_vocab,
    knowledge_overlap_stats,
    load_dialogues,
    load_knowledge_file,
    response_pairs,
    synthesize_corpus,
    write_dialogues_jsonl,
    write_knowledge_file,
)
from .errors import ConfigError, DataError, DecoupleError
from .evaluation import (
    DEFAULT_LENGTHS,
    EvalReport,
    FIXED_TIMESTAMP,
    FULL,
    GapCurve,
    emit_report,
    gap_sweep,
    knowledge_lm_ppl,
)
from .oracle import run_verification_suite
from .seqmodel import ModelConfig, load_checkpoint, save_checkpoint
from .trainer import (
    METHODS,
    TrainConfig,
    pretrain_knowledge_lm,
    run_training,
)

ENV_SEED = "DECOUPLE_SEED"


# ---------------------------------------------------------------------------
# Config and manifest plumbing
# ---------------------------------------------------------------------------

def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _resolve_seed(args: argparse.Namespace, file_cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED}={env!r} is not an integer") from exc
    return 0


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc.msg})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    return cfg


def write_manifest(
    out_dir: Path,
    command: str,
    config: dict,
    *,
    seed: int,
    inputs: Sequence[Path] = (),
    checkpoints: Sequence[Path] = (),
    fixed_timestamp: bool = False,
) -> Path:
    """Atomically record everything needed to replay the run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "created_at": FIXED_TIMESTAMP if fixed_timestamp
        else time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "dataset_hashes": {str(p): _file_hash(Path(p)) for p in inputs},
        "checkpoint_hashes": {str(p): _file_hash(Path(p)) for p in checkpoints},
    }
    path = out_dir / "manifest.json"
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    tmp.replace(path)
    return path


def _parse_lengths(spec: str) -> list[int | None]:
    out: list[int | None] = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if part.lower() == "full":
            out.append(FULL)
        else:
            try:
                out.append(int(part))
            except ValueError as exc:
                raise ConfigError(
                    f"--lengths entries must be integers or 'full', got {part!r}"
                ) from exc
    return out


def _load_dataset(data_dir: Path, split: str, schema: str, vocab: Vocabulary):
    path = data_dir / f"{split}.jsonl"
    if not path.exists():
        raise ConfigError(f"missing dataset split: {path}")
    return load_dialogues(path, schema, vocab), path


def _model_config(file_cfg: dict, vocab: Vocabulary) -> ModelConfig:
    raw = dict(file_cfg.get("model", {}))
    raw.setdefault("vocab_size", len(vocab))
    if raw["vocab_size"] != len(vocab):
        raise ConfigError(
            f"model vocab_size {raw['vocab_size']} does not match the "
            f"vocabulary ({len(vocab)} entries)"
        )
    cfg = ModelConfig.from_dict(raw)
    cfg.validate()
    return cfg


def _train_config(file_cfg: dict, seed: int, **overrides) -> TrainConfig:
    raw = {k: v for k, v in file_cfg.items() if k not in ("model",)}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    raw["seed"] = seed
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown training-config fields: {sorted(unknown)}")
    return TrainConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args, file_cfg)
    known = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = set(file_cfg) - known
    if unknown:
        raise ConfigError(f"unknown synth-config fields: {sorted(unknown)}")
    cfg = SynthConfig(**{**file_cfg, "seed": seed})
    corpus = synthesize_corpus(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    n = len(corpus.records)
    n_valid = max(1, n // 20)
    n_test = max(1, n // 10)
    n_train = n - n_valid - n_test
    if n_train < 1:
        raise ConfigError("too few dialogues to split into train/valid/test")
    splits = {
        "train": corpus.records[:n_train],
        "valid": corpus.records[n_train:n_train + n_valid],
        "test": corpus.records[n_train + n_valid:],
    }
    written = []
    for split, records in splits.items():
        path = out / f"{split}.jsonl"
        write_dialogues_jsonl(records, path)
        written.append(path)
    vocab_path = out / "vocab.txt"
    corpus.vocab.save(vocab_path)
    written.append(vocab_path)
    know_path = out / "knowledge.txt"
    write_knowledge_file(
        (corpus.vocab.decode(s) for s in corpus.knowledge.sentences), know_path
    )
    written.append(know_path)
    write_manifest(out, "gen-data", dataclasses.asdict(cfg), seed=seed,
                   inputs=written, fixed_timestamp=args.fixed_timestamp)
    print(f"wrote {n} dialogues to {out} "
          f"(train={n_train}, valid={n_valid}, test={n_test})")
    return 0


def _cmd_pretrain_lm(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args, file_cfg)
    data_dir = Path(args.data)
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    know_path = data_dir / "knowledge.txt"
    if not know_path.exists():
        raise ConfigError(f"missing knowledge collection: {know_path}")
    collection = load_knowledge_file(know_path, vocab)
    model_cfg = _model_config(file_cfg, vocab)
    tcfg = _train_config(file_cfg.get("train", {}), seed)
    lm, records = pretrain_knowledge_lm(collection, model_cfg, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "lm.ckpt"
    save_checkpoint(lm, ckpt, vocab.content_hash())
    _write_log(out / "log.jsonl", records)
    write_manifest(out, "pretrain-lm",
                   {"model": model_cfg.to_dict(), "train": tcfg.to_dict()},
                   seed=seed, inputs=[know_path], checkpoints=[ckpt],
                   fixed_timestamp=args.fixed_timestamp)
    print(f"pretrained knowledge LM on {len(collection)} sentences; "
          f"held-out ppl {records[-1].valid_ppl:.3f}; saved to {ckpt}")
    return 0


def _write_log(path: Path, records) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def _cmd_train(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args, file_cfg)
    data_dir = Path(args.data)
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    (dialogues, collection), train_path = _load_dataset(
        data_dir, "train", args.schema, vocab
    )
    model_cfg = _model_config(file_cfg, vocab)
    tcfg = _train_config(file_cfg.get("train", {}), seed, method=args.method)
    lm = None
    inputs = [train_path]
    if args.lm is not None:
        lm, _ = load_checkpoint(args.lm, expected_vocab_hash=vocab.content_hash())
        inputs.append(Path(args.lm))
    know_path = data_dir / "knowledge.txt"
    if len(collection) == 0 and know_path.exists():
        collection = load_knowledge_file(know_path, vocab)
    out = Path(args.out)
    result = run_training(
        dialogues, vocab, model_cfg, tcfg,
        knowledge=collection if len(collection) else None,
        lm=lm, out_dir=out,
    )
    _write_log(out / "log.jsonl", result.records)
    write_manifest(out, f"train --method {tcfg.method}",
                   {"model": model_cfg.to_dict(), "train": tcfg.to_dict()},
                   seed=seed, inputs=inputs,
                   checkpoints=[result.best_checkpoint] if result.best_checkpoint else [],
                   fixed_timestamp=args.fixed_timestamp)
    print(f"trained {tcfg.method}; best validation ppl "
          f"{result.best_valid_ppl:.3f}; checkpoint {result.best_checkpoint}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args, file_cfg)
    data_dir = Path(args.data)
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    (dialogues, _), test_path = _load_dataset(data_dir, args.split, args.schema, vocab)
    params, _meta = load_checkpoint(args.ckpt, expected_vocab_hash=vocab.content_hash())
    pairs = response_pairs(dialogues)
    lengths = _parse_lengths(args.lengths) if args.lengths else list(DEFAULT_LENGTHS)
    curves = gap_sweep(
        params, pairs, lengths,
        metrics=tuple(args.metrics.split(",")),
        method=args.method or "model", dataset=data_dir.name,
        n_candidates=args.candidates, seed=seed,
    )
    report = EvalReport(dataset=data_dir.name, curves=tuple(curves))
    out = Path(args.out)
    files = emit_report(
        report, out,
        timestamp=FIXED_TIMESTAMP if args.fixed_timestamp
        else time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    )
    write_manifest(out, "eval", {"lengths": args.lengths, "metrics": args.metrics},
                   seed=seed, inputs=[test_path, Path(args.ckpt)],
                   fixed_timestamp=args.fixed_timestamp)
    print(f"wrote {len(files)} report files to {out}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args, file_cfg)
    data_dir = Path(args.data)
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    (train_dlgs, collection), train_path = _load_dataset(
        data_dir, "train", args.schema, vocab
    )
    (test_dlgs, _), test_path = _load_dataset(data_dir, "test", args.schema, vocab)
    know_path = data_dir / "knowledge.txt"
    if len(collection) == 0 and know_path.exists():
        collection = load_knowledge_file(know_path, vocab)
    model_cfg = _model_config(file_cfg, vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    lm, lm_records = pretrain_knowledge_lm(
        collection, model_cfg, _train_config(file_cfg.get("train", {}), seed)
    )
    lm_ckpt = out / "lm.ckpt"
    save_checkpoint(lm, lm_ckpt, vocab.content_hash())

    test_pairs = response_pairs(test_dlgs)
    lengths = _parse_lengths(args.lengths) if args.lengths else list(DEFAULT_LENGTHS)
    metrics = tuple(args.metrics.split(","))
    curves: list[GapCurve] = []
    know_ppl: dict[str, float] = {
        "knowledge_lm_unconditional": knowledge_lm_ppl(
            lm, test_pairs, conditioned_on_history=False
        )
    }
    results = {}
    for method in METHODS:
        tcfg = _train_config(file_cfg.get("train", {}), seed, method=method)
        result = run_training(
            train_dlgs, vocab, model_cfg, tcfg,
            knowledge=collection if len(collection) else None,
            lm=lm, out_dir=out / method,
        )
        _write_log(out / method / "log.jsonl", result.records)
        results[method] = result
        curves.extend(gap_sweep(
            result.params, test_pairs, lengths, metrics,
            method=method, dataset=data_dir.name,
            n_candidates=args.candidates, seed=seed,
        ))
        know_ppl[f"{method}_conditional"] = knowledge_lm_ppl(
            result.params, test_pairs, conditioned_on_history=True
        )
        print(f"{method}: best validation ppl {result.best_valid_ppl:.3f}")

    report = EvalReport(dataset=data_dir.name, curves=tuple(curves),
                        knowledge_ppl=know_ppl)
    report_dir = out / "report"
    files = emit_report(
        report, report_dir,
        timestamp=FIXED_TIMESTAMP if args.fixed_timestamp
        else time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    )
    write_manifest(
        out, "sweep", {"model": model_cfg.to_dict(),
                       "train": file_cfg.get("train", {}),
                       "lengths": args.lengths, "metrics": args.metrics},
        seed=seed, inputs=[train_path, test_path],
        checkpoints=[lm_ckpt] + [results[m].best_checkpoint for m in METHODS
                                 if results[m].best_checkpoint],
        fixed_timestamp=args.fixed_timestamp,
    )
    print(f"sweep complete; report in {report_dir} ({len(files)} files)")
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    report = run_verification_suite(seed=seed)
    text = json.dumps(report, indent=2, sort_keys=True, default=float) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0 if report["passed"] else 1


def _cmd_overlap_stats(args: argparse.Namespace) -> int:
    data_path = Path(args.data)
    if data_path.is_dir():
        vocab = Vocabulary.load(data_path / "vocab.txt")
        dialogues, _ = load_dialogues(data_path / "train.jsonl", args.schema, vocab)
    else:
        text = data_path.read_text(encoding="utf-8").splitlines()
        vocab = build_vocab(text, max_size=100_000)
        dialogues, _ = load_dialogues(data_path, args.schema, vocab)
    stats = knowledge_overlap_stats(dialogues)
    print(json.dumps({
        "recall": round(stats.recall, 2),
        "precision": round(stats.precision, 2),
        "f1": round(stats.f1, 2),
        "dialogues": len(dialogues),
    }, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Parser / dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="decouple",
        description="knowledge-slot dialogue training, evaluation and verification",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, out_required: bool = True) -> None:
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help=f"random seed (falls back to ${ENV_SEED}, then 0)")
        p.add_argument("--fixed-timestamp", action="store_true",
                       help="write a fixed timestamp for byte-identical outputs")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="synthesize a dialogue corpus")
    common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain-lm", help="pretrain the knowledge LM and freeze it")
    common(p)
    p.add_argument("--data", required=True, help="data directory from gen-data")
    p.set_defaults(func=_cmd_pretrain_lm)

    p = sub.add_parser("train", help="train one method")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--lm", default=None, help="pretrained knowledge LM checkpoint")
    p.add_argument("--schema", default="personachat-like")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="knowledge-gap sweep for one checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--schema", default="personachat-like")
    p.add_argument("--method", default=None, help="method tag for the report")
    p.add_argument("--lengths", default=None,
                   help="comma-separated ints or 'full' (default grid)")
    p.add_argument("--metrics", default="ppl,hits1,f1")
    p.add_argument("--candidates", type=int, default=20)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="train all methods, then evaluate them")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", default="personachat-like")
    p.add_argument("--lengths", default=None)
    p.add_argument("--metrics", default="ppl,hits1")
    p.add_argument("--candidates", type=int, default=20)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("verify", help="run the enumeration oracle suite")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("overlap-stats", help="history/knowledge unigram overlap")
    p.add_argument("--data", required=True,
                   help="data directory or JSONL file")
    p.add_argument("--schema", default="personachat-like")
    p.set_defaults(func=_cmd_overlap_stats)

    return parser


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Parse arguments and run a subcommand, mapping errors to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DecoupleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
