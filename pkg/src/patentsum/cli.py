"""Command-line front end: preprocess -> train -> summarize/evaluate.

Every subcommand is deterministic given (seed, inputs, config) and writes
a manifest describing exactly how its artifacts were produced, including
content hashes of the vocabulary and dataset files it consumed or created.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig, load_config_file
from .corpus import (
    DataError,
    GrammarParams,
    Vocabulary,
    build_vocab,
    encode_example,
    generate_synthetic,
    read_records,
    split_dataset,
    synthetic_vocab_size,
    tokenize,
    write_encoded,
    write_records,
)
from .rouge import evaluate_corpus
from .training import (
    DivergenceError,
    decode_tokens,
    load_checkpoint,
    prepare_data,
    train,
)

DATA_DIR_ENV = "PATENTSUM_DATA_DIR"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int
    inputs: dict[str, str]
    outputs: list[str]
    artifact_hashes: dict[str, str]

    def save(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _write_manifest(subcommand, out_dir: Path, config: dict, seed: int,
                    inputs: dict[str, str], artifacts: list[Path]) -> None:
    manifest = RunManifest(
        subcommand=subcommand,
        config=config,
        seed=seed,
        inputs=inputs,
        outputs=[p.name for p in artifacts],
        artifact_hashes={p.name: _sha256(p) for p in artifacts if p.exists()},
    )
    manifest.save(out_dir)


def _resolve_data_dir(value: str | None) -> Path:
    if value:
        return Path(value)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise ConfigError(f"no data directory given and {DATA_DIR_ENV} is not set")


def _write_dataset(out_dir: Path, split, vocab: Vocabulary, tokenizer: str,
                   seed: int, subcommand: str, config: dict, inputs: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for name, records in (("train", split.train), ("test", split.test),
                          ("validation", split.validation)):
        rec_path = out_dir / f"{name}.jsonl"
        write_records(rec_path, records)
        enc_path = out_dir / f"{name}.encoded.jsonl"
        write_encoded(enc_path, (encode_example(r, vocab, tokenizer) for r in records))
        artifacts += [rec_path, enc_path]
    vocab_path = out_dir / "vocab.tsv"
    vocab.save(vocab_path)
    artifacts.append(vocab_path)
    config = dict(config, tokenizer=tokenizer)
    _write_manifest(subcommand, out_dir, config, seed, inputs, artifacts)


def _load_dataset_manifest(data_dir: Path) -> dict:
    path = data_dir / "manifest.json"
    if not path.exists():
        raise DataError(f"{data_dir} has no manifest.json; run preprocess or synth first")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = read_records(args.raw_path)
    collapse = args.tokenizer == "whitespace"
    kept, errors = [], []
    for i, record in enumerate(raw):
        cleaned = record.cleaned(collapse_whitespace=collapse)
        try:
            cleaned.validate()
        except DataError as exc:
            errors.append(
                {"index": i, "publication_number": record.publication_number,
                 "reason": str(exc)}
            )
            continue
        kept.append(cleaned)
    if errors:
        with open(out_dir / "errors.jsonl", "w", encoding="utf-8") as fh:
            for e in errors:
                fh.write(json.dumps(e, ensure_ascii=False) + "\n")
        print(f"rejected {len(errors)} record(s); see {out_dir / 'errors.jsonl'}",
              file=sys.stderr)
    split = split_dataset(kept, args.seed)
    vocab = build_vocab(
        (
            tokenize(text, args.tokenizer)
            for r in split.train
            for text in (r.specification, r.claims, r.abstract)
        ),
        max_size=args.vocab_max,
    )
    _write_dataset(out_dir, split, vocab, args.tokenizer, args.seed, "preprocess",
                   {"vocab_max": args.vocab_max},
                   {"raw_path": str(args.raw_path)})
    print(f"wrote {len(split.train)}/{len(split.test)}/{len(split.validation)} "
          f"records and a {len(vocab)}-token vocabulary to {out_dir}")
    return EXIT_OK


def cmd_synth(args) -> int:
    grammar = GrammarParams(
        body_sentences=args.body_sentences,
        repetition_prone=args.repetition_prone,
    )
    records = generate_synthetic(args.n, args.seed, grammar)
    vocab_max = args.vocab_max or synthetic_vocab_size(records)
    split = split_dataset(records, args.seed)
    vocab = build_vocab(
        (
            tokenize(text, "whitespace")
            for r in split.train
            for text in (r.specification, r.claims, r.abstract)
        ),
        max_size=vocab_max,
    )
    out_dir = Path(args.out_dir)
    _write_dataset(out_dir, split, vocab, "whitespace", args.seed, "synth",
                   {"n": args.n, "vocab_max": vocab_max,
                    "grammar": dataclasses.asdict(grammar)},
                   {})
    print(f"wrote {len(split.train)}/{len(split.test)}/{len(split.validation)} "
          f"synthetic records to {out_dir}")
    return EXIT_OK


_CONFIG_FLAGS = {
    "K": "K",
    "hidden_master": "hidden_master",
    "hidden_slave": "hidden_slave",
    "hidden_decoder": "hidden_decoder",
    "embedding": "embedding",
    "d_c": "d_c",
    "batch_size": "batch_size",
    "dropout": "dropout",
    "lr": "learning_rate",
    "coverage_weight": "coverage_weight",
    "epochs": "epochs",
    "seed": "seed",
    "grad_clip": "grad_clip",
    "patience": "early_stop_patience",
    "dtype": "dtype",
    "init_range": "init_range",
    "max_in": "max_in",
    "max_out": "max_out",
}


def _build_train_config(args, tokenizer: str) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        cfg = load_config_file(args.config, cfg)
    values = cfg.as_dict()
    values["tokenizer"] = tokenizer
    for flag, field in _CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[field] = v
    if args.no_pointer:
        values["pointer"] = False
    if args.no_coverage:
        values["coverage"] = False
    if args.no_slave:
        values["slave"] = False
    if args.spec_only and args.claims_only:
        raise ConfigError("--spec-only and --claims-only are mutually exclusive")
    if args.spec_only:
        values["use_claims"], values["use_spec"] = False, True
    if args.claims_only:
        values["use_claims"], values["use_spec"] = True, False
    if args.untie_ws:
        values["untie_ws"] = True
    if args.cd_from_source:
        values["cd_from_source"] = True
    return TrainConfig.from_dict(values)


def cmd_train(args) -> int:
    data_dir = _resolve_data_dir(args.data_dir)
    manifest = _load_dataset_manifest(data_dir)
    tokenizer = manifest["config"].get("tokenizer", "char_cjk")
    cfg = _build_train_config(args, tokenizer)
    vocab = Vocabulary.load(data_dir / "vocab.tsv")
    train_records = read_records(data_dir / "train.jsonl")
    val_records = read_records(data_dir / "validation.jsonl")
    data = prepare_data(train_records, val_records, vocab, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(data, cfg, out_dir=out_dir, quiet=args.quiet,
                   target_train_loss=args.target_loss)
    artifacts = [p for p in (out_dir / "metrics.tsv",
                             out_dir / "checkpoint_last.npz",
                             out_dir / "checkpoint_best.npz") if p.exists()]
    inputs = {
        "data_dir": str(data_dir),
        "vocab": str(data_dir / "vocab.tsv"),
        "vocab_sha256": _sha256(data_dir / "vocab.tsv"),
        "dataset_manifest": str(data_dir / "manifest.json"),
    }
    _write_manifest("train", out_dir, cfg.as_dict(), cfg.seed, inputs, artifacts)
    best = result.best_epoch
    print(f"trained {len(result.history)} epoch(s); best validation ROUGE-L at "
          f"epoch {best}; artifacts in {out_dir}")
    return EXIT_OK


def _vocab_for_checkpoint(args, ckpt_path: Path) -> Vocabulary:
    if args.vocab:
        return Vocabulary.load(args.vocab)
    manifest_path = ckpt_path.parent / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        vocab_path = manifest.get("inputs", {}).get("vocab")
        if vocab_path and Path(vocab_path).exists():
            return Vocabulary.load(vocab_path)
    raise ConfigError(
        "cannot locate the vocabulary; pass --vocab or keep the training "
        "manifest next to the checkpoint"
    )


def _join_tokens(tokens: list[str], tokenizer: str) -> str:
    return " ".join(tokens) if tokenizer == "whitespace" else "".join(tokens)


def cmd_summarize(args) -> int:
    ckpt_path = Path(args.checkpoint)
    ckpt = load_checkpoint(ckpt_path)
    cfg = ckpt.cfg
    if args.max_out is not None:
        cfg = dataclasses.replace(cfg, max_out=args.max_out)
    vocab = _vocab_for_checkpoint(args, ckpt_path)
    records = [r.cleaned(collapse_whitespace=cfg.tokenizer == "whitespace")
               for r in read_records(args.input)]
    from .training import encode_for_config

    trace_dir = Path(args.trace) if args.trace else None
    if trace_dir is not None:
        trace_dir.mkdir(parents=True, exist_ok=True)
    out_fh = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    mode = "beam" if args.beam > 1 else "greedy"
    try:
        for record in records:
            example = encode_for_config(record, vocab, cfg)
            tokens, result = decode_tokens(example, ckpt.params, cfg, vocab,
                                           mode=mode, beam_width=args.beam)
            line = {
                "publication_number": record.publication_number,
                "summary": _join_tokens(tokens, cfg.tokenizer),
            }
            out_fh.write(json.dumps(line, ensure_ascii=False) + "\n")
            if trace_dir is not None:
                result.trace.save(trace_dir / f"{record.publication_number}.trace.jsonl")
    finally:
        if out_fh is not sys.stdout:
            out_fh.close()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt_path = Path(args.checkpoint)
    ckpt = load_checkpoint(ckpt_path)
    cfg = ckpt.cfg
    data_dir = _resolve_data_dir(args.data_dir)
    vocab = Vocabulary.load(data_dir / "vocab.tsv")
    if len(vocab) != ckpt.params.vocab_size():
        raise ConfigError(
            f"vocabulary size {len(vocab)} does not match checkpoint "
            f"embedding {ckpt.params.vocab_size()}"
        )
    records = read_records(data_dir / f"{args.split}.jsonl")
    if not records:
        raise DataError(f"split {args.split!r} in {data_dir} is empty")
    from .training import encode_for_config

    examples = [encode_for_config(r, vocab, cfg) for r in records]
    references = [tokenize(r.abstract, cfg.tokenizer) for r in records]
    decoded = [decode_tokens(ex, ckpt.params, cfg, vocab)[0] for ex in examples]
    scores = evaluate_corpus(decoded, references)
    name = args.name or ckpt_path.stem
    lines = ["model\trouge-1\trouge-2\trouge-l",
             f"{name}\t{scores.rouge_1:.4f}\t{scores.rouge_2:.4f}\t{scores.rouge_l:.4f}"]
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    if args.output:
        Path(args.output).write_text(report, encoding="utf-8")
    return EXIT_OK


def cmd_table(args) -> int:
    """Assemble several evaluate reports into one table."""
    rows = []
    header = None
    for path in args.reports:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise DataError(f"{path}: empty report")
        if header is None:
            header = lines[0]
        elif lines[0] != header:
            raise DataError(f"{path}: header mismatch with {args.reports[0]}")
        rows.extend(lines[1:])
    table = "\n".join([header] + rows) + "\n"
    sys.stdout.write(table)
    if args.output:
        Path(args.output).write_text(table, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patentsum",
        description="Dual-encoder pointer-generator summarizer for patent text.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("preprocess", help="clean, split 8:1:1, and encode a record file")
    p.add_argument("raw_path", help="JSONL records (title, publication_number, "
                                    "abstract, specification, claims)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tokenizer", choices=("char_cjk", "whitespace"), default="char_cjk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-max", type=int, default=100_000)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a synthetic corpus in the standard layout")
    p.add_argument("n", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-max", type=int, default=None,
                   help="default: keep every frequent token, drop per-record rare terms")
    p.add_argument("--body-sentences", type=int, default=2)
    p.add_argument("--repetition-prone", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a prepared data directory")
    p.add_argument("--data-dir", default=None,
                   help=f"prepared dataset (default: ${DATA_DIR_ENV})")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--K", type=int, default=None, help="re-encoding period")
    p.add_argument("--hidden-master", type=int, default=None)
    p.add_argument("--hidden-slave", type=int, default=None)
    p.add_argument("--hidden-decoder", type=int, default=None)
    p.add_argument("--embedding", type=int, default=None)
    p.add_argument("--d-c", dest="d_c", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda", dest="coverage_weight", type=float, default=None,
                   help="coverage loss weight")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.add_argument("--init-range", type=float, default=None)
    p.add_argument("--max-in", type=int, default=None)
    p.add_argument("--max-out", type=int, default=None)
    p.add_argument("--no-pointer", action="store_true")
    p.add_argument("--no-coverage", action="store_true")
    p.add_argument("--no-slave", action="store_true")
    p.add_argument("--spec-only", action="store_true")
    p.add_argument("--claims-only", action="store_true")
    p.add_argument("--untie-ws", action="store_true")
    p.add_argument("--cd-from-source", action="store_true")
    p.add_argument("--target-loss", type=float, default=None,
                   help="stop once the training loss falls below this value")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("summarize", help="decode summaries for a record file")
    p.add_argument("checkpoint")
    p.add_argument("input", help="JSONL records to summarize")
    p.add_argument("--output", default=None, help="default: stdout")
    p.add_argument("--vocab", default=None)
    p.add_argument("--beam", type=int, default=1, help="beam width; 1 = greedy")
    p.add_argument("--trace", default=None,
                   help="directory for per-record decode audit files")
    p.add_argument("--max-out", type=int, default=None)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("evaluate", help="ROUGE report for one split")
    p.add_argument("checkpoint")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--split", choices=("train", "test", "validation"),
                   default="test")
    p.add_argument("--output", default=None)
    p.add_argument("--name", default=None, help="row label in the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("table", help="merge evaluate reports into one table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_table)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
