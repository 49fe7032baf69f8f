"""``siamsearch`` command line: one binary, one subcommand per pipeline stage.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command that
writes files also writes a ``*.manifest.json`` (or ``manifest.json`` inside an
output directory) recording the flags, seeds, input digests and artifacts, so
a rerun with an equal manifest can be checked for bit-identical outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .codefeat import LANGUAGES, get_profile, preprocess_record
from .corpus import (
    DEFAULT_MAX_SIZE,
    DEFAULT_MIN_FREQ,
    EncodedCorpus,
    build_vocabs,
    load_jsonl,
    load_vocabs,
    save_vocabs,
    split,
    write_jsonl,
)
from .errors import SiamSearchError, Unsupported
from .evalret import EmbeddingIndex, EvalConfig, build_index, evaluate, export_embeddings, query
from .losses import LOSS_KINDS, LossConfig
from .models import ARCHS, LAYERS, ModelConfig, build
from .synthcorpus import SynthSpec, generate
from .trainer import TrainConfig, fit, load_checkpoint

log = logging.getLogger("siamsearch")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


@dataclass
class RunManifest:
    command: str
    flags: dict
    seeds: dict
    inputs: dict[str, str] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", "utf-8")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(args, inputs: list, artifacts: list, seeds: dict | None = None) -> RunManifest:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    flags = json.loads(json.dumps(flags, default=str))
    return RunManifest(
        command=args.command,
        flags=flags,
        seeds=seeds or {},
        inputs={str(p): file_digest(p) for p in inputs},
        artifacts=[str(a) for a in artifacts],
    )


def _sidecar(path: str | Path) -> Path:
    return Path(str(path) + ".manifest.json")


def _load_corpus(path: str, lang: str | None):
    """Read a corpus and fill any missing code features for ``lang``."""
    records = load_jsonl(path)
    if lang is None:
        return records
    profile = get_profile(lang)
    return [preprocess_record(r, profile)[0] for r in records]


# ---- argument types ---------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _batch_size(text: str) -> int:
    value = int(text)
    if value < 2:
        raise argparse.ArgumentTypeError(
            "batch size must be >= 2 (in-batch negatives and batchnorm need two examples)"
        )
    return value


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3 or abs(sum(parts) - 1.0) > 1e-9 or min(parts) < 0:
        raise argparse.ArgumentTypeError("expected three non-negative ratios summing to 1, e.g. 0.8,0.1,0.1")
    return tuple(parts)


# ---- commands ---------------------------------------------------------------


def cmd_preprocess(args) -> int:
    profile = get_profile(args.lang)
    records = load_jsonl(args.input)
    enriched, missing = [], 0
    for rec in records:
        out, has_name = preprocess_record(rec, profile)
        enriched.append(out)
        missing += not has_name
    write_jsonl(enriched, args.output)
    _manifest(args, [args.input], [args.output]).write(_sidecar(args.output))
    print(f"preprocessed {len(enriched)} records; {missing} lack a method name")
    return EXIT_OK


def cmd_vocab(args) -> int:
    records = _load_corpus(args.corpus, args.lang)
    vocabs = build_vocabs(records, args.min_freq, args.max_size)
    save_vocabs(vocabs, args.out)
    _manifest(args, [args.corpus], [args.out]).write(_sidecar(args.out))
    sizes = " ".join(f"{f}={len(v)}" for f, v in vocabs.items())
    print(f"vocabularies written to {args.out}: {sizes}")
    return EXIT_OK


def cmd_train(args) -> int:
    records = _load_corpus(args.corpus, args.lang)
    has_names = args.lang != "sql" and any(r.method_name for r in records)
    if args.arch == "bil_m" and not has_names:
        raise Unsupported(
            "--arch bil_m needs method names, which this corpus does not have "
            "(SQL snippets carry none); choose bil_a, bil_cs or dcs"
        )
    train, valid, test = split(records, args.split, seed=args.seed)
    if len(valid) < 2:
        raise SiamSearchError(f"validation split has {len(valid)} records; need at least 2")
    vocabs = load_vocabs(args.vocab) if args.vocab else build_vocabs(train, args.min_freq)

    config = ModelConfig(
        arch=args.arch,
        embed_dim=args.embed_dim,
        lstm_hidden=args.hidden,
        s_emb=args.semb,
        loss=args.loss,
        margin=args.margin,
        seed=args.seed,
        vocab_sizes={f: len(v) for f, v in vocabs.items()},
    )
    model = build(config, has_method_names=has_names)
    train_cfg = TrainConfig(
        initial_lr=args.lr,
        patience=args.patience,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        seed=args.seed,
        validation_pool_size=args.val_pool_size,
        validation_layer=args.val_layer,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train_log.jsonl",):
        (out / name).unlink(missing_ok=True)
    for name, part in (("train.jsonl", train), ("valid.jsonl", valid), ("test.jsonl", test)):
        write_jsonl(part, out / name)

    def progress(entry: dict) -> None:
        log.info("epoch %d loss %.6f val_mrr %s lr %g", entry["epoch"], entry["mean_loss"], entry.get("val_mrr"), entry["lr"])

    result = fit(
        model,
        EncodedCorpus.from_records(train, vocabs, config.max_lens),
        EncodedCorpus.from_records(valid, vocabs, config.max_lens),
        train_cfg,
        LossConfig(args.loss, args.margin),
        vocabs=vocabs,
        out_dir=out,
        on_epoch=progress,
    )
    artifacts = [out / n for n in ("best.ckpt", "last.ckpt", "train_log.jsonl", "train.jsonl", "valid.jsonl", "test.jsonl")]
    inputs = [args.corpus] + ([args.vocab] if args.vocab else [])
    _manifest(args, inputs, artifacts, {"seed": args.seed}).write(out / "manifest.json")
    best = result.best.state
    print(
        f"final validation MRR {best.best_val_mrr:.6f} (best epoch {best.best_epoch}, "
        f"{result.last.state.epoch} epochs run, {best.halvings_used} lr halvings at best)"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, vocabs = load_checkpoint(args.model)
    records = _load_corpus(args.corpus, args.lang)
    data = EncodedCorpus.from_records(records, vocabs, model.config.max_lens)
    layers = LAYERS if args.layer == "both" else (args.layer,)
    reports = []
    for layer in layers:
        cfg = EvalConfig(pool_size=args.pool_size, layer=layer, seed=args.seed, threads=args.threads)
        report = evaluate(model, data, cfg)
        reports.append(report)
        print(report.line())
    if args.report:
        payload = {"model": str(args.model), "reports": [r.to_json() for r in reports]}
        Path(args.report).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")
        _manifest(args, [args.model, args.corpus], [args.report], {"seed": args.seed}).write(_sidecar(args.report))
    return EXIT_OK


def cmd_index(args) -> int:
    model, _, vocabs = load_checkpoint(args.model)
    records = _load_corpus(args.corpus, args.lang)
    index = build_index(model, records, vocabs, args.layer)
    index.save(args.out)
    _manifest(args, [args.model, args.corpus], [args.out]).write(_sidecar(args.out))
    print(f"indexed {len(index.ids)} snippets at the {args.layer} layer into {args.out}")
    return EXIT_OK


def cmd_query(args) -> int:
    model, _, vocabs = load_checkpoint(args.model)
    index = EmbeddingIndex.load(args.index)
    previews = dict(zip(index.ids, index.previews))
    for rank, (rid, score) in enumerate(query(index, model, vocabs, args.text, args.k), start=1):
        print(f"{rank}\t{score:.6f}\t{rid}\t{previews.get(rid, '')}")
    return EXIT_OK


def cmd_export_emb(args) -> int:
    model, _, vocabs = load_checkpoint(args.model)
    records = _load_corpus(args.corpus, args.lang)
    export_embeddings(model, records, vocabs, args.layer, args.out, args.pca2, args.side, args.label_field)
    _manifest(args, [args.model, args.corpus], [args.out]).write(_sidecar(args.out))
    print(f"wrote {len(records)} {args.side} embeddings to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec(args.n_records, args.n_concepts, args.noise, args.seed)
    records = generate(spec, args.out)
    _manifest(args, [], [args.out], {"seed": args.seed}).write(_sidecar(args.out))
    print(f"generated {len(records)} records over {spec.n_concepts} concepts into {args.out}")
    return EXIT_OK


# ---- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siamsearch", description="Siamese-network semantic code search")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="extract method names, API sequences and code tokens")
    p.add_argument("--input", required=True)
    p.add_argument("--lang", required=True, choices=LANGUAGES)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("vocab", help="build the four per-field vocabularies")
    p.add_argument("--corpus", required=True)
    p.add_argument("--min-freq", type=_positive_int, default=DEFAULT_MIN_FREQ)
    p.add_argument("--max-size", type=_positive_int, default=DEFAULT_MAX_SIZE)
    p.add_argument("--lang", choices=LANGUAGES, default=None, help="fill missing code features first")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("train", help="train a model; writes checkpoints, log, splits and manifest")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", default=None, help="vocabulary file (built from the train split if omitted)")
    p.add_argument("--min-freq", type=_positive_int, default=DEFAULT_MIN_FREQ, help="used only without --vocab")
    p.add_argument("--lang", choices=LANGUAGES, default=None)
    p.add_argument("--arch", choices=ARCHS, default="dcs")
    p.add_argument("--semb", type=_positive_int, default=100)
    p.add_argument("--loss", choices=LOSS_KINDS, default="cosine_contrastive")
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--batch-size", type=_batch_size, default=32)
    p.add_argument("--max-epochs", type=_positive_int, default=500)
    p.add_argument("--patience", type=_positive_int, default=40)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--embed-dim", type=_positive_int, default=100)
    p.add_argument("--hidden", type=_positive_int, default=None, help="LSTM hidden size (400 for dcs, 200 otherwise)")
    p.add_argument("--split", type=_ratios, default=(0.8, 0.1, 0.1))
    p.add_argument("--val-pool-size", type=_positive_int, default=50)
    p.add_argument("--val-layer", choices=LAYERS, default="siamese")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pool-based MRR evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--lang", choices=LANGUAGES, default=None)
    p.add_argument("--pool-size", type=_positive_int, default=50)
    p.add_argument("--layer", choices=LAYERS + ("both",), default="siamese")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--report", default=None, help="write the report(s) as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("index", help="embed a code corpus into a retrieval index")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--lang", choices=LANGUAGES, default=None)
    p.add_argument("--layer", choices=LAYERS, default="extraction")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="top-k snippets for a description")
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("-k", type=_positive_int, default=10)
    p.add_argument("text")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("export-emb", help="write embeddings as TSV for external plotting")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--lang", choices=LANGUAGES, default=None)
    p.add_argument("--layer", choices=LAYERS, default="extraction")
    p.add_argument("--side", choices=("text", "code"), default="text")
    p.add_argument("--label-field", default=None, help="record extra field to emit as a label column")
    p.add_argument("--pca2", action="store_true", help="append two PCA coordinates")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_emb)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--n-records", type=_positive_int, default=64)
    p.add_argument("--n-concepts", type=_positive_int, default=8)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _show_warning
            return args.func(args)
    except (SiamSearchError, ValueError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
