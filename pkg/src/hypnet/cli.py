"""Command-line entry point: extract, split, train, eval, match, gradcheck."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import evaluate as E
from .corpus import load_corpus
from .extract.build import build_corpus, read_manifest
from .extract.split import PROTOCOLS, split_dataset
from .gradcheck import TOLERANCE, run_suite
from .model import DEFAULT_ARCH
from .tensor import precision
from .train import ConfigError, metrics_csv, run_training
from .weights_io import WeightsFormatError, load_weights, save_weights

RESOLVED_CONFIG = "resolved_config.txt"


def _resolve(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.workers is not None:
        overrides["run.workers"] = str(args.workers)
    if args.precision is not None:
        overrides["run.precision"] = args.precision
    return cfg.updated(overrides)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")


def cmd_extract(args, cfg: C.RunConfig) -> int:
    manifest = Path(args.manifest)
    entries = read_manifest(manifest)
    out = Path(args.out)
    meta = build_corpus(
        entries,
        manifest.parent,
        out,
        cfg.extract,
        cfg.run.seed,
        protocol=cfg.corpus.split_protocol,
        workers=cfg.run.workers,
        dedup=cfg.corpus.dedup,
        on_error=args.on_error,
    )
    C.write(out / RESOLVED_CONFIG, cfg)
    print(f"extracted {meta['n_patch_pairs']} patch pairs from {len(meta['pairs'])} image pairs into {out}")
    return 0


def cmd_split(args, cfg: C.RunConfig) -> int:
    protocol = args.protocol or cfg.corpus.split_protocol
    assignment = split_dataset(read_manifest(Path(args.manifest)), protocol)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "split"])
    for key in sorted(assignment):
        writer.writerow([key, assignment[key]])
    out = Path(args.out)
    _write_text(out, buf.getvalue())
    C.write(out.parent / RESOLVED_CONFIG, cfg.updated({"corpus.split_protocol": protocol}))
    counts = {s: sum(v == s for v in assignment.values()) for s in ("train", "val", "test")}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_train(args, cfg: C.RunConfig) -> int:
    corpus = load_corpus(Path(args.corpus), splits=("train", "val"))
    arch = DEFAULT_ARCH if cfg.model.use_hyper else DEFAULT_ARCH.without_hyper()
    out = Path(args.out)
    out_dir = out.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = Path(args.metrics) if args.metrics else out_dir / "metrics.csv"

    result = run_training(
        corpus,
        cfg.train,
        seed=cfg.run.seed,
        policy=cfg.augment,
        arch=arch,
        checkpoint=Path(args.checkpoint) if args.checkpoint else None,
        resume=Path(args.resume) if args.resume else None,
    )
    save_weights(out, result.weights)
    _write_text(metrics, metrics_csv(result.records))
    C.write(out_dir / RESOLVED_CONFIG, cfg)
    if result.records:
        last = result.records[-1]
        print(f"trained {len(result.records)} epochs; final val fpr95 {last.val_fpr95:.6f}; weights {out}")
    else:
        print(f"no epochs run; initial weights written to {out}")
    return 0


def _weights_for(path: str, cfg: C.RunConfig):
    return load_weights(Path(path), dtype=np.float64 if cfg.run.precision == "f64" else np.float32)


def cmd_eval(args, cfg: C.RunConfig) -> int:
    weights = _weights_for(args.weights, cfg)
    corpus = load_corpus(Path(args.corpus), splits=(args.split,))
    report = E.evaluate_corpus(weights, corpus, args.split, cfg.train.eval_batch_size)
    table = report.to_csv()
    sys.stdout.write(table)
    out = Path(args.out) if args.out else Path(args.weights).parent / f"eval_{args.split}.csv"
    _write_text(out, table)
    C.write(out.parent / RESOLVED_CONFIG, cfg)
    return 0


def cmd_match(args, cfg: C.RunConfig) -> int:
    """Nearest modality-1 patch for every modality-0 patch of the matched pairs."""
    weights = _weights_for(args.weights, cfg)
    corpus = load_corpus(Path(args.corpus), splits=(args.split,))
    rows = corpus.rows(args.split)
    rows = rows[corpus.label[rows] == 1]
    if len(rows) == 0:
        raise ConfigError(f"no matched pairs in split {args.split!r}")
    bs = cfg.train.eval_batch_size
    queries = E.describe(weights, corpus.patches[0][corpus.idx0[rows]], 0, bs)
    gallery = E.describe(weights, corpus.patches[1][corpus.idx1[rows]], 1, bs)
    idx, dist = E.match_descriptors(queries, gallery, args.method)
    names0 = corpus.names[0] if corpus.names else None
    names1 = corpus.names[1] if corpus.names else None
    buf = io.StringIO()
    buf.write("query,nearest,distance,correct\n")
    for q, (g, d) in enumerate(zip(idx.tolist(), dist.tolist())):
        qn = names0[corpus.idx0[rows[q]]] if names0 else str(q)
        gn = names1[corpus.idx1[rows[g]]] if names1 else str(g)
        buf.write(f"{qn},{gn},{d:.6f},{int(g == q)}\n")
    out = Path(args.out) if args.out else Path(args.weights).parent / f"matches_{args.split}.csv"
    _write_text(out, buf.getvalue())
    C.write(out.parent / RESOLVED_CONFIG, cfg)
    print(f"top-1 accuracy {np.mean(idx == np.arange(len(idx))):.6f} over {len(idx)} queries ({args.method})")
    return 0


def cmd_gradcheck(args, cfg: C.RunConfig) -> int:
    results = run_suite(cfg.run.seed, instances=args.instances, include_model=not args.skip_model)
    failed = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<16} max_rel_error {r.max_rel_error:.3e} {status}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypnet", description="Cross-spectral patch descriptors with hypernetwork modules.")
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="overrides run.seed")
    p.add_argument("--workers", type=int, help="overrides run.workers; 1 is fully deterministic")
    p.add_argument("--precision", choices=("f32", "f64"), help="overrides run.precision")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", help="extract patch pairs from a manifest of aligned image pairs")
    s.add_argument("manifest", help="CSV with id,path_a,path_b,group,day_night (paths relative to it)")
    s.add_argument("out", help="output corpus directory")
    s.add_argument("--on-error", choices=("abort", "skip"), default="abort", help="what to do with unreadable images")

    s = sub.add_parser("split", help="assign manifest entries to train/val/test")
    s.add_argument("manifest")
    s.add_argument("out", help="output CSV with id,split")
    s.add_argument("--protocol", choices=PROTOCOLS)

    s = sub.add_parser("train", help="train on a corpus and write a weights file")
    s.add_argument("corpus")
    s.add_argument("out", help="weights file to write")
    s.add_argument("--metrics", help="metrics CSV (default: metrics.csv next to the weights)")
    s.add_argument("--checkpoint", help="write full training state here after every epoch")
    s.add_argument("--resume", help="continue from a checkpoint file")

    s = sub.add_parser("eval", help="FPR95 per category and mean")
    s.add_argument("corpus")
    s.add_argument("weights")
    s.add_argument("--split", default="test")
    s.add_argument("--out", help="results CSV (default: eval_<split>.csv next to the weights)")

    s = sub.add_parser("match", help="nearest-neighbor matching of modality-0 against modality-1 descriptors")
    s.add_argument("corpus")
    s.add_argument("weights")
    s.add_argument("--split", default="test")
    s.add_argument("--method", choices=("tree", "brute"), default="tree")
    s.add_argument("--out", help="matches CSV (default: matches_<split>.csv next to the weights)")

    s = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the full model")
    s.add_argument("--instances", type=int, default=100, help="random instances per primitive")
    s.add_argument("--skip-model", action="store_true", help="skip the end-to-end model check")
    return p


COMMANDS = {
    "extract": cmd_extract,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "match": cmd_match,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        with precision("f64" if args.command == "gradcheck" else cfg.run.precision):
            return COMMANDS[args.command](args, cfg)
    except (ConfigError, WeightsFormatError, FileNotFoundError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
