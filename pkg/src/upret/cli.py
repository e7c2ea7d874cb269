"""``upret`` command line: generate / train / evaluate / selftest.

Exit codes: 0 ok, 1 selftest failure, 2 configuration, 3 I/O, 4 numeric abort,
5 checkpoint/corpus incompatibility.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data, plotting
from .config import ConfigError, corpus_spec, load_config, train_config
from .metrics import TSV_HEADER, rank_matrix
from .trainer import (
    LOG_HEADER,
    CompatibilityError,
    NumericAbort,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_COMPAT = range(6)

log = logging.getLogger("upret")

# flag dest -> config key
OVERRIDES = {
    "seed": "seed",
    "k": "k",
    "eta": "eta",
    "lambda_ot": "lambda_ot",
    "lambda_d": "lambda_d",
    "tau": "tau",
    "lr": "lr",
    "batch": "batch",
    "epochs": "epochs",
    "threads": "threads",
}


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="Monte Carlo draws per token")
    p.add_argument("--eta", type=float, help="entropic regularisation")
    p.add_argument("--lambda-ot", dest="lambda_ot", type=float)
    p.add_argument("--lambda-d", dest="lambda_d", type=float)
    p.add_argument("--tau", type=float, help="contrastive temperature")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--threads", type=int)


def _values(args) -> dict:
    overrides = {key: getattr(args, dest, None) for dest, key in OVERRIDES.items()}
    return load_config(args.config, overrides)


def _load_split(manifest: Path, split: str) -> tuple[int, list]:
    files = data.read_manifest(manifest)
    if split not in files:
        raise FileNotFoundError(f"manifest {manifest} has no '{split}' entry")
    return data.load_features(files[split])


def cmd_generate(args) -> int:
    spec = corpus_spec(_values(args))
    out = Path(args.out)
    splits = data.generate_corpus(spec)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in data.SPLITS:
        fname = f"{name}.uprf"
        data.write_features(out / fname, splits[name], dim=spec.dim)
        files[name] = fname
    data.write_manifest(out / "manifest.txt", files)
    counts = ", ".join(f"{k}={len(v)}" for k, v in splits.items())
    print(f"corpus: pairs={spec.pairs} ({counts}) dim={spec.dim} vocab={spec.vocab} "
          f"polysemy={spec.polysemy} noise={spec.noise} seed={spec.seed}")
    print(f"manifest: {out / 'manifest.txt'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = train_config(_values(args))
    manifest = Path(args.manifest)
    try:
        _, train_set = _load_split(manifest, "train")
        files = data.read_manifest(manifest)
        val_set = data.load_features(files["val"])[1] if "val" in files else []
    except (OSError, ValueError) as exc:
        print(f"error: cannot read corpus: {exc}", file=sys.stderr)
        return EXIT_IO
    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        except CompatibilityError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_COMPAT
        if (resume.arch["n_heads"], resume.arch["sigma_floor"]) != (cfg.n_heads, cfg.sigma_floor):
            print("error: resume checkpoint does not match the configuration", file=sys.stderr)
            return EXIT_COMPAT
    if not train_set:
        print("error: training split is empty", file=sys.stderr)
        return EXIT_IO
    dim = train_set[0].video.shape[1]
    if dim % 2 or (dim // 2) % cfg.n_heads:
        print(f"config error: n_heads: half width {dim // 2} is not divisible by {cfg.n_heads} heads",
              file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.uprc"
    log_path = out / "metrics.tsv"
    mode = "a" if resume is not None and log_path.exists() else "w"
    with open(log_path, mode) as log_fh:
        if mode == "w":
            log_fh.write(LOG_HEADER + "\n")

        def on_epoch(rec, ckpt):
            log_fh.write(rec.as_tsv() + "\n")
            log_fh.flush()
            print(rec.as_tsv(), flush=True)
            if ckpt is not None:
                save_checkpoint(ckpt_path, ckpt)

        try:
            result = train(cfg, train_set, val_set, resume=resume, on_epoch=on_epoch)
        except NumericAbort as exc:
            save_checkpoint(ckpt_path, exc.checkpoint)
            print(f"error: {exc}; last good checkpoint at {ckpt_path}", file=sys.stderr)
            return EXIT_NUMERIC
        except CompatibilityError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_COMPAT
        except ValueError as exc:  # e.g. head count does not divide the corpus width
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    save_checkpoint(ckpt_path, result.checkpoint)
    if not args.no_plots:
        from .trainer import EpochRecord

        history = _read_log(log_path, EpochRecord)
        if history:
            plotting.training_curves(history, out / "training_curves.png")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def _read_log(path: Path, record_cls) -> list:
    rows = []
    for line in path.read_text().splitlines()[1:]:
        parts = line.split("\t")
        rows.append(record_cls(int(parts[0]), *(float(x) for x in parts[1:5])))
    return rows


def cmd_evaluate(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    arch = None
    if args.config:
        values = load_config(args.config)
        arch = dict(ckpt.arch)
        for key in ("n_heads", "sigma_floor"):
            if key in values:
                arch[key] = values[key]
        if "dim" in values:
            arch["dim"] = values["dim"]
    try:
        _, samples = _load_split(Path(args.manifest), args.split)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read corpus: {exc}", file=sys.stderr)
        return EXIT_IO
    if not samples:
        print(f"error: split '{args.split}' is empty", file=sys.stderr)
        return EXIT_IO
    directions = ("t2v", "v2t") if args.direction == "both" else (args.direction,)
    try:
        reports = evaluate(ckpt, samples, directions, arch=arch)
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    print(TSV_HEADER)
    for d in directions:
        print(reports[d].as_tsv())
    print()
    for d in directions:
        print("\n".join(reports[d].as_keyvalue()))
    if args.plot:
        from .model import inference_similarity
        import numpy as np

        cfg = TrainConfig.from_dict(ckpt.config)
        S = inference_similarity(ckpt.model(), samples, cfg.k, np.random.default_rng(cfg.eval_seed),
                                 sample=cfg.eval_sampling)
        plotting.recall_curve({d: rank_matrix(S.T, d) for d in directions}, args.plot)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(eta=args.eta)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_SELFTEST
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="upret", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus as UPRF files plus a manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a corpus manifest")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-plots", action="store_true")
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="refuse to run if its architecture differs from the checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--direction", choices=("t2v", "v2t", "both"), default="both")
    p.add_argument("--plot", help="write a recall-at-K figure to this path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", help="run the fast oracle suite")
    p.add_argument("--eta", type=float, help="override the OT checks' regularisation")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
