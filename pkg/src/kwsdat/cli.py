"""``kwsdat`` command line.

Exit codes: 0 success, 1 configuration error, 2 data/file error,
3 numeric error (non-finite values, or a failed selftest).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .data import KEYWORDS, ingest_gsc
from .errors import ConfigError, ContractError, DataError, KwsError, NumericError
from .evaluator import auc, det_curve, detection_scores, frr_at_far, read_scores_csv, write_det_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="run configuration (JSON)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value by dotted key, e.g. train.epochs=3")
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kwsdat", description="keyword spotting with disentangled adversarial training")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model; writes per-epoch checkpoints and a report")
    _add_config_args(p)
    p.add_argument("--workers", type=int, help="data pipeline processes (default: $KWS_NUM_WORKERS or config)")

    p = sub.add_parser("eval", help="score a split; writes score CSVs and a metrics JSON")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"))

    p = sub.add_parser("attack", help="dump PGD adversarial features and audit the epsilon ball")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"))
    p.add_argument("--limit", type=int, help="attack at most this many utterances")

    p = sub.add_parser("det", help="DET curve CSV from a score CSV")
    p.add_argument("scores")
    p.add_argument("--out", help="DET CSV path (default: alongside the scores)")
    p.add_argument("--negative-class", type=int, help="class treated as non-keyword (default: last)")
    p.add_argument("--far", type=float, default=0.01, help="FAR target for the FRR summary")

    p = sub.add_parser("ingest", help="build a split manifest from a Speech Commands V1 directory")
    p.add_argument("dataset_dir")
    p.add_argument("--out", default="manifest.json")
    p.add_argument("--keywords", nargs="+", default=list(KEYWORDS))
    p.add_argument("--unknown-words", nargs="+", help="non-keyword folders to keep (default: all)")
    p.add_argument("--no-background", action="store_true", help="skip background-noise slices")

    sub.add_parser("selftest", help="run the quick invariant checks")
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    return cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=1))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KwsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(args) -> int:
    from . import pipeline  # deferred: keeps `kwsdat det` and `--help` light

    cmd = args.command
    if cmd == "selftest":
        from .selftest import run_selftest
        return EXIT_OK if run_selftest() else EXIT_NUMERIC
    if cmd == "ingest":
        manifest = ingest_gsc(args.dataset_dir, tuple(args.keywords), args.unknown_words, not args.no_background)
        manifest.save(args.out)
        _print({"manifest": args.out, "counts": manifest.counts(), "rejects": len(manifest.rejects)})
        for path, reason in manifest.rejects:
            print(f"rejected {path}: {reason}", file=sys.stderr)
        return EXIT_OK
    if cmd == "det":
        records = read_scores_csv(args.scores)
        pos, neg = detection_scores(records, args.negative_class)
        curve = det_curve(pos, neg)
        out = args.out or str(Path(args.scores).with_suffix("")) + "_det.csv"
        write_det_csv(out, curve)
        res = frr_at_far(curve, args.far)
        _print({"det_csv": out, "points": len(curve), "auc": auc(pos, neg), "frr_at_far": res.frr,
                "far": res.far, "far_reached": res.reached})
        return EXIT_OK

    cfg = _config(args)
    if args.print_config:
        print(cfg.to_json())
        return EXIT_OK
    if cmd == "train":
        workers = pipeline.resolve_workers(args.workers, cfg)
        _, report = pipeline.train_run(cfg, cfg.output_dir, workers)
        _print({"output_dir": cfg.output_dir, "epoch_loss": report.epoch_loss, "validation": report.validation,
                "final_checkpoint": str(Path(cfg.output_dir) / "checkpoints" / "final.kwsc")})
        return EXIT_OK
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint {args.checkpoint} not found")
    if cmd == "eval":
        _print(pipeline.eval_run(cfg, args.checkpoint, cfg.output_dir, args.split))
        return EXIT_OK
    if cmd == "attack":
        audit = pipeline.attack_run(cfg, args.checkpoint, cfg.output_dir, args.split, args.limit)
        _print(audit)
        return EXIT_OK if all(lv["ball_holds"] for lv in audit["levels"]) else EXIT_NUMERIC
    raise ConfigError(f"unknown command {cmd}")


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
