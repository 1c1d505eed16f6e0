"""End-to-end runs built from a RunConfig: training, evaluation, attack dumps."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adversary import AttackConfig, ball_bounds, pgd
from .augment import build_datasources, distort_test_set
from .config import RunConfig
from .data import BACKGROUND_DIR, DatasetManifest, ingest_gsc, load_examples
from .errors import DataError
from .evaluator import ScoreRecord, metrics_summary, score_utterances, write_scores_csv
from .frontend import dump_features, logmel, read_wav
from .model import Model, build_model, load_checkpoint
from .trainer import TrainReport, fit

log = logging.getLogger(__name__)

WORKERS_ENV = "KWS_NUM_WORKERS"


def resolve_workers(flag: int | None, cfg: RunConfig) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise DataError(f"{WORKERS_ENV}={env!r} is not an integer") from exc
    return max(1, cfg.workers)


def resolve_manifest(cfg: RunConfig) -> DatasetManifest:
    d = cfg.data
    if d.manifest:
        if not Path(d.manifest).is_file():
            raise DataError(f"manifest {d.manifest} not found")
        return DatasetManifest.load(d.manifest)
    if not d.dataset_dir:
        raise DataError("no dataset: set data.dataset_dir or data.manifest")
    return ingest_gsc(d.dataset_dir, tuple(d.keywords), d.unknown_words, d.include_background)


def noise_split(cfg: RunConfig, root) -> tuple[list, list]:
    """(training noises, held-out test noises) from the background folder."""
    bg = Path(root) / BACKGROUND_DIR
    names = sorted(p.name for p in bg.glob("*.wav")) if bg.is_dir() else []
    test = cfg.data.test_noise if cfg.data.test_noise is not None else names[-2:]
    train = cfg.data.train_noise if cfg.data.train_noise is not None else [n for n in names if n not in test]
    for n in list(train) + list(test):
        if n not in names:
            raise DataError(f"noise file {n} not in {bg}")
    return [read_wav(bg / n) for n in train], [read_wav(bg / n) for n in test]


def split_limit(cfg: RunConfig, split: str) -> int | None:
    return {"train": cfg.data.max_train_clips, "valid": cfg.data.max_valid_clips,
            "test": cfg.data.max_test_clips}[split]


@dataclass
class Corpus:
    manifest: DatasetManifest
    train: list
    valid: list
    train_noise: list
    test_noise: list


def load_corpus(cfg: RunConfig, splits=("train", "valid")) -> Corpus:
    manifest = resolve_manifest(cfg)
    loaded = {s: load_examples(manifest, s, split_limit(cfg, s), cfg.seed) for s in splits}
    train_noise, test_noise = noise_split(cfg, manifest.root)
    return Corpus(manifest, loaded.get("train", []), loaded.get("valid", []), train_noise, test_noise)


def features_of(examples, cfg: RunConfig) -> list[tuple[str, np.ndarray, int]]:
    return [(ex.uid, logmel(ex.clip, cfg.frontend), ex.label) for ex in examples]


def evaluate(model: Model, utterances, cfg: RunConfig, negative_class: int | None = None
             ) -> tuple[list[ScoreRecord], dict]:
    records = score_utterances(model, utterances, cfg.eval.window_frames, cfg.eval.shift, cfg.eval.aggregate,
                               cfg.eval.batch_size)
    return records, metrics_summary(records, negative_class, cfg.eval.far_target)


def train_run(cfg: RunConfig, out_dir=None, workers: int = 1, corpus: Corpus | None = None) -> tuple[Model, TrainReport]:
    """Train per ``cfg``; validation top-1 on clean features is logged every epoch."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    corpus = corpus or load_corpus(cfg)
    if not corpus.train:
        raise DataError("training split is empty")
    plan = cfg.augment_plan(corpus.train_noise)
    clean_feats = [logmel(ex.clip, cfg.frontend) for ex in corpus.train]
    valid = features_of(corpus.valid, cfg)
    model = build_model(cfg.model_config(len(corpus.manifest.labels)), seed=cfg.seed)

    def epoch_windows(epoch):
        return build_datasources(corpus.train, plan, epoch, cfg.frontend, clean_feats, workers)

    def on_epoch_end(epoch, m):
        if not valid:
            return None
        _, metrics = evaluate(m, valid, cfg, corpus.manifest.unknown_index)
        return {"valid_top1": metrics["top1_accuracy"]}

    report = fit(model, epoch_windows, cfg.train_config(), cfg.num_datasources(), out / "checkpoints",
                 out / "train_report.jsonl", on_epoch_end)
    summary = {"strategy": cfg.train.strategy, "epoch_loss": report.epoch_loss, "validation": report.validation,
               "checkpoints": report.checkpoints, "num_train": len(corpus.train), "num_valid": len(valid)}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return model, report


def eval_run(cfg: RunConfig, checkpoint, out_dir=None, split: str | None = None) -> dict:
    """Score a split (clean, plus each ``eval.snr_db`` condition) and write CSV + metrics JSON."""
    model = load_checkpoint(checkpoint)
    split = split or cfg.eval.split
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = resolve_manifest(cfg)
    examples = load_examples(manifest, split, split_limit(cfg, split), cfg.seed)
    if not examples:
        raise DataError(f"split {split} is empty")
    conditions = {"clean": features_of(examples, cfg)}
    if cfg.eval.snr_db:
        _, test_noise = noise_split(cfg, manifest.root)
        for snr in cfg.eval.snr_db:
            wins = distort_test_set(examples, test_noise, snr, cfg.seed, cfg.frontend)
            conditions[f"snr{snr:g}"] = [(w.uid, w.features, w.label) for w in wins]
    results = {}
    for name, utts in conditions.items():
        records, metrics = evaluate(model, utts, cfg, manifest.unknown_index)
        write_scores_csv(out / f"scores_{split}_{name}.csv", records)
        results[name] = metrics
    (out / f"metrics_{split}.json").write_text(json.dumps(results, indent=1))
    return results


def attack_run(cfg: RunConfig, checkpoint, out_dir=None, split: str | None = None,
               limit: int | None = None) -> dict:
    """Generate PGD adversaries for a split, dump them, and audit the ball bound."""
    model = load_checkpoint(checkpoint)
    split = split or cfg.eval.split
    root = Path(out_dir or cfg.output_dir)
    out = root / "adversarial"
    out.mkdir(parents=True, exist_ok=True)
    examples = load_examples(resolve_manifest(cfg), split, limit or split_limit(cfg, split), cfg.seed)
    eps_levels = np.atleast_1d(cfg.attack.epsilon)
    audit = {"split": split, "num_utterances": len(examples), "levels": []}
    utts = features_of(examples, cfg)
    frames = model.cfg.input_shape[0]
    utts = [u for u in utts if len(u[1]) >= frames]
    for level, eps in enumerate(eps_levels):
        atk = AttackConfig(float(eps), cfg.attack.step_size, cfg.attack.steps)
        max_dev, violations = 0.0, 0
        for i in range(0, len(utts), cfg.eval.batch_size):
            chunk = utts[i : i + cfg.eval.batch_size]
            x = np.stack([f[:frames] for _, f, _ in chunk]).astype(model.dtype)
            y = np.array([lbl for _, _, lbl in chunk])
            x_adv = pgd(model, x, y, atk)
            dev = np.abs(x_adv.astype(np.float64) - x.astype(np.float64))
            max_dev = max(max_dev, float(dev.max()))
            violations += int(np.sum(dev > eps))
            lo, hi = ball_bounds(x, eps)
            violations += int(np.sum((x_adv < lo) | (x_adv > hi)))
            for (uid, _, _), xa in zip(chunk, x_adv):
                (out / f"{_safe(uid)}.eps{level}.kwsf").write_bytes(dump_features(xa))
        audit["levels"].append({"epsilon": float(eps), "max_abs_deviation": max_dev, "violations": violations,
                                "ball_holds": violations == 0})
    (root / "audit.json").write_text(json.dumps(audit, indent=1))
    return audit


def _safe(uid: str) -> str:
    return uid.replace("/", "__").replace("@", "_at")
