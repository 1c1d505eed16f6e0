"""Sliding-window scoring and detection metrics (DET, AUC, FRR at fixed FAR, accuracy)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, FormatError
from .frontend import LOG_FLOOR
from .ops import softmax
from .tensor import Tensor, no_grad

DEFAULT_SHIFT = 10


@dataclass
class ScoreRecord:
    utterance_id: str
    true_label: int
    scores: np.ndarray  # per-class posterior, aggregated over windows


def window_offsets(num_frames: int, window_frames: int, shift: int = DEFAULT_SHIFT) -> list[int]:
    if num_frames <= window_frames:
        return [0]
    return list(range(0, num_frames - window_frames + 1, shift))


def _windows(features: np.ndarray, window_frames: int, shift: int) -> np.ndarray:
    t, f = features.shape
    if t < window_frames:
        pad = np.full((window_frames - t, f), np.log(LOG_FLOOR), dtype=features.dtype)
        features = np.concatenate([features, pad])
    return np.stack([features[o : o + window_frames] for o in window_offsets(len(features), window_frames, shift)])


def window_posteriors(features: np.ndarray, model, window_frames: int, shift: int = DEFAULT_SHIFT,
                      batch_size: int = 128) -> np.ndarray:
    """Softmax posteriors of every window (num_windows x K), model in eval mode."""
    wins = _windows(np.asarray(features), window_frames, shift)
    out = []
    with no_grad():
        for i in range(0, len(wins), batch_size):
            logits = model(Tensor(wins[i : i + batch_size].astype(model.dtype)), 0, "eval")
            out.append(softmax(logits.data.astype(np.float64), axis=1))
    return np.concatenate(out)


def aggregate(posteriors: np.ndarray, how: str = "max") -> np.ndarray:
    if how == "max":
        return posteriors.max(axis=0)
    if how == "mean":
        return posteriors.mean(axis=0)
    raise ContractError(f"unknown aggregation {how!r}")


def sliding_window_scores(features: np.ndarray, model, window_frames: int, shift: int = DEFAULT_SHIFT,
                          how: str = "max") -> np.ndarray:
    """Per-class utterance score from windows at offsets 0, shift, 2*shift, ..."""
    return aggregate(window_posteriors(features, model, window_frames, shift), how)


def score_utterances(model, utterances, window_frames: int, shift: int = DEFAULT_SHIFT, how: str = "max",
                     batch_size: int = 128) -> list[ScoreRecord]:
    """Score (uid, features, label) triples; fixed-length utterances are batched together."""
    utterances = list(utterances)
    records: list[ScoreRecord | None] = [None] * len(utterances)
    simple = [i for i, (_, f, _) in enumerate(utterances) if len(f) <= window_frames]
    with no_grad():
        for start in range(0, len(simple), batch_size):
            idx = simple[start : start + batch_size]
            x = np.stack([_windows(utterances[i][1], window_frames, shift)[0] for i in idx]).astype(model.dtype)
            post = softmax(model(Tensor(x), 0, "eval").data.astype(np.float64), axis=1)
            for i, p in zip(idx, post):
                records[i] = ScoreRecord(utterances[i][0], int(utterances[i][2]), p)
    for i, (uid, feats, label) in enumerate(utterances):
        if records[i] is None:
            records[i] = ScoreRecord(uid, int(label), sliding_window_scores(feats, model, window_frames, shift, how))
    return records


# -- metrics -----------------------------------------------------------------------


@dataclass
class DetCurve:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray

    def __len__(self) -> int:
        return len(self.thresholds)

    def points(self):
        return zip(self.thresholds, self.far, self.frr)


def _check_nonempty(pos, neg) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ContractError("need at least one positive and one negative score")
    return pos, neg


def det_curve(pos_scores, neg_scores) -> DetCurve:
    """Operating points at every distinct observed score, thresholds ascending.

    An utterance is accepted when its score is >= threshold, so FAR is the
    fraction of negatives at or above it and FRR the fraction of positives
    below it.
    """
    pos, neg = _check_nonempty(pos_scores, neg_scores)
    thresholds = np.unique(np.concatenate([pos, neg]))
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    far = (neg.size - np.searchsorted(neg_sorted, thresholds, side="left")) / neg.size
    frr = np.searchsorted(pos_sorted, thresholds, side="left") / pos.size
    return DetCurve(thresholds, far, frr)


@dataclass
class FrrAtFar:
    frr: float
    far: float  # FAR actually used; differs from the target only when flagged
    reached: bool

    def __float__(self) -> float:
        return self.frr


def frr_at_far(curve: DetCurve, far_target: float = 0.01) -> FrrAtFar:
    """FRR at ``far_target``, linearly interpolated between the bracketing points.

    If no threshold brings FAR down to the target the FRR at the smallest
    achievable FAR is returned with ``reached=False``.
    """
    if len(curve) == 0:
        raise ContractError("empty DET curve")
    far, frr = curve.far, curve.frr
    below = np.nonzero(far <= far_target)[0]
    if below.size == 0:
        return FrrAtFar(float(frr[-1]), float(far[-1]), False)
    i = int(below[0])
    if i == 0 or far[i] == far_target:
        return FrrAtFar(float(frr[i]), float(far[i]), True)
    f0, f1 = far[i - 1], far[i]  # f0 > target > f1
    w = (f0 - far_target) / (f0 - f1)
    return FrrAtFar(float(frr[i - 1] + w * (frr[i] - frr[i - 1])), float(far_target), True)


def auc(pos_scores, neg_scores) -> float:
    """P(random positive outscores random negative), ties counted one half."""
    pos, neg = _check_nonempty(pos_scores, neg_scores)
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = pos.size, neg.size
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def top1_accuracy(records: list[ScoreRecord]) -> float:
    if not records:
        raise ContractError("no records to score")
    hits = sum(int(np.argmax(r.scores)) == r.true_label for r in records)
    return hits / len(records)


def detection_scores(records: list[ScoreRecord], negative_class: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Keyword-vs-rest scores: max keyword posterior, split by whether the truth is a keyword.

    ``negative_class`` defaults to the last class (the "unknown" label).
    """
    if not records:
        raise ContractError("no records")
    k = len(records[0].scores)
    neg_cls = k - 1 if negative_class is None else negative_class
    keyword = [c for c in range(k) if c != neg_cls]
    score = np.array([r.scores[keyword].max() for r in records])
    is_pos = np.array([r.true_label != neg_cls for r in records])
    return score[is_pos], score[~is_pos]


def metrics_summary(records: list[ScoreRecord], negative_class: int | None = None,
                    far_target: float = 0.01) -> dict:
    out = {"top1_accuracy": top1_accuracy(records), "num_utterances": len(records)}
    pos, neg = detection_scores(records, negative_class)
    if pos.size and neg.size:
        res = frr_at_far(det_curve(pos, neg), far_target)
        out.update(auc=auc(pos, neg), frr_at_far=res.frr, far=res.far, far_target=far_target,
                   far_reached=res.reached)
    return out


# -- CSV interchange -----------------------------------------------------------------


def write_scores_csv(path, records: list[ScoreRecord]) -> None:
    k = len(records[0].scores) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "true_label"] + [f"score_{i}" for i in range(k)])
        for r in records:
            w.writerow([r.utterance_id, r.true_label] + [repr(float(s)) for s in r.scores])


def read_scores_csv(path) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["utterance_id", "true_label"]:
        raise FormatError(f"{path}: missing score CSV header")
    try:
        return [ScoreRecord(r[0], int(r[1]), np.array([float(v) for v in r[2:]])) for r in rows[1:]]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed score row: {exc}") from exc


def write_det_csv(path, curve: DetCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "frr"])
        for t, fa, fr in curve.points():
            w.writerow([repr(float(t)), repr(float(fa)), repr(float(fr))])


def read_det_csv(path) -> DetCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["threshold", "far", "frr"]:
        raise FormatError(f"{path}: missing DET CSV header")
    arr = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, 3)
    return DetCurve(arr[:, 0], arr[:, 1], arr[:, 2])
