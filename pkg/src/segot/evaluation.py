"""Ranking metrics, rotation-based pose bins and per-bin reports."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from segot.errors import ValidationError
from segot.structures import GtAssignment, check_rotation
from segot.tensor_io import atomic_write

log = logging.getLogger(__name__)

BIN_EDGES = (0.0, 45.0, 90.0, 135.0, 180.0)
BIN_LABELS = ("0-45", "45-90", "90-135", "135-180")
UNBINNED = "unbinned"


def geodesic_rotation_deg(Ra, Rb) -> float:
    """Angle of the relative rotation Ra^T Rb, in degrees."""
    check_rotation(Ra)
    check_rotation(Rb)
    R = np.asarray(Ra, dtype=np.float64).T @ np.asarray(Rb, dtype=np.float64)
    # atan2 keeps full precision near 0 and 180 degrees, where acos does not
    s = 0.5 * math.hypot(R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1])
    c = 0.5 * (np.trace(R) - 1.0)
    return math.degrees(math.atan2(s, c))


def assign_pose_bin(theta) -> int:
    """Half-open bins [0,45) [45,90) [90,135) and the closed [135,180]."""
    if not 0.0 <= theta <= 180.0:
        raise ValidationError(f"angle {theta} outside [0, 180]")
    return min(int(theta // 45.0), 3)


@dataclass(frozen=True)
class ScoredPrediction:
    i: int
    j: int
    score: float
    is_correct: bool


def pr_curve(predictions, total_positives):
    """Step-wise (recall, precision) after each prediction in descending-score order.

    Equal scores keep their input order.
    """
    if total_positives < 1:
        raise ValidationError("total_positives must be >= 1")
    scores = np.array([p.score for p in predictions], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValidationError("prediction scores must be finite")
    order = np.argsort(-scores, kind="stable")
    correct = np.array([predictions[k].is_correct for k in order], dtype=np.float64)
    tp = np.cumsum(correct)
    recall = tp / total_positives
    precision = tp / np.arange(1, len(correct) + 1)
    return recall, precision


def auprc(predictions, total_positives) -> float:
    """Average precision: sum over ranks of (R_k - R_{k-1}) * P_k."""
    predictions = list(predictions)
    if not predictions:
        log.warning("no predictions; AUPRC is 0")
        if total_positives < 1:
            raise ValidationError("total_positives must be >= 1")
        return 0.0
    recall, precision = pr_curve(predictions, total_positives)
    # recall steps by exactly 1/total at each hit, so factor it out of the sum
    hits = np.diff(recall, prepend=0.0) > 0
    return float(np.sum(precision[hits]) / total_positives)


def recall_at_k(scores, gt: GtAssignment, k) -> float | None:
    """Fraction of gt-matched sources whose target ranks in the row's top k; None if no matches.

    Ranking is by descending score with lower column index first on ties.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    if not gt.matches:
        return None
    gt.check_bounds(*scores.shape)
    hits = 0
    for i, j in gt.matches:
        row = scores[i]
        better = np.sum(row > row[j]) + np.sum(row[:j] == row[j])
        hits += better < k
    return hits / len(gt.matches)


@dataclass
class PairResult:
    """Evaluation input for one pair: emitted matches with scores and a full score matrix."""

    assignment: list
    scores: list
    score_matrix: np.ndarray
    gt: GtAssignment
    angle: float | None = None
    name: str = ""

    def predictions(self):
        positives = set(self.gt.matches)
        return [
            ScoredPrediction(i, j, float(s), (i, j) in positives)
            for i, (j, s) in enumerate(zip(self.assignment, self.scores))
            if j is not None
        ]


@dataclass
class BinReport:
    pairs: int = 0
    auprc: float | None = None
    recall_at_1: float | None = None
    recall_at_5: float | None = None
    curve: tuple = field(default=((), ()), repr=False)

    def to_json(self):
        return {"pairs": self.pairs, "auprc": self.auprc, "recall_at_1": self.recall_at_1,
                "recall_at_5": self.recall_at_5}


@dataclass
class MetricReport:
    bins: dict
    overall: BinReport

    def to_json(self):
        return {"bins": {k: v.to_json() for k, v in self.bins.items()}, "overall": self.overall.to_json()}


def _summarize(results) -> BinReport:
    if not results:
        return BinReport()
    preds, positives = [], 0
    r1, r5 = [], []
    for res in results:
        preds.extend(res.predictions())
        positives += len(res.gt.matches)
        a, b = recall_at_k(res.score_matrix, res.gt, 1), recall_at_k(res.score_matrix, res.gt, 5)
        if a is not None:
            r1.append(a)
            r5.append(b)
    ap, curve = None, ((), ())
    if positives:
        ap = auprc(preds, positives)
        if preds:
            rec, prec = pr_curve(preds, positives)
            curve = (tuple(rec), tuple(prec))
    return BinReport(
        pairs=len(results),
        auprc=ap,
        recall_at_1=float(np.mean(r1)) if r1 else None,
        recall_at_5=float(np.mean(r5)) if r5 else None,
        curve=curve,
    )


def evaluate_dataset(results) -> MetricReport:
    """Per pose bin: AUPRC over pooled predictions, R@k averaged per pair."""
    groups = {label: [] for label in BIN_LABELS}
    for res in results:
        label = UNBINNED if res.angle is None else BIN_LABELS[assign_pose_bin(res.angle)]
        groups.setdefault(label, []).append(res)
    bins = {label: _summarize(group) for label, group in groups.items()}
    return MetricReport(bins, _summarize(list(results)))


def write_curve_csv(path, report: BinReport):
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recall", "precision"])
        for r, p in zip(*report.curve):
            writer.writerow([repr(float(r)), repr(float(p))])
