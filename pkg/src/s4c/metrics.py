"""Overlap metrics, screening accuracy, ROC sweeps and cross-validation splits."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .volume import LabelVolume

NORMAL_TRAIN_FRACTION = 103 / 303


def _class_mask(labels, classes):
    data = labels.data if isinstance(labels, LabelVolume) else np.asarray(labels)
    if isinstance(classes, int):
        return data == classes
    return np.isin(data, sorted(classes))


def dsc(pred, gt, classes):
    """Dice overlap of the voxels whose class is in ``classes`` (an int or a set).

    Both sets empty gives 1; exactly one empty gives 0.
    """
    a = _class_mask(pred, classes)
    b = _class_mask(gt, classes)
    if a.shape != b.shape:
        raise ValueError(f"dims differ: {a.shape[::-1]} vs {b.shape[::-1]}")
    na, nb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int(np.count_nonzero(a & b)) / (na + nb)


def sens_spec(predicted, truth):
    """``(TP / abnormal, TN / normal)`` from parallel sequences of 0/1 labels."""
    predicted = np.asarray(predicted, int)
    truth = np.asarray(truth, int)
    if predicted.shape != truth.shape:
        raise ValueError("predicted and truth lengths differ")
    pos, neg = truth == 1, truth == 0
    if not pos.any() or not neg.any():
        raise ValueError("need at least one abnormal and one normal case")
    return float((predicted[pos] == 1).mean()), float((predicted[neg] == 0).mean())


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    sensitivity: float
    specificity: float


def roc(scores, truth):
    """Operating points at +inf and at every distinct score (positive iff score >= threshold), thresholds descending."""
    scores = np.asarray(scores, float)
    truth = np.asarray(truth, int)
    if scores.size == 0 or scores.shape != truth.shape:
        raise ValueError("need equal-length, non-empty scores and labels")
    pos, neg = truth == 1, truth == 0
    if not pos.any() or not neg.any():
        raise ValueError("need at least one abnormal and one normal case")
    points = [RocPoint(math.inf, 0.0, 1.0)]
    for t in np.unique(scores)[::-1]:
        flagged = scores >= t
        points.append(RocPoint(float(t), float(flagged[pos].mean()), float((~flagged[neg]).mean())))
    return points


def auc(points):
    """Trapezoidal area under (1 - specificity, sensitivity)."""
    fpr = np.array([1 - p.specificity for p in points])
    tpr = np.array([p.sensitivity for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


@dataclass
class SplitPlan:
    folds: int
    abnormal_folds: list  # list of id lists; fold f tests on abnormal_folds[f]
    normal_train: list
    normal_test: list
    seed: int

    def test_ids(self, fold):
        self._check(fold)
        return list(self.abnormal_folds[fold]) + list(self.normal_test)

    def train_ids(self, fold):
        self._check(fold)
        rest = [i for f, ids in enumerate(self.abnormal_folds) if f != fold for i in ids]
        return rest + list(self.normal_train)

    def _check(self, fold):
        if not 0 <= fold < self.folds:
            raise ValueError(f"fold {fold} outside [0, {self.folds})")

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1))
        return Path(path)

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def make_splits(entries, folds=4, normal_train_fraction=NORMAL_TRAIN_FRACTION, seed=0):
    """Shuffle abnormal ids into ``folds`` near-equal folds; split normals once, ``floor(frac * n)`` for training."""
    abnormal = [e["id"] for e in entries if e["label"] == 1]
    normal = [e["id"] for e in entries if e["label"] == 0]
    if len(abnormal) < folds:
        raise ValueError(f"{len(abnormal)} abnormal cases cannot fill {folds} folds")
    if not 0 <= normal_train_fraction <= 1:
        raise ValueError("normal_train_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    shuffled = [abnormal[i] for i in rng.permutation(len(abnormal))]
    parts = [list(p) for p in np.array_split(np.array(shuffled, dtype=object), folds)]
    normal = [normal[i] for i in rng.permutation(len(normal))]
    n_train = math.floor(normal_train_fraction * len(normal))
    return SplitPlan(folds, parts, normal[:n_train], normal[n_train:], seed)


def _mean_std(values):
    if not values:
        return None, None
    v = np.asarray(values, float)
    return float(v.mean()), float(v.std())


@dataclass
class EvalReport:
    cases: list  # per-case dicts: id, label, predicted, count, confidence, dsc_pancreas, dsc_tumor
    K: int
    pancreas_dsc_normal: tuple
    pancreas_dsc_abnormal: tuple
    tumor_dsc: tuple
    misses: int
    sensitivity: float
    specificity: float
    roc: list = field(default_factory=list)
    auc: float = None

    def to_dict(self):
        d = asdict(self)
        d["roc"] = [[None if math.isinf(p.threshold) else p.threshold, p.sensitivity, p.specificity] for p in self.roc]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json())
        return Path(path)

    def summary(self):
        t_mean, t_std = self.tumor_dsc
        lines = [
            f"tumor DSC {t_mean:.4f} +- {t_std:.4f}" if t_mean is not None else "tumor DSC n/a",
            f"misses {self.misses}",
            f"sensitivity {_fmt(self.sensitivity)} specificity {_fmt(self.specificity)} (K={self.K})",
        ]
        return "\n".join(lines)


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def write_roc_csv(points, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "sensitivity", "specificity"])
        for p in points:
            w.writerow([repr(p.threshold), repr(p.sensitivity), repr(p.specificity)])
    return Path(path)


def evaluate(entries, results, K=50):
    """Cohort report from ground-truth manifest entries and per-case screening results.

    Predicted labels are recomputed from the stored tumor counts at ``K``.
    Tumor DSC is reported over abnormal cases only; a tumor DSC of exactly 0
    counts as a miss.
    """
    by_id = {r.case_id: r for r in results}
    missing = [e["id"] for e in entries if e["id"] not in by_id]
    if missing:
        raise ValueError(f"no prediction for cases {missing}")
    cases, pn, pa, td = [], [], [], []
    truth, predicted, scores = [], [], []
    misses = 0
    for e in entries:
        r = by_id[e["id"]]
        pred = int(r.tumor_voxel_count >= K)
        cases.append({
            "id": e["id"], "label": e["label"], "predicted": pred, "tumor_voxels": r.tumor_voxel_count,
            "confidence": r.confidence, "dsc_pancreas": r.dsc_pancreas, "dsc_tumor": r.dsc_tumor if e["label"] == 1 else None,
        })
        truth.append(e["label"])
        predicted.append(pred)
        scores.append(r.confidence)
        if r.dsc_pancreas is not None:
            (pa if e["label"] == 1 else pn).append(r.dsc_pancreas)
        if e["label"] == 1 and r.dsc_tumor is not None:
            td.append(r.dsc_tumor)
            misses += r.dsc_tumor == 0.0
    t, p = np.asarray(truth), np.asarray(predicted)
    # a one-class cohort still gets the rate that is defined
    sens = float((p[t == 1] == 1).mean()) if (t == 1).any() else None
    spec = float((p[t == 0] == 0).mean()) if (t == 0).any() else None
    points = roc(scores, truth) if sens is not None and spec is not None else []
    return EvalReport(cases, K, _mean_std(pn), _mean_std(pa), _mean_std(td), int(misses), sens, spec,
                      points, auc(points) if points else None)
