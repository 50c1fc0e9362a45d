"""Pose-set evaluation: greedy matching, recall/precision, AP, MPJPE, timing.

Predicted joints may be NaN (absent, e.g. from the triangulation baseline).
Absent joints are skipped when pairing poses and when computing MPJPE, but a
pose with any absent joint never counts as correct: its thresholded mean
distance is infinite.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_THRESHOLDS = (25.0, 50.0, 75.0, 100.0, 125.0, 150.0)
WARMUP_FRAMES = 5


class MissingConfidence(ValueError):
    pass


class NoMatches(ValueError):
    pass


def _as_poses(poses) -> list[np.ndarray]:
    return [np.asarray(p, dtype=np.float64) for p in poses]


def pair_distance(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-joint distance over joints present in both; inf if none."""
    d = np.linalg.norm(pred - gt, axis=-1)
    ok = np.isfinite(d)
    return float(d[ok].mean()) if ok.any() else float("inf")


def strict_distance(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-joint distance; inf if any joint is absent."""
    d = np.linalg.norm(pred - gt, axis=-1)
    return float(d.mean()) if np.isfinite(d).all() else float("inf")


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    distances: list[float]
    n_pred: int
    n_gt: int
    strict: list[float] = field(default_factory=list)
    joint_errors: list[np.ndarray] = field(default_factory=list)

    @property
    def unmatched_pred(self) -> list[int]:
        used = {p for p, _ in self.pairs}
        return [i for i in range(self.n_pred) if i not in used]

    @property
    def unmatched_gt(self) -> list[int]:
        used = {g for _, g in self.pairs}
        return [j for j in range(self.n_gt) if j not in used]


def match_poses(predicted, truth) -> Assignment:
    """Greedy one-to-one pairing by ascending mean per-joint distance.

    Ties break on (prediction index, truth index). Pairs whose distance is
    infinite (no joint in common) are never made.
    """
    pred, gt = _as_poses(predicted), _as_poses(truth)
    cand = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            d = pair_distance(p, g)
            if np.isfinite(d):
                cand.append((d, i, j))
    cand.sort()
    used_p, used_g = set(), set()
    out = Assignment([], [], len(pred), len(gt))
    for d, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.pairs.append((i, j))
        out.distances.append(d)
        out.strict.append(strict_distance(pred[i], gt[j]))
        out.joint_errors.append(np.linalg.norm(pred[i] - gt[j], axis=-1))
    return out


def _counts(a: Assignment, threshold: float) -> tuple[int, int, int]:
    correct = sum(1 for d in a.strict if d < threshold)
    return correct, a.n_gt, a.n_pred


def _ratios(correct: int, n_gt: int, n_pred: int) -> tuple[float, float]:
    if n_gt == 0:
        recall = 100.0
    else:
        recall = 100.0 * correct / n_gt
    if n_pred == 0:
        precision = 100.0 if n_gt == 0 else 0.0
    else:
        precision = 100.0 * correct / n_pred
    return recall, precision


def recall_precision(assignment: Assignment, threshold: float) -> tuple[float, float]:
    """Percent of truths / predictions whose matched pair lies strictly under ``threshold``.

    Empty truth gives recall 100. Empty predictions give precision 100 if the
    truth is empty too, else 0.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return _ratios(*_counts(assignment, threshold))


def average_precision(frames, threshold: float) -> float:
    """All-point interpolated AP in percent.

    ``frames`` is a sequence of ``(pred_poses, confidences, gt_poses)``.
    Predictions across all frames are swept in descending confidence; each
    one is a true positive if its nearest still-unclaimed truth in its frame
    lies strictly under ``threshold``.
    """
    rows = []
    n_gt = 0
    for f, (pred, conf, gt) in enumerate(frames):
        pred, gt = _as_poses(pred), _as_poses(gt)
        if conf is None or len(conf) != len(pred):
            raise MissingConfidence(f"frame {f}: {len(pred)} predictions but confidences {conf!r}")
        n_gt += len(gt)
        for i, c in enumerate(conf):
            if c is None or not np.isfinite(c):
                raise MissingConfidence(f"frame {f}: prediction {i} has no confidence")
            rows.append((-float(c), f, i))
    if n_gt == 0:
        return 100.0 if not rows else 0.0
    rows.sort()
    claimed: dict[int, set] = {}
    tp = np.zeros(len(rows))
    for r, (_, f, i) in enumerate(rows):
        pred, _, gt = frames[f]
        p = np.asarray(pred[i], dtype=np.float64)
        taken = claimed.setdefault(f, set())
        best, best_j = float("inf"), -1
        for j, g in enumerate(gt):
            if j in taken:
                continue
            d = strict_distance(p, np.asarray(g, dtype=np.float64))
            if d < best:
                best, best_j = d, j
        if best_j >= 0 and best < threshold:
            taken.add(best_j)
            tp[r] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(rows) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for k in range(len(mpre) - 2, -1, -1):
        mpre[k] = max(mpre[k], mpre[k + 1])
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(100.0 * np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def mpjpe(assignments: Assignment | Sequence[Assignment]) -> float:
    """Mean Euclidean joint error over every present joint of every matched pair."""
    if isinstance(assignments, Assignment):
        assignments = [assignments]
    errs = [e[np.isfinite(e)] for a in assignments for e in a.joint_errors]
    errs = [e for e in errs if e.size]
    if not errs:
        raise NoMatches("no matched pose pairs")
    return float(np.concatenate(errs).mean())


def timing_report(t_pp: Sequence[float], t_3dg: Sequence[float], persons: Sequence[int], warmup: int = WARMUP_FRAMES) -> dict:
    """Mean per-frame matcher time, lifting time and lifting time per person (ms).

    Inputs are per-frame seconds and person counts; the first ``warmup``
    frames are dropped when enough frames exist.
    """
    t_pp, t_3dg, persons = (np.asarray(x, dtype=np.float64) for x in (t_pp, t_3dg, persons))
    if len(t_pp) > warmup:
        t_pp, t_3dg, persons = t_pp[warmup:], t_3dg[warmup:], persons[warmup:]
    if len(t_pp) == 0:
        return {"t_pp": 0.0, "t_3Dg": 0.0, "t_3Di": 0.0, "frames": 0}
    has = persons > 0
    per = float(1000.0 * t_3dg[has].sum() / persons[has].sum()) if has.any() else 0.0
    return {
        "t_pp": float(1000.0 * t_pp.mean()),
        "t_3Dg": float(1000.0 * t_3dg.mean()),
        "t_3Di": per,
        "frames": int(len(t_pp)),
    }


@dataclass
class EvalConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        if not th or any(t <= 0 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError(f"thresholds must be positive and strictly increasing: {th}")
        self.thresholds = th


@dataclass
class EvalReport:
    thresholds: list[float]
    recall: list[float]
    precision: list[float]
    ap: list[float]
    mpjpe: float
    timing: dict = field(default_factory=dict)
    frames: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        if not np.isfinite(d["mpjpe"]):
            d["mpjpe"] = None
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric"] + [f"{t:g}" for t in self.thresholds])
        n = len(self.thresholds)
        w.writerow(["Recall"] + [f"{v:.2f}" for v in self.recall])
        w.writerow(["Precision"] + [f"{v:.2f}" for v in self.precision])
        w.writerow(["AP"] + [f"{v:.2f}" for v in self.ap])
        w.writerow(["MPJPE"] + [f"{self.mpjpe:.2f}"] * n)
        for key in ("t_pp", "t_3Dg", "t_3Di"):
            w.writerow([key] + [f"{self.timing.get(key, 0.0):.2f}"] * n)
        return buf.getvalue()


def evaluate(frames, config: EvalConfig | None = None, timing: dict | None = None) -> EvalReport:
    """Pool recall/precision counts and AP over ``(pred, conf, gt)`` frames."""
    config = config or EvalConfig()
    frames = [(_as_poses(p), list(c) if c is not None else None, _as_poses(g)) for p, c, g in frames]
    assigns = [match_poses(p, g) for p, _, g in frames]
    recall, precision, ap = [], [], []
    for th in config.thresholds:
        correct = n_gt = n_pred = 0
        for a in assigns:
            c, g, p = _counts(a, th)
            correct, n_gt, n_pred = correct + c, n_gt + g, n_pred + p
        r, p = _ratios(correct, n_gt, n_pred)
        recall.append(r)
        precision.append(p)
        ap.append(average_precision(frames, th))
    try:
        err = mpjpe(assigns)
    except NoMatches:
        err = float("nan")
    return EvalReport(list(config.thresholds), recall, precision, ap, err, dict(timing or {}), len(frames))
