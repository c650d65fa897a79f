"""Ranking metrics: average precision, AUROC, and the best-threshold DICE.

Conventions: ties are grouped into a single rank step for average
precision; AUROC gives ties half credit (the Mann-Whitney statistic); the
DICE ceiling predicts positive where score >= threshold and sweeps every
achievable threshold (or a 0.1% quantile grid on very large inputs, always
including 0.5).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

EXACT_SWEEP_LIMIT = 1_000_000
QUANTILE_GRID = 1000


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DataError(f"scores/labels length mismatch: {s.shape} vs {y.shape}")
    if s.size == 0:
        raise DataError("empty inputs")
    if not np.isfinite(s).all():
        raise DataError("non-finite scores")
    uniq = np.unique(y)
    if not np.isin(uniq, (0, 1)).all():
        raise DataError(f"labels must be binary, got values {uniq[:10]}")
    return s, y.astype(np.int8)


def _grouped_counts(scores: np.ndarray, labels: np.ndarray):
    """Descending-score tie groups: cumulative TP/FP at each group boundary."""
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = labels[order]
    # end index (exclusive) of each tie group
    boundaries = np.nonzero(np.diff(s_sorted))[0]
    ends = np.concatenate([boundaries + 1, [s_sorted.size]])
    cum_pos = np.cumsum(y_sorted)
    tp = cum_pos[ends - 1].astype(np.float64)
    fp = ends.astype(np.float64) - tp
    thresholds = s_sorted[ends - 1]
    return tp, fp, thresholds


def average_precision(scores, labels) -> float:
    """AP = sum over rank groups of (recall step) * (precision at the group)."""
    s, y = _validate(scores, labels)
    pos = int(y.sum())
    if pos == 0:
        raise DataError("average precision needs at least one positive")
    tp, fp, _ = _grouped_counts(s, y)
    recall = tp / pos
    precision = tp / (tp + fp)
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via tie-averaged ranks."""
    s, y = _validate(scores, labels)
    pos = int(y.sum())
    neg = s.size - pos
    if pos == 0 or neg == 0:
        raise DataError("AUROC needs both classes present")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, dtype=np.float64)
    ranks[order] = np.arange(1, s.size + 1)
    # average ranks within tie groups
    s_sorted = s[order]
    boundaries = np.nonzero(np.diff(s_sorted))[0]
    starts = np.concatenate([[0], boundaries + 1])
    ends = np.concatenate([boundaries + 1, [s.size]])
    for a, b in zip(starts, ends):
        if b - a > 1:
            ranks[order[a:b]] = 0.5 * (a + 1 + b)
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def dice_ceiling(scores, labels) -> tuple[float, float]:
    """Best DICE over thresholds, with the threshold that achieves it.

    DICE(t) = 2 TP / (2 TP + FP + FN) predicting positive at score >= t.
    Inputs above EXACT_SWEEP_LIMIT are swept on a quantile grid instead of
    every distinct score; 0.5 is always a candidate.
    """
    s, y = _validate(scores, labels)
    pos = int(y.sum())
    if pos == 0:
        raise DataError("DICE needs at least one positive")
    tp, fp, thresholds = _grouped_counts(s, y)
    dice = 2.0 * tp / (tp + fp + pos)
    if s.size > EXACT_SWEEP_LIMIT:
        qs = np.unique(np.quantile(s, np.linspace(0.0, 1.0, QUANTILE_GRID + 1)))
        candidates = np.union1d(qs, [0.5])
        # thresholds[] is descending; map each candidate onto the group whose
        # score is the smallest one still >= candidate
        asc = thresholds[::-1]
        idx_asc = np.searchsorted(asc, candidates, side="left")
        keep = idx_asc < asc.size
        group_idx = thresholds.size - 1 - idx_asc[keep]
        dice = dice[group_idx]
        thresholds = thresholds[group_idx]
    best = int(np.argmax(dice))
    return float(dice[best]), float(thresholds[best])


@dataclass
class EvalReport:
    """Subject- and pixel-level metrics plus per-kind breakdown and counts."""

    subject_ap: float
    subject_auroc: float
    pixel_ap: float
    pixel_auroc: float
    pixel_dice: float
    pixel_dice_threshold: float
    pixel_auroc_body: float
    subjects_pos: int
    subjects_neg: int
    pixels_pos: int
    pixels_neg: int
    per_kind: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "subject": {
                "ap": self.subject_ap,
                "auroc": self.subject_auroc,
                "positives": self.subjects_pos,
                "negatives": self.subjects_neg,
            },
            "pixel": {
                "ap": self.pixel_ap,
                "auroc": self.pixel_auroc,
                "auroc_body_masked": self.pixel_auroc_body,
                "dice_ceiling": self.pixel_dice,
                "dice_threshold": self.pixel_dice_threshold,
                "positives": self.pixels_pos,
                "negatives": self.pixels_neg,
            },
            "per_kind": self.per_kind,
        }

    def save(self, path: str):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=1)
            f.write("\n")


@dataclass
class CaseRecord:
    """One scored test case, ready for pooling."""

    case_id: str
    kind: str  # anomaly kind, or "normal"
    subject_label: int
    subject_score: float
    voxel_scores: np.ndarray  # flattened
    voxel_labels: np.ndarray  # flattened, bool
    body_mask: np.ndarray | None = None  # flattened, bool


BODY_THRESHOLD = 0.05


def evaluate(records: list[CaseRecord]) -> EvalReport:
    """Pool case records into the full report.

    Pixel metrics concatenate every case's voxels into one vector. The
    body-masked AUROC variant drops background voxels (below BODY_THRESHOLD
    in the scored volume) except those inside a ground-truth mask, since a
    large easy-negative background inflates plain AUROC. Per-kind metrics
    pool that kind's cases with all normal cases.
    """
    if not records:
        raise DataError("no case records to evaluate")
    subj_scores = np.array([r.subject_score for r in records], dtype=np.float64)
    subj_labels = np.array([r.subject_label for r in records], dtype=np.int8)

    vox_scores = np.concatenate([r.voxel_scores for r in records])
    vox_labels = np.concatenate([r.voxel_labels for r in records])
    body_parts = [
        r.body_mask if r.body_mask is not None else np.ones(r.voxel_scores.size, dtype=bool)
        for r in records
    ]
    body = np.concatenate(body_parts) | vox_labels

    dice, dice_t = dice_ceiling(vox_scores, vox_labels)
    report = EvalReport(
        subject_ap=average_precision(subj_scores, subj_labels),
        subject_auroc=auroc(subj_scores, subj_labels),
        pixel_ap=average_precision(vox_scores, vox_labels),
        pixel_auroc=auroc(vox_scores, vox_labels),
        pixel_dice=dice,
        pixel_dice_threshold=dice_t,
        pixel_auroc_body=auroc(vox_scores[body], vox_labels[body]),
        subjects_pos=int(subj_labels.sum()),
        subjects_neg=int((1 - subj_labels).sum()),
        pixels_pos=int(vox_labels.sum()),
        pixels_neg=int(vox_labels.size - vox_labels.sum()),
    )

    normals = [r for r in records if r.subject_label == 0]
    kinds = sorted({r.kind for r in records if r.kind != "normal"})
    for kind in kinds:
        group = [r for r in records if r.kind == kind]
        pool = group + normals
        k_scores = np.concatenate([r.voxel_scores for r in pool])
        k_labels = np.concatenate([r.voxel_labels for r in pool])
        k_subj_s = np.array([r.subject_score for r in pool])
        k_subj_y = np.array([r.subject_label for r in pool])
        entry = {
            "cases": len(group),
            "pixel_ap": average_precision(k_scores, k_labels),
            "pixel_auroc": auroc(k_scores, k_labels),
        }
        if 0 < k_subj_y.sum() < k_subj_y.size:
            entry["subject_ap"] = average_precision(k_subj_s, k_subj_y)
            entry["subject_auroc"] = auroc(k_subj_s, k_subj_y)
        report.per_kind[kind] = entry
    return report


def curve_tables(scores, labels) -> dict[str, list[list[float]]]:
    """ROC and PR points (one row per distinct-score group) for CSV export."""
    s, y = _validate(scores, labels)
    pos = int(y.sum())
    neg = s.size - pos
    tp, fp, thr = _grouped_counts(s, y)
    roc = [[float(t), float(f / max(neg, 1)), float(p / max(pos, 1))]
           for t, f, p in zip(thr, fp, tp)]
    pr = [[float(t), float(p / max(pos, 1)), float(p / (p + f))]
          for t, f, p in zip(thr, fp, tp)]
    return {"roc": roc, "pr": pr}
