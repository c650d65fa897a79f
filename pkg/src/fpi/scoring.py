"""Anomaly scoring: per-pixel interpolation-factor estimates and aggregation.

The abnormality score of a pixel is the model's estimate of the
interpolation factor. The sigmoid head emits it directly; the softmax head
is reduced to its expectation over the five class values, which preserves
ranking granularity. Slice scores average their pixels; a subject score is
the maximum slice score, since a localized anomaly shows up as a sharp peak
over the affected slices. Both aggregators are configurable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError, UsageError
from .network import FpiModel, HEAD_SIGMOID, _as_batch_tensor, predict_proba
from .synth import DISCRETE_ALPHAS
from .volume import SliceImage, Volume

SLICE_AGGREGATORS = ("mean",)
SUBJECT_AGGREGATORS = ("max", "mean")


@dataclass(frozen=True)
class ScoreMap:
    """Per-pixel anomaly scores in [0, 1] with provenance."""

    scores: np.ndarray
    source: tuple[str, int, int] = ("", 0, 0)


@dataclass(frozen=True)
class SubjectScore:
    subject: float
    slice_scores: np.ndarray
    aggregator: str = "max"


def probs_to_scores(probs: np.ndarray, head: str) -> np.ndarray:
    """Collapse head output to scalar scores; softmax takes expected alpha."""
    if head == HEAD_SIGMOID:
        return probs
    values = np.asarray(DISCRETE_ALPHAS, dtype=np.float32)
    if probs.shape[-1] != len(values):
        raise DataError(f"expected {len(values)} class channels, got {probs.shape[-1]}")
    return probs @ values


def score_batch(model: FpiModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Score a stack of slices (N, H, W) -> (N, H, W), batching the forward."""
    x = _as_batch_tensor(images, model.config.input_size)
    model.module.eval()
    outs = []
    values = torch.tensor(DISCRETE_ALPHAS, dtype=torch.float32)
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            probs = predict_proba(model.module, x[i : i + batch_size], model.config.head)
            if model.config.head == HEAD_SIGMOID:
                outs.append(probs[:, 0])
            else:
                outs.append(torch.einsum("nchw,c->nhw", probs, values))
    return torch.cat(outs).numpy()


def pixel_scores(model: FpiModel, image: SliceImage) -> ScoreMap:
    """Score one slice; the input must already be normalized to [0, 1]."""
    scores = score_batch(model, image.pixels[None])[0]
    return ScoreMap(scores=scores.astype(np.float32), source=image.source)


def slice_score(score_map: ScoreMap | np.ndarray, aggregator: str = "mean") -> float:
    """Scalar score for one slice (mean of its pixel scores)."""
    scores = score_map.scores if isinstance(score_map, ScoreMap) else np.asarray(score_map)
    if scores.size == 0:
        raise DataError("empty score map")
    if aggregator not in SLICE_AGGREGATORS:
        raise UsageError(f"unknown slice aggregator {aggregator!r}")
    return float(scores.mean())


def subject_score(slice_scores: np.ndarray, aggregator: str = "max") -> float:
    """Scalar subject score from the per-slice score vector."""
    v = np.asarray(slice_scores, dtype=np.float64)
    if v.size == 0:
        raise DataError("need at least one slice score")
    if aggregator == "max":
        return float(v.max())
    if aggregator == "mean":
        return float(v.mean())
    raise UsageError(f"unknown subject aggregator {aggregator!r}")


def score_volume(
    model: FpiModel,
    vol: Volume,
    batch_size: int = 64,
    aggregator: str = "max",
) -> tuple[np.ndarray, SubjectScore]:
    """Score every depth-axis slice; returns the stacked 3D map + aggregates."""
    if vol.shape[1] != model.config.input_size or vol.shape[2] != model.config.input_size:
        raise DataError(
            f"volume slices {vol.shape[1:]} do not match model size "
            f"{model.config.input_size}"
        )
    maps = score_batch(model, vol.voxels, batch_size=batch_size)
    slice_vec = maps.reshape(maps.shape[0], -1).mean(axis=1)
    subj = SubjectScore(
        subject=subject_score(slice_vec, aggregator),
        slice_scores=slice_vec.astype(np.float64),
        aggregator=aggregator,
    )
    return maps.astype(np.float32), subj


def save_subject_record(path: str, case_id: str, subj: SubjectScore, map_path: str):
    record = {
        "id": case_id,
        "subject_score": subj.subject,
        "slice_scores": [float(s) for s in subj.slice_scores],
        "aggregator": subj.aggregator,
        "score_map": os.path.basename(map_path),
    }
    with open(path, "w") as f:
        json.dump(record, f, sort_keys=True, indent=1)
        f.write("\n")


def load_subject_record(path: str) -> dict:
    if not os.path.exists(path):
        raise DataError(f"subject record not found: {path}")
    with open(path) as f:
        return json.load(f)
