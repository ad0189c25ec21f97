"""Clip-level and event-level evaluation metrics."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter

from .manifest import EventInterval


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP of one class: mean precision at the rank of each positive.

    Ranks come from a stable sort on descending score, so tied clips keep
    their original order.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(labels)[order] > 0
    n_pos = hits.sum()
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1
    return math.fsum(np.arange(1, n_pos + 1) / ranks) / int(n_pos)


def compute_map(scores, labels) -> tuple[np.ndarray, float]:
    """Per-class AP (NaN for classes without positives) and their mean over defined classes."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be matching N x C arrays")
    ap = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        if labels[:, c].any():
            ap[c] = average_precision(scores[:, c], labels[:, c])
    if np.all(np.isnan(ap)):
        raise ValueError("no class has a positive label; mAP is undefined")
    return ap, float(np.nanmean(ap))


def compute_accuracy(scores, labels) -> float:
    """Fraction of clips whose top-scoring class (lowest index on ties) is a true class.

    ``labels`` is either class indices (N,) or a binary (N, C) matrix.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    top = np.argmax(scores, axis=1)
    if labels.ndim == 1:
        return float(np.mean(top == labels))
    return float(np.mean(labels[np.arange(len(top)), top] > 0))


def decode_events(presence, threshold: float = 0.5, min_duration: float = 0.1,
                  step_seconds: float = 0.32, clip_id: str = "") -> list[EventInterval]:
    """Presence map (T', C) -> intervals: median filter (3 steps), threshold, runs, min duration.

    The filter replicates edge values. A run of steps [i, j] becomes the
    interval [i * step, (j + 1) * step).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    p = np.asarray(presence, dtype=np.float64)
    smooth = median_filter(p, size=(3, 1), mode="nearest")
    active = smooth >= threshold
    events = []
    for c in range(p.shape[1]):
        edges = np.diff(np.concatenate([[0], active[:, c].astype(np.int8), [0]]))
        for start, stop in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
            onset, offset = start * step_seconds, stop * step_seconds
            if offset - onset >= min_duration - 1e-9:
                events.append(EventInterval(c, float(onset), float(offset), clip_id))
    return events


def _matches(pred: EventInterval, gold: EventInterval, collar: float) -> bool:
    return (abs(pred.onset - gold.onset) <= collar
            and abs(pred.offset - gold.offset) <= max(collar, 0.2 * gold.duration))


def _f1(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def event_f1(pred: Iterable[EventInterval], gold: Iterable[EventInterval], collar: float = 0.2) -> dict:
    """Event-based F1 per class and macro-averaged over classes with any event.

    Within each (clip, class), predictions in onset order each take the
    earliest-onset unmatched gold event within the collar rule.
    """
    if collar <= 0:
        raise ValueError(f"collar must be positive, got {collar}")
    groups: dict[tuple, tuple[list, list]] = defaultdict(lambda: ([], []))
    for e in pred:
        groups[(e.clip_id, e.class_id)][0].append(e)
    for e in gold:
        groups[(e.clip_id, e.class_id)][1].append(e)
    counts: dict[int, list[int]] = defaultdict(lambda: [0, 0, 0])  # tp, n_pred, n_gold
    for (_, cls), (ps, gs) in groups.items():
        gs = sorted(gs, key=lambda e: (e.onset, e.offset))
        used = [False] * len(gs)
        tp = 0
        for p in sorted(ps, key=lambda e: (e.onset, e.offset)):
            for k, g in enumerate(gs):
                if not used[k] and _matches(p, g, collar):
                    used[k] = True
                    tp += 1
                    break
        c = counts[cls]
        c[0] += tp
        c[1] += len(ps)
        c[2] += len(gs)
    per_class = {}
    for cls in sorted(counts):
        tp, n_pred, n_gold = counts[cls]
        precision, recall, f1 = _f1(tp, n_pred, n_gold)
        per_class[cls] = {"precision": precision, "recall": recall, "f1": f1,
                          "tp": tp, "n_pred": n_pred, "n_gold": n_gold}
    average = float(np.mean([v["f1"] for v in per_class.values()])) if per_class else 0.0
    return {"per_class": per_class, "average": average}


def ensemble_mean(prob_sets: Sequence) -> np.ndarray:
    arrays = [np.asarray(p, dtype=np.float64) for p in prob_sets]
    if not arrays:
        raise ValueError("ensemble needs at least one member")
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ValueError(f"ensemble members differ in shape: {[a.shape for a in arrays]}")
    return np.mean(np.stack(arrays), axis=0)


def write_metrics_csv(path, rows: Iterable[tuple]) -> None:
    """Rows of (epoch, split, metric, value)."""
    with open(Path(path), "w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(["epoch", "split", "metric", "value"])
        for epoch, split, metric, value in rows:
            out.writerow([epoch, split, metric, f"{float(value):.6f}"])


def write_events_csv(path, events: Iterable[EventInterval]) -> None:
    with open(Path(path), "w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(["clip_id", "class", "onset", "offset"])
        for e in events:
            out.writerow([e.clip_id, e.class_id, f"{e.onset:.3f}", f"{e.offset:.3f}"])
