"""Evaluation metrics: tIoU, HR@K, mAP@K, AR@AN, AUC, Prec@N.

Video-level retrieval metrics treat a video as relevant when it contains at
least one instance of the query's class.  Localization metrics match
predictions to ground-truth instances greedily in rank order, one-to-one,
so a single instance can never credit two predictions.
"""

from __future__ import annotations

import numpy as np

Interval = tuple[float, float]

TIOU_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)
AN_GRID = tuple(range(1, 101))


def tiou(a: Interval, b: Interval) -> float:
    """Temporal intersection over union of two closed intervals."""
    a_lo, a_hi = a
    b_lo, b_hi = b
    if not (a_lo < a_hi and b_lo < b_hi):
        raise ValueError(f"empty interval in tiou: {a}, {b}")
    inter = max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))
    union = (a_hi - a_lo) + (b_hi - b_lo) - inter
    return inter / union


def hr_at_k(rankings: list[list[str]], relevant: list[set[str]],
            k: int) -> tuple[float, int]:
    """Fraction of queries with a relevant video in the top k.

    Queries with no relevant video at all are excluded from the mean; the
    second return value counts them.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    hits = 0
    excluded = 0
    for ranking, rel in zip(rankings, relevant, strict=True):
        if not rel:
            excluded += 1
            continue
        hits += any(vid in rel for vid in ranking[:k])
    n = len(rankings) - excluded
    return (hits / n if n else 0.0), excluded


def ap_at_k(ranking: list[str], relevant: set[str], k: int) -> float:
    """Average precision truncated at k, normalized by min(k, #relevant)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not relevant:
        raise ValueError("ap_at_k needs at least one relevant video")
    hits = 0
    total = 0.0
    for i, vid in enumerate(ranking[:k], start=1):
        if vid in relevant:
            hits += 1
            total += hits / i
    return total / min(k, len(relevant))


def map_at_k(rankings: list[list[str]], relevant: list[set[str]],
             k: int) -> tuple[float, int]:
    """Mean AP@k over queries that have at least one relevant video."""
    values = []
    excluded = 0
    for ranking, rel in zip(rankings, relevant, strict=True):
        if not rel:
            excluded += 1
            continue
        values.append(ap_at_k(ranking, rel, k))
    return (float(np.mean(values)) if values else 0.0), excluded


def _greedy_match_counts(preds: list[Interval], gts: list[Interval],
                         threshold: float) -> np.ndarray:
    """matched[r] = ground truths matched within the top r+1 predictions.

    Predictions are consumed in rank order; each takes the best-overlap
    ground truth still unmatched, if that overlap reaches the threshold.
    """
    counts = np.zeros(len(preds), dtype=int)
    taken = [False] * len(gts)
    matched = 0
    for r, pred in enumerate(preds):
        best_iou = 0.0
        best_g = -1
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            value = tiou(pred, gt)
            if value > best_iou:
                best_iou = value
                best_g = g
        if best_g >= 0 and best_iou >= threshold:
            taken[best_g] = True
            matched += 1
        counts[r] = matched
    return counts


def ar_at_an(pairs: list[tuple[list[Interval], list[Interval]]],
             an_grid=AN_GRID, thresholds=TIOU_GRID
             ) -> tuple[np.ndarray, int]:
    """Average recall at each proposal budget in an_grid.

    ``pairs`` holds (ranked predictions, ground truths) per query-video
    pair.  Recall is averaged over tIoU thresholds and pairs; pairs with no
    ground truth are excluded and counted.
    """
    an_grid = np.asarray(an_grid, dtype=int)
    excluded = 0
    recalls = np.zeros((0, len(an_grid)))
    rows = []
    for preds, gts in pairs:
        if not gts:
            excluded += 1
            continue
        per_threshold = np.zeros((len(thresholds), len(an_grid)))
        for t_i, threshold in enumerate(thresholds):
            counts = _greedy_match_counts(preds, gts, threshold)
            for a_i, an in enumerate(an_grid):
                matched = counts[min(an, len(counts)) - 1] if len(counts) else 0
                per_threshold[t_i, a_i] = matched / len(gts)
        rows.append(per_threshold.mean(axis=0))
    if rows:
        recalls = np.stack(rows)
    ar = recalls.mean(axis=0) if len(recalls) else np.zeros(len(an_grid))
    return ar, excluded


def auc(ar: np.ndarray, an_grid=AN_GRID) -> float:
    """Area under the AR-vs-AN curve, on the usual 0-100 scale.

    The trapezoid over AN in [1, 100] is normalized by 100 and reported
    x100, so a perfect curve scores 99 (the grid spans 99 units).
    """
    an_grid = np.asarray(an_grid, dtype=float)
    ar = np.asarray(ar, dtype=float)
    if ar.shape != an_grid.shape:
        raise ValueError(f"curve shape {ar.shape} != grid {an_grid.shape}")
    trapezoid = getattr(np, "trapezoid", np.trapz)
    return float(trapezoid(ar, an_grid) / 100.0 * 100.0)


def prec_at_n(clip_lists: list[tuple[list[tuple[str, Interval]], dict[str, list[Interval]]]],
              n: int, tau: float = 0.5) -> tuple[float, int]:
    """Precision of the global top-n clips against same-class instances.

    Each element pairs a query's ranked (video_id, interval) clips with its
    ground-truth instances per video.  A clip counts when it overlaps an
    unmatched instance of its own video at tIoU >= tau; each instance
    credits at most one clip.  Queries with fewer than n clips are averaged
    over what they have and counted in the second return value.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    values = []
    short = 0
    for clips, gts_by_video in clip_lists:
        top = clips[:n]
        if len(top) < n:
            short += 1
        if not top:
            values.append(0.0)
            continue
        taken: dict[str, list[bool]] = {v: [False] * len(g)
                                        for v, g in gts_by_video.items()}
        credited = 0
        for video_id, interval in top:
            gts = gts_by_video.get(video_id, [])
            best_iou, best_g = 0.0, -1
            for g, gt in enumerate(gts):
                if taken[video_id][g]:
                    continue
                value = tiou(interval, gt)
                if value > best_iou:
                    best_iou, best_g = value, g
            if best_g >= 0 and best_iou >= tau:
                taken[video_id][best_g] = True
                credited += 1
        values.append(credited / len(top))
    return (float(np.mean(values)) if values else 0.0), short


def recall_monotonicity_check(ar: np.ndarray) -> str | None:
    """None when AR is non-decreasing in AN, else a description."""
    ar = np.asarray(ar, dtype=float)
    drops = np.flatnonzero(np.diff(ar) < 0)
    if drops.size:
        i = int(drops[0])
        return f"AR decreases between AN positions {i} and {i + 1} " \
               f"({ar[i]:.6f} -> {ar[i + 1]:.6f})"
    return None
