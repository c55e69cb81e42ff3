"""Score fusion, Gaussian soft-NMS, and cross-video result assembly."""

from __future__ import annotations

import math

import numpy as np

from .data import MomentPrediction
from .metrics import tiou

PRUNE_THRESHOLD = 1e-4


def fuse_scores(p: float, m_c: np.ndarray, m_r: np.ndarray, video_id: str,
                duration_sec: float) -> list[MomentPrediction]:
    """One prediction per valid map cell, scored p * M_R * M_C.

    Cell (s, d) covers grid span [s, s+d+1), mapped linearly onto the
    video's duration.  A negative retrieval score is clamped to zero so a
    dissimilar video cannot outrank genuine matches.
    """
    if not -1.0 <= p <= 1.0:
        raise ValueError(f"retrieval score {p} outside [-1, 1]")
    if m_c.shape != m_r.shape or m_c.ndim != 2 or m_c.shape[0] != m_c.shape[1]:
        raise ValueError(f"score maps must be square and equal: "
                         f"{m_c.shape} vs {m_r.shape}")
    p = max(0.0, float(p))
    l_r = m_c.shape[0]
    preds = []
    for s in range(l_r):
        for d in range(l_r - s):
            score = p * float(m_r[s, d]) * float(m_c[s, d])
            t_start = s / l_r * duration_sec
            t_end = (s + d + 1) / l_r * duration_sec
            preds.append(MomentPrediction(video_id, t_start, t_end, score))
    return preds


def soft_nms(preds: list[MomentPrediction], sigma: float = 0.4,
             top_k: int | None = None) -> list[MomentPrediction]:
    """Gaussian-decay soft suppression, highest score first.

    Repeatedly pops the best remaining prediction and decays every same-video
    survivor by exp(-tIoU^2 / sigma).  Output is ordered by decayed score;
    the top-1 score is never changed.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    items = [(p.score, p) for p in preds]
    out: list[MomentPrediction] = []
    while items and (top_k is None or len(out) < top_k):
        best = max(range(len(items)),
                   key=lambda i: (items[i][0], -items[i][1].t_start,
                                  -items[i][1].t_end))
        score, pred = items.pop(best)
        kept = MomentPrediction(pred.video_id, pred.t_start, pred.t_end, score)
        out.append(kept)
        decayed = []
        for s, q in items:
            if q.video_id == pred.video_id:
                overlap = tiou((pred.t_start, pred.t_end), (q.t_start, q.t_end))
                s = s * math.exp(-(overlap ** 2) / sigma)
            decayed.append((s, q))
        items = decayed
    return out


def assemble_results(candidates: list[tuple[str, float, np.ndarray, np.ndarray, float]],
                     sigma: float = 0.4, top_k_per_video: int = 100,
                     prune_threshold: float = PRUNE_THRESHOLD
                     ) -> tuple[dict[str, list[MomentPrediction]],
                                list[MomentPrediction]]:
    """Fuse and suppress per candidate video, then merge a global ranking.

    ``candidates`` rows are (video_id, retrieval score p, M_C, M_R,
    duration_sec).  Cells below ``prune_threshold`` are dropped before the
    quadratic suppression pass.  Returns (per-video lists, global ranking);
    the global order breaks ties by (video_id, t_start).
    """
    per_video: dict[str, list[MomentPrediction]] = {}
    for video_id, p, m_c, m_r, duration in candidates:
        preds = fuse_scores(p, m_c, m_r, video_id, duration)
        preds = [q for q in preds if q.score >= prune_threshold]
        per_video[video_id] = soft_nms(preds, sigma, top_k_per_video)
    merged = [q for preds in per_video.values() for q in preds]
    merged.sort(key=lambda q: (-q.score, q.video_id, q.t_start, q.t_end))
    return per_video, merged
