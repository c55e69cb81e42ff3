"""Fusion, soft-NMS, and result-assembly tests."""

import math

import numpy as np
import pytest

from svmr.data import MomentPrediction
from svmr.metrics import tiou
from svmr.postprocess import assemble_results, fuse_scores, soft_nms


def cell_score(preds, video_id, t_start):
    for p in preds:
        if p.video_id == video_id and p.t_start == pytest.approx(t_start):
            return p.score
    raise AssertionError(f"no prediction at {t_start}")


class TestFuseScores:
    def test_unit_product(self):
        m = np.ones((4, 4))
        preds = fuse_scores(1.0, m, m, "v", 8.0)
        assert all(p.score == 1.0 for p in preds)

    def test_fused_product_value(self):
        m_c = np.full((4, 4), 0.9)
        m_r = np.full((4, 4), 0.8)
        preds = fuse_scores(0.5, m_c, m_r, "v", 8.0)
        assert all(p.score == pytest.approx(0.36) for p in preds)

    def test_zero_similarity_zeroes_everything(self):
        m = np.random.default_rng(0).random((4, 4))
        preds = fuse_scores(0.0, m, m, "v", 8.0)
        assert all(p.score == 0.0 for p in preds)

    def test_out_of_range_similarity_rejected(self):
        m = np.ones((4, 4))
        with pytest.raises(ValueError):
            fuse_scores(1.5, m, m, "v", 8.0)
        with pytest.raises(ValueError):
            fuse_scores(-1.1, m, m, "v", 8.0)

    def test_negative_similarity_clamped(self):
        m = np.ones((4, 4))
        preds = fuse_scores(-0.5, m, m, "v", 8.0)
        assert all(p.score == 0.0 for p in preds)

    def test_one_prediction_per_valid_cell(self):
        m = np.ones((4, 4))
        preds = fuse_scores(1.0, m, m, "v", 8.0)
        assert len(preds) == 10  # 4+3+2+1 cells satisfy s+d+1 <= 4

    def test_grid_to_seconds_mapping(self):
        m = np.ones((4, 4))
        preds = fuse_scores(1.0, m, m, "v", 8.0)
        spans = {(p.t_start, p.t_end) for p in preds}
        assert (0.0, 2.0) in spans          # cell (0, 0)
        assert (0.0, 8.0) in spans          # cell (0, 3), full video
        assert (6.0, 8.0) in spans          # cell (3, 0)
        assert all(0.0 <= a < b <= 8.0 for a, b in spans)

    def test_rectangular_maps_rejected(self):
        with pytest.raises(ValueError):
            fuse_scores(1.0, np.ones((3, 4)), np.ones((3, 4)), "v", 8.0)

    def test_monotone_in_each_factor(self):
        rng = np.random.default_rng(2)
        m_c = rng.random((4, 4))
        m_r = rng.random((4, 4))
        low = fuse_scores(0.3, m_c, m_r, "v", 8.0)
        high = fuse_scores(0.6, m_c, m_r, "v", 8.0)
        assert all(h.score >= l.score for h, l in zip(high, low))
        bumped = fuse_scores(0.3, np.minimum(m_c + 0.1, 1.0), m_r, "v", 8.0)
        assert all(b.score >= l.score for b, l in zip(bumped, low))


def naive_soft_nms(preds, sigma):
    """Independent re-derivation: list-of-dicts, explicit decay loop."""
    rows = [{"p": p, "score": p.score} for p in preds]
    out = []
    while rows:
        best = max(rows, key=lambda r: (r["score"], -r["p"].t_start, -r["p"].t_end))
        rows.remove(best)
        out.append((best["p"], best["score"]))
        for row in rows:
            if row["p"].video_id == best["p"].video_id:
                overlap = tiou((best["p"].t_start, best["p"].t_end),
                               (row["p"].t_start, row["p"].t_end))
                row["score"] *= math.exp(-overlap ** 2 / sigma)
    return out


class TestSoftNms:
    def test_single_prediction_unchanged(self):
        preds = [MomentPrediction("v", 0.0, 1.0, 0.7)]
        out = soft_nms(preds)
        assert out[0].score == 0.7

    def test_identical_intervals_decay(self):
        preds = [MomentPrediction("v", 0.0, 1.0, 0.9),
                 MomentPrediction("v", 0.0, 1.0, 0.8)]
        out = soft_nms(preds, sigma=0.4)
        assert out[0].score == 0.9
        assert out[1].score == pytest.approx(0.8 * math.exp(-1.0 / 0.4), rel=1e-9)
        assert out[1].score == pytest.approx(0.0657, abs=2e-4)

    def test_disjoint_intervals_unchanged(self):
        preds = [MomentPrediction("v", 0.0, 1.0, 0.9),
                 MomentPrediction("v", 5.0, 6.0, 0.8)]
        out = soft_nms(preds)
        assert [p.score for p in out] == [0.9, 0.8]

    def test_different_videos_never_interact(self):
        preds = [MomentPrediction("a", 0.0, 1.0, 0.9),
                 MomentPrediction("b", 0.0, 1.0, 0.8)]
        out = soft_nms(preds)
        assert [p.score for p in out] == [0.9, 0.8]

    def test_never_increases_scores_and_top1_fixed(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            preds = []
            for i in range(15):
                lo = float(rng.random() * 10)
                preds.append(MomentPrediction("v", lo, lo + float(rng.random() * 3) + 0.1,
                                              float(rng.random())))
            out = soft_nms(preds, sigma=0.4)
            best_in = max(p.score for p in preds)
            assert out[0].score == best_in
            by_interval = {(p.t_start, p.t_end): p.score for p in preds}
            assert all(p.score <= by_interval[(p.t_start, p.t_end)] + 1e-15
                       for p in out)

    def test_matches_naive_reimplementation(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            preds = []
            for i in range(int(rng.integers(1, 12))):
                lo = float(rng.random() * 8)
                preds.append(MomentPrediction(
                    f"v{int(rng.integers(2))}", lo,
                    lo + float(rng.random() * 3) + 0.1, float(rng.random())))
            out = soft_nms(preds, sigma=0.4)
            expected = naive_soft_nms(preds, 0.4)
            assert len(out) == len(expected)
            for got, (want_pred, want_score) in zip(out, expected):
                assert got.video_id == want_pred.video_id
                assert got.t_start == want_pred.t_start
                assert got.score == pytest.approx(want_score, rel=1e-12)

    def test_top_k_truncates(self):
        preds = [MomentPrediction("v", float(i), float(i) + 0.5, 0.5)
                 for i in range(10)]
        assert len(soft_nms(preds, top_k=3)) == 3

    def test_bad_sigma_rejected(self):
        with pytest.raises(ValueError):
            soft_nms([], sigma=0.0)

    def test_output_sorted_by_decayed_score(self):
        rng = np.random.default_rng(21)
        preds = []
        for i in range(20):
            lo = float(rng.random() * 6)
            preds.append(MomentPrediction("v", lo, lo + 1.0, float(rng.random())))
        out = soft_nms(preds, sigma=0.4)
        scores = [p.score for p in out]
        assert scores == sorted(scores, reverse=True)


class TestAssembleResults:
    def test_dominant_cell_wins_globally(self):
        m_c = np.full((4, 4), 0.05)
        m_c[1, 1] = 0.95
        m_r = np.full((4, 4), 0.5)
        per_video, merged = assemble_results([("v", 0.9, m_c, m_r, 8.0)])
        assert merged[0].t_start == pytest.approx(2.0)   # cell (1, 1) -> [2, 6]s
        assert merged[0].t_end == pytest.approx(6.0)
        assert set(per_video) == {"v"}

    def test_similarity_orders_identical_maps_rankwise(self):
        # identical maps decay identically per video, so the k-th clip of
        # the higher-p video always outranks the k-th clip of the lower
        m = np.full((4, 4), 0.8)
        per_video, _ = assemble_results([("hi", 0.9, m, m, 8.0),
                                         ("lo", 0.1, m, m, 8.0)])
        for h, l in zip(per_video["hi"], per_video["lo"], strict=True):
            assert h.score > l.score
            assert (h.t_start, h.t_end) == (l.t_start, l.t_end)

    def test_similarity_orders_identical_maps_disjoint_clips(self):
        # with no overlap there is no decay, so every clip of the higher-p
        # video outranks every clip of the lower-p one in the global list
        m = np.zeros((4, 4))
        for s in range(4):
            m[s, 0] = 0.8   # the four disjoint unit cells
        _, merged = assemble_results([("hi", 0.9, m, m, 8.0),
                                      ("lo", 0.1, m, m, 8.0)])
        assert [p.video_id for p in merged] == ["hi"] * 4 + ["lo"] * 4

    def test_pruning_drops_tiny_scores(self):
        m = np.full((4, 4), 1e-3)   # fused 1e-6 < threshold
        per_video, merged = assemble_results([("v", 1.0, m, m, 8.0)])
        assert merged == [] and per_video["v"] == []

    def test_deterministic(self):
        rng = np.random.default_rng(31)
        candidates = [(f"v{i}", float(rng.random()), rng.random((6, 6)),
                       rng.random((6, 6)), 12.0) for i in range(4)]
        _, merged_a = assemble_results(candidates)
        _, merged_b = assemble_results(candidates)
        assert merged_a == merged_b

    def test_global_order_sorted_with_tiebreak(self):
        m = np.full((4, 4), 0.8)
        _, merged = assemble_results([("b", 0.5, m, m, 8.0),
                                      ("a", 0.5, m, m, 8.0)])
        scores = [p.score for p in merged]
        assert scores == sorted(scores, reverse=True)
        for prev, cur in zip(merged, merged[1:]):
            if prev.score == cur.score:
                assert (prev.video_id, prev.t_start) <= (cur.video_id, cur.t_start)

    def test_intervals_inside_duration(self):
        rng = np.random.default_rng(41)
        m_c, m_r = rng.random((5, 5)), rng.random((5, 5))
        _, merged = assemble_results([("v", 0.9, m_c, m_r, 17.0)])
        assert all(0.0 <= p.t_start < p.t_end <= 17.0 for p in merged)
