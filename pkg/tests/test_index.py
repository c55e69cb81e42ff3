"""Tests for the gallery index: build, search, persistence."""

import numpy as np
import pytest

from svmr.index import GalleryIndex, build_index, load_index, save_index, search
from svmr.stage1 import max_cos_similarity


def seeded_gallery(n, d_e=6, t_emb=3, seed=0):
    rng = np.random.default_rng(seed)
    return [(f"v{i:04d}", rng.standard_normal((d_e, t_emb))) for i in range(n)]


class TestBuildIndex:
    def test_empty_gallery_valid(self):
        index = build_index([])
        assert len(index) == 0
        assert search(index, np.ones(1), 5) == []

    def test_duplicate_id_rejected(self):
        gallery = [("v0", np.ones((2, 2))), ("v0", np.zeros((2, 2)))]
        with pytest.raises(ValueError, match="duplicate"):
            build_index(gallery)

    def test_dim_mismatch_rejected(self):
        gallery = [("v0", np.ones((2, 2))), ("v1", np.ones((3, 2)))]
        with pytest.raises(ValueError, match="shape"):
            build_index(gallery)

    def test_order_preserving(self):
        gallery = seeded_gallery(5)
        index = build_index(gallery)
        assert index.video_ids == [vid for vid, _ in gallery]


class TestSearch:
    def test_embedded_query_column_ranks_first(self):
        rng = np.random.default_rng(1)
        gallery = seeded_gallery(10, seed=2)
        e_q = rng.standard_normal(6)
        gallery[4] = ("v0004", np.column_stack([e_q, rng.standard_normal((6, 2))]))
        results = search(build_index(gallery), e_q, 3)
        assert results[0][0] == "v0004"
        np.testing.assert_allclose(results[0][1], 1.0, atol=1e-12)

    def test_k_larger_than_gallery(self):
        index = build_index(seeded_gallery(4, seed=3))
        results = search(index, np.ones(6), 100)
        assert len(results) == 4
        scores = [s for _, s in results]
        assert scores == sorted(scores, reverse=True)

    def test_matches_brute_force_oracle(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            gallery = seeded_gallery(100, seed=seed + 10)
            index = build_index(gallery)
            e_q = rng.standard_normal(6)
            got = search(index, e_q, 100)
            want = sorted(((vid, max_cos_similarity(e_q, emb))
                           for vid, emb in gallery),
                          key=lambda t: (-t[1], t[0]))
            assert [v for v, _ in got] == [v for v, _ in want]
            np.testing.assert_allclose([s for _, s in got], [s for _, s in want],
                                       atol=1e-6)

    def test_prefix_property(self):
        index = build_index(seeded_gallery(20, seed=4))
        e_q = np.random.default_rng(5).standard_normal(6)
        top5 = search(index, e_q, 5)
        top12 = search(index, e_q, 12)
        assert top12[:5] == top5

    def test_tie_break_ascending_id(self):
        emb = np.eye(2)[:, :1]
        gallery = [("b", emb), ("a", emb), ("c", emb)]
        results = search(build_index(gallery), np.array([1.0, 0.0]), 3)
        assert [v for v, _ in results] == ["a", "b", "c"]

    def test_scores_within_unit_interval(self):
        index = build_index(seeded_gallery(30, seed=6))
        e_q = np.random.default_rng(7).standard_normal(6)
        for _, s in search(index, e_q, 30):
            assert -1.0 <= s <= 1.0

    def test_zero_query_rejected(self):
        index = build_index(seeded_gallery(3, seed=8))
        with pytest.raises(ValueError, match="degenerate"):
            search(index, np.zeros(6), 1)

    def test_zero_column_scores_zero(self):
        gallery = [("v0", np.zeros((3, 2)))]
        results = search(build_index(gallery), np.array([1.0, 0.0, 0.0]), 1)
        assert results == [("v0", 0.0)]


class TestIndexIO:
    def test_round_trip_bytes(self, tmp_path):
        index = build_index(seeded_gallery(1000, seed=9))
        p1, p2 = tmp_path / "a.svmidx", tmp_path / "b.svmidx"
        save_index(index, p1)
        save_index(load_index(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_search_matches_f32_rounded(self, tmp_path):
        gallery = seeded_gallery(50, seed=10)
        rounded = [(vid, emb.astype(np.float32).astype(float))
                   for vid, emb in gallery]
        path = tmp_path / "g.svmidx"
        save_index(build_index(gallery), path)
        loaded = load_index(path)
        e_q = np.random.default_rng(11).standard_normal(6)
        assert search(loaded, e_q, 10) == search(build_index(rounded), e_q, 10)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.svmidx"
        path.write_bytes(b"NOTIDX" + bytes(16))
        from svmr.data import FormatError
        with pytest.raises(FormatError, match="bad magic"):
            load_index(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "x.svmidx"
        save_index(build_index(seeded_gallery(3, seed=12)), path)
        path.write_bytes(path.read_bytes()[:-5])
        from svmr.data import FormatError
        with pytest.raises(FormatError, match="truncated"):
            load_index(path)
