"""Cycle-consistency filters: exact, relaxed, and their algebra."""

import numpy as np
import pytest

from corrkit.filters import back_match_distances, cyclic_filter, relaxed_cyclic_filter
from corrkit.grids import FeatureMap
from corrkit.matching import MatchSet, nn_match_all

from conftest import random_fmap


def all_points(fm):
    return [(r, c) for r in range(fm.height) for c in range(fm.width)]


def forward_set(rng, h=6, w=6, c=8):
    src = random_fmap(rng, h, w, c, "s")
    tgt = random_fmap(rng, h, w, c, "t")
    return src, tgt, nn_match_all(all_points(src), src, tgt)


class TestBackMatchDistances:
    def test_identical_grids_distance_zero(self, rng):
        src = random_fmap(rng, 5, 5, 6, "s")
        tgt = FeatureMap(src.data, image_id="t")
        ms = nn_match_all(all_points(src), src, tgt)
        np.testing.assert_array_equal(back_match_distances(ms, src, tgt), 0.0)

    def test_known_offset(self):
        # distinct orthogonal cells; one match is planted 2 cells off
        data = np.zeros((1, 4, 4), dtype=np.float32)
        for i in range(4):
            data[0, i, i] = 1.0
        src = FeatureMap(data, image_id="s")
        tgt = FeatureMap(data, image_id="t")
        ms = MatchSet("s", "t", [[0, 0], [0, 1]], [[0, 2], [0, 1]], [1.0, 1.0])
        d = back_match_distances(ms, src, tgt)
        np.testing.assert_allclose(d, [2.0, 0.0])

    def test_handles_duplicate_targets(self, rng):
        src = random_fmap(rng, 4, 4, 5, "s")
        tgt = random_fmap(rng, 2, 2, 5, "t")  # small target forces collisions
        ms = nn_match_all(all_points(src), src, tgt)
        assert len(np.unique(ms.tgt, axis=0)) < len(ms)
        d = back_match_distances(ms, src, tgt)
        # per-match recomputation must agree with the deduplicated path
        for i in range(len(ms)):
            one = MatchSet("s", "t", ms.src[i:i + 1], ms.tgt[i:i + 1],
                           ms.scores[i:i + 1])
            assert back_match_distances(one, src, tgt)[0] == d[i]

    def test_empty_set(self, rng):
        src = random_fmap(rng, 2, 2, 2, "s")
        tgt = random_fmap(rng, 2, 2, 2, "t")
        assert back_match_distances(MatchSet.empty("s", "t"), src, tgt).shape == (0,)


class TestCyclicFilter:
    def test_identical_grids_keep_everything(self, rng):
        src = random_fmap(rng, 6, 6, 8, "s")
        tgt = FeatureMap(src.data, image_id="t")
        ms = nn_match_all(all_points(src), src, tgt)
        kept, report = cyclic_filter(ms, src, tgt)
        assert len(kept) == len(ms)
        assert report.rejected_count == 0

    def test_forward_mismatch_rejected(self, rng):
        src, tgt, ms = forward_set(rng)
        # corrupt one target point so the forward condition fails
        bad_tgt = ms.tgt.copy()
        bad_tgt[0] = (bad_tgt[0] + 1) % [src.height, src.width]
        corrupted = MatchSet("s", "t", ms.src, bad_tgt, ms.scores)
        kept, report = cyclic_filter(corrupted, src, tgt)
        assert report.rejection_reasons["forward_mismatch"] >= 1
        assert not any((kept.src == ms.src[0]).all(axis=1))

    def test_report_accounting(self, rng):
        src, tgt, ms = forward_set(rng)
        kept, report = cyclic_filter(ms, src, tgt)
        assert report.input_count == len(ms)
        assert report.kept_count == len(kept)
        assert report.kept_count + report.rejected_count == report.input_count

    def test_idempotent(self, rng):
        src, tgt, ms = forward_set(rng)
        once, _ = cyclic_filter(ms, src, tgt)
        twice, report = cyclic_filter(once, src, tgt)
        assert report.rejected_count == 0
        np.testing.assert_array_equal(once.src, twice.src)
        np.testing.assert_array_equal(once.tgt, twice.tgt)

    def test_survivors_are_mutual(self, rng):
        src, tgt, ms = forward_set(rng, 7, 5, 6)
        kept, _ = cyclic_filter(ms, src, tgt)
        assert len(kept) > 0
        back = nn_match_all(kept.tgt.astype(int), tgt, src)
        np.testing.assert_array_equal(back.tgt, kept.src)


class TestRelaxedCyclicFilter:
    def test_zero_keeps_nothing(self, rng):
        src, tgt, ms = forward_set(rng)
        kept, report = relaxed_cyclic_filter(ms, src, tgt, r_max=0.0)
        assert len(kept) == 0
        assert report.rejected_count == len(ms)

    def test_half_equals_exact_back_condition(self, rng):
        for _ in range(5):
            src, tgt, ms = forward_set(rng)
            relaxed, _ = relaxed_cyclic_filter(ms, src, tgt, r_max=0.5)
            dist = back_match_distances(ms, src, tgt)
            exact = ms.take(np.flatnonzero(dist == 0.0))
            np.testing.assert_array_equal(relaxed.src, exact.src)
            np.testing.assert_array_equal(relaxed.tgt, exact.tgt)

    def test_infinity_keeps_everything(self, rng):
        src, tgt, ms = forward_set(rng)
        kept, _ = relaxed_cyclic_filter(ms, src, tgt, r_max=np.inf)
        assert len(kept) == len(ms)

    def test_bound_is_strict(self):
        # planted back-match distance exactly 1: r_max = 1 must reject it
        data = np.zeros((1, 3, 3), dtype=np.float32)
        data[0, 0, 0] = 1.0
        data[0, 1, 1] = 1.0
        data[0, 2, 2] = 1.0
        src = FeatureMap(data, image_id="s")
        tgt = FeatureMap(data, image_id="t")
        ms = MatchSet("s", "t", [[0, 1]], [[0, 2]], [1.0])  # back(0,2) = (0,2)
        kept, _ = relaxed_cyclic_filter(ms, src, tgt, r_max=1.0)
        assert len(kept) == 0
        kept, _ = relaxed_cyclic_filter(ms, src, tgt, r_max=1.0 + 1e-9)
        assert len(kept) == 1

    def test_default_admits_diagonal_slips(self):
        # back-match one diagonal cell away (distance sqrt2) survives r_max 1.5
        data = np.zeros((2, 2, 4), dtype=np.float32)
        for i, (r, c) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
            data[r, c, i] = 1.0
        src = FeatureMap(data, image_id="s")
        tgt = FeatureMap(data, image_id="t")
        ms = MatchSet("s", "t", [[0, 0]], [[1, 1]], [1.0])
        kept, _ = relaxed_cyclic_filter(ms, src, tgt)  # default r_max = 1.5
        assert len(kept) == 1

    def test_monotone_in_radius(self, rng):
        for _ in range(8):
            src, tgt, ms = forward_set(rng, 5, 7, 4)
            counts = [len(relaxed_cyclic_filter(ms, src, tgt, r_max=r)[0])
                      for r in (0.0, 0.5, 1.5, 3.0, np.inf)]
            assert counts == sorted(counts)
            assert counts[0] == 0 and counts[-1] == len(ms)

    def test_idempotent(self, rng):
        src, tgt, ms = forward_set(rng)
        once, _ = relaxed_cyclic_filter(ms, src, tgt, r_max=1.5)
        twice, report = relaxed_cyclic_filter(once, src, tgt, r_max=1.5)
        assert report.rejected_count == 0
        np.testing.assert_array_equal(once.tgt, twice.tgt)

    def test_negative_radius_raises(self, rng):
        src, tgt, ms = forward_set(rng, 3, 3, 3)
        with pytest.raises(ValueError):
            relaxed_cyclic_filter(ms, src, tgt, r_max=-1.0)

    def test_relaxed_supersets_exact(self, rng):
        for _ in range(5):
            src, tgt, ms = forward_set(rng)
            exact, _ = cyclic_filter(ms, src, tgt)
            relaxed, _ = relaxed_cyclic_filter(ms, src, tgt, r_max=1.5)
            exact_keys = {tuple(p) for p in exact.src}
            relaxed_keys = {tuple(p) for p in relaxed.src}
            assert exact_keys <= relaxed_keys
