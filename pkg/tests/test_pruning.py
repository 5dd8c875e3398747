import math

import numpy as np
import pytest

from sparsewin import pruning
from sparsewin.pruning import (gather, kept_count, rank_windows, scatter_with_duplicate,
                               score_windows, stage_keep_sets, WindowScores)
from sparsewin.tensor import Tensor
from sparsewin.windows import window_partition


def batch_from(arr, m=2):
    return window_partition(Tensor(arr.astype(np.float32)), m)


class TestScoreWindows:
    def test_zero_window_scores_zero(self):
        wb = window_partition(Tensor(np.zeros((1, 4, 4, 2), dtype=np.float32)), 2)
        scores = score_windows(wb)[0].scores
        np.testing.assert_array_equal(scores, np.zeros(4))

    def test_all_ones_window(self):
        # 4 tokens x 2 channels of ones -> sqrt(8)
        wb = window_partition(Tensor(np.ones((1, 2, 2, 2), dtype=np.float32)), 2)
        scores = score_windows(wb)[0].scores
        assert abs(scores[0] - math.sqrt(8.0)) < 1e-6

    def test_random_vs_naive_loop(self):
        rng = np.random.default_rng(0)
        arr = rng.random((2, 4, 6, 3)).astype(np.float32)
        wb = window_partition(Tensor(arr), 2)
        per_image = score_windows(wb)
        data = wb.tensor.data
        for img in range(2):
            for wi in range(wb.windows_per_image):
                window = data[img * wb.windows_per_image + wi]
                acc = 0.0
                for token in window:
                    for v in token:
                        acc += float(v) * float(v)
                assert abs(per_image[img].scores[wi] - math.sqrt(acc)) < 1e-6

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        arr = rng.random((1, 4, 4, 2)).astype(np.float32)
        base = score_windows(window_partition(Tensor(arr), 2))[0].scores
        # swap the two top windows' contents (top-left 2x2 and top-right 2x2)
        swapped = arr.copy()
        swapped[0, 0:2, 0:2], swapped[0, 0:2, 2:4] = arr[0, 0:2, 2:4], arr[0, 0:2, 0:2]
        perm = score_windows(window_partition(Tensor(swapped), 2))[0].scores
        assert abs(perm[0] - base[1]) < 1e-9 and abs(perm[1] - base[0]) < 1e-9
        np.testing.assert_allclose(perm[2:], base[2:])


class TestRankWindows:
    def test_simple(self):
        order = rank_windows(WindowScores(np.array([1.0, 3.0, 2.0]), 0, False))
        np.testing.assert_array_equal(order, [1, 2, 0])

    def test_all_equal_tie_break(self):
        order = rank_windows(WindowScores(np.full(5, 2.5), 0, False))
        np.testing.assert_array_equal(order, [0, 1, 2, 3, 4])

    def test_thousand_random_vs_reference_sort(self):
        rng = np.random.default_rng(2)
        scores = rng.integers(0, 50, size=1000).astype(np.float64)  # plenty of ties
        order = rank_windows(WindowScores(scores, 0, False))
        expected = sorted(range(1000), key=lambda i: (-scores[i], i))
        np.testing.assert_array_equal(order, expected)


class TestKeptCount:
    @pytest.mark.parametrize("w,s,expected", [
        (100, 0.6, 40),
        (4, 0.0, 4),
        (3, 0.8, 1),       # max(1, ceil(0.6)) = 1
        (10, 0.1, 9),
        (1, 0.8, 1),
    ])
    def test_values(self, w, s, expected):
        assert kept_count(w, s) == expected

    def test_monotone_and_never_zero(self):
        for w in (1, 2, 3, 4, 7, 16, 100):
            counts = [kept_count(w, t / 10) for t in range(9)]
            assert all(a >= b for a, b in zip(counts, counts[1:]))
            assert min(counts) >= 1

    def test_off_grid_rejected(self):
        with pytest.raises(ValueError):
            kept_count(10, 0.85)
        with pytest.raises(ValueError):
            kept_count(10, 0.9)
        with pytest.raises(ValueError):
            kept_count(10, -0.1)


class TestGatherScatter:
    def test_gather_all_reordered(self):
        rng = np.random.default_rng(3)
        wb = batch_from(rng.random((1, 4, 4, 2)))
        order = np.array([2, 0, 3, 1])
        sub = gather(wb, order)
        for pos, idx in enumerate(order):
            np.testing.assert_array_equal(sub.data[pos], wb.tensor.data[idx])

    def test_gather_single(self):
        rng = np.random.default_rng(4)
        wb = batch_from(rng.random((1, 4, 4, 2)))
        sub = gather(wb, np.array([2]))
        np.testing.assert_array_equal(sub.data[0], wb.tensor.data[2])

    def test_gather_out_of_range(self):
        wb = batch_from(np.zeros((1, 4, 4, 2)))
        with pytest.raises(IndexError):
            gather(wb, np.array([4]))

    def test_scatter_keep_all(self):
        rng = np.random.default_rng(5)
        wb = batch_from(rng.random((1, 4, 4, 2)))
        processed = Tensor(rng.random((4, 4, 2)).astype(np.float32))
        out = scatter_with_duplicate(wb, processed, np.arange(4))
        np.testing.assert_array_equal(out.tensor.data, processed.data)

    def test_scatter_pass_through(self):
        rng = np.random.default_rng(6)
        wb = batch_from(rng.random((1, 2, 4, 2)))   # 2 windows
        processed = Tensor(rng.random((1, 4, 2)).astype(np.float32))
        out = scatter_with_duplicate(wb, processed, np.array([0]))
        np.testing.assert_array_equal(out.tensor.data[1], wb.tensor.data[1])
        np.testing.assert_array_equal(out.tensor.data[0], processed.data[0])

    def test_scatter_random_vs_merge_oracle(self):
        rng = np.random.default_rng(7)
        wb = batch_from(rng.random((1, 4, 6, 3)))
        keep = np.array([5, 1, 2])
        processed = Tensor(rng.random((3, 4, 3)).astype(np.float32))
        out = scatter_with_duplicate(wb, processed, keep).tensor.data
        expected = wb.tensor.data.copy()
        for pos, idx in enumerate(keep):
            expected[idx] = processed.data[pos]
        np.testing.assert_array_equal(out, expected)

    def test_scatter_size_mismatch(self):
        wb = batch_from(np.zeros((1, 4, 4, 2)))
        with pytest.raises(ValueError):
            scatter_with_duplicate(wb, Tensor(np.zeros((3, 4, 2), dtype=np.float32)),
                                   np.array([0, 1]))

    def test_gather_then_scatter_identity(self):
        rng = np.random.default_rng(8)
        wb = batch_from(rng.random((1, 4, 4, 2)))
        keep = np.arange(4)
        out = scatter_with_duplicate(wb, gather(wb, keep), keep)
        np.testing.assert_array_equal(out.tensor.data, wb.tensor.data)


class TestStageKeepSets:
    def test_prefix_nesting(self):
        ordering = np.array([3, 0, 2, 1])
        sets = stage_keep_sets(ordering, [0.0, 0.5])
        assert [len(s) for s in sets] == [4, 2]
        assert set(sets[1]) <= set(sets[0])

    def test_equal_ratios_identical_sets(self):
        ordering = np.array([1, 0, 3, 2])
        sets = stage_keep_sets(ordering, [0.4, 0.4, 0.4])
        for s in sets[1:]:
            np.testing.assert_array_equal(s, sets[0])

    def test_ten_window_sizes(self):
        ordering = np.arange(10)
        sets = stage_keep_sets(ordering, [0.1, 0.5, 0.8])
        assert [len(s) for s in sets] == [9, 5, 2]
        assert set(sets[2]) <= set(sets[1]) <= set(sets[0])

    def test_non_monotone_rejected(self):
        with pytest.raises(ValueError, match="non-descending"):
            stage_keep_sets(np.arange(4), [0.5, 0.3])

    def test_nesting_property_random(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            w = int(rng.integers(2, 30))
            ordering = rng.permutation(w)
            tenths = np.sort(rng.integers(0, 9, size=4))
            sets = stage_keep_sets(ordering, [t / 10 for t in tenths])
            for earlier, later in zip(sets, sets[1:]):
                assert set(later) <= set(earlier)
