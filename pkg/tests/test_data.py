import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibrancy import data
from vibrancy.data import (ActivityMask, DataError, GridSeries, TrafficSeries, compute_cell_stats,
                           denormalize_grid, derive_mask, hourly_timestamps, impute_missing,
                           normalize_grid, split_dataset, split_windows, window, window_index)


def grid(values, start="2020-01-06T00:00"):
    v = np.asarray(values, dtype=np.float64)
    return GridSeries(v, hourly_timestamps(start, v.shape[0]))


def cell_series(xs):
    return grid(np.asarray(xs, dtype=np.float64).reshape(-1, 1, 1, 1))


class TestCellStats:
    def test_constant_series(self):
        s = compute_cell_stats(cell_series([5.0] * 4))
        assert s.mean.item() == 5.0 and s.std.item() == 0.0

    def test_population_std_of_two_points(self):
        s = compute_cell_stats(cell_series([0.0, 2.0]))
        assert s.mean.item() == 1.0 and s.std.item() == 1.0

    def test_range_is_respected(self):
        s = compute_cell_stats(cell_series([0.0, 2.0, 100.0]), (0, 2))
        assert s.mean.item() == 1.0

    def test_empty_range_errors(self):
        with pytest.raises(DataError):
            compute_cell_stats(cell_series([1.0, 2.0]), (1, 1))


class TestNormalize:
    def setup_method(self):
        self.stats = compute_cell_stats(cell_series([0.0, 2.0]))  # mu 1, sigma 1

    def norm(self, x):
        return normalize_grid(cell_series(x), self.stats).values.ravel()

    def test_examples(self):
        out = self.norm([1.0, 4.0, -1.0, 0.0, 5.0])
        assert out.tolist() == [0.5, 1.0, 0.0, 0.25, 1.0]

    def test_output_flagged(self):
        assert normalize_grid(cell_series([1.0, 2.0]), self.stats).normalized

    def test_constant_cell_maps_to_half(self):
        stats = compute_cell_stats(cell_series([3.0, 3.0]))
        assert normalize_grid(cell_series([3.0, 3.0]), stats).values.ravel().tolist() == [0.5, 0.5]

    def test_shape_mismatch(self):
        stats = compute_cell_stats(grid(np.zeros((3, 2, 2, 1))))
        with pytest.raises(DataError):
            normalize_grid(cell_series([1.0]), stats)

    def test_rejects_normalized_input(self):
        g = GridSeries(np.full((2, 1, 1, 1), 0.5), hourly_timestamps("2020-01-01", 2), normalized=True)
        with pytest.raises(DataError):
            normalize_grid(g, self.stats)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-50, 50), st.floats(0.01, 20),
           st.lists(st.floats(-500, 500), min_size=2, max_size=30))
    def test_monotone_and_bounded(self, mu, sigma, xs):
        from vibrancy.data import CellStats

        stats = CellStats(np.full((1, 1, 1), mu), np.full((1, 1, 1), sigma), (0, 1))
        xs = np.sort(np.asarray(xs))
        out = normalize_grid(cell_series(xs), stats).values.ravel()
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        assert np.all(np.diff(out) >= 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(-10, 10), st.floats(0.1, 5))
    def test_round_trip_where_unclipped(self, c, mu, sigma):
        from vibrancy.data import CellStats

        stats = CellStats(np.full((1, 1, 1), mu), np.full((1, 1, 1), sigma), (0, 1))
        raw = denormalize_grid(np.full((1, 1, 1, 1), c), stats)
        back = normalize_grid(cell_series(raw.ravel()), stats).values.ravel()[0]
        assert back == pytest.approx(c, abs=1e-12)


class TestMask:
    def test_examples(self):
        v = np.zeros((4, 2, 2, 1))
        v[2, 0, 1, 0] = 3.0
        v[:, 1, 1, 0] = 1.0
        m = derive_mask(grid(v)).mask
        assert m.tolist() == [[0.0, 1.0], [0.0, 1.0]]

    def test_range_and_idempotence(self):
        v = np.zeros((4, 1, 2, 1))
        v[3, 0, 0, 0] = 1.0
        g = grid(v)
        assert derive_mask(g, (0, 3)).mask.tolist() == [[0.0, 0.0]]
        np.testing.assert_array_equal(derive_mask(g).mask, derive_mask(g).mask)

    def test_synth_inactive_count(self, small_city):
        raw, _, meta = small_city
        m = derive_mask(raw)
        brute = sum(1 for i in range(8) for j in range(8) if np.any(raw.values[:, i, j] != 0))
        assert m.n_active == brute == round(0.9 * 64)


class TestImpute:
    def test_two_neighbours(self):
        x = np.zeros(400)
        x[10], x[178], x[346] = 10.0, np.nan, 14.0
        out = impute_missing(cell_series(x)).values.ravel()
        assert out[178] == 12.0

    def test_single_neighbour(self):
        x = np.zeros(200)
        x[5], x[173] = 7.0, np.nan
        assert impute_missing(cell_series(x)).values.ravel()[173] == 7.0

    def test_block_of_three_hours(self):
        week = 168
        x = np.arange(3 * week, dtype=np.float64)
        gaps = [week + 20, week + 21, week + 22]
        expect = {t: 0.5 * (x[t - week] + x[t + week]) for t in gaps}
        x[gaps] = np.nan
        out = impute_missing(cell_series(x)).values.ravel()
        for t in gaps:
            assert out[t] == expect[t] == float(t)

    def test_stats_fallback_and_error(self):
        x = np.array([1.0, np.nan, 3.0])
        with pytest.raises(DataError):
            impute_missing(cell_series(x))
        stats = compute_cell_stats(cell_series(x))
        assert impute_missing(cell_series(x), stats=stats).values.ravel()[1] == 2.0

    def test_fully_missing_cell(self):
        x = np.full(3, np.nan)
        stats = compute_cell_stats(cell_series(x))
        with pytest.raises(DataError):
            impute_missing(cell_series(x), stats=stats)


class TestSplit:
    def test_sizes(self):
        s = split_dataset(100)
        assert (len(s.train), len(s.val), len(s.test)) == (40, 10, 50)

    def test_seeds_share_test_set(self):
        a, b = split_dataset(100, seed=0), split_dataset(100, seed=1)
        np.testing.assert_array_equal(a.test, b.test)
        assert set(a.train) | set(a.val) == set(b.train) | set(b.val)
        assert set(a.train) != set(b.train)

    def test_too_small(self):
        with pytest.raises(DataError):
            split_dataset(2)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(10, 5000), st.integers(0, 2**31 - 1))
    def test_no_leak(self, T, seed):
        s = split_dataset(T, seed=seed)
        assert max(np.concatenate([s.train, s.val])) < s.test.min()
        assert len(s.train) + len(s.val) + len(s.test) == T
        assert data.test_start(T) == s.test.min()

    @settings(max_examples=60, deadline=None)
    @given(st.integers(60, 3000), st.integers(1, 8), st.integers(1, 8), st.integers(0, 1000))
    def test_windows_stay_on_their_side(self, T, p, q, seed):
        s = split_windows(T, p, q, seed=seed)
        b = data.test_start(T)
        head = np.concatenate([s.train, s.val])
        assert head.min() - p + 1 >= 0 and head.max() + q < b
        assert s.test.min() - p + 1 >= b and s.test.max() + q < T


class TestWindow:
    def setup_method(self):
        T = 30
        self.g = grid(np.arange(T * 4, dtype=np.float64).reshape(T, 2, 2, 1))
        self.tr = TrafficSeries(np.arange(T * 3, dtype=np.float64).reshape(T, 3, 1), self.g.timestamps)

    def test_shapes(self):
        w = window(self.g, self.tr, 10, 6, 6)
        assert w.x_past.shape == (6, 3, 1) and w.c_future.shape == (6, 2, 2, 1)

    def test_earliest_and_out_of_range(self):
        window(self.g, self.tr, 5, 6, 6)
        with pytest.raises(DataError):
            window(self.g, self.tr, 4, 6, 6)
        with pytest.raises(DataError):
            window(self.g, self.tr, 24, 6, 6)

    def test_overlap(self):
        a, b = window(self.g, self.tr, 10, 6, 6), window(self.g, self.tr, 11, 6, 6)
        np.testing.assert_array_equal(a.x_past[1:], b.x_past[:-1])

    def test_window_index(self):
        past, fut = window_index([5], 3, 2)
        assert past.tolist() == [[3, 4, 5]] and fut.tolist() == [[6, 7]]


def test_hourly_spacing_enforced():
    ts = hourly_timestamps("2020-01-01", 3)
    ts[2] += np.timedelta64(1, "h")
    with pytest.raises(DataError):
        GridSeries(np.zeros((3, 1, 1, 1)), ts)


def test_mask_must_be_2d():
    with pytest.raises(DataError):
        ActivityMask(np.zeros((2, 2, 1)))
