import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibrancy.graphs import (GraphError, SensorGraph, build_adjacency_graph, build_distance_graph,
                             build_proximity_graph, read_coords_csv, read_edges_csv, transition_matrices,
                             write_coords_csv, write_edges_csv)


def undirected(g):
    return {tuple(sorted((s, d))) for s, d, _ in g.edges}


class TestAdjacency:
    def test_line_with_transfer(self):
        g = build_adjacency_graph([(0, 1), (1, 2), (2, 3), (1, 3)])
        assert len(undirected(g)) == 4 and len(g.edges) == 8
        assert g.is_symmetric() and all(w == 1.0 for *_, w in g.edges)

    def test_empty(self):
        g = build_adjacency_graph([], n_s=3)
        assert g.edges == [] and g.n_s == 3

    def test_duplicates_collapse(self):
        g = build_adjacency_graph([(0, 1), (1, 0), (0, 1)])
        assert undirected(g) == {(0, 1)}

    def test_out_of_range(self):
        with pytest.raises(GraphError):
            build_adjacency_graph([(0, 5)], n_s=3)


class TestProximity:
    def test_collinear_middle_has_degree_two(self):
        g = build_proximity_graph(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), k=1)
        assert g.adjacency().sum(axis=1)[1] == 2 and g.is_symmetric()

    def test_k_n_minus_one_is_complete(self, rng):
        g = build_proximity_graph(rng.normal(size=(6, 2)), k=5)
        assert len(g.edges) == 30

    def test_pair(self):
        assert len(undirected(build_proximity_graph(np.array([[0.0, 0.0], [3.0, 4.0]]), k=1))) == 1

    @pytest.mark.parametrize("k", [0, -1, 3])
    def test_bad_k(self, k):
        with pytest.raises(GraphError):
            build_proximity_graph(np.zeros((3, 2)) + np.arange(3)[:, None], k=k)

    def test_duplicate_coordinates_allowed(self):
        build_proximity_graph(np.zeros((4, 2)), k=2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 9), st.integers(0, 10_000))
    def test_matches_brute_force_knn(self, n, seed):
        pts = np.random.default_rng(seed).uniform(size=(n, 2))
        k = max(1, n // 2)
        A = build_proximity_graph(pts, k).adjacency()
        expect = np.zeros((n, n))
        for i in range(n):
            ranked = sorted((j for j in range(n) if j != i), key=lambda j: (math.dist(pts[i], pts[j]), j))
            for j in ranked[:k]:
                expect[i, j] = expect[j, i] = 1.0
        np.testing.assert_array_equal(A, expect)


class TestDistance:
    def test_zero_distance_weight_one(self):
        g = build_distance_graph({(0, 1): 0.0}, sigma=1.0)
        assert g.edges == [(0, 1, 1.0)]

    def test_sigma_distance(self):
        g = build_distance_graph({(0, 1): 2.0}, sigma=2.0)
        assert g.edges[0][2] == pytest.approx(math.exp(-1.0), abs=1e-15)
        assert round(g.edges[0][2], 4) == 0.3679

    def test_threshold_half_prunes_beyond_closed_form(self):
        sigma = 1.5
        cut = sigma * math.sqrt(math.log(2.0))
        dists = {(0, i): d for i, d in enumerate([cut * 0.5, cut * 0.999, cut * 1.001, cut * 2], start=1)}
        g = build_distance_graph(dists, sigma=sigma, threshold=0.5)
        assert sorted(d for _, d, _ in g.edges) == [1, 2]

    def test_directed_as_given(self):
        g = build_distance_graph({(0, 1): 0.1}, sigma=1.0)
        assert not g.is_symmetric()

    def test_negative_distance(self):
        with pytest.raises(GraphError):
            build_distance_graph({(0, 1): -1.0}, sigma=1.0)

    def test_default_sigma_is_std(self):
        g = build_distance_graph({(0, 1): 1.0, (1, 2): 3.0}, threshold=1e-9)
        w = dict(((s, d), x) for s, d, x in g.edges)
        assert w[(0, 1)] == pytest.approx(math.exp(-1.0))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=2, max_size=8, unique=True), st.floats(0.2, 5))
    def test_monotone_and_thresholded(self, ds, sigma):
        dists = {(0, i + 1): d for i, d in enumerate(ds)}
        g = build_distance_graph(dists, sigma=sigma, threshold=0.1)
        w = {d: x for _, d, x in g.edges}
        for a, b in zip(*np.triu_indices(len(ds), 1)):
            if a + 1 in w and b + 1 in w and ds[a] < ds[b]:
                assert w[a + 1] >= w[b + 1]
        assert all(0.1 <= x <= 1.0 for x in w.values())


def test_sensor_graph_rejects_self_loops_and_bad_weights():
    with pytest.raises(GraphError):
        SensorGraph(2, [(0, 0, 1.0)])
    with pytest.raises(GraphError):
        SensorGraph(2, [(0, 1, 0.0)])
    with pytest.raises(GraphError):
        SensorGraph(2, [(0, 2, 0.5)])


def test_transition_rows_and_isolated_nodes():
    A = np.array([[0, 1, 1], [0, 0, 0], [1, 0, 0]], dtype=float)
    P_f, P_b = transition_matrices(A)
    assert P_f[1].tolist() == [0.0, 0.0, 0.0]
    np.testing.assert_allclose(P_f.sum(1), [1, 0, 1])
    np.testing.assert_allclose(P_b.sum(1), [1, 1, 1])


def test_csv_round_trip(tmp_path, rng):
    g = build_distance_graph(rng.uniform(0.1, 2, size=(4, 4)), sigma=1.0)
    write_edges_csv(tmp_path / "e.csv", g)
    assert read_edges_csv(tmp_path / "e.csv", 4).edges == g.edges
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "src,dst,weight"
    xy = rng.normal(size=(3, 2))
    write_coords_csv(tmp_path / "c.csv", xy, ["a", "b", "c"])
    ids, back = read_coords_csv(tmp_path / "c.csv")
    assert ids == ["a", "b", "c"] and np.array_equal(back, xy)
