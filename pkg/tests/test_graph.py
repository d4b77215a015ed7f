"""Tests for magnetrec.graph."""

from pathlib import Path

import numpy as np
import pytest

from magnetrec.data import FeatureMatrix, InteractionSet, Modality
from magnetrec.errors import GraphError
from magnetrec.graph import (
    InducedEdges,
    ViewKind,
    build_neighbor_index,
    build_view_graph,
    expand_candidates,
    graph_fingerprint,
    load_graph_cache,
    save_graph_cache,
)


def _features(rng: np.random.Generator, n: int, d: int, modality: Modality) -> FeatureMatrix:
    return FeatureMatrix.from_array(modality, rng.standard_normal((n, d)))


def _brute_knn(values: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    x = values.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    n = x.shape[0]
    ids = np.zeros((n, k), dtype=np.int64)
    sims = np.zeros((n, k))
    for i in range(n):
        scored = []
        for j in range(n):
            if i == j:
                continue
            if norms[i] == 0 or norms[j] == 0:
                s = 0.0
            else:
                s = float(np.clip(x[i] @ x[j] / (norms[i] * norms[j]), -1.0, 1.0))
            scored.append((-s, j))
        scored.sort()
        ids[i] = [j for _, j in scored[:k]]
        sims[i] = [-s for s, _ in scored[:k]]
    return ids, sims


def _random_train(rng: np.random.Generator, users: int, items: int) -> InteractionSet:
    pairs = [
        (u, int(i))
        for u in range(users)
        for i in rng.choice(items, size=int(rng.integers(1, 6)), replace=False)
    ]
    return InteractionSet.from_pairs(users, items, pairs)


class TestNeighborIndex:
    """Tests for build_neighbor_index."""

    def test_matches_brute_force(self) -> None:
        rng = np.random.default_rng(0)
        features = _features(rng, 60, 5, Modality.APPEARANCE)
        index = build_neighbor_index(features, 7)
        ids, sims = _brute_knn(features.values, 7)
        np.testing.assert_array_equal(index.neighbors, ids)
        np.testing.assert_allclose(index.scores, sims, atol=1e-12)

    def test_self_never_a_neighbor(self) -> None:
        rng = np.random.default_rng(1)
        index = build_neighbor_index(_features(rng, 30, 3, Modality.SEMANTICS), 5)
        assert not (index.neighbors == np.arange(30)[:, None]).any()

    def test_ties_prefer_smaller_id(self) -> None:
        values = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        index = build_neighbor_index(FeatureMatrix.from_array(Modality.APPEARANCE, values), 2)
        assert index.neighbors[0].tolist() == [1, 2]
        assert index.neighbors[2].tolist() == [0, 1]

    def test_zero_row_has_zero_similarity(self) -> None:
        values = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        index = build_neighbor_index(FeatureMatrix.from_array(Modality.APPEARANCE, values), 2)
        assert index.scores[0].tolist() == [0.0, 0.0]
        assert index.similarity(1, 0) == 0.0

    def test_threads_do_not_change_result(self) -> None:
        rng = np.random.default_rng(2)
        features = _features(rng, 1100, 4, Modality.APPEARANCE)
        single = build_neighbor_index(features, 3, threads=1)
        multi = build_neighbor_index(features, 3, threads=4)
        np.testing.assert_array_equal(single.neighbors, multi.neighbors)
        assert single.scores.tobytes() == multi.scores.tobytes()

    @pytest.mark.parametrize("k", [0, 5])
    def test_invalid_k(self, k: int) -> None:
        features = FeatureMatrix.from_array(Modality.APPEARANCE, np.eye(5))
        with pytest.raises(GraphError, match="knn k"):
            build_neighbor_index(features, k)


class TestExpandCandidates:
    """Tests for content-induced candidate expansion."""

    def test_matches_brute_force(self) -> None:
        rng = np.random.default_rng(3)
        for _ in range(5):
            users, items, k, r = 20, 40, 4, 6
            train = _random_train(rng, users, items)
            index_a = build_neighbor_index(_features(rng, items, 5, Modality.APPEARANCE), k)
            index_s = build_neighbor_index(_features(rng, items, 3, Modality.SEMANTICS), k)
            induced = expand_candidates(train, index_a, index_s, r)
            for u in range(users):
                history = set(train.history(u).tolist())
                totals: dict[int, float] = {}
                for i in history:
                    for index in (index_a, index_s):
                        for j, s in zip(index.neighbors[i], index.scores[i], strict=True):
                            totals[int(j)] = totals.get(int(j), 0.0) + float(s) / 2.0
                pool = sorted(
                    (j for j in totals if j not in history), key=lambda j: (-totals[j], j)
                )
                assert induced.candidates[u].tolist() == pool[:r]
                np.testing.assert_allclose(
                    induced.scores[u], [totals[j] for j in pool[:r]], atol=1e-12
                )

    def test_history_items_excluded(self) -> None:
        rng = np.random.default_rng(4)
        train = _random_train(rng, 10, 15)
        index_a = build_neighbor_index(_features(rng, 15, 3, Modality.APPEARANCE), 5)
        index_s = build_neighbor_index(_features(rng, 15, 3, Modality.SEMANTICS), 5)
        induced = expand_candidates(train, index_a, index_s, 20)
        for u in range(10):
            assert not set(induced.candidates[u].tolist()) & set(train.history(u).tolist())

    def test_invalid_r(self) -> None:
        rng = np.random.default_rng(5)
        train = _random_train(rng, 3, 6)
        index = build_neighbor_index(_features(rng, 6, 2, Modality.APPEARANCE), 2)
        with pytest.raises(GraphError, match="expand r"):
            expand_candidates(train, index, index, 0)


class TestViewGraph:
    """Tests for normalized bipartite views."""

    def test_coefficients(self) -> None:
        train = InteractionSet.from_pairs(2, 3, [(0, 0), (0, 1), (1, 1)])
        graph = build_view_graph(train, None, ViewKind.UI)
        adjacency = graph.adjacency().toarray()
        assert adjacency[0, 2] == pytest.approx(1 / np.sqrt(2 * 1))
        assert adjacency[0, 3] == pytest.approx(1 / np.sqrt(2 * 2))
        assert adjacency[1, 3] == pytest.approx(1 / np.sqrt(1 * 2))
        np.testing.assert_array_equal(adjacency, adjacency.T)

    def test_induced_edges_join_augmented_view(self) -> None:
        train = InteractionSet.from_pairs(2, 3, [(0, 0), (1, 1)])
        induced = InducedEdges(
            2, 3, (np.array([2], dtype=np.int64), np.zeros(0, dtype=np.int64)),
            (np.array([0.5]), np.zeros(0)),
        )
        ui = build_view_graph(train, induced, ViewKind.UI)
        uig = build_view_graph(train, induced, ViewKind.UIG)
        assert ui.num_edges == 2
        assert uig.num_edges == 3
        assert uig.user_degree.tolist() == [2, 1]

    def test_empty_induced_matches_observed(self) -> None:
        rng = np.random.default_rng(6)
        train = _random_train(rng, 8, 10)
        ui = build_view_graph(train, None, ViewKind.UI)
        uig = build_view_graph(train, InducedEdges.empty(8, 10), ViewKind.UIG)
        assert (ui.adjacency() != uig.adjacency()).nnz == 0

    def test_neighbor_lists_sorted(self) -> None:
        train = InteractionSet.from_pairs(2, 3, [(0, 2), (0, 0), (1, 1)])
        lists = build_view_graph(train, None, ViewKind.UI).neighbor_lists()
        assert lists[0].tolist() == [2, 4]
        assert lists[2].tolist() == [0]


class TestGraphCache:
    """Tests for the on-disk graph cache."""

    def _inputs(self) -> tuple:
        rng = np.random.default_rng(7)
        train = _random_train(rng, 6, 12)
        fa = _features(rng, 12, 3, Modality.APPEARANCE)
        fs = _features(rng, 12, 2, Modality.SEMANTICS)
        return train, fa, fs

    def test_round_trip(self, tmp_path: Path) -> None:
        train, fa, fs = self._inputs()
        index_a, index_s = build_neighbor_index(fa, 3), build_neighbor_index(fs, 3)
        induced = expand_candidates(train, index_a, index_s, 4)
        fingerprint = graph_fingerprint(3, 4, fa, fs, train)
        save_graph_cache(tmp_path, index_a, index_s, induced, fingerprint)
        cached = load_graph_cache(tmp_path, fingerprint)
        assert cached is not None
        loaded_a, loaded_s, loaded_induced = cached
        np.testing.assert_array_equal(loaded_a.neighbors, index_a.neighbors)
        np.testing.assert_array_equal(loaded_s.scores, index_s.scores)
        np.testing.assert_array_equal(loaded_induced.edges, induced.edges)
        np.testing.assert_array_equal(loaded_induced.flat_scores, induced.flat_scores)

    def test_stale_fingerprint(self, tmp_path: Path) -> None:
        train, fa, fs = self._inputs()
        index_a, index_s = build_neighbor_index(fa, 3), build_neighbor_index(fs, 3)
        induced = expand_candidates(train, index_a, index_s, 4)
        fingerprint = graph_fingerprint(3, 4, fa, fs, train)
        save_graph_cache(tmp_path, index_a, index_s, induced, fingerprint)
        assert load_graph_cache(tmp_path, graph_fingerprint(3, 5, fa, fs, train)) is None

    def test_absent_cache(self, tmp_path: Path) -> None:
        train, fa, fs = self._inputs()
        assert load_graph_cache(tmp_path, graph_fingerprint(3, 4, fa, fs, train)) is None
