"""Content-induced graph augmentation and normalized bipartite views."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp

from magnetrec.data import FeatureMatrix, Modality
from magnetrec.errors import GraphError
from magnetrec.mgf import read_matrix, write_matrix

if TYPE_CHECKING:
    from pathlib import Path

    from numpy.typing import NDArray

    from magnetrec.data import InteractionSet

logger = logging.getLogger(__name__)

KNN_TILE_ROWS = 512
CACHE_SIDECAR = "graph.json"


class ViewKind(str, Enum):
    """Bipartite graph views."""

    UI = "UI"  # Observed interactions
    UIG = "UIG"  # Observed plus content-induced edges


@dataclass(frozen=True, eq=False)
class NeighborIndex:
    """Exact top-k cosine neighbors per item for one modality.

    Row ``i`` of ``neighbors`` lists item ids by descending similarity,
    ties broken by smaller id; ``scores`` holds the matching cosines.
    """

    modality: Modality
    k: int
    neighbors: NDArray[np.int64]
    scores: NDArray[np.float64]

    @property
    def num_items(self) -> int:
        return int(self.neighbors.shape[0])

    def similarity(self, i: int, j: int) -> float:
        """Cosine of j in i's neighbor list, 0 when j is not a neighbor."""
        hits = np.flatnonzero(self.neighbors[i] == j)
        return float(self.scores[i, hits[0]]) if hits.size else 0.0


def _unit_rows(values: NDArray[np.floating]) -> NDArray[np.float64]:
    matrix = np.asarray(values, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    # Zero-norm rows stay zero, so their similarity to everything is 0
    return np.where(norms > 0, matrix / safe, 0.0)


def build_neighbor_index(features: FeatureMatrix, k: int, threads: int = 1) -> NeighborIndex:
    """Exact top-k cosine neighbors for every item.

    Rows are processed in tiles; each tile writes a disjoint slice of the
    output, so the result does not depend on the thread count.

    Raises:
        GraphError: If k < 1 or k >= num_items.
    """
    n = features.rows
    if k < 1 or k >= n:
        msg = f"knn k must satisfy 1 <= k < num_items ({n}), got {k}"
        raise GraphError(msg)

    unit = _unit_rows(features.values)
    neighbors = np.empty((n, k), dtype=np.int64)
    scores = np.empty((n, k), dtype=np.float64)

    def _tile(start: int) -> None:
        stop = min(start + KNN_TILE_ROWS, n)
        sims = np.clip(unit[start:stop] @ unit.T, -1.0, 1.0)
        rows = np.arange(stop - start)
        sims[rows, rows + start] = -np.inf
        # Stable sort on the negated scores keeps smaller ids first among ties
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        neighbors[start:stop] = order
        scores[start:stop] = np.take_along_axis(sims, order, axis=1)

    starts = list(range(0, n, KNN_TILE_ROWS))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_tile, starts))
    else:
        for start in starts:
            _tile(start)
    return NeighborIndex(features.modality, k, neighbors, scores)


@dataclass(frozen=True, eq=False)
class InducedEdges:
    """Per-user content-induced candidates and their relevance scores."""

    num_users: int
    num_items: int
    candidates: tuple[NDArray[np.int64], ...]
    scores: tuple[NDArray[np.float64], ...]

    @classmethod
    def empty(cls, num_users: int, num_items: int) -> InducedEdges:
        none_i = tuple(np.zeros(0, dtype=np.int64) for _ in range(num_users))
        none_f = tuple(np.zeros(0, dtype=np.float64) for _ in range(num_users))
        return cls(num_users, num_items, none_i, none_f)

    @property
    def edges(self) -> NDArray[np.int64]:
        """Flattened ``(m, 2)`` edge set E+ in user order, then rank order."""
        parts = [
            np.stack([np.full(c.size, u, dtype=np.int64), c], axis=1)
            for u, c in enumerate(self.candidates)
            if c.size
        ]
        if not parts:
            return np.zeros((0, 2), dtype=np.int64)
        return np.concatenate(parts)

    @property
    def flat_scores(self) -> NDArray[np.float64]:
        parts = [s for s in self.scores if s.size]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.float64)

    @property
    def num_edges(self) -> int:
        return sum(int(c.size) for c in self.candidates)


def expand_candidates(
    train: InteractionSet, index_a: NeighborIndex, index_s: NeighborIndex, r: int
) -> InducedEdges:
    """Score unseen items reachable through history-item neighborhoods.

    For user u, c(u, j) sums ``(s_A(i, j) + s_S(i, j)) / 2`` over i in I_u,
    with a similarity of 0 wherever j is not a neighbor of i in that
    modality. The top r candidates are kept, ties to the smaller item id.

    Raises:
        GraphError: If the indices disagree on the item space or r < 1.
    """
    if r < 1:
        msg = f"expand r must be >= 1, got {r}"
        raise GraphError(msg)
    if index_a.num_items != train.num_items or index_s.num_items != train.num_items:
        msg = "Neighbor indices must cover the training item space"
        raise GraphError(msg)

    candidates: list[NDArray[np.int64]] = []
    scores: list[NDArray[np.float64]] = []
    for history in train.histories:
        if history.size == 0:
            candidates.append(np.zeros(0, dtype=np.int64))
            scores.append(np.zeros(0, dtype=np.float64))
            continue
        targets = np.concatenate(
            [index_a.neighbors[history].ravel(), index_s.neighbors[history].ravel()]
        )
        weights = np.concatenate(
            [index_a.scores[history].ravel(), index_s.scores[history].ravel()]
        ) / 2.0
        totals = np.bincount(targets, weights=weights, minlength=train.num_items)
        pool = np.zeros(train.num_items, dtype=bool)
        pool[targets] = True
        pool[history] = False
        items = np.flatnonzero(pool)
        order = np.lexsort((items, -totals[items]))[:r]
        candidates.append(items[order].astype(np.int64))
        scores.append(totals[items[order]])
    return InducedEdges(train.num_users, train.num_items, tuple(candidates), tuple(scores))


@dataclass(frozen=True, eq=False)
class ViewGraph:
    """Deduplicated bipartite edges with symmetric normalization coefficients."""

    view: ViewKind
    num_users: int
    num_items: int
    users: NDArray[np.int64]
    items: NDArray[np.int64]
    coef: NDArray[np.float64]
    user_degree: NDArray[np.int64]
    item_degree: NDArray[np.int64]

    @property
    def num_edges(self) -> int:
        return int(self.users.size)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric normalized adjacency over users then items."""
        rows = np.concatenate([self.users, self.items + self.num_users])
        cols = np.concatenate([self.items + self.num_users, self.users])
        vals = np.concatenate([self.coef, self.coef])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.num_nodes, self.num_nodes))

    def neighbor_lists(self) -> list[NDArray[np.int64]]:
        """Node-level neighbor arrays (item nodes offset by num_users)."""
        adjacency = self.adjacency()
        adjacency.sort_indices()
        return [
            adjacency.indices[adjacency.indptr[n] : adjacency.indptr[n + 1]].astype(np.int64)
            for n in range(self.num_nodes)
        ]


def build_view_graph(
    train: InteractionSet, induced: InducedEdges | None, view: ViewKind
) -> ViewGraph:
    """Normalize the observed graph (UI) or the union with induced edges (UIG)."""
    edges = train.edges
    if view == ViewKind.UIG and induced is not None and induced.num_edges:
        edges = np.concatenate([edges, induced.edges])
    keys = np.unique(edges[:, 0] * train.num_items + edges[:, 1])
    users = (keys // train.num_items).astype(np.int64)
    items = (keys % train.num_items).astype(np.int64)
    user_degree = np.bincount(users, minlength=train.num_users).astype(np.int64)
    item_degree = np.bincount(items, minlength=train.num_items).astype(np.int64)
    coef = 1.0 / np.sqrt(user_degree[users].astype(np.float64) * item_degree[items])
    return ViewGraph(
        view, train.num_users, train.num_items, users, items, coef, user_degree, item_degree
    )


def save_graph_cache(
    cache_dir: Path,
    index_a: NeighborIndex,
    index_s: NeighborIndex,
    induced: InducedEdges,
    fingerprint: dict[str, object],
) -> None:
    """Persist neighbor indices and induced edges with an invalidation sidecar."""
    cache_dir.mkdir(parents=True, exist_ok=True)
    for index in (index_a, index_s):
        tag = index.modality.value
        write_matrix(cache_dir / f"knn_{tag}_ids.mgf", index.neighbors)
        write_matrix(cache_dir / f"knn_{tag}_scores.mgf", index.scores)
    write_matrix(cache_dir / "induced_edges.mgf", induced.edges)
    write_matrix(cache_dir / "induced_scores.mgf", induced.flat_scores)
    sidecar = {**fingerprint, "num_users": induced.num_users, "num_items": induced.num_items}
    (cache_dir / CACHE_SIDECAR).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_graph_cache(
    cache_dir: Path, fingerprint: dict[str, object]
) -> tuple[NeighborIndex, NeighborIndex, InducedEdges] | None:
    """Load a cache written by save_graph_cache, or None if stale or absent."""
    sidecar_path = cache_dir / CACHE_SIDECAR
    if not sidecar_path.is_file():
        return None
    sidecar = json.loads(sidecar_path.read_text())
    if any(sidecar.get(key) != value for key, value in fingerprint.items()):
        logger.info("Graph cache in %s is stale; rebuilding", cache_dir)
        return None

    k = int(sidecar["k"])
    indices: list[NeighborIndex] = []
    for modality in (Modality.APPEARANCE, Modality.SEMANTICS):
        ids = read_matrix(cache_dir / f"knn_{modality.value}_ids.mgf").astype(np.int64)
        sims = read_matrix(cache_dir / f"knn_{modality.value}_scores.mgf").astype(np.float64)
        indices.append(NeighborIndex(modality, k, ids, sims))

    num_users = int(sidecar["num_users"])
    num_items = int(sidecar["num_items"])
    edges = read_matrix(cache_dir / "induced_edges.mgf").astype(np.int64).reshape(-1, 2)
    flat = read_matrix(cache_dir / "induced_scores.mgf").astype(np.float64).ravel()
    bounds = np.searchsorted(edges[:, 0], np.arange(num_users + 1))
    induced = InducedEdges(
        num_users,
        num_items,
        tuple(edges[bounds[u] : bounds[u + 1], 1].copy() for u in range(num_users)),
        tuple(flat[bounds[u] : bounds[u + 1]].copy() for u in range(num_users)),
    )
    return indices[0], indices[1], induced


def graph_fingerprint(
    k: int, r: int, features_a: FeatureMatrix, features_s: FeatureMatrix, train: InteractionSet
) -> dict[str, object]:
    """Values that must match for a cached graph to be reused."""
    train_key = np.ascontiguousarray(train.edges, dtype="<i8").tobytes()
    return {
        "k": k,
        "r": r,
        "features_a": features_a.fingerprint(),
        "features_s": features_s.fingerprint(),
        "train": hashlib.sha256(train_key).hexdigest(),
    }
