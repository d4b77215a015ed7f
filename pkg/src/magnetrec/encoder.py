"""Shared ID embeddings, per-view propagation, and view fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp
import torch
from torch import nn

from magnetrec.errors import ModelError

if TYPE_CHECKING:
    from numpy.typing import NDArray

    from magnetrec.graph import ViewGraph, ViewKind


class FusionShapeError(ModelError):
    """Raised when two views disagree on embedding shape."""


def xavier_uniform(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    fan_in: int,
    fan_out: int,
    dtype: torch.dtype,
) -> torch.Tensor:
    """Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)), drawn from rng."""
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape)).to(dtype)


class EmbeddingTable(nn.Module):
    """Trainable user and item ID embeddings shared by both views."""

    def __init__(
        self,
        num_users: int,
        num_items: int,
        dim: int,
        rng: np.random.Generator,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.num_users = num_users
        self.num_items = num_items
        self.dim = dim
        self.users = nn.Parameter(xavier_uniform(rng, (num_users, dim), num_users, dim, dtype))
        self.items = nn.Parameter(xavier_uniform(rng, (num_items, dim), num_items, dim, dtype))

    def stacked(self) -> torch.Tensor:
        """Users then items as one ``(U + I, d)`` matrix."""
        return torch.cat([self.users, self.items], dim=0)


@dataclass
class ViewEmbeddings:
    """Layer activations of one view and their average."""

    view: ViewKind
    num_users: int
    layers: list[torch.Tensor]

    @property
    def z(self) -> torch.Tensor:
        return torch.stack(self.layers, dim=0).mean(dim=0)

    @property
    def z_users(self) -> torch.Tensor:
        return self.z[: self.num_users]

    @property
    def z_items(self) -> torch.Tensor:
        return self.z[self.num_users :]


def to_torch_sparse(matrix: sp.spmatrix, dtype: torch.dtype) -> torch.Tensor:
    coo = matrix.tocoo()
    indices = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
    values = torch.from_numpy(coo.data.astype(np.float64)).to(dtype)
    return torch.sparse_coo_tensor(indices, values, coo.shape).coalesce()


def sample_fanout_adjacency(
    neighbor_lists: list[NDArray[np.int64]], fanout: int, rng: np.random.Generator
) -> sp.csr_matrix:
    """Normalized adjacency over up to ``fanout`` sampled neighbors per node.

    The coefficient of message m -> n is ``1 / sqrt(s(n) * s(m))`` where s
    counts the neighbors sampled for each node in this draw.
    """
    num_nodes = len(neighbor_lists)
    sampled: list[NDArray[np.int64]] = []
    for neighbors in neighbor_lists:
        if neighbors.size > fanout:
            sampled.append(np.sort(rng.choice(neighbors, size=fanout, replace=False)))
        else:
            sampled.append(neighbors)
    sizes = np.asarray([s.size for s in sampled], dtype=np.float64)
    rows = np.repeat(np.arange(num_nodes), sizes.astype(np.int64))
    cols = np.concatenate(sampled) if rows.size else np.zeros(0, dtype=np.int64)
    vals = 1.0 / np.sqrt(sizes[rows] * sizes[cols])
    return sp.csr_matrix((vals, (rows, cols)), shape=(num_nodes, num_nodes))


def propagate_view(
    graph: ViewGraph,
    table: EmbeddingTable,
    num_layers: int,
    fanout: int | None = None,
    rng: np.random.Generator | None = None,
    adjacency: torch.Tensor | None = None,
    neighbor_lists: list[NDArray[np.int64]] | None = None,
) -> ViewEmbeddings:
    """Symmetric-normalized message passing with layer averaging.

    Args:
        graph: Normalized view to propagate over.
        table: Layer-0 embeddings.
        num_layers: Number of propagation layers L (0 returns the table).
        fanout: If set, sample up to this many neighbors per node per layer.
        rng: Generator for fanout sampling.
        adjacency: Precomputed sparse adjacency for the full neighborhood.
        neighbor_lists: Precomputed node neighbor arrays for fanout sampling.

    Returns:
        All L + 1 layer activations; ``z`` is their mean.
    """
    if num_layers < 0:
        msg = f"num_layers must be >= 0, got {num_layers}"
        raise ModelError(msg)
    if fanout is not None and fanout < 1:
        msg = f"fanout must be >= 1, got {fanout}"
        raise ModelError(msg)

    current = table.stacked()
    layers = [current]
    if num_layers == 0:
        return ViewEmbeddings(graph.view, graph.num_users, layers)

    full: torch.Tensor | None = None
    lists: list[NDArray[np.int64]] = []
    if fanout is None:
        full = adjacency
        if full is None:
            full = to_torch_sparse(graph.adjacency(), current.dtype)
    else:
        if rng is None:
            msg = "fanout sampling needs an rng"
            raise ModelError(msg)
        lists = neighbor_lists if neighbor_lists is not None else graph.neighbor_lists()

    for _ in range(num_layers):
        if full is not None:
            step = full
        else:
            assert fanout is not None and rng is not None
            step = to_torch_sparse(sample_fanout_adjacency(lists, fanout, rng), current.dtype)
        current = torch.sparse.mm(step, current)
        layers.append(current)
    return ViewEmbeddings(graph.view, graph.num_users, layers)


def fuse_views(
    ui: ViewEmbeddings, uig: ViewEmbeddings | None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean of the two views, or the observed view alone.

    Raises:
        FusionShapeError: If the views have different shapes.
    """
    if uig is None:
        return ui.z_users, ui.z_items
    z_ui, z_uig = ui.z, uig.z
    if z_ui.shape != z_uig.shape or ui.num_users != uig.num_users:
        msg = f"Cannot fuse views of shapes {tuple(z_ui.shape)} and {tuple(z_uig.shape)}"
        raise FusionShapeError(msg)
    fused = (z_ui + z_uig) / 2
    return fused[: ui.num_users], fused[ui.num_users :]
