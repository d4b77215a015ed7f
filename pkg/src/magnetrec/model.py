"""The full recommender: dual-view encoder, modality cues, and the expert head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import torch
from torch import nn

from magnetrec.encoder import (
    EmbeddingTable,
    ViewEmbeddings,
    fuse_views,
    propagate_view,
    to_torch_sparse,
    xavier_uniform,
)
from magnetrec.errors import ModelError
from magnetrec.graph import ViewKind
from magnetrec.models import Precision, RouterInit
from magnetrec.moe import (
    CueProjection,
    ModalityCues,
    Router,
    RoutingResult,
    ScoreHead,
    TemplateParams,
    compute_modality_cues,
    dropout_mask,
    history_operator,
    instantiate_pool,
    score_pair,
)

if TYPE_CHECKING:
    from numpy.typing import NDArray

    from magnetrec.data import FeatureMatrix, InteractionSet
    from magnetrec.graph import ViewGraph
    from magnetrec.models import RunConfig


def torch_dtype(precision: Precision) -> torch.dtype:
    return torch.float64 if precision == Precision.FLOAT64 else torch.float32


class FusionHead(nn.Module):
    """Single non-expert fusion over ``[z; h_A; h_S]`` of user and item."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype: torch.dtype) -> None:
        super().__init__()
        self.weight = nn.Parameter(xavier_uniform(rng, (6 * dim, dim), 6 * dim, dim, dtype))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(x @ self.weight + self.bias)


@dataclass
class Encoded:
    """Per-step node representations shared by every scored token."""

    z_users: torch.Tensor
    z_items: torch.Tensor
    cues: ModalityCues
    ui: ViewEmbeddings
    uig: ViewEmbeddings | None


@dataclass
class ScoredBatch:
    score: torch.Tensor
    routing: RoutingResult | None


class MagnetModel(nn.Module):
    """Scores (user, item) pairs from graph embeddings and item content.

    Parameters are drawn from ``rng`` in a fixed order (embeddings, cue
    projections, experts, router, score head) that does not depend on the
    view mode, so single- and dual-view models built from the same seed
    start identical.
    """

    features_a: torch.Tensor
    features_s: torch.Tensor

    def __init__(
        self,
        config: RunConfig,
        train: InteractionSet,
        graphs: dict[ViewKind, ViewGraph],
        features_a: FeatureMatrix,
        features_s: FeatureMatrix,
        rng: np.random.Generator,
    ) -> None:
        super().__init__()
        self.config = config
        self.train_set = train
        self.graphs = graphs
        dtype = torch_dtype(config.precision)
        self.dtype = dtype
        dim = config.embed_dim

        self.embeddings = EmbeddingTable(train.num_users, train.num_items, dim, rng, dtype)
        self.cues = CueProjection(features_a.dim, features_s.dim, dim, rng, dtype)
        self.pool = None
        self.router = None
        self.fusion = None
        if config.use_moe:
            params = TemplateParams(
                alpha=config.alpha, beta=config.beta, delta=config.delta, epsilon=config.epsilon
            )
            self.pool = instantiate_pool(
                params,
                dim,
                rng,
                config.expert_families,
                config.expert_split,
                dtype,
                config.free_templates,
            )
            self.router = Router(
                dim, self.pool.num_experts, rng, dtype, config.router_init == RouterInit.UNIFORM
            )
        else:
            self.fusion = FusionHead(dim, rng, dtype)
        self.head = ScoreHead(dim, rng, dtype)

        self.register_buffer("features_a", torch.from_numpy(features_a.values).to(dtype))
        self.register_buffer("features_s", torch.from_numpy(features_s.values).to(dtype))
        self._history = history_operator(train, dtype)
        self._adjacency = {
            view: to_torch_sparse(g.adjacency(), dtype) for view, g in graphs.items()
        }
        self._neighbors = (
            {view: g.neighbor_lists() for view, g in graphs.items()} if config.fanout else {}
        )

    @property
    def views(self) -> list[ViewKind]:
        return [v for v in (ViewKind.UI, ViewKind.UIG) if v in self.graphs]

    def encode(self, rng: np.random.Generator | None = None) -> Encoded:
        """Propagate every view and compute modality cues.

        Fanout sampling applies in training mode only.
        """
        fanout = self.config.fanout if self.training else None
        embedded: dict[ViewKind, ViewEmbeddings] = {}
        for view in self.views:
            embedded[view] = propagate_view(
                self.graphs[view],
                self.embeddings,
                self.config.gnn_layers,
                fanout=fanout,
                rng=rng,
                adjacency=self._adjacency[view],
                neighbor_lists=self._neighbors.get(view),
            )
        ui = embedded[ViewKind.UI]
        uig = embedded.get(ViewKind.UIG)
        z_users, z_items = fuse_views(ui, uig)
        cues = compute_modality_cues(
            self.features_a, self.features_s, self.train_set, self.cues, self._history
        )
        return Encoded(z_users, z_items, cues, ui, uig)

    def score(
        self,
        encoded: Encoded,
        users: torch.Tensor,
        items: torch.Tensor,
        rng: np.random.Generator | None = None,
        selection: torch.Tensor | None = None,
    ) -> ScoredBatch:
        """Score aligned user/item index tensors."""
        dropout = self.config.dropout if self.training else 0.0
        z_u, z_i = encoded.z_users[users], encoded.z_items[items]
        user_cues = encoded.cues.users(users)
        item_cues = encoded.cues.items(items)
        if self.pool is not None and self.router is not None:
            routing = score_pair(
                z_u,
                z_i,
                user_cues,
                item_cues,
                self.pool,
                self.router,
                self.head,
                self.config.top_k,
                selection=selection,
                dropout=dropout,
                rng=rng,
            )
            return ScoredBatch(routing.score, routing)

        assert self.fusion is not None
        x = torch.cat([z_u, *user_cues, z_i, *item_cues], dim=-1)
        if dropout > 0.0 and rng is not None:
            x = x * dropout_mask(rng, tuple(x.shape), dropout, x.dtype)
        return ScoredBatch(self.head(self.fusion(x)), None)

    @torch.no_grad()
    def score_users(self, users: NDArray[np.int64]) -> NDArray[np.float64]:
        """Scores of every item for each user, shape ``(len(users), I)``."""
        was_training = self.training
        self.eval()
        try:
            encoded = self.encode()
            num_items = self.train_set.num_items
            out = np.empty((len(users), num_items), dtype=np.float64)
            chunk = max(1, self.config.eval_batch_users)
            for start in range(0, len(users), chunk):
                block = np.asarray(users[start : start + chunk], dtype=np.int64)
                u = torch.from_numpy(np.repeat(block, num_items))
                i = torch.from_numpy(np.tile(np.arange(num_items, dtype=np.int64), block.size))
                scores = self.score(encoded, u, i).score
                block_scores = scores.double().numpy().reshape(block.size, num_items)
                out[start : start + block.size] = block_scores
            return out
        finally:
            self.train(was_training)

    @torch.no_grad()
    def route_pairs(self, pairs: NDArray[np.int64]) -> NDArray[np.float64]:
        """Dense routing distributions for (user, item) pairs."""
        if self.router is None:
            msg = "Routing is undefined without the expert head"
            raise ModelError(msg)
        was_training = self.training
        self.eval()
        try:
            encoded = self.encode()
            users = torch.from_numpy(np.asarray(pairs[:, 0], dtype=np.int64))
            items = torch.from_numpy(np.asarray(pairs[:, 1], dtype=np.int64))
            routing = self.score(encoded, users, items).routing
            assert routing is not None
            return routing.dense.double().numpy()
        finally:
            self.train(was_training)
