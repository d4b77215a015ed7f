"""Triplet-template expert pool, modality cues, Top-K routing, and scoring."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, final

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from magnetrec.encoder import xavier_uniform
from magnetrec.errors import ModelError
from magnetrec.models import ExpertFamily

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray

    from magnetrec.data import InteractionSet


class ModalityGroup(str, Enum):
    """Evidence sources in global triplet order."""

    BEHAVIOR = "B"
    APPEARANCE = "A"
    SEMANTICS = "S"


GLOBAL_ORDER = (ModalityGroup.BEHAVIOR, ModalityGroup.APPEARANCE, ModalityGroup.SEMANTICS)


class TemplateParamError(ModelError):
    """Raised when a template scalar is outside its range."""


class TopKError(ModelError):
    """Raised when K is not in 1..E."""


@final
class TemplateParams(BaseModel):
    """Scalar controls of the three template families."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(default=0.6, ge=0.0, le=1.0)  # Dominance
    beta: float = Field(default=0.2, ge=0.0, le=1.0)  # Balance
    delta: float = Field(default=0.5, ge=0.0, le=1.0)  # Auxiliary split
    epsilon: float = Field(default=0.05, gt=0.0, lt=1.0 / 3.0)  # Minimal anchor mass


def evaluate_template(family: ExpertFamily, params: TemplateParams) -> NDArray[np.float64]:
    """Canonical ``[anchor, aux1, aux2]`` triplet of a template family.

    Raises:
        TemplateParamError: If a scalar is outside its range.
    """
    for name, value, low, high in (
        ("alpha", params.alpha, 0.0, 1.0),
        ("beta", params.beta, 0.0, 1.0),
        ("delta", params.delta, 0.0, 1.0),
    ):
        if not low <= value <= high:
            msg = f"{name}={value} outside [{low}, {high}]"
            raise TemplateParamError(msg)
    if not 0.0 < params.epsilon < 1.0 / 3.0:
        msg = f"epsilon={params.epsilon} outside (0, 1/3)"
        raise TemplateParamError(msg)

    if family == ExpertFamily.DOM:
        a = params.alpha
        return (1.0 - a) * np.array([0.5, 0.25, 0.25]) + a * np.array([1.0, 0.0, 0.0])
    if family == ExpertFamily.BAL:
        b = params.beta
        return np.array([1.0 / 3.0 + b / 6.0, 1.0 / 3.0 - b / 12.0, 1.0 / 3.0 - b / 12.0])
    e, d = params.epsilon, params.delta
    return np.array([e, (1.0 - e) * d, (1.0 - e) * (1.0 - d)])


def permute_to_global(canonical: NDArray[np.float64], group: ModalityGroup) -> NDArray[np.float64]:
    """Place the anchor at its group's slot; auxiliaries keep global order."""
    slots = [group] + [g for g in GLOBAL_ORDER if g != group]
    out = np.zeros(3, dtype=np.float64)
    for weight, g in zip(canonical, slots, strict=True):
        out[GLOBAL_ORDER.index(g)] = weight
    return out


def project_simplex(v: torch.Tensor) -> torch.Tensor:
    """Row-wise Euclidean projection onto the probability simplex."""
    n = v.shape[-1]
    u, _ = torch.sort(v, dim=-1, descending=True)
    css = u.cumsum(dim=-1) - 1.0
    ind = torch.arange(1, n + 1, dtype=v.dtype, device=v.device)
    rho = (u - css / ind > 0).sum(dim=-1, keepdim=True)
    theta = css.gather(-1, rho - 1) / rho.to(v.dtype)
    return torch.clamp(v - theta, min=0.0)


@dataclass(frozen=True)
class ExpertSpec:
    """Identity of one pool slot."""

    index: int
    group: ModalityGroup
    family: ExpertFamily
    replica: int
    triplet: tuple[float, float, float]

    @property
    def label(self) -> str:
        suffix = f"#{self.replica}" if self.replica else ""
        return f"{self.group.value}-{self.family.value}{suffix}"


class ExpertPool(nn.Module):
    """Experts with fixed global-order triplets and trainable transforms.

    Transform parameters are stacked: ``weight`` is ``(E, 2d, d)`` and
    ``bias`` is ``(E, d)``.
    """

    triplets: torch.Tensor

    def __init__(
        self,
        specs: Sequence[ExpertSpec],
        dim: int,
        rng: np.random.Generator,
        dtype: torch.dtype = torch.float32,
        free_templates: bool = False,
    ) -> None:
        super().__init__()
        self.specs = tuple(specs)
        self.dim = dim
        self.free_templates = free_templates
        fixed = torch.tensor([s.triplet for s in self.specs], dtype=dtype)
        self.register_buffer("triplets", fixed)
        self.free_triplets = nn.Parameter(fixed.clone()) if free_templates else None
        self.weight = nn.Parameter(
            torch.stack(
                [xavier_uniform(rng, (2 * dim, dim), 2 * dim, dim, dtype) for _ in self.specs]
            )
        )
        self.bias = nn.Parameter(torch.zeros(len(self.specs), dim, dtype=dtype))

    @property
    def num_experts(self) -> int:
        return len(self.specs)

    @property
    def group_map(self) -> list[int]:
        return [GLOBAL_ORDER.index(s.group) for s in self.specs]

    @property
    def family_map(self) -> list[int]:
        return [list(ExpertFamily).index(s.family) for s in self.specs]

    def effective_triplets(self) -> torch.Tensor:
        if self.free_triplets is not None:
            return project_simplex(self.free_triplets)
        return self.triplets


def instantiate_pool(
    params: TemplateParams,
    dim: int,
    rng: np.random.Generator,
    families: Sequence[ExpertFamily] = tuple(ExpertFamily),
    split: int = 1,
    dtype: torch.dtype = torch.float32,
    free_templates: bool = False,
) -> ExpertPool:
    """Build the pool in group-major, family, replica order."""
    specs: list[ExpertSpec] = []
    for group in GLOBAL_ORDER:
        for family in families:
            w = permute_to_global(evaluate_template(family, params), group)
            triplet = (float(w[0]), float(w[1]), float(w[2]))
            for replica in range(split):
                specs.append(ExpertSpec(len(specs), group, family, replica, triplet))
    return ExpertPool(specs, dim, rng, dtype, free_templates)


@dataclass
class ModalityCues:
    """Projected item cues and history-pooled user cues for A and S."""

    item_a: torch.Tensor
    item_s: torch.Tensor
    user_a: torch.Tensor
    user_s: torch.Tensor
    empty_users: NDArray[np.bool_]

    def users(self, index: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.user_a[index], self.user_s[index]

    def items(self, index: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.item_a[index], self.item_s[index]


class CueProjection(nn.Module):
    """Linear maps from raw modality features to the embedding space."""

    def __init__(
        self,
        dim_a: int,
        dim_s: int,
        dim: int,
        rng: np.random.Generator,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.weight_a = nn.Parameter(xavier_uniform(rng, (dim_a, dim), dim_a, dim, dtype))
        self.bias_a = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.weight_s = nn.Parameter(xavier_uniform(rng, (dim_s, dim), dim_s, dim, dtype))
        self.bias_s = nn.Parameter(torch.zeros(dim, dtype=dtype))


def history_operator(train: InteractionSet, dtype: torch.dtype) -> torch.Tensor:
    """Sparse ``(U, I)`` row-mean operator over training histories."""
    degrees = train.user_degrees.astype(np.float64)
    users = train.edges[:, 0]
    indices = torch.from_numpy(train.edges.T.copy())
    values = torch.from_numpy(1.0 / degrees[users]).to(dtype)
    return torch.sparse_coo_tensor(
        indices, values, (train.num_users, train.num_items)
    ).coalesce()


def compute_modality_cues(
    features_a: torch.Tensor,
    features_s: torch.Tensor,
    train: InteractionSet,
    projections: CueProjection,
    history: torch.Tensor | None = None,
) -> ModalityCues:
    """Item cues by projection, user cues by averaging over training history.

    Users with an empty history get zero cues and are flagged.
    """
    if features_a.shape[0] != train.num_items or features_s.shape[0] != train.num_items:
        msg = "Feature matrices must cover every item"
        raise ModelError(msg)
    operator = history if history is not None else history_operator(train, features_a.dtype)
    item_a = features_a @ projections.weight_a + projections.bias_a
    item_s = features_s @ projections.weight_s + projections.bias_s
    return ModalityCues(
        item_a=item_a,
        item_s=item_s,
        user_a=torch.sparse.mm(operator, item_a),
        user_s=torch.sparse.mm(operator, item_s),
        empty_users=train.user_degrees == 0,
    )


class Router(nn.Module):
    """Affine router over the concatenated ``[z_u; z_i]`` query."""

    def __init__(
        self,
        dim: int,
        num_experts: int,
        rng: np.random.Generator,
        dtype: torch.dtype = torch.float32,
        uniform: bool = False,
    ) -> None:
        super().__init__()
        if uniform:
            weight = torch.zeros(2 * dim, num_experts, dtype=dtype)
        else:
            weight = xavier_uniform(rng, (2 * dim, num_experts), 2 * dim, num_experts, dtype)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(num_experts, dtype=dtype))


class ScoreHead(nn.Module):
    """Shared affine map d -> 1."""

    def __init__(
        self, dim: int, rng: np.random.Generator, dtype: torch.dtype = torch.float32
    ) -> None:
        super().__init__()
        self.weight = nn.Parameter(xavier_uniform(rng, (dim,), dim, 1, dtype))
        self.bias = nn.Parameter(torch.zeros((), dtype=dtype))

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        return pair @ self.weight + self.bias


def route_dense(z_u: torch.Tensor, z_i: torch.Tensor, router: Router) -> torch.Tensor:
    """Dense routing distribution, one row per (u, i) token."""
    query = torch.cat([z_u, z_i], dim=-1)
    if query.shape[-1] != router.weight.shape[0]:
        msg = f"Router expects queries of width {router.weight.shape[0]}, got {query.shape[-1]}"
        raise ModelError(msg)
    return torch.softmax(query @ router.weight + router.bias, dim=-1)


def topk_renormalize(pi: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Top-K expert indices (ties to the smaller index) and renormalized weights.

    Returns:
        ``(selected, weights)`` each of shape ``(..., K)``; weights sum to 1.

    Raises:
        TopKError: If K is not in 1..E.
    """
    num_experts = pi.shape[-1]
    if not 1 <= k <= num_experts:
        msg = f"top_k must be in 1..{num_experts}, got {k}"
        raise TopKError(msg)
    # Stable descending sort keeps the smaller index first among equal values
    order = torch.sort(pi.detach(), dim=-1, descending=True, stable=True).indices
    selected = order[..., :k]
    return selected, _renormalized(pi, selected)


def _renormalized(pi: torch.Tensor, selected: torch.Tensor) -> torch.Tensor:
    kept = pi.gather(-1, selected)
    return kept / kept.sum(dim=-1, keepdim=True)


def mix_triplet(
    weights: torch.Tensor, z: torch.Tensor, cue_a: torch.Tensor, cue_s: torch.Tensor
) -> torch.Tensor:
    """``w_B * z + w_A * h_A + w_S * h_S``."""
    return weights[0] * z + weights[1] * cue_a + weights[2] * cue_s


def expert_forward(
    pool: ExpertPool,
    expert: int,
    z_u: torch.Tensor,
    z_i: torch.Tensor,
    user_cues: tuple[torch.Tensor, torch.Tensor],
    item_cues: tuple[torch.Tensor, torch.Tensor],
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Output of one expert for a batch of tokens, shape ``(B, d)``."""
    if not 0 <= expert < pool.num_experts:
        msg = f"Expert {expert} not in pool of {pool.num_experts}"
        raise ModelError(msg)
    w = pool.effective_triplets()[expert]
    x = torch.cat(
        [mix_triplet(w, z_u, *user_cues), mix_triplet(w, z_i, *item_cues)], dim=-1
    )
    if mask is not None:
        x = x * mask
    return torch.tanh(x @ pool.weight[expert] + pool.bias[expert])


@dataclass
class RoutingResult:
    """Per-token routing and scores for a batch."""

    dense: torch.Tensor  # (B, E)
    selected: torch.Tensor  # (B, K)
    weights: torch.Tensor  # (B, K)
    pair: torch.Tensor  # (B, d)
    score: torch.Tensor  # (B,)


def dropout_mask(
    rng: np.random.Generator, shape: tuple[int, ...], rate: float, dtype: torch.dtype
) -> torch.Tensor:
    """Inverted-dropout mask drawn from rng."""
    keep = rng.random(shape) >= rate
    return torch.from_numpy(keep / (1.0 - rate)).to(dtype)


def score_pair(
    z_u: torch.Tensor,
    z_i: torch.Tensor,
    user_cues: tuple[torch.Tensor, torch.Tensor],
    item_cues: tuple[torch.Tensor, torch.Tensor],
    pool: ExpertPool,
    router: Router,
    head: ScoreHead,
    k: int,
    selection: torch.Tensor | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> RoutingResult:
    """Route each token, run its Top-K experts, aggregate, and score.

    Args:
        z_u: Fused user embeddings, one row per token.
        z_i: Fused item embeddings, one row per token.
        user_cues: ``(h_A, h_S)`` user cues aligned with the tokens.
        item_cues: ``(h_A, h_S)`` item cues aligned with the tokens.
        pool: Expert pool.
        router: Dense router.
        head: Shared scoring head.
        k: Number of experts activated per token.
        selection: Precomputed expert indices; when given, routing still
            runs but the Top-K choice is not recomputed.
        dropout: Rate applied to each expert's concatenated input.
        rng: Generator for dropout masks (required when dropout > 0).

    Returns:
        RoutingResult with the dense distribution kept for statistics.
    """
    pi = route_dense(z_u, z_i, router)
    if selection is None:
        selected, weights = topk_renormalize(pi, k)
    else:
        selected, weights = selection, _renormalized(pi, selection)

    pair = torch.zeros(z_u.shape[0], pool.dim, dtype=z_u.dtype)
    for expert in range(pool.num_experts):
        rows, slots = (selected == expert).nonzero(as_tuple=True)
        if rows.numel() == 0:
            continue
        mask = None
        if dropout > 0.0:
            if rng is None:
                msg = "dropout needs an rng"
                raise ModelError(msg)
            mask = dropout_mask(rng, (int(rows.numel()), 2 * pool.dim), dropout, z_u.dtype)
        out = expert_forward(
            pool,
            expert,
            z_u[rows],
            z_i[rows],
            (user_cues[0][rows], user_cues[1][rows]),
            (item_cues[0][rows], item_cues[1][rows]),
            mask,
        )
        pair = pair.index_add(0, rows, weights[rows, slots].unsqueeze(1) * out)
    return RoutingResult(dense=pi, selected=selected, weights=weights, pair=pair, score=head(pair))
