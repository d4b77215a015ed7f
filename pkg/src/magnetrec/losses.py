"""Objective terms and their composition."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F  # noqa: N812

if TYPE_CHECKING:
    from collections.abc import Iterable

logger = logging.getLogger(__name__)


def bpr_loss(pos: torch.Tensor, neg: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Pairwise ranking loss ``-log sigmoid(pos - neg)`` via softplus."""
    if pos.shape != neg.shape:
        got = (tuple(pos.shape), tuple(neg.shape))
        msg = f"Positive and negative scores must align, got {got[0]} and {got[1]}"
        raise ValueError(msg)
    losses = F.softplus(-(pos - neg))
    return losses.mean() if reduction == "mean" else losses.sum()


def _dedup_rows(rows: torch.Tensor, ids: torch.Tensor | None) -> torch.Tensor:
    if ids is None:
        return rows
    _, first = _first_occurrence(ids)
    return rows[first]


def _first_occurrence(ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    unique, inverse = torch.unique(ids, sorted=True, return_inverse=True)
    positions = torch.arange(ids.numel(), device=ids.device)
    first = torch.full((unique.numel(),), ids.numel(), dtype=torch.long, device=ids.device)
    first = first.scatter_reduce(0, inverse, positions, reduce="amin")
    return unique, first


def _info_nce(anchor: torch.Tensor, positive: torch.Tensor, tau: float) -> torch.Tensor:
    if anchor.shape[0] < 2:
        return anchor.new_zeros(())
    logits = F.normalize(anchor, dim=-1) @ F.normalize(positive, dim=-1).T / tau
    targets = torch.arange(anchor.shape[0], device=anchor.device)
    return F.cross_entropy(logits, targets, reduction="mean")


def view_contrastive_loss(
    ui_users: torch.Tensor,
    uig_users: torch.Tensor,
    ui_items: torch.Tensor,
    uig_items: torch.Tensor,
    tau: float,
    user_ids: torch.Tensor | None = None,
    item_ids: torch.Tensor | None = None,
) -> torch.Tensor:
    """Symmetric cosine InfoNCE between the two views over in-batch negatives.

    When ids are given, repeated users and items are collapsed to their
    first occurrence before forming the similarity matrices. Each direction
    adds the user mean and the item mean; the two directions are averaged.
    """
    if tau <= 0:
        msg = f"tau must be positive, got {tau}"
        raise ValueError(msg)
    a_u, b_u = _dedup_rows(ui_users, user_ids), _dedup_rows(uig_users, user_ids)
    a_i, b_i = _dedup_rows(ui_items, item_ids), _dedup_rows(uig_items, item_ids)
    if a_u.shape[0] < 2 and a_i.shape[0] < 2:
        logger.warning("Contrastive batch has a single user and item; no negatives, loss is 0")
        return a_u.new_zeros(())
    forward = _info_nce(a_u, b_u, tau) + _info_nce(a_i, b_i, tau)
    backward = _info_nce(b_u, a_u, tau) + _info_nce(b_i, a_i, tau)
    return (forward + backward) / 2


def coverage_loss(mean_routing: torch.Tensor) -> torch.Tensor:
    """Squared distance of the batch-mean routing from uniform."""
    num_experts = mean_routing.shape[-1]
    return ((mean_routing - 1.0 / num_experts) ** 2).sum()


def routing_entropy(routings: torch.Tensor) -> torch.Tensor:
    """Per-row Shannon entropy in nats, with 0 log 0 = 0."""
    return -torch.special.xlogy(routings, routings).sum(dim=-1)


def confidence_loss(routings: torch.Tensor) -> torch.Tensor:
    """Mean per-instance routing entropy."""
    if routings.shape[0] == 0:
        msg = "confidence loss needs at least one routing distribution"
        raise ValueError(msg)
    return routing_entropy(routings).mean()


def l2_penalty(parameters: Iterable[torch.Tensor]) -> torch.Tensor:
    """Sum of squares over all given parameters."""
    terms = [p.pow(2).sum() for p in parameters]
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()


@dataclass(frozen=True)
class LossWeights:
    """Multipliers of the non-ranking terms for one step."""

    ctr: float = 0.0
    cov: float = 0.0
    conf: float = 0.0
    l2: float = 0.0


@dataclass(frozen=True)
class LossBreakdown:
    """Raw objective terms, their weights, and the weighted total."""

    bpr: torch.Tensor
    ctr: torch.Tensor
    cov: torch.Tensor
    conf: torch.Tensor
    l2: torch.Tensor
    total: torch.Tensor
    weights: LossWeights

    def recompute_total(self) -> float:
        w = self.weights
        return (
            float(self.bpr)
            + w.ctr * float(self.ctr)
            + w.cov * float(self.cov)
            + w.conf * float(self.conf)
            + w.l2 * float(self.l2)
        )

    def contributions(self) -> dict[str, float]:
        """Each term as it enters the total."""
        w = self.weights
        return {
            "loss_total": float(self.total),
            "loss_bpr": float(self.bpr),
            "loss_ctr": w.ctr * float(self.ctr),
            "loss_cov": w.cov * float(self.cov),
            "loss_conf": w.conf * float(self.conf),
            "loss_l2": w.l2 * float(self.l2),
        }

    def is_finite(self) -> bool:
        return math.isfinite(float(self.total))


def total_objective(
    bpr: torch.Tensor,
    weights: LossWeights,
    ctr: torch.Tensor | None = None,
    cov: torch.Tensor | None = None,
    conf: torch.Tensor | None = None,
    l2: torch.Tensor | None = None,
) -> LossBreakdown:
    """Weighted sum of the objective terms; absent terms count as 0.

    A term whose weight is exactly 0 is not added to the graph, so its
    value cannot leak NaN into the total.
    """
    zero = bpr.new_zeros(())
    ctr_t = ctr if ctr is not None else zero
    cov_t = cov if cov is not None else zero
    conf_t = conf if conf is not None else zero
    l2_t = l2 if l2 is not None else zero
    total = bpr
    for weight, term in (
        (weights.ctr, ctr_t),
        (weights.cov, cov_t),
        (weights.conf, conf_t),
        (weights.l2, l2_t),
    ):
        if weight != 0.0:
            total = total + weight * term
    return LossBreakdown(
        bpr=bpr, ctr=ctr_t, cov=cov_t, conf=conf_t, l2=l2_t, total=total, weights=weights
    )
