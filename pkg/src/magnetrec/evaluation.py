"""Full-ranking top-N evaluation with training-item masking."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from magnetrec.data import held_out_by_user

if TYPE_CHECKING:
    from collections.abc import Callable, Mapping, Sequence
    from pathlib import Path

    from numpy.typing import NDArray

    from magnetrec.data import InteractionSet
    from magnetrec.model import MagnetModel

logger = logging.getLogger(__name__)


def rank_items(
    scores: NDArray[np.floating], history: NDArray[np.int64] | None = None
) -> NDArray[np.int64]:
    """Items by descending score, training items removed, ties to smaller id."""
    candidates = np.arange(scores.shape[0], dtype=np.int64)
    if history is not None and history.size:
        candidates = np.setdiff1d(candidates, history, assume_unique=True)
    order = np.argsort(-np.asarray(scores, dtype=np.float64)[candidates], kind="stable")
    return candidates[order]


def _discounts(n: int) -> NDArray[np.float64]:
    return 1.0 / np.log2(np.arange(2, n + 2, dtype=np.float64))


def user_metrics(
    ranking: NDArray[np.int64], positives: NDArray[np.int64], cutoffs: Sequence[int]
) -> dict[str, float]:
    """Recall@N and NDCG@N for one user."""
    hits = np.isin(ranking[: max(cutoffs)], positives)
    out: dict[str, float] = {}
    for n in cutoffs:
        top = hits[:n]
        out[f"recall@{n}"] = float(top.sum()) / positives.size
        dcg = float((_discounts(top.size) * top).sum())
        idcg = float(_discounts(min(n, positives.size)).sum())
        out[f"ndcg@{n}"] = dcg / idcg
    return out


@dataclass
class MetricReport:
    """Aggregate and per-user Recall/NDCG at each cutoff."""

    cutoffs: tuple[int, ...]
    recall: dict[int, float]
    ndcg: dict[int, float]
    per_user: dict[int, dict[str, float]] = field(default_factory=dict)
    excluded_users: int = 0

    @property
    def num_users(self) -> int:
        return len(self.per_user)

    def to_json(self) -> dict[str, Any]:
        return {
            "users": self.num_users,
            "excluded_users": self.excluded_users,
            **{f"recall@{n}": self.recall[n] for n in self.cutoffs},
            **{f"ndcg@{n}": self.ndcg[n] for n in self.cutoffs},
        }

    def write_per_user_csv(self, path: Path, user_labels: Sequence[str] | None = None) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        columns = [f"{m}@{n}" for m in ("recall", "ndcg") for n in self.cutoffs]
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["user", *columns])
            for user, values in self.per_user.items():
                label = user_labels[user] if user_labels is not None else str(user)
                writer.writerow([label, *(f"{values[c]:.10g}" for c in columns)])


def compute_metrics(
    rankings: Mapping[int, NDArray[np.int64]],
    held_out: Mapping[int, NDArray[np.int64]],
    cutoffs: Sequence[int] = (10, 20),
) -> MetricReport:
    """Average per-user Recall@N and NDCG@N over users with held-out positives."""
    cuts = tuple(sorted(set(cutoffs)))
    per_user: dict[int, dict[str, float]] = {}
    for user in sorted(held_out):
        positives = np.asarray(held_out[user], dtype=np.int64)
        if positives.size == 0 or user not in rankings:
            continue
        per_user[user] = user_metrics(np.asarray(rankings[user]), positives, cuts)

    def _mean(key: str) -> float:
        if not per_user:
            return 0.0
        return float(np.mean([values[key] for values in per_user.values()]))

    return MetricReport(
        cutoffs=cuts,
        recall={n: _mean(f"recall@{n}") for n in cuts},
        ndcg={n: _mean(f"ndcg@{n}") for n in cuts},
        per_user=per_user,
    )


def evaluate_scores(
    score_users: Callable[[NDArray[np.int64]], NDArray[np.float64]],
    pairs: NDArray[np.int64],
    train: InteractionSet,
    cutoffs: Sequence[int] = (10, 20),
    batch_users: int = 256,
) -> MetricReport:
    """Rank the full catalog for every user with held-out pairs.

    Users without training history are skipped and counted.
    """
    held_out = held_out_by_user(pairs)
    users = np.asarray(
        [u for u in held_out if train.history(u).size > 0], dtype=np.int64
    )
    excluded = len(held_out) - users.size
    if excluded:
        logger.warning("Skipped %d user(s) with no training history", excluded)

    rankings: dict[int, NDArray[np.int64]] = {}
    for start in range(0, users.size, batch_users):
        block = users[start : start + batch_users]
        scores = score_users(block)
        for row, user in enumerate(block.tolist()):
            rankings[user] = rank_items(scores[row], train.history(user))

    report = compute_metrics(rankings, held_out, cutoffs)
    report.excluded_users = excluded
    return report


def evaluate_model(
    model: MagnetModel,
    pairs: NDArray[np.int64],
    train: InteractionSet,
    cutoffs: Sequence[int] = (10, 20),
) -> MetricReport:
    return evaluate_scores(
        model.score_users, pairs, train, cutoffs, batch_users=model.config.eval_batch_users
    )


def popularity_scores(train: InteractionSet) -> NDArray[np.float64]:
    """Training interaction count per item."""
    return train.item_degrees.astype(np.float64)


def evaluate_popularity(
    pairs: NDArray[np.int64], train: InteractionSet, cutoffs: Sequence[int] = (10, 20)
) -> MetricReport:
    """Most-popular baseline ranked through the same masked pipeline."""
    popularity = popularity_scores(train)
    return evaluate_scores(
        lambda users: np.tile(popularity, (users.size, 1)), pairs, train, cutoffs
    )
