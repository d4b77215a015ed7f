"""Dataset-level routing profiles: coverage, concentration, and marginals."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from magnetrec.errors import ModelError
from magnetrec.schedule import distribution_entropy

if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

    from numpy.typing import ArrayLike, NDArray

    from magnetrec.model import MagnetModel

MODALITY_LABELS = ("B", "A", "S")
FAMILY_LABELS = ("Dom", "Bal", "Com")
CSV_COLUMNS = (
    "scope",
    "H",
    "H_norm",
    "N_eff",
    "HHI",
    "Div",
    "mass_B",
    "mass_A",
    "mass_S",
    "mass_Dom",
    "mass_Bal",
    "mass_Com",
    "winner_share",
    "concentration",
    "top3_mass",
    "top_gap",
    "spec_score",
    "content_AS",
    "tw_B",
    "tw_A",
    "tw_S",
)


class EmptySplitError(ModelError):
    """Raised when routing is aggregated over no pairs."""


def aggregate_routing(
    model: MagnetModel, pairs: NDArray[np.int64], chunk: int = 4096
) -> NDArray[np.float64]:
    """Mean dense routing distribution over the given (user, item) pairs.

    Raises:
        EmptySplitError: If ``pairs`` is empty.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        msg = "Cannot aggregate routing over an empty split"
        raise EmptySplitError(msg)
    total: NDArray[np.float64] | None = None
    for start in range(0, pairs.shape[0], chunk):
        block = model.route_pairs(pairs[start : start + chunk]).sum(axis=0)
        total = block if total is None else total + block
    assert total is not None
    return total / pairs.shape[0]


@dataclass(frozen=True)
class RoutingProfile:
    """Summary statistics of one mean routing vector."""

    mean_routing: NDArray[np.float64]
    entropy: float
    normalized_entropy: float
    effective_experts: float
    hhi: float
    diversity: float
    modality_mass: tuple[float, float, float]
    family_mass: tuple[float, float, float]
    winner_share: float
    concentration: float
    top3_mass: float
    top_gap: float
    triplet_weighted: tuple[float, float, float] | None = None

    @property
    def num_experts(self) -> int:
        return int(self.mean_routing.size)

    @property
    def content_participation(self) -> float:
        return self.modality_mass[1] + self.modality_mass[2]

    @property
    def specialization(self) -> float:
        return 1.0 - self.normalized_entropy

    def to_row(self) -> dict[str, float | None]:
        tw = self.triplet_weighted
        return {
            "H": self.entropy,
            "H_norm": self.normalized_entropy,
            "N_eff": self.effective_experts,
            "HHI": self.hhi,
            "Div": self.diversity,
            **{f"mass_{label}": m for label, m in zip(MODALITY_LABELS, self.modality_mass)},
            **{f"mass_{label}": m for label, m in zip(FAMILY_LABELS, self.family_mass)},
            "winner_share": self.winner_share,
            "concentration": self.concentration,
            "top3_mass": self.top3_mass,
            "top_gap": self.top_gap,
            "spec_score": self.specialization,
            "content_AS": self.content_participation,
            **{
                f"tw_{label}": (tw[i] if tw is not None else None)
                for i, label in enumerate(MODALITY_LABELS)
            },
        }

    def to_json(self) -> dict[str, Any]:
        return {**self.to_row(), "mean_routing": self.mean_routing.tolist()}


def _masses(pi: NDArray[np.float64], labels: Sequence[int]) -> tuple[float, float, float]:
    mass = np.bincount(np.asarray(labels, dtype=np.int64), weights=pi, minlength=3)
    return float(mass[0]), float(mass[1]), float(mass[2])


def routing_diagnostics(
    mean_routing: ArrayLike,
    group_map: Sequence[int],
    family_map: Sequence[int],
    triplets: ArrayLike | None = None,
) -> RoutingProfile:
    """Profile a mean routing vector.

    Args:
        mean_routing: Distribution over the E experts.
        group_map: Anchor modality index (0=B, 1=A, 2=S) of each expert.
        family_map: Template family index (0=Dom, 1=Bal, 2=Com) of each expert.
        triplets: Optional ``(E, 3)`` global-order weights for the
            triplet-weighted modality report.

    Raises:
        ModelError: If the maps do not cover every expert.
    """
    pi = np.asarray(mean_routing, dtype=np.float64).ravel()
    num_experts = pi.size
    if len(group_map) != num_experts or len(family_map) != num_experts:
        msg = (
            f"Expert maps cover {len(group_map)}/{len(family_map)} experts, "
            f"routing has {num_experts}"
        )
        raise ModelError(msg)

    h = float(distribution_entropy(pi))
    h_norm = h / math.log(num_experts) if num_experts > 1 else 0.0
    hhi = float(np.square(pi).sum())
    ordered = np.sort(pi)[::-1]
    if num_experts > 1:
        concentration = (hhi - 1.0 / num_experts) / (1.0 - 1.0 / num_experts)
    else:
        concentration = 1.0
    weighted = None
    if triplets is not None:
        w = pi @ np.asarray(triplets, dtype=np.float64).reshape(num_experts, 3)
        weighted = (float(w[0]), float(w[1]), float(w[2]))

    return RoutingProfile(
        mean_routing=pi,
        entropy=h,
        normalized_entropy=h_norm,
        effective_experts=math.exp(h),
        hhi=hhi,
        diversity=h_norm,
        modality_mass=_masses(pi, group_map),
        family_mass=_masses(pi, family_map),
        winner_share=float(ordered[0]),
        concentration=float(concentration),
        top3_mass=float(ordered[:3].sum()),
        top_gap=float(ordered[0] - ordered[1]) if num_experts > 1 else float(ordered[0]),
        triplet_weighted=weighted,
    )


def profile_model(model: MagnetModel, pairs: NDArray[np.int64]) -> RoutingProfile:
    """Aggregate routing over ``pairs`` and profile it with the model's pool maps."""
    if model.pool is None:
        msg = "Routing diagnostics need the expert head"
        raise ModelError(msg)
    pi = aggregate_routing(model, pairs)
    triplets = model.pool.effective_triplets().detach().double().numpy()
    return routing_diagnostics(pi, model.pool.group_map, model.pool.family_map, triplets)


def _format_cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def append_routing_csv(path: Path, scope: str, profile: RoutingProfile) -> None:
    """Append one profile row, writing the header when the file is new."""
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists() or path.stat().st_size == 0
    row = {"scope": scope, **profile.to_row()}
    with path.open("a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(CSV_COLUMNS)
        writer.writerow([_format_cell(row[c]) for c in CSV_COLUMNS])
