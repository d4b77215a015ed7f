"""Tests for magnetrec.diagnostics."""

import csv
import math
from pathlib import Path
from typing import Any, cast

import numpy as np
import pytest

from magnetrec.diagnostics import (
    CSV_COLUMNS,
    EmptySplitError,
    aggregate_routing,
    append_routing_csv,
    profile_model,
    routing_diagnostics,
)
from magnetrec.errors import ModelError
from magnetrec.train import micro_trainer

GROUPS = [0, 0, 0, 1, 1, 1, 2, 2, 2]
FAMILIES = [0, 1, 2] * 3


class _FixedRouter:
    """Model stand-in whose routing is a lookup on the pair's first column."""

    def __init__(self, table: np.ndarray) -> None:
        self.table = table
        self.calls = 0

    def route_pairs(self, pairs: np.ndarray) -> np.ndarray:
        self.calls += 1
        return self.table[pairs[:, 0]]


def _profile(pi: list[float]) -> Any:
    return routing_diagnostics(np.array(pi), GROUPS, FAMILIES)


class TestAggregateRouting:
    """Tests for the split-level mean routing."""

    def test_single_pair(self) -> None:
        table = np.array([[0.2, 0.8]])
        model = _FixedRouter(table)
        mean = aggregate_routing(cast(Any, model), np.array([[0, 5]]))
        np.testing.assert_allclose(mean, [0.2, 0.8])

    def test_two_one_hot_pairs(self) -> None:
        model = _FixedRouter(np.eye(9))
        mean = aggregate_routing(cast(Any, model), np.array([[0, 0], [1, 0]]))
        np.testing.assert_allclose(mean, [0.5, 0.5] + [0.0] * 7)

    def test_chunks_are_summed(self) -> None:
        rng = np.random.default_rng(0)
        table = rng.dirichlet(np.ones(9), size=7)
        pairs = np.stack([np.arange(7), np.zeros(7, dtype=int)], axis=1)
        model = _FixedRouter(table)
        mean = aggregate_routing(cast(Any, model), pairs, chunk=3)
        assert model.calls == 3
        np.testing.assert_allclose(mean, table.mean(axis=0), atol=1e-12)

    def test_empty_split(self) -> None:
        with pytest.raises(EmptySplitError, match="empty split"):
            aggregate_routing(cast(Any, _FixedRouter(np.eye(9))), np.zeros((0, 2), dtype=np.int64))


class TestRoutingDiagnostics:
    """Tests for closed-form routing statistics."""

    def test_uniform(self) -> None:
        profile = _profile([1 / 9] * 9)
        assert profile.hhi == pytest.approx(1 / 9)
        assert profile.diversity == pytest.approx(1.0)
        assert profile.effective_experts == pytest.approx(9.0)
        assert profile.concentration == pytest.approx(0.0, abs=1e-12)
        assert profile.specialization == pytest.approx(0.0, abs=1e-12)

    def test_one_hot(self) -> None:
        profile = _profile([0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
        assert profile.hhi == 1.0
        assert profile.diversity == 0.0
        assert profile.effective_experts == 1.0
        assert profile.winner_share == 1.0
        assert profile.concentration == pytest.approx(1.0)
        assert profile.modality_mass == (0.0, 1.0, 0.0)
        assert profile.family_mass == (0.0, 1.0, 0.0)

    def test_two_experts(self) -> None:
        profile = _profile([0.5, 0.5] + [0.0] * 7)
        assert profile.hhi == pytest.approx(0.5)
        assert profile.diversity == pytest.approx(0.31546, abs=1e-5)
        assert profile.top_gap == 0.0
        assert profile.top3_mass == pytest.approx(1.0)

    def test_masses_sum_to_one(self) -> None:
        rng = np.random.default_rng(1)
        for _ in range(20):
            profile = routing_diagnostics(rng.dirichlet(np.ones(9)), GROUPS, FAMILIES)
            assert sum(profile.modality_mass) == pytest.approx(1.0, abs=1e-12)
            assert sum(profile.family_mass) == pytest.approx(1.0, abs=1e-12)
            assert 1 / 9 - 1e-12 <= profile.hhi <= 1.0
            assert profile.content_participation == pytest.approx(
                profile.modality_mass[1] + profile.modality_mass[2]
            )

    def test_diversity_matches_entropy(self) -> None:
        pi = np.random.default_rng(2).dirichlet(np.ones(9))
        expected = -float(np.sum(pi * np.log(pi))) / math.log(9)
        assert _profile(pi.tolist()).diversity == pytest.approx(expected, abs=1e-12)

    def test_mixing_path_is_monotone(self) -> None:
        one_hot = np.zeros(9)
        one_hot[0] = 1.0
        uniform = np.full(9, 1 / 9)
        profiles = [
            routing_diagnostics((1 - t) * one_hot + t * uniform, GROUPS, FAMILIES)
            for t in np.linspace(0.0, 1.0, 11)
        ]
        for before, after in zip(profiles, profiles[1:], strict=False):
            assert after.hhi < before.hhi
            assert after.diversity > before.diversity

    def test_triplet_weighted_report(self) -> None:
        triplets = np.tile([0.8, 0.1, 0.1], (9, 1))
        profile = routing_diagnostics(np.full(9, 1 / 9), GROUPS, FAMILIES, triplets)
        assert profile.triplet_weighted == pytest.approx((0.8, 0.1, 0.1))

    def test_map_length_checked(self) -> None:
        with pytest.raises(ModelError, match="cover"):
            routing_diagnostics(np.full(9, 1 / 9), GROUPS[:8], FAMILIES)


class TestProfileModel:
    """Tests for profiling a trained model."""

    def test_micro_model(self) -> None:
        trainer = micro_trainer()
        profile = profile_model(trainer.model, np.array([[0, 1], [1, 2], [2, 3]]))
        assert profile.num_experts == 9
        assert sum(profile.mean_routing) == pytest.approx(1.0)
        assert profile.triplet_weighted is not None
        assert sum(profile.triplet_weighted) == pytest.approx(1.0)

    def test_requires_expert_head(self) -> None:
        trainer = micro_trainer(use_moe=False)
        with pytest.raises(ModelError, match="expert head"):
            profile_model(trainer.model, np.array([[0, 1]]))


class TestRoutingCsv:
    """Tests for the CSV export."""

    def test_header_written_once(self, tmp_path: Path) -> None:
        path = tmp_path / "routing.csv"
        append_routing_csv(path, "epoch-1", _profile([1 / 9] * 9))
        append_routing_csv(path, "final", _profile([0.5, 0.5] + [0.0] * 7))
        rows = list(csv.DictReader(path.open(encoding="utf-8")))
        assert list(rows[0]) == list(CSV_COLUMNS)
        assert [r["scope"] for r in rows] == ["epoch-1", "final"]
        assert float(rows[1]["HHI"]) == pytest.approx(0.5)
        assert rows[0]["tw_B"] == ""
