"""Tests for magnetrec.moe."""

import math

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from magnetrec.data import InteractionSet
from magnetrec.errors import ModelError
from magnetrec.models import ExpertFamily
from magnetrec.moe import (
    CueProjection,
    ExpertPool,
    ModalityGroup,
    Router,
    ScoreHead,
    TemplateParamError,
    TemplateParams,
    TopKError,
    compute_modality_cues,
    evaluate_template,
    expert_forward,
    instantiate_pool,
    mix_triplet,
    permute_to_global,
    project_simplex,
    route_dense,
    score_pair,
    topk_renormalize,
)

DIM = 4


def _tokens(seed: int, n: int = 6) -> tuple[torch.Tensor, ...]:
    gen = torch.Generator().manual_seed(seed)
    return tuple(torch.randn(n, DIM, generator=gen, dtype=torch.float64) for _ in range(6))


def _parts(
    seed: int = 0, uniform: bool = False
) -> tuple[ExpertPool, Router, ScoreHead]:
    rng = np.random.default_rng(seed)
    pool = instantiate_pool(TemplateParams(), DIM, rng, dtype=torch.float64)
    router = Router(DIM, pool.num_experts, rng, torch.float64, uniform=uniform)
    head = ScoreHead(DIM, rng, torch.float64)
    return pool, router, head


class TestEvaluateTemplate:
    """Tests for the closed-form template families."""

    def test_dominance_boundary(self) -> None:
        w = evaluate_template(ExpertFamily.DOM, TemplateParams(alpha=1.0))
        np.testing.assert_allclose(w, [1.0, 0.0, 0.0], atol=1e-15)

    def test_dominance_default(self) -> None:
        w = evaluate_template(ExpertFamily.DOM, TemplateParams(alpha=0.6))
        np.testing.assert_allclose(w, [0.8, 0.1, 0.1], atol=1e-12)

    def test_balance_symmetric(self) -> None:
        w = evaluate_template(ExpertFamily.BAL, TemplateParams(beta=0.0))
        np.testing.assert_allclose(w, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_complementary(self) -> None:
        w = evaluate_template(ExpertFamily.COM, TemplateParams(epsilon=0.05, delta=0.8))
        np.testing.assert_allclose(w, [0.05, 0.76, 0.19], atol=1e-12)

    @pytest.mark.parametrize("family", list(ExpertFamily))
    def test_closure_on_grid(self, family: ExpertFamily) -> None:
        for x in np.linspace(0.0, 1.0, 11):
            params = TemplateParams(alpha=x, beta=x, delta=x)
            w = evaluate_template(family, params)
            assert (w >= 0).all()
            assert abs(w.sum() - 1.0) < 1e-12

    def test_anchor_monotone(self) -> None:
        grid = np.linspace(0.0, 1.0, 11)
        dom = [evaluate_template(ExpertFamily.DOM, TemplateParams(alpha=a))[0] for a in grid]
        bal = [evaluate_template(ExpertFamily.BAL, TemplateParams(beta=b))[0] for b in grid]
        assert all(x <= y for x, y in zip(dom, dom[1:], strict=False))
        assert all(x <= y for x, y in zip(bal, bal[1:], strict=False))

    def test_out_of_range_scalar(self) -> None:
        params = TemplateParams.model_construct(alpha=1.5, beta=0.2, delta=0.5, epsilon=0.05)
        with pytest.raises(TemplateParamError, match="alpha"):
            evaluate_template(ExpertFamily.DOM, params)

    def test_epsilon_validated(self) -> None:
        with pytest.raises(ValidationError):
            TemplateParams(epsilon=0.4)


class TestPool:
    """Tests for pool instantiation and permutation."""

    def test_behavior_group_identity(self) -> None:
        canonical = np.array([0.8, 0.1, 0.1])
        np.testing.assert_array_equal(
            permute_to_global(canonical, ModalityGroup.BEHAVIOR), canonical
        )

    def test_anchor_moves_to_group_slot(self) -> None:
        canonical = np.array([0.8, 0.15, 0.05])
        np.testing.assert_array_equal(
            permute_to_global(canonical, ModalityGroup.APPEARANCE), [0.15, 0.8, 0.05]
        )
        np.testing.assert_array_equal(
            permute_to_global(canonical, ModalityGroup.SEMANTICS), [0.15, 0.05, 0.8]
        )

    def test_nine_experts_in_group_family_order(self) -> None:
        pool, _, _ = _parts()
        assert pool.num_experts == 9
        assert [s.label for s in pool.specs[:3]] == ["B-dom", "B-bal", "B-com"]
        assert pool.group_map == [0, 0, 0, 1, 1, 1, 2, 2, 2]
        assert pool.family_map == [0, 1, 2] * 3

    def test_triplets_on_simplex(self) -> None:
        pool, _, _ = _parts()
        triplets = pool.effective_triplets()
        assert (triplets >= 0).all()
        assert torch.allclose(triplets.sum(dim=1), torch.ones(9, dtype=torch.float64), atol=1e-12)
        np.testing.assert_allclose(triplets[3].numpy(), [0.1, 0.8, 0.1], atol=1e-12)

    def test_triplets_are_frozen(self) -> None:
        pool, _, _ = _parts()
        names = {name for name, _ in pool.named_parameters()}
        assert names == {"weight", "bias"}
        assert pool.weight.shape == (9, 2 * DIM, DIM)

    def test_split_replicates(self) -> None:
        pool = instantiate_pool(TemplateParams(), DIM, np.random.default_rng(0), split=2)
        assert pool.num_experts == 18
        assert pool.specs[1].label == "B-dom#1"
        assert pool.specs[0].triplet == pool.specs[1].triplet

    def test_free_templates_project(self) -> None:
        pool = instantiate_pool(
            TemplateParams(), DIM, np.random.default_rng(0), free_templates=True
        )
        assert pool.free_triplets is not None
        with torch.no_grad():
            pool.free_triplets.add_(0.3)
        triplets = pool.effective_triplets()
        assert (triplets >= 0).all()
        assert torch.allclose(triplets.sum(dim=1), torch.ones(9), atol=1e-6)


class TestProjectSimplex:
    """Tests for the simplex projection."""

    def test_simplex_point_is_fixed(self) -> None:
        v = torch.tensor([[0.2, 0.3, 0.5]], dtype=torch.float64)
        assert torch.allclose(project_simplex(v), v, atol=1e-15)

    def test_projects_outside_point(self) -> None:
        v = torch.tensor([[2.0, 0.0, 0.0], [0.5, 0.5, 0.5]], dtype=torch.float64)
        out = project_simplex(v)
        assert torch.allclose(out[0], torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
        assert torch.allclose(out[1], torch.full((3,), 1 / 3, dtype=torch.float64))


class TestModalityCues:
    """Tests for item and user cue computation."""

    def test_user_cue_is_history_mean(self) -> None:
        train = InteractionSet.from_pairs(3, 2, [(0, 0), (1, 0), (1, 1)])
        projections = CueProjection(2, 2, 2, np.random.default_rng(0), torch.float64)
        with torch.no_grad():
            projections.weight_a.copy_(torch.eye(2, dtype=torch.float64))
            projections.weight_s.copy_(torch.eye(2, dtype=torch.float64))
        features = torch.eye(2, dtype=torch.float64)
        cues = compute_modality_cues(features, features, train, projections)

        assert torch.allclose(cues.user_a[0], torch.tensor([1.0, 0.0], dtype=torch.float64))
        assert torch.allclose(cues.user_a[1], torch.tensor([0.5, 0.5], dtype=torch.float64))
        assert torch.equal(cues.user_s[2], torch.zeros(2, dtype=torch.float64))
        assert cues.empty_users.tolist() == [False, False, True]

    def test_features_must_cover_items(self) -> None:
        train = InteractionSet.from_pairs(2, 3, [(0, 0)])
        projections = CueProjection(2, 2, 2, np.random.default_rng(0), torch.float64)
        features = torch.zeros(2, 2, dtype=torch.float64)
        with pytest.raises(ModelError, match="every item"):
            compute_modality_cues(features, features, train, projections)


class TestRouting:
    """Tests for dense routing and Top-K selection."""

    def test_uniform_router(self) -> None:
        _, router, _ = _parts(uniform=True)
        z_u, z_i, *_ = _tokens(1)
        pi = route_dense(z_u, z_i, router)
        assert torch.allclose(pi, torch.full_like(pi, 1 / 9), atol=1e-15)

    def test_two_expert_softmax(self) -> None:
        router = Router(1, 2, np.random.default_rng(0), torch.float64, uniform=True)
        with torch.no_grad():
            router.bias.copy_(torch.tensor([math.log(2.0), 0.0], dtype=torch.float64))
        z = torch.ones(1, 1, dtype=torch.float64)
        pi = route_dense(z, z, router)
        assert torch.allclose(pi, torch.tensor([[2 / 3, 1 / 3]], dtype=torch.float64))

    def test_distribution_closure(self) -> None:
        _, router, _ = _parts(seed=3)
        z_u, z_i, *_ = _tokens(2, n=20)
        pi = route_dense(z_u, z_i, router)
        assert (pi > 0).all()
        assert torch.allclose(pi.sum(dim=1), torch.ones(20, dtype=torch.float64), atol=1e-12)

    def test_query_width_checked(self) -> None:
        _, router, _ = _parts()
        z = torch.zeros(2, DIM + 1, dtype=torch.float64)
        with pytest.raises(ModelError, match="width"):
            route_dense(z, z, router)

    def test_topk_renormalizes(self) -> None:
        pi = torch.tensor([[0.4, 0.3, 0.2, 0.1]], dtype=torch.float64)
        selected, weights = topk_renormalize(pi, 2)
        assert selected.tolist() == [[0, 1]]
        assert torch.allclose(weights, torch.tensor([[4 / 7, 3 / 7]], dtype=torch.float64))

    def test_topk_full_is_identity(self) -> None:
        pi = torch.tensor([[0.1, 0.4, 0.2, 0.3]], dtype=torch.float64)
        selected, weights = topk_renormalize(pi, 4)
        assert sorted(selected[0].tolist()) == [0, 1, 2, 3]
        assert torch.allclose(weights, pi.gather(1, selected))

    def test_topk_ties_prefer_smaller_index(self) -> None:
        pi = torch.full((1, 4), 0.25, dtype=torch.float64)
        selected, weights = topk_renormalize(pi, 2)
        assert selected.tolist() == [[0, 1]]
        assert torch.allclose(weights, torch.tensor([[0.5, 0.5]], dtype=torch.float64))

    @pytest.mark.parametrize("k", [0, 5])
    def test_topk_range(self, k: int) -> None:
        with pytest.raises(TopKError, match="top_k"):
            topk_renormalize(torch.full((1, 4), 0.25), k)


class TestExpertForward:
    """Tests for triplet mixing and the expert transform."""

    def test_behavior_only_triplet(self) -> None:
        z = torch.tensor([2.0, -1.0], dtype=torch.float64)
        h = torch.tensor([5.0, 5.0], dtype=torch.float64)
        w = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        assert torch.equal(mix_triplet(w, z, h, h), z)

    def test_mixed_triplet(self) -> None:
        w = torch.tensor([0.5, 0.5, 0.0], dtype=torch.float64)
        z = torch.tensor([2.0, 0.0], dtype=torch.float64)
        h_a = torch.tensor([0.0, 2.0], dtype=torch.float64)
        h_s = torch.tensor([9.0, 9.0], dtype=torch.float64)
        expected = torch.tensor([1.0, 1.0], dtype=torch.float64)
        assert torch.allclose(mix_triplet(w, z, h_a, h_s), expected)

    def test_output_shape(self) -> None:
        pool, _, _ = _parts()
        z_u, z_i, ua, us, ia, is_ = _tokens(4, n=5)
        for expert in range(pool.num_experts):
            out = expert_forward(pool, expert, z_u, z_i, (ua, us), (ia, is_))
            assert out.shape == (5, DIM)

    def test_unknown_expert(self) -> None:
        pool, _, _ = _parts()
        z = torch.zeros(1, DIM, dtype=torch.float64)
        with pytest.raises(ModelError, match="not in pool"):
            expert_forward(pool, 9, z, z, (z, z), (z, z))


class TestScorePair:
    """Tests for sparse aggregation and scoring."""

    def test_single_expert_passthrough(self) -> None:
        pool, router, head = _parts(seed=5)
        z_u, z_i, ua, us, ia, is_ = _tokens(5)
        result = score_pair(z_u, z_i, (ua, us), (ia, is_), pool, router, head, k=1)
        for row in range(z_u.shape[0]):
            expert = int(result.selected[row, 0])
            expected = expert_forward(
                pool, expert, z_u[row : row + 1], z_i[row : row + 1],
                (ua[row : row + 1], us[row : row + 1]), (ia[row : row + 1], is_[row : row + 1]),
            )
            assert torch.allclose(result.pair[row], expected[0], atol=1e-12)
        assert torch.allclose(result.weights, torch.ones_like(result.weights))

    def test_opposite_experts_cancel(self) -> None:
        rng = np.random.default_rng(0)
        pool = instantiate_pool(
            TemplateParams(), DIM, rng, families=(ExpertFamily.DOM,), split=2, dtype=torch.float64
        )
        router = Router(DIM, pool.num_experts, rng, torch.float64, uniform=True)
        head = ScoreHead(DIM, rng, torch.float64)
        with torch.no_grad():
            pool.weight[1].copy_(-pool.weight[0])
            head.bias.fill_(0.25)
        z_u, z_i, ua, us, ia, is_ = _tokens(6, n=3)
        result = score_pair(z_u, z_i, (ua, us), (ia, is_), pool, router, head, k=2)
        assert result.selected.tolist() == [[0, 1]] * 3
        assert torch.allclose(result.pair, torch.zeros(3, DIM, dtype=torch.float64), atol=1e-15)
        assert torch.allclose(result.score, torch.full((3,), 0.25, dtype=torch.float64))

    def test_storage_order_invariance(self) -> None:
        pool, router, head = _parts(seed=7)
        perm = torch.arange(pool.num_experts - 1, -1, -1)
        rng = np.random.default_rng(1)
        shuffled = ExpertPool([pool.specs[p] for p in perm.tolist()], DIM, rng, torch.float64)
        router2 = Router(DIM, pool.num_experts, rng, torch.float64)
        with torch.no_grad():
            shuffled.weight.copy_(pool.weight[perm])
            shuffled.bias.copy_(pool.bias[perm])
            router2.weight.copy_(router.weight[:, perm])
            router2.bias.copy_(router.bias[perm])
        z_u, z_i, ua, us, ia, is_ = _tokens(7)
        a = score_pair(z_u, z_i, (ua, us), (ia, is_), pool, router, head, k=4)
        b = score_pair(z_u, z_i, (ua, us), (ia, is_), shuffled, router2, head, k=4)
        assert torch.allclose(a.score, b.score, atol=1e-12)

    def test_unselected_experts_get_no_gradient(self) -> None:
        pool, router, head = _parts(seed=8)
        z_u, z_i, ua, us, ia, is_ = _tokens(8, n=1)
        result = score_pair(z_u, z_i, (ua, us), (ia, is_), pool, router, head, k=2)
        result.score.sum().backward()
        assert pool.weight.grad is not None
        chosen = set(result.selected[0].tolist())
        for expert in range(pool.num_experts):
            grad = pool.weight.grad[expert]
            if expert in chosen:
                assert grad.abs().sum() > 0
            else:
                assert torch.equal(grad, torch.zeros_like(grad))

    def test_fixed_selection_is_respected(self) -> None:
        pool, router, head = _parts(seed=9)
        z_u, z_i, ua, us, ia, is_ = _tokens(9, n=2)
        selection = torch.tensor([[7, 8], [7, 8]])
        result = score_pair(
            z_u, z_i, (ua, us), (ia, is_), pool, router, head, k=2, selection=selection
        )
        assert torch.equal(result.selected, selection)
        assert torch.allclose(result.weights.sum(dim=1), torch.ones(2, dtype=torch.float64))

    def test_dropout_requires_rng(self) -> None:
        pool, router, head = _parts()
        z_u, z_i, ua, us, ia, is_ = _tokens(1, n=2)
        with pytest.raises(ModelError, match="rng"):
            score_pair(z_u, z_i, (ua, us), (ia, is_), pool, router, head, k=2, dropout=0.5)
