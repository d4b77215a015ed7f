"""Training loop: Adam updates, the stage schedule, early stopping, checkpoints.

Also hosts the finite-difference gradient oracle used to verify that the
analytic gradients of the full objective are exact.
"""

from __future__ import annotations

import copy
import json
import math
import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Any

import numpy as np
import torch

from magnetrec.config import config_fingerprint
from magnetrec.data import (
    FeatureMatrix,
    InteractionSet,
    Modality,
    SplitBundle,
    sample_negatives_batch,
)
from magnetrec.errors import InputNotFoundError, MagnetError, ModelError, TrainingAbortedError
from magnetrec.evaluation import evaluate_model
from magnetrec.graph import (
    InducedEdges,
    ViewGraph,
    ViewKind,
    build_neighbor_index,
    build_view_graph,
    expand_candidates,
    graph_fingerprint,
    load_graph_cache,
    save_graph_cache,
)
from magnetrec.losses import (
    LossBreakdown,
    LossWeights,
    bpr_loss,
    confidence_loss,
    coverage_loss,
    l2_penalty,
    total_objective,
    view_contrastive_loss,
)
from magnetrec.mgf import read_matrix, write_matrix
from magnetrec.model import MagnetModel
from magnetrec.models import Precision, RunConfig
from magnetrec.schedule import (
    EntropyStats,
    ScheduleState,
    batch_entropy_stats,
    stage_weights,
    update_stage,
)

if TYPE_CHECKING:
    from pathlib import Path

    from numpy.typing import NDArray

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
SELECTION_METRIC = 20


@dataclass(frozen=True, eq=False)
class TrainingData:
    """Everything a model needs besides its configuration."""

    split: SplitBundle
    features_a: FeatureMatrix
    features_s: FeatureMatrix
    graphs: dict[ViewKind, ViewGraph]
    induced: InducedEdges | None

    @classmethod
    def build(
        cls,
        config: RunConfig,
        split: SplitBundle,
        features_a: FeatureMatrix,
        features_s: FeatureMatrix,
        threads: int = 1,
        cache_dir: Path | None = None,
    ) -> TrainingData:
        """Build the observed view and, in dual-view mode, the augmented one.

        Neighbor indices and induced edges are reused from ``cache_dir``
        when its sidecar matches.
        """
        train = split.train
        graphs = {ViewKind.UI: build_view_graph(train, None, ViewKind.UI)}
        induced: InducedEdges | None = None
        if config.dual_view:
            fingerprint = graph_fingerprint(
                config.knn_k, config.expand_r, features_a, features_s, train
            )
            cached = load_graph_cache(cache_dir, fingerprint) if cache_dir is not None else None
            if cached is not None:
                induced = cached[2]
            else:
                index_a = build_neighbor_index(features_a, config.knn_k, threads)
                index_s = build_neighbor_index(features_s, config.knn_k, threads)
                induced = expand_candidates(train, index_a, index_s, config.expand_r)
                if cache_dir is not None:
                    save_graph_cache(cache_dir, index_a, index_s, induced, fingerprint)
            graphs[ViewKind.UIG] = build_view_graph(train, induced, ViewKind.UIG)
        return cls(split, features_a, features_s, graphs, induced)

    def with_induced(self, induced: InducedEdges) -> TrainingData:
        """Replace the augmented view's induced edges."""
        graphs = dict(self.graphs)
        graphs[ViewKind.UIG] = build_view_graph(self.split.train, induced, ViewKind.UIG)
        return replace(self, graphs=graphs, induced=induced)


@dataclass(frozen=True)
class Batch:
    """Positive pairs of one step with their sampled negatives."""

    users: torch.Tensor
    items: torch.Tensor
    neg_users: torch.Tensor
    neg_items: torch.Tensor

    @classmethod
    def sample(
        cls,
        pairs: NDArray[np.int64],
        train: InteractionSet,
        neg_ratio: int,
        rng: np.random.Generator,
    ) -> Batch:
        users = np.ascontiguousarray(pairs[:, 0], dtype=np.int64)
        items = np.ascontiguousarray(pairs[:, 1], dtype=np.int64)
        negatives = sample_negatives_batch(users, train, neg_ratio, rng)
        return cls(
            users=torch.from_numpy(users),
            items=torch.from_numpy(items),
            neg_users=torch.from_numpy(np.repeat(users, neg_ratio)),
            neg_items=torch.from_numpy(negatives.reshape(-1)),
        )


@dataclass(frozen=True)
class FrozenStep:
    """Top-K selections and regularizer weights held fixed across evaluations."""

    pos_selection: torch.Tensor | None
    neg_selection: torch.Tensor | None
    lambda_cov: float
    lambda_conf: float


@dataclass
class ObjectiveResult:
    breakdown: LossBreakdown
    stats: EntropyStats | None
    state: ScheduleState
    lambda_cov: float
    lambda_conf: float
    pos_selection: torch.Tensor | None
    neg_selection: torch.Tensor | None


def has_augmented_edges(model: MagnetModel) -> bool:
    ui, uig = model.graphs.get(ViewKind.UI), model.graphs.get(ViewKind.UIG)
    return ui is not None and uig is not None and uig.num_edges > ui.num_edges


def compute_objective(
    model: MagnetModel,
    batch: Batch,
    state: ScheduleState,
    rng: np.random.Generator | None = None,
    frozen: FrozenStep | None = None,
    include_l2: bool = True,
) -> ObjectiveResult:
    """Score the batch and compose the full objective.

    Without ``frozen`` the schedule advances on this batch's entropy and
    the resulting stage picks the regularizer weights. With ``frozen``
    the schedule is left untouched.
    """
    config = model.config
    encoded = model.encode(rng)
    pos = model.score(
        encoded, batch.users, batch.items, rng, frozen.pos_selection if frozen else None
    )
    neg = model.score(
        encoded, batch.neg_users, batch.neg_items, rng, frozen.neg_selection if frozen else None
    )
    pos_scores = pos.score.repeat_interleave(config.neg_ratio)
    bpr = bpr_loss(pos_scores, neg.score, "mean" if config.mean_bpr else "sum")

    ctr = None
    lambda_ctr = 0.0
    if (
        config.view_ctr
        and config.lambda_ctr > 0
        and encoded.uig is not None
        and has_augmented_edges(model)
    ):
        ctr = view_contrastive_loss(
            encoded.ui.z_users[batch.users],
            encoded.uig.z_users[batch.users],
            encoded.ui.z_items[batch.items],
            encoded.uig.z_items[batch.items],
            config.tau,
            batch.users,
            batch.items,
        )
        lambda_ctr = config.lambda_ctr

    stats = None
    cov = conf = None
    lambda_cov = lambda_conf = 0.0
    new_state = state
    if pos.routing is not None:
        dense = pos.routing.dense
        stats = batch_entropy_stats(dense.detach().double().numpy())
        if frozen is not None:
            lambda_cov, lambda_conf = frozen.lambda_cov, frozen.lambda_conf
        else:
            new_state = update_stage(state, stats.normalized)
            lambda_cov, lambda_conf = stage_weights(new_state, stats.normalized)
        cov = coverage_loss(dense.mean(dim=0))
        conf = confidence_loss(dense)

    l2 = l2_penalty(model.parameters()) if include_l2 else None
    weights = LossWeights(
        ctr=lambda_ctr,
        cov=lambda_cov,
        conf=lambda_conf,
        l2=config.weight_decay if include_l2 else 0.0,
    )
    breakdown = total_objective(bpr, weights, ctr=ctr, cov=cov, conf=conf, l2=l2)
    return ObjectiveResult(
        breakdown=breakdown,
        stats=stats,
        state=new_state,
        lambda_cov=lambda_cov,
        lambda_conf=lambda_conf,
        pos_selection=pos.routing.selected if pos.routing is not None else None,
        neg_selection=neg.routing.selected if neg.routing is not None else None,
    )


@dataclass
class StepOutcome:
    """What one optimizer update produced."""

    breakdown: LossBreakdown
    stats: EntropyStats | None
    state: ScheduleState
    lambda_cov: float
    lambda_conf: float

    def to_record(self, step: int, epoch: int) -> dict[str, Any]:
        stats = self.stats.to_record() if self.stats is not None else {}
        return {
            "step": step,
            "epoch": epoch,
            "H": stats.get("H"),
            "H_norm": stats.get("H_norm"),
            "N_eff": stats.get("N_eff"),
            "H_inst": stats.get("H_inst"),
            "stage": self.state.stage,
            "n": self.state.counter,
            "lambda_cov": self.lambda_cov,
            "lambda_conf": self.lambda_conf,
        }


@dataclass
class Checkpoint:
    """Complete training state; restoring it resumes bit-for-bit."""

    parameters: dict[str, NDArray[np.floating]]
    moments: dict[str, tuple[NDArray[np.floating], NDArray[np.floating]]]
    optimizer_steps: dict[str, int]
    schedule: ScheduleState
    epoch: int
    global_step: int
    validation: list[dict[str, Any]]
    config_fingerprint: str
    rng_state: dict[str, Any]


@dataclass
class Trainer:
    """Single owner of the model, optimizer, schedule state, and generator."""

    config: RunConfig
    data: TrainingData
    model: MagnetModel
    optimizer: torch.optim.Adam
    rng: np.random.Generator
    state: ScheduleState
    epoch: int = 0
    global_step: int = 0
    validation: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def create(cls, config: RunConfig, data: TrainingData) -> Trainer:
        rng = np.random.default_rng(config.seed)
        model = MagnetModel(
            config, data.split.train, data.graphs, data.features_a, data.features_s, rng
        )
        optimizer = torch.optim.Adam(
            model.parameters(), lr=config.lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0
        )
        state = ScheduleState.from_config(config, steps_per_epoch(config, data.split.train))
        return cls(config, data, model, optimizer, rng, state)

    @property
    def train_set(self) -> InteractionSet:
        return self.data.split.train

    def train_step(self, pairs: NDArray[np.int64]) -> StepOutcome:
        """Sample negatives, compose the objective, and apply one Adam update.

        Raises:
            TrainingAbortedError: If the total loss is not finite.
        """
        self.model.train()
        batch = Batch.sample(pairs, self.train_set, self.config.neg_ratio, self.rng)
        result = compute_objective(self.model, batch, self.state, self.rng)
        if not result.breakdown.is_finite():
            raise TrainingAbortedError(
                f"Non-finite loss at step {self.global_step + 1} (epoch {self.epoch + 1})",
                self._abort_dump(result),
            )
        self.optimizer.zero_grad(set_to_none=True)
        result.breakdown.total.backward()
        self.optimizer.step()
        self.state = result.state
        self.global_step += 1
        return StepOutcome(
            result.breakdown, result.stats, result.state, result.lambda_cov, result.lambda_conf
        )

    def _abort_dump(self, result: ObjectiveResult) -> dict[str, object]:
        return {
            "step": self.global_step + 1,
            "epoch": self.epoch + 1,
            "losses": {k: float(v) for k, v in result.breakdown.contributions().items()},
            "raw": {
                "bpr": float(result.breakdown.bpr),
                "ctr": float(result.breakdown.ctr),
                "cov": float(result.breakdown.cov),
                "conf": float(result.breakdown.conf),
                "l2": float(result.breakdown.l2),
            },
            "entropy": result.stats.to_record() if result.stats is not None else None,
            "schedule": self.state.to_record(),
            "parameter_norms": {
                name: float(p.detach().norm()) for name, p in self.model.named_parameters()
            },
        }

    def snapshot(self) -> Checkpoint:
        parameters: dict[str, NDArray[np.floating]] = {}
        moments: dict[str, tuple[NDArray[np.floating], NDArray[np.floating]]] = {}
        steps: dict[str, int] = {}
        for name, param in self.model.named_parameters():
            parameters[name] = param.detach().numpy().copy()
            opt_state = self.optimizer.state.get(param)
            if opt_state:
                moments[name] = (
                    opt_state["exp_avg"].detach().numpy().copy(),
                    opt_state["exp_avg_sq"].detach().numpy().copy(),
                )
                steps[name] = int(float(opt_state["step"]))
        return Checkpoint(
            parameters=parameters,
            moments=moments,
            optimizer_steps=steps,
            schedule=self.state,
            epoch=self.epoch,
            global_step=self.global_step,
            validation=copy.deepcopy(self.validation),
            config_fingerprint=config_fingerprint(self.config),
            rng_state=copy.deepcopy(self.rng.bit_generator.state),
        )

    def restore(self, checkpoint: Checkpoint) -> None:
        """Load parameters, optimizer moments, schedule, and generator state.

        Raises:
            CheckpointError: If a parameter is missing or has the wrong shape.
        """
        named = dict(self.model.named_parameters())
        missing = sorted(set(named) - set(checkpoint.parameters))
        if missing:
            msg = f"Checkpoint lacks parameters: {', '.join(missing)}"
            raise CheckpointError(msg)
        with torch.no_grad():
            for name, param in named.items():
                values = torch.from_numpy(np.asarray(checkpoint.parameters[name]))
                if tuple(values.shape) != tuple(param.shape):
                    got, want = tuple(values.shape), tuple(param.shape)
                    msg = f"Shape mismatch for {name}: {got} vs {want}"
                    raise CheckpointError(msg)
                param.copy_(values.to(param.dtype))
        self.optimizer.state.clear()
        for name, (exp_avg, exp_avg_sq) in checkpoint.moments.items():
            param = named[name]
            self.optimizer.state[param] = {
                "step": torch.tensor(float(checkpoint.optimizer_steps[name]), dtype=torch.float32),
                "exp_avg": torch.from_numpy(np.asarray(exp_avg).copy()).to(param.dtype),
                "exp_avg_sq": torch.from_numpy(np.asarray(exp_avg_sq).copy()).to(param.dtype),
            }
        self.state = checkpoint.schedule
        self.epoch = checkpoint.epoch
        self.global_step = checkpoint.global_step
        self.validation = copy.deepcopy(checkpoint.validation)
        self.rng.bit_generator.state = copy.deepcopy(checkpoint.rng_state)


def steps_per_epoch(config: RunConfig, train: InteractionSet) -> int:
    return max(1, math.ceil(train.num_edges / config.batch_size))


@dataclass
class EarlyStopping:
    """Stop after ``patience`` epochs without a strict improvement."""

    patience: int
    best: float = -math.inf
    best_epoch: int = 0
    bad_epochs: int = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch's metric; return True if it is a new best."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class EpochSummary:
    """Per-epoch record plus the epoch-mean positive routing."""

    record: dict[str, Any]
    mean_routing: NDArray[np.float64] | None


@dataclass
class FitResult:
    best: Checkpoint
    history: list[dict[str, Any]]
    stopped_early: bool


StepCallback = Callable[[dict[str, Any]], None]
EpochCallback = Callable[[EpochSummary], None]


def _epoch_record(
    epoch: int,
    sums: dict[str, float],
    steps: int,
    stats_sums: dict[str, float],
    stats_steps: int,
    state: ScheduleState,
    val_recall: float,
    val_ndcg: float,
    seconds: float | None,
) -> dict[str, Any]:
    record: dict[str, Any] = {"epoch": epoch}
    for key in ("loss_total", "loss_bpr", "loss_ctr", "loss_cov", "loss_conf", "loss_l2"):
        record[key] = sums.get(key, 0.0) / max(steps, 1)
    for key in ("H_norm", "N_eff", "H_inst"):
        record[key] = stats_sums[key] / stats_steps if stats_steps else None
    record["stage"] = state.stage
    record[f"val_recall{SELECTION_METRIC}"] = val_recall
    record[f"val_ndcg{SELECTION_METRIC}"] = val_ndcg
    record["seconds"] = seconds
    return record


def fit(
    trainer: Trainer,
    on_step: StepCallback | None = None,
    on_epoch: EpochCallback | None = None,
) -> FitResult:
    """Train up to ``max_epochs`` with validation NDCG@20 early stopping.

    Returns:
        The best checkpoint by validation NDCG@20 and the epoch history.
    """
    config = trainer.config
    train = trainer.train_set
    cutoffs = tuple(sorted({*config.eval_cutoffs, SELECTION_METRIC}))
    stopper = EarlyStopping(config.patience)
    for past in trainer.validation:
        stopper.update(int(past["epoch"]), float(past[f"val_ndcg{SELECTION_METRIC}"]))
    # A restored best checkpoint stays best until a later epoch beats it.
    best: Checkpoint | None = None
    if trainer.validation and stopper.best_epoch == trainer.epoch:
        best = trainer.snapshot()
    history: list[dict[str, Any]] = []
    stopped_early = False

    while trainer.epoch < config.max_epochs and not stopper.should_stop:
        started = time.perf_counter()
        epoch = trainer.epoch + 1
        order = trainer.rng.permutation(train.num_edges)
        edges = train.edges[order]
        sums: dict[str, float] = {}
        stats_sums = {"H_norm": 0.0, "N_eff": 0.0, "H_inst": 0.0}
        stats_steps = 0
        routing_sum: NDArray[np.float64] | None = None
        routing_count = 0

        for start in range(0, train.num_edges, config.batch_size):
            pairs = edges[start : start + config.batch_size]
            outcome = trainer.train_step(pairs)
            for key, value in outcome.breakdown.contributions().items():
                sums[key] = sums.get(key, 0.0) + value
            if outcome.stats is not None:
                stats_steps += 1
                for key, value in outcome.stats.to_record().items():
                    if key in stats_sums:
                        stats_sums[key] += value
                weighted = outcome.stats.mean_routing * len(pairs)
                routing_sum = weighted if routing_sum is None else routing_sum + weighted
                routing_count += len(pairs)
            if on_step is not None:
                on_step(outcome.to_record(trainer.global_step, epoch))

        report = evaluate_model(trainer.model, trainer.data.split.valid, train, cutoffs)
        trainer.epoch = epoch
        val_recall = report.recall[SELECTION_METRIC]
        val_ndcg = report.ndcg[SELECTION_METRIC]
        trainer.validation.append(
            {
                "epoch": epoch,
                f"val_recall{SELECTION_METRIC}": val_recall,
                f"val_ndcg{SELECTION_METRIC}": val_ndcg,
            }
        )
        improved = stopper.update(epoch, val_ndcg)
        if improved:
            best = trainer.snapshot()

        seconds = time.perf_counter() - started if config.log_wallclock else None
        record = _epoch_record(
            epoch,
            sums,
            math.ceil(train.num_edges / config.batch_size),
            stats_sums,
            stats_steps,
            trainer.state,
            val_recall,
            val_ndcg,
            seconds,
        )
        history.append(record)
        if on_epoch is not None:
            mean_routing = routing_sum / routing_count if routing_sum is not None else None
            on_epoch(EpochSummary(record, mean_routing))
        if stopper.should_stop and trainer.epoch < config.max_epochs:
            stopped_early = True

    return FitResult(best or trainer.snapshot(), history, stopped_early)


class CheckpointError(MagnetError):
    """Raised when a checkpoint cannot be read or does not fit the model."""

    exit_code = 5


MANIFEST_NAME = "manifest.json"


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".mgf"


def save_checkpoint(directory: Path, checkpoint: Checkpoint) -> None:
    """Write ``manifest.json`` plus one MGF1 blob per parameter and moment."""
    directory.mkdir(parents=True, exist_ok=True)
    for name, values in checkpoint.parameters.items():
        write_matrix(directory / "params" / _blob_name(name), np.asarray(values).reshape(-1))
    for name, (exp_avg, exp_avg_sq) in checkpoint.moments.items():
        write_matrix(directory / "adam" / f"{name}.exp_avg.mgf", np.asarray(exp_avg).reshape(-1))
        write_matrix(
            directory / "adam" / f"{name}.exp_avg_sq.mgf", np.asarray(exp_avg_sq).reshape(-1)
        )
    manifest = {
        "config_fingerprint": checkpoint.config_fingerprint,
        "epoch": checkpoint.epoch,
        "global_step": checkpoint.global_step,
        "metrics": checkpoint.validation,
        "schedule": checkpoint.schedule.to_record(),
        "parameters": {
            name: list(np.asarray(values).shape) for name, values in checkpoint.parameters.items()
        },
        "optimizer": {
            "betas": list(ADAM_BETAS),
            "eps": ADAM_EPS,
            "steps": checkpoint.optimizer_steps,
        },
        "rng_state": checkpoint.rng_state,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory: Path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint.

    Raises:
        InputNotFoundError: If the manifest is missing.
    """
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise InputNotFoundError(manifest_path, "checkpoint manifest")
    manifest = json.loads(manifest_path.read_text())
    parameters: dict[str, NDArray[np.floating]] = {}
    for name, shape in manifest["parameters"].items():
        flat = read_matrix(directory / "params" / _blob_name(name))
        parameters[name] = flat.reshape(shape)
    moments: dict[str, tuple[NDArray[np.floating], NDArray[np.floating]]] = {}
    steps = {name: int(v) for name, v in manifest["optimizer"]["steps"].items()}
    for name in steps:
        shape = manifest["parameters"][name]
        moments[name] = (
            read_matrix(directory / "adam" / f"{name}.exp_avg.mgf").reshape(shape),
            read_matrix(directory / "adam" / f"{name}.exp_avg_sq.mgf").reshape(shape),
        )
    return Checkpoint(
        parameters=parameters,
        moments=moments,
        optimizer_steps=steps,
        schedule=ScheduleState.from_record(manifest["schedule"]),
        epoch=int(manifest["epoch"]),
        global_step=int(manifest["global_step"]),
        validation=list(manifest["metrics"]),
        config_fingerprint=str(manifest["config_fingerprint"]),
        rng_state=manifest["rng_state"],
    )


class GradientScope(str, Enum):
    """Which objective the gradient oracle differentiates."""

    BPR = "bpr"  # Ranking loss only
    STAGE1 = "stage1"  # Full objective with the coverage regularizer
    STAGE2 = "stage2"  # Full objective with confidence and view contrast


class GradientCheckFailedError(MagnetError):
    """Raised by callers that treat a failing oracle run as an error."""

    exit_code = 7

    def __init__(self, report: GradientCheckReport) -> None:
        self.report = report
        groups = ", ".join(report.failing_groups)
        super().__init__(f"Gradient check failed for scope {report.scope.value}: {groups}")


@dataclass(frozen=True)
class GroupCheck:
    max_rel_error: float
    coordinates: int
    worst_index: int


@dataclass
class GradientCheckReport:
    scope: GradientScope
    tolerance: float
    groups: dict[str, GroupCheck]

    @property
    def failing_groups(self) -> list[str]:
        return [name for name, g in self.groups.items() if g.max_rel_error >= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing_groups

    @property
    def max_rel_error(self) -> float:
        return max((g.max_rel_error for g in self.groups.values()), default=0.0)

    def to_json(self) -> dict[str, Any]:
        return {
            "scope": self.scope.value,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "groups": {
                name: {
                    "max_rel_error": g.max_rel_error,
                    "coordinates": g.coordinates,
                    "worst_index": g.worst_index,
                }
                for name, g in self.groups.items()
            },
        }


def _scope_state(trainer: Trainer, scope: GradientScope) -> ScheduleState:
    stage = 2 if scope == GradientScope.STAGE2 else 1
    return replace(trainer.state, stage=stage, pinned=True)


def gradient_check(
    trainer: Trainer,
    scope: GradientScope,
    pairs: NDArray[np.int64] | None = None,
    tolerance: float = 1e-4,
    h: float = 1e-4,
    max_coordinates: int = 10_000,
    scale_floor: float = 1e-2,
    corrupt: tuple[str, int] | None = None,
) -> GradientCheckReport:
    """Compare analytic gradients with central finite differences.

    Dropout and fanout are disabled, negatives are drawn once, and the Top-K
    selections and regularizer weights are frozen at the base point so the
    objective is a smooth function of the parameters. The relative error of
    a coordinate is ``|a - n| / max(|a|, |n|, scale_floor)``.

    Args:
        trainer: A trainer whose model runs in 64-bit precision.
        scope: Objective to differentiate.
        pairs: Positive pairs to use; defaults to the whole training set.
        tolerance: Maximum accepted relative error.
        h: Finite-difference step.
        max_coordinates: Above this many coordinates a seeded subset is checked.
        scale_floor: Lower bound of the relative-error denominator.
        corrupt: ``(parameter name, flat index)`` whose analytic gradient is
            offset by +1 to exercise failure reporting.

    Raises:
        GradientPrecisionError: If the model is not in 64-bit mode.
        ModelError: If ``corrupt`` names no existing coordinate.
    """
    model = trainer.model
    if trainer.config.precision != Precision.FLOAT64:
        msg = "gradient_check requires precision=float64"
        raise GradientPrecisionError(msg)
    if corrupt is not None:
        sizes = {name: p.numel() for name, p in model.named_parameters()}
        if not 0 <= corrupt[1] < sizes.get(corrupt[0], 0):
            msg = f"No gradient coordinate {corrupt[0]}:{corrupt[1]} to corrupt"
            raise ModelError(msg)

    was_training = model.training
    model.eval()
    try:
        if pairs is None:
            pairs = trainer.train_set.edges
        batch = Batch.sample(pairs, trainer.train_set, trainer.config.neg_ratio, trainer.rng)
        state = _scope_state(trainer, scope)
        base = compute_objective(model, batch, state)
        if scope == GradientScope.BPR:
            frozen = FrozenStep(base.pos_selection, base.neg_selection, 0.0, 0.0)
        else:
            h_norm = base.stats.normalized if base.stats is not None else 0.0
            cov, conf = stage_weights(state, h_norm)
            frozen = FrozenStep(base.pos_selection, base.neg_selection, cov, conf)
        bpr_only = scope == GradientScope.BPR

        def objective() -> torch.Tensor:
            if bpr_only:
                encoded = model.encode()
                pos = model.score(encoded, batch.users, batch.items, selection=frozen.pos_selection)
                neg = model.score(
                    encoded, batch.neg_users, batch.neg_items, selection=frozen.neg_selection
                )
                return bpr_loss(
                    pos.score.repeat_interleave(trainer.config.neg_ratio),
                    neg.score,
                    "mean" if trainer.config.mean_bpr else "sum",
                )
            return compute_objective(model, batch, state, frozen=frozen).breakdown.total

        model.zero_grad(set_to_none=True)
        objective().backward()
        named = [(name, p) for name, p in model.named_parameters()]
        analytic = {
            name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            .reshape(-1)
            .numpy()
            .copy()
            for name, p in named
        }
        if corrupt is not None:
            analytic[corrupt[0]][corrupt[1]] += 1.0

        total = sum(p.numel() for _, p in named)
        picker = np.random.default_rng(0)
        groups: dict[str, GroupCheck] = {}
        with torch.no_grad():
            for name, param in named:
                flat = param.view(-1)
                count = flat.numel()
                if total > max_coordinates:
                    take = max(1, math.ceil(max_coordinates * count / total))
                    coords = np.sort(picker.choice(count, size=min(take, count), replace=False))
                else:
                    coords = np.arange(count)
                if corrupt is not None and corrupt[0] == name and corrupt[1] not in coords:
                    coords = np.sort(np.append(coords, corrupt[1]))
                worst, worst_index = 0.0, -1
                for c in coords.tolist():
                    original = float(flat[c])
                    flat[c] = original + h
                    f_plus = float(objective())
                    flat[c] = original - h
                    f_minus = float(objective())
                    flat[c] = original
                    numeric = (f_plus - f_minus) / (2 * h)
                    a = float(analytic[name][c])
                    rel = abs(a - numeric) / max(abs(a), abs(numeric), scale_floor)
                    if rel > worst or worst_index < 0:
                        worst, worst_index = rel, c
                groups[name] = GroupCheck(worst, int(coords.size), worst_index)
        return GradientCheckReport(scope, tolerance, groups)
    finally:
        model.zero_grad(set_to_none=True)
        model.train(was_training)


class GradientPrecisionError(MagnetError):
    """Raised when the gradient oracle is asked to run in 32-bit mode."""

    exit_code = 4


def micro_trainer(seed: int = 0, **overrides: Any) -> Trainer:
    """A 3-user, 4-item, d=4, K=2 instance in 64-bit mode for gradient checks."""
    settings: dict[str, Any] = {
        "seed": seed,
        "embed_dim": 4,
        "gnn_layers": 2,
        "top_k": 2,
        "knn_k": 1,
        "expand_r": 1,
        "precision": "float64",
        "lambda_r": 0.3,
        "lambda_ctr": 0.5,
        "tau": 0.5,
        "weight_decay": 1e-3,
        "batch_size": 16,
        "dropout": 0.1,
    }
    settings.update(overrides)
    config = RunConfig.model_validate(settings)
    rng = np.random.default_rng(seed)
    edges = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 3)]
    train = InteractionSet.from_pairs(3, 4, edges)
    split = SplitBundle(
        train=train,
        valid=np.asarray([(0, 2), (1, 3)], dtype=np.int64),
        test=np.asarray([(2, 1)], dtype=np.int64),
        seed=seed,
    )
    features_a = FeatureMatrix.from_array(Modality.APPEARANCE, rng.standard_normal((4, 3)))
    features_s = FeatureMatrix.from_array(Modality.SEMANTICS, rng.standard_normal((4, 2)))
    data = TrainingData.build(config, split, features_a, features_s)
    return Trainer.create(config, data)
