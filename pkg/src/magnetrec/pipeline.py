"""Run orchestration: every CLI subcommand is one Pipeline method."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from rich.console import Console
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn

from magnetrec.config import ConfigError, config_fingerprint, load_config, write_resolved_config
from magnetrec.data import (
    FeatureMatrix,
    IdMap,
    InteractionSet,
    Modality,
    SplitBundle,
    SyntheticSpec,
    generate_synthetic,
    load_catalog_features,
    load_features,
    load_interactions,
    read_dense_pairs,
    read_id_map,
    split_interactions,
    write_features,
    write_id_map,
    write_interactions,
)
from magnetrec.diagnostics import (
    RoutingProfile,
    append_routing_csv,
    profile_model,
    routing_diagnostics,
)
from magnetrec.errors import InputNotFoundError, TrainingAbortedError
from magnetrec.evaluation import MetricReport, evaluate_model, evaluate_popularity
from magnetrec.train import (
    Checkpoint,
    EpochSummary,
    FitResult,
    GradientCheckReport,
    GradientScope,
    Trainer,
    TrainingData,
    fit,
    gradient_check,
    load_checkpoint,
    micro_trainer,
    save_checkpoint,
)

if TYPE_CHECKING:
    from collections.abc import Sequence

    from magnetrec.models import RunConfig

logger = logging.getLogger(__name__)

INTERACTIONS_NAME = "interactions.tsv"
FEATURE_NAMES = {Modality.APPEARANCE: "features_A.mgf", Modality.SEMANTICS: "features_S.mgf"}
DATA_DIR = "data"
GRAPH_DIR = "graph"
CHECKPOINT_DIR = "checkpoint"
METRICS_LOG = "metrics.jsonl"
STEPS_LOG = "steps.jsonl"
ROUTING_CSV = "routing.csv"
REPORT_NAME = "report.json"
PER_USER_NAME = "per_user.csv"
PROFILE_NAME = "profile.json"
GRADCHECK_NAME = "gradcheck.json"
ABORT_DUMP_NAME = "abort_dump.json"

MICRO_INHERITED = (
    "alpha",
    "beta",
    "delta",
    "epsilon",
    "lambda_r",
    "tau",
    "stage_strategy",
    "free_templates",
    "router_init",
    "neg_ratio",
    "mean_bpr",
)


@dataclass
class PreparedData:
    """Split, id maps, and aligned features as written by ``prepare``."""

    split: SplitBundle
    user_map: IdMap
    item_map: IdMap
    features_a: FeatureMatrix
    features_s: FeatureMatrix


@dataclass
class EvaluationResult:
    split: str
    model: MetricReport
    popularity: MetricReport
    checkpoint_epoch: int

    def to_json(self) -> dict[str, Any]:
        return {
            "split": self.split,
            "checkpoint_epoch": self.checkpoint_epoch,
            "model": self.model.to_json(),
            "popularity": self.popularity.to_json(),
        }


def _write_json(path: Path, payload: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _append_jsonl(path: Path, record: dict[str, Any]) -> None:
    with path.open("a", encoding="utf-8") as f:
        f.write(json.dumps(record) + "\n")


@dataclass
class Pipeline:
    """Owns the resolved config and the output directory of one run."""

    config: RunConfig
    out_dir: Path
    threads: int = 1
    console: Console = field(default_factory=Console)

    @classmethod
    def from_config_file(
        cls,
        out_dir: Path,
        config_path: Path | None = None,
        overrides: Sequence[str] = (),
        extra: dict[str, Any] | None = None,
        threads: int = 1,
        console: Console | None = None,
    ) -> Pipeline:
        """Resolve the configuration and persist it before any work starts."""
        config = load_config(config_path, tuple(overrides), extra)
        write_resolved_config(config, out_dir)
        return cls(config, out_dir, threads, console or Console())

    @property
    def data_dir(self) -> Path:
        if self.config.data_dir is not None:
            return Path(self.config.data_dir)
        return self.out_dir / DATA_DIR

    @property
    def graph_dir(self) -> Path:
        return self.data_dir.parent / GRAPH_DIR

    def _required_path(self, key: str) -> Path:
        value = getattr(self.config, key)
        if value is None:
            msg = f"'{key}' must be set (config file or --set {key}=PATH)"
            raise ConfigError(msg)
        return Path(value)

    def synth(self) -> InteractionSet:
        """Generate the planted dataset into the output directory."""
        c = self.config
        spec = SyntheticSpec(
            num_users=c.synth_users,
            num_items=c.synth_items,
            num_blocks=c.synth_blocks,
            feature_dim_a=c.synth_dim_a,
            feature_dim_s=c.synth_dim_s,
            density=c.synth_density,
            noise=c.synth_noise,
            feature_noise=c.synth_feature_noise,
            min_user_items=c.min_interactions,
            seed=c.seed,
        )
        data, features_a, features_s = generate_synthetic(spec)
        write_interactions(
            self.out_dir / INTERACTIONS_NAME, data.edges, data.user_map, data.item_map
        )
        write_features(self.out_dir / FEATURE_NAMES[Modality.APPEARANCE], features_a)
        write_features(self.out_dir / FEATURE_NAMES[Modality.SEMANTICS], features_s)
        logger.info(
            "Synthesized %d users, %d items, %d edges",
            data.num_users,
            data.num_items,
            data.num_edges,
        )
        return data

    def prepare(self) -> TrainingData:
        """Load raw inputs, split, align features, and build the graph cache."""
        c = self.config
        data = load_interactions(self._required_path("interactions"), c.min_interactions)
        assert data.user_map is not None and data.item_map is not None
        features_a = load_catalog_features(
            self._required_path("features_a"), Modality.APPEARANCE, data.item_map
        )
        features_s = load_catalog_features(
            self._required_path("features_s"), Modality.SEMANTICS, data.item_map
        )
        split = split_interactions(data, c.split_ratios, c.seed)

        out = self.data_dir
        write_id_map(out / "users.tsv", data.user_map)
        write_id_map(out / "items.tsv", data.item_map)
        write_interactions(out / "train.tsv", split.train.edges)
        write_interactions(out / "valid.tsv", split.valid)
        write_interactions(out / "test.tsv", split.test)
        write_features(out / FEATURE_NAMES[Modality.APPEARANCE], features_a)
        write_features(out / FEATURE_NAMES[Modality.SEMANTICS], features_s)
        return TrainingData.build(c, split, features_a, features_s, self.threads, self.graph_dir)

    def load_prepared(self) -> PreparedData:
        """Read the split and aligned features written by ``prepare``."""
        root = self.data_dir
        if not root.is_dir():
            raise InputNotFoundError(root, "prepared data directory (run 'magnet prepare' first)")
        user_map = read_id_map(root / "users.tsv")
        item_map = read_id_map(root / "items.tsv")
        train = InteractionSet.from_pairs(
            len(user_map), len(item_map), read_dense_pairs(root / "train.tsv"), user_map, item_map
        )
        split = SplitBundle(
            train=train,
            valid=read_dense_pairs(root / "valid.tsv"),
            test=read_dense_pairs(root / "test.tsv"),
            seed=self.config.seed,
        )
        features_a = load_features(
            root / FEATURE_NAMES[Modality.APPEARANCE], Modality.APPEARANCE, len(item_map)
        )
        features_s = load_features(
            root / FEATURE_NAMES[Modality.SEMANTICS], Modality.SEMANTICS, len(item_map)
        )
        return PreparedData(split, user_map, item_map, features_a, features_s)

    def training_data(self, prepared: PreparedData | None = None) -> TrainingData:
        prepared = prepared or self.load_prepared()
        return TrainingData.build(
            self.config,
            prepared.split,
            prepared.features_a,
            prepared.features_s,
            self.threads,
            self.graph_dir,
        )

    def train(self, show_progress: bool = False) -> FitResult:
        """Fit a model and write logs, routing rows, and the best checkpoint.

        Raises:
            TrainingAbortedError: On a non-finite loss, after writing
                ``abort_dump.json``.
        """
        trainer = Trainer.create(self.config, self.training_data())
        for name in (METRICS_LOG, STEPS_LOG, ROUTING_CSV):
            (self.out_dir / name).unlink(missing_ok=True)

        metrics_path = self.out_dir / METRICS_LOG
        steps_path = self.out_dir / STEPS_LOG
        routing_path = self.out_dir / ROUTING_CSV
        pool = trainer.model.pool

        progress = Progress(
            TextColumn("[bold blue]epoch {task.completed}/{task.total}"),
            BarColumn(),
            TextColumn("{task.fields[status]}"),
            TimeElapsedColumn(),
            console=self.console,
            disable=not show_progress,
        )
        task = progress.add_task("train", total=self.config.max_epochs, status="")

        def on_step(record: dict[str, Any]) -> None:
            _append_jsonl(steps_path, record)

        def on_epoch(summary: EpochSummary) -> None:
            _append_jsonl(metrics_path, summary.record)
            if pool is not None and summary.mean_routing is not None:
                triplets = pool.effective_triplets().detach().double().numpy()
                profile = routing_diagnostics(
                    summary.mean_routing, pool.group_map, pool.family_map, triplets
                )
                append_routing_csv(routing_path, f"epoch-{summary.record['epoch']}", profile)
            record = summary.record
            status = f"ndcg@20={record['val_ndcg20']:.4f} stage={record['stage']}"
            progress.update(task, advance=1, status=status)

        try:
            with progress:
                result = fit(trainer, on_step, on_epoch)
        except TrainingAbortedError as e:
            _write_json(self.out_dir / ABORT_DUMP_NAME, e.dump)
            raise
        save_checkpoint(self.out_dir / CHECKPOINT_DIR, result.best)
        logger.info(
            "Best epoch %d (val ndcg@20 %.5f) saved to %s",
            result.best.epoch,
            result.best.validation[-1]["val_ndcg20"] if result.best.validation else float("nan"),
            self.out_dir / CHECKPOINT_DIR,
        )
        return result

    def restore_trainer(self, checkpoint_dir: Path | None = None) -> tuple[Trainer, PreparedData]:
        """Rebuild the model from prepared data and load a checkpoint into it."""
        prepared = self.load_prepared()
        trainer = Trainer.create(self.config, self.training_data(prepared))
        checkpoint = load_checkpoint(checkpoint_dir or self.out_dir / CHECKPOINT_DIR)
        if checkpoint.config_fingerprint != config_fingerprint(self.config):
            logger.warning("Checkpoint was written under a different configuration")
        trainer.restore(checkpoint)
        return trainer, prepared

    def evaluate(
        self, split: str = "test", checkpoint_dir: Path | None = None, per_user: bool = False
    ) -> EvaluationResult:
        """Rank the full catalog for ``split`` users and write ``report.json``."""
        trainer, prepared = self.restore_trainer(checkpoint_dir)
        pairs = prepared.split.pairs(split)
        train = prepared.split.train
        cutoffs = self.config.eval_cutoffs
        model_report = evaluate_model(trainer.model, pairs, train, cutoffs)
        popularity = evaluate_popularity(pairs, train, cutoffs)
        result = EvaluationResult(split, model_report, popularity, trainer.epoch)
        _write_json(self.out_dir / REPORT_NAME, result.to_json())
        if per_user:
            model_report.write_per_user_csv(
                self.out_dir / PER_USER_NAME, list(prepared.user_map.external)
            )
        return result

    def diagnose(self, split: str = "test", checkpoint_dir: Path | None = None) -> RoutingProfile:
        """Profile dataset-level routing on ``split``."""
        trainer, prepared = self.restore_trainer(checkpoint_dir)
        profile = profile_model(trainer.model, prepared.split.pairs(split))
        append_routing_csv(self.out_dir / ROUTING_CSV, split, profile)
        _write_json(self.out_dir / PROFILE_NAME, {"split": split, **profile.to_json()})
        return profile

    def gradcheck(
        self,
        scopes: Sequence[GradientScope] = tuple(GradientScope),
        tolerance: float = 1e-4,
        corrupt: tuple[str, int] | None = None,
    ) -> list[GradientCheckReport]:
        """Run the finite-difference oracle on the micro instance for each scope."""
        inherited = {key: getattr(self.config, key) for key in MICRO_INHERITED}
        reports: list[GradientCheckReport] = []
        for scope in scopes:
            trainer = micro_trainer(self.config.seed, **inherited)
            reports.append(gradient_check(trainer, scope, tolerance=tolerance, corrupt=corrupt))
        _write_json(
            self.out_dir / GRADCHECK_NAME,
            {
                "passed": all(r.passed for r in reports),
                "reports": [r.to_json() for r in reports],
            },
        )
        return reports


def replay_validation(trainer: Trainer) -> float:
    """Validation NDCG@20 of the trainer's current parameters."""
    split = trainer.data.split
    return evaluate_model(trainer.model, split.valid, split.train, (20,)).ndcg[20]


def checkpoint_summary(checkpoint: Checkpoint) -> dict[str, Any]:
    last = checkpoint.validation[-1] if checkpoint.validation else {}
    return {
        "epoch": checkpoint.epoch,
        "global_step": checkpoint.global_step,
        "val_ndcg20": last.get("val_ndcg20"),
        "params": int(sum(np.asarray(v).size for v in checkpoint.parameters.values())),
    }
