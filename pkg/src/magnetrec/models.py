"""Pydantic models for the magnetrec run configuration."""

from __future__ import annotations

import math
from enum import Enum
from typing import Any, final

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class View(str, Enum):
    """Which graph views feed the encoder."""

    DUAL = "dv"  # Observed graph plus content-augmented graph
    SINGLE = "sv"  # Observed graph only


class StageStrategy(str, Enum):
    """How the routing weight is split between the two stages."""

    LIN_ENT = "lin-ent"
    QUAD_ENT = "quad-ent"
    CONST = "const"
    REV_ENT = "rev-ent"


class SwitchMode(str, Enum):
    """What triggers the stage-1 to stage-2 switch."""

    ENTROPY = "entropy"  # Consecutive high-entropy window
    FIXED_STEP = "fixed-step"  # Halfway through max_epochs


class RoutingRegime(str, Enum):
    """Which routing regularizers are active over a run."""

    FULL = "full"  # Coverage, then confidence
    COVERAGE_ONLY = "coverage-only"  # Stage pinned to 1
    CONFIDENCE_ONLY = "confidence-only"  # Stage pinned to 2


class Precision(str, Enum):
    """Floating point width of model parameters."""

    FLOAT32 = "float32"
    FLOAT64 = "float64"


class RouterInit(str, Enum):
    """Router parameter initialization."""

    XAVIER = "xavier"
    UNIFORM = "uniform"  # Zero weights, exactly uniform routing


class ExpertFamily(str, Enum):
    """Triplet template families."""

    DOM = "dom"
    BAL = "bal"
    COM = "com"


@final
class RunConfig(BaseModel):
    """Every effective setting of a run.

    The file format is flat on purpose: each field is addressable with
    ``--set key=value`` and the resolved file can be replayed verbatim.
    Defaults follow the Baby dataset settings.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Paths
    interactions: str | None = None
    features_a: str | None = None
    features_s: str | None = None
    data_dir: str | None = None

    # Data
    seed: int = 2026
    min_interactions: int = Field(default=4, ge=1)
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    # Graph
    knn_k: int = Field(default=20, ge=1)
    expand_r: int = Field(default=150, ge=1)
    view: View = View.DUAL

    # Encoder
    embed_dim: int = Field(default=64, ge=1)
    gnn_layers: int = Field(default=2, ge=0)
    fanout: int | None = Field(default=None, ge=1)

    # Mixture of experts
    use_moe: bool = True
    experts: int | None = Field(default=None, ge=1)
    expert_split: int = Field(default=1, ge=1)
    expert_families: tuple[ExpertFamily, ...] = (
        ExpertFamily.DOM,
        ExpertFamily.BAL,
        ExpertFamily.COM,
    )
    top_k: int = Field(default=4, ge=1)
    alpha: float = Field(default=0.6, ge=0.0, le=1.0)
    beta: float = Field(default=0.2, ge=0.0, le=1.0)
    delta: float = Field(default=0.5, ge=0.0, le=1.0)
    epsilon: float = Field(default=0.05, gt=0.0, lt=1.0 / 3.0)
    free_templates: bool = False
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    router_init: RouterInit = RouterInit.XAVIER

    # Schedule
    entropy_threshold: float = Field(default=0.90, ge=0.0, le=1.0)
    trigger_window: int = Field(default=3, ge=1)
    lambda_r: float = Field(default=0.30, ge=0.0)
    stage_strategy: StageStrategy = StageStrategy.LIN_ENT
    switch_mode: SwitchMode = SwitchMode.ENTROPY
    routing_regime: RoutingRegime = RoutingRegime.FULL

    # Losses
    lambda_ctr: float = Field(default=0.01, ge=0.0)
    view_ctr: bool = True
    tau: float = Field(default=0.5, gt=0.0)
    weight_decay: float = Field(default=2e-5, ge=0.0)
    mean_bpr: bool = False

    # Training
    batch_size: int = Field(default=1024, ge=1)
    neg_ratio: int = Field(default=1, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    max_epochs: int = Field(default=200, ge=1)
    patience: int = Field(default=5, ge=1)
    precision: Precision = Precision.FLOAT32
    log_wallclock: bool = True

    # Evaluation
    eval_cutoffs: tuple[int, ...] = (10, 20)
    eval_batch_users: int = Field(default=256, ge=1)

    # Synthetic fixture
    synth_users: int = Field(default=200, ge=1)
    synth_items: int = Field(default=120, ge=2)
    synth_blocks: int = Field(default=4, ge=1)
    synth_dim_a: int = Field(default=32, ge=1)
    synth_dim_s: int = Field(default=16, ge=1)
    synth_density: float = Field(default=0.1, gt=0.0, lt=1.0)
    synth_noise: float = Field(default=0.1, ge=0.0, le=1.0)
    synth_feature_noise: float = Field(default=0.5, ge=0.0)

    @field_validator("split_ratios")
    @classmethod
    def validate_split_ratios(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(r < 0 for r in v):
            msg = f"split ratios must be nonnegative, got {list(v)}"
            raise ValueError(msg)
        if not math.isclose(sum(v), 1.0, abs_tol=1e-9):
            msg = f"split ratios must sum to 1, got {sum(v)}"
            raise ValueError(msg)
        if v[0] <= 0:
            msg = "train ratio must be positive"
            raise ValueError(msg)
        return v

    @field_validator("expert_families")
    @classmethod
    def validate_families(cls, v: tuple[ExpertFamily, ...]) -> tuple[ExpertFamily, ...]:
        if not v:
            msg = "at least one expert family is required"
            raise ValueError(msg)
        if len(set(v)) != len(v):
            msg = "expert families must not repeat"
            raise ValueError(msg)
        # Canonical Dom, Bal, Com order keeps expert indices stable
        order = list(ExpertFamily)
        return tuple(sorted(v, key=order.index))

    @field_validator("eval_cutoffs")
    @classmethod
    def validate_cutoffs(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if not v or any(n < 1 for n in v):
            msg = "cutoffs must be positive integers"
            raise ValueError(msg)
        return tuple(sorted(set(v)))

    @model_validator(mode="after")
    def validate_expert_count(self) -> RunConfig:
        pool_size = 3 * len(self.expert_families) * self.expert_split
        if self.experts is not None and self.experts != pool_size:
            msg = (
                f"experts={self.experts} does not match the pool size "
                f"3 x {len(self.expert_families)} families x split {self.expert_split} "
                f"= {pool_size}"
            )
            raise ValueError(msg)
        if self.use_moe and self.top_k > pool_size:
            msg = f"top_k={self.top_k} exceeds the number of experts ({pool_size})"
            raise ValueError(msg)
        if self.synth_users % self.synth_blocks or self.synth_items % self.synth_blocks:
            msg = "synth_blocks must divide both synth_users and synth_items"
            raise ValueError(msg)
        return self

    @property
    def num_experts(self) -> int:
        """Pool size E = 3 x families x split."""
        return 3 * len(self.expert_families) * self.expert_split

    @property
    def dual_view(self) -> bool:
        return self.view == View.DUAL

    def to_json_dict(self) -> dict[str, Any]:
        """All effective values in a JSON-ready form."""
        return self.model_dump(mode="json")
