"""Routing entropy statistics and the two-stage regularizer schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy.special import entr

from magnetrec.errors import ModelError
from magnetrec.models import RoutingRegime, StageStrategy, SwitchMode

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    from magnetrec.models import RunConfig


class EmptyBatchError(ModelError):
    """Raised when entropy statistics are requested for no tokens."""


def distribution_entropy(p: ArrayLike) -> NDArray[np.float64]:
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    return np.asarray(entr(np.clip(np.asarray(p, dtype=np.float64), 0.0, None)).sum(axis=-1))


@dataclass(frozen=True)
class EntropyStats:
    """Entropy of the batch-mean routing distribution."""

    mean_routing: NDArray[np.float64]
    entropy: float
    normalized: float
    effective_experts: float
    instance_entropy: float

    @property
    def num_experts(self) -> int:
        return int(self.mean_routing.size)

    def to_record(self) -> dict[str, float]:
        return {
            "H": self.entropy,
            "H_norm": self.normalized,
            "N_eff": self.effective_experts,
            "H_inst": self.instance_entropy,
        }


def batch_entropy_stats(routings: ArrayLike) -> EntropyStats:
    """Entropy statistics of the mean of per-token dense routings.

    Args:
        routings: ``(B, E)`` dense routing distributions of positive pairs.

    Raises:
        EmptyBatchError: If there are no rows.
    """
    pi = np.asarray(routings, dtype=np.float64)
    if pi.ndim != 2 or pi.shape[0] == 0:
        msg = "Entropy statistics need at least one routing distribution"
        raise EmptyBatchError(msg)
    mean = pi.mean(axis=0)
    h = float(distribution_entropy(mean))
    num_experts = pi.shape[1]
    h_norm = h / math.log(num_experts) if num_experts > 1 else 0.0
    return EntropyStats(
        mean_routing=mean,
        entropy=h,
        normalized=min(max(h_norm, 0.0), 1.0),
        effective_experts=math.exp(h),
        instance_entropy=float(distribution_entropy(pi).mean()),
    )


@dataclass(frozen=True)
class ScheduleState:
    """Immutable snapshot of the stage controller.

    ``switch_step`` is only used by the fixed-step mode; ``pinned`` freezes
    the stage for the single-regularizer regimes.
    """

    stage: int = 1
    counter: int = 0
    threshold: float = 0.90
    window: int = 3
    lambda_r: float = 0.30
    strategy: StageStrategy = StageStrategy.LIN_ENT
    switch_mode: SwitchMode = SwitchMode.ENTROPY
    switch_step: int | None = None
    pinned: bool = False
    step: int = 0

    @classmethod
    def from_config(cls, config: RunConfig, steps_per_epoch: int) -> ScheduleState:
        switch_step = None
        if config.switch_mode == SwitchMode.FIXED_STEP:
            switch_step = math.ceil(config.max_epochs / 2) * steps_per_epoch
        stage = 2 if config.routing_regime == RoutingRegime.CONFIDENCE_ONLY else 1
        return cls(
            stage=stage,
            threshold=config.entropy_threshold,
            window=config.trigger_window,
            lambda_r=config.lambda_r,
            strategy=config.stage_strategy,
            switch_mode=config.switch_mode,
            switch_step=switch_step,
            pinned=config.routing_regime != RoutingRegime.FULL,
        )

    def to_record(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "n": self.counter,
            "threshold": self.threshold,
            "window": self.window,
            "lambda_r": self.lambda_r,
            "strategy": self.strategy.value,
            "switch_mode": self.switch_mode.value,
            "switch_step": self.switch_step,
            "pinned": self.pinned,
            "step": self.step,
        }

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> ScheduleState:
        return cls(
            stage=int(record["stage"]),
            counter=int(record["n"]),
            threshold=float(record["threshold"]),
            window=int(record["window"]),
            lambda_r=float(record["lambda_r"]),
            strategy=StageStrategy(record["strategy"]),
            switch_mode=SwitchMode(record["switch_mode"]),
            switch_step=record["switch_step"],
            pinned=bool(record["pinned"]),
            step=int(record["step"]),
        )


def update_stage(state: ScheduleState, h_norm: float) -> ScheduleState:
    """Advance the controller by one step.

    The counter grows while ``h_norm >= threshold`` and resets otherwise;
    stage 1 becomes stage 2 once the counter reaches the window, and never
    goes back. In fixed-step mode the counter is still tracked but the
    switch happens at ``switch_step`` completed updates.
    """
    counter = state.counter + 1 if h_norm >= state.threshold else 0
    step = state.step + 1
    stage = state.stage
    if stage == 1 and not state.pinned:
        if state.switch_mode == SwitchMode.FIXED_STEP:
            if state.switch_step is not None and step > state.switch_step:
                stage = 2
        elif counter >= state.window:
            stage = 2
    return replace(state, stage=stage, counter=counter, step=step)


def stage_weights(state: ScheduleState, h_norm: float) -> tuple[float, float]:
    """``(lambda_cov, lambda_conf)`` for the current stage and entropy."""
    lam = state.lambda_r
    if state.strategy == StageStrategy.CONST:
        cov, conf = lam, lam
    elif state.strategy == StageStrategy.REV_ENT:
        cov, conf = lam * h_norm, lam * (1.0 - h_norm)
    elif state.strategy == StageStrategy.QUAD_ENT:
        cov, conf = lam * (1.0 - h_norm) ** 2, lam * h_norm**2
    else:
        cov, conf = lam * (1.0 - h_norm), lam * h_norm
    if state.stage == 1:
        return cov, 0.0
    return 0.0, conf
