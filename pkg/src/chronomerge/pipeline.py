"""The per-task temporal merging loop: Init, Train, Store, Deploy, Eval.

Each task picks initialization weights from one of three protocols (the
original base, the latest expert, or a running average), trains an expert
on the task's data, appends it to the on-disk expert buffer, then deploys
either the fresh expert, the running average, or a merge over the whole
buffer. Only trained experts are ever persisted; initialization and
deployed weights are recomputable from the buffer.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointBuffer, structural_check
from .errors import ConfigError, EmptyBuffer
from .merge import (
    MergeConfig,
    PAIRWISE,
    Technique,
    merge,
    merge_all,
    weight_average,
)
from .metrics import MetricsRow, metrics_row
from .seeding import TAG_MODEL_INIT, TAG_TRAIN, derive_seed
from .toybench import ToyBench, TaskDataset, init_model, train


class InitProtocol(str, Enum):
    ZS = "zs"
    FT = "ft"
    EMA = "ema"


class DeployProtocol(str, Enum):
    FT = "ft"
    EMA = "ema"
    ALL = "all"


@dataclass(frozen=True)
class PipelineConfig:
    """Initialization protocol x deployment protocol x merge technique,
    plus the training budget and optional past-task replay."""

    init_protocol: InitProtocol = InitProtocol.EMA
    deploy_protocol: DeployProtocol = DeployProtocol.EMA
    merge_config: MergeConfig = field(default_factory=MergeConfig)
    task_count: int = 20
    steps_per_task: int = 200
    batch_size: int = 32
    peak_lr: float = 0.05
    replay: bool = False
    replay_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "init_protocol", InitProtocol(self.init_protocol))
        object.__setattr__(self, "deploy_protocol", DeployProtocol(self.deploy_protocol))
        if (
            self.init_protocol is InitProtocol.ZS
            and self.deploy_protocol is DeployProtocol.FT
        ):
            raise ConfigError(
                "init=zs with deploy=ft would deploy experts that never see past "
                "knowledge; this pair is rejected"
            )
        if self.task_count < 1:
            raise ConfigError(f"task_count {self.task_count} must be >= 1")
        if self.steps_per_task < 0:
            raise ConfigError("steps_per_task must be >= 0")
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ConfigError("replay_fraction must be in [0, 1]")


@dataclass
class PipelineState:
    """Mutable loop state: base weights, expert buffer, running average."""

    theta_0: Checkpoint
    buffer: CheckpointBuffer
    ema: Checkpoint | None = None
    t: int = 0
    deployed: Checkpoint | None = None


@dataclass
class RunResult:
    rows: list[MetricsRow]
    zero_shot_row: MetricsRow
    theta_0: Checkpoint
    final_deployed: Checkpoint
    deployed: list[Checkpoint] | None = None
    buffer_dir: str | None = None


def init_weights(state: PipelineState, config: PipelineConfig) -> Checkpoint:
    """Starting weights for the current task per the init protocol.

    With no history yet (t = 1), every protocol starts from the base.
    """
    proto = config.init_protocol
    if proto is InitProtocol.ZS:
        return state.theta_0
    if proto is InitProtocol.FT:
        return state.buffer.last() if len(state.buffer) else state.theta_0
    if state.ema is not None:
        return state.ema
    return state.theta_0


def _tv_norm(a: Checkpoint, b: Checkpoint) -> float:
    sq = 0.0
    for name in a.names():
        diff = a.tensor(name).astype(np.float64) - b.tensor(name).astype(np.float64)
        sq += float(np.sum(diff * diff))
    return float(np.sqrt(sq))


def update_ema(state: PipelineState, new_expert: Checkpoint, config: PipelineConfig) -> Checkpoint:
    """Fold the new expert into the running average; returns and stores it.

    The accumulator starts at the base weights. Plain averaging uses the
    weighted pair ((1-w) old, w new). Task-vector techniques read the old
    average as their base and fold the expert in with scale w, so w keeps
    its meaning as the pull toward the newest expert. The angle-based
    pairwise techniques need a third reference point for their task
    vectors, so they interpolate old and new around the original base;
    while the average still sits on the base (no direction to measure),
    they fall back to the weighted pair.
    """
    mc = config.merge_config
    structural_check(state.theta_0, new_expert)
    previous = state.ema if state.ema is not None else state.theta_0
    w = mc.ema_weight
    tech = mc.technique
    if tech is Technique.WA:
        updated = weight_average([previous, new_expert], [1.0 - w, w])
    elif tech in PAIRWISE:
        if previous is state.theta_0 or _tv_norm(previous, state.theta_0) < 1e-12:
            updated = weight_average([previous, new_expert], [1.0 - w, w])
        else:
            pair_cfg = replace(mc, slerp_weight=w)
            updated = merge(
                pair_cfg, state.theta_0, [previous, new_expert], seed_context=state.t
            )
    elif w == 0.0:
        updated = previous
    else:
        fold_cfg = replace(mc, lambda_scale=w)
        updated = merge(fold_cfg, previous, [new_expert], seed_context=state.t)
    state.ema = updated
    return updated


def deploy(state: PipelineState, config: PipelineConfig) -> Checkpoint:
    """Output weights after the current task per the deploy protocol."""
    if len(state.buffer) == 0:
        raise EmptyBuffer("nothing trained yet; deploy needs at least one expert")
    proto = config.deploy_protocol
    if proto is DeployProtocol.FT:
        return state.buffer.last()
    if proto is DeployProtocol.EMA:
        return state.ema
    return merge_all(
        config.merge_config, state.theta_0, state.buffer.readers(), seed_context=state.t
    )


def _replay_pool(bench: ToyBench, upto: int) -> tuple[np.ndarray, np.ndarray] | None:
    """Stacked samples of adaptation tasks 1..upto (exclusive of current)."""
    if upto < 1:
        return None
    past = bench.adaptation_tasks[:upto]
    x = np.vstack([task.inputs for task in past])
    y = np.concatenate([task.labels for task in past])
    return x, y


def run_stream(
    config: PipelineConfig,
    bench: ToyBench,
    hidden=(32, 32),
    seed: int = 0,
    out_dir=None,
    keep_deployed: bool = False,
) -> RunResult:
    """Execute the five-stage loop for every task; returns the trajectory.

    Deterministic given (config, bench, hidden, seed). The expert buffer
    lands in <out_dir>/buffer when out_dir is given, otherwise in a
    temporary directory that is removed afterwards.
    """
    if config.task_count > len(bench.adaptation_tasks):
        raise ConfigError(
            f"config wants {config.task_count} tasks but the bench has "
            f"{len(bench.adaptation_tasks)}"
        )
    theta_0 = init_model(
        bench.input_dim, hidden, bench.class_count, seed=derive_seed(seed, TAG_MODEL_INIT)
    )
    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="chronomerge_")
        buffer_dir = Path(tmp.name) / "buffer"
    else:
        buffer_dir = Path(out_dir) / "buffer"
    try:
        state = PipelineState(theta_0=theta_0, buffer=CheckpointBuffer(buffer_dir))
        rows: list[MetricsRow] = []
        deployed_history: list[Checkpoint] = []
        zero_shot_row = metrics_row(theta_0, bench, 0)
        for t in range(1, config.task_count + 1):
            started = time.perf_counter()
            state.t = t
            theta_i = init_weights(state, config)
            task = bench.adaptation_tasks[t - 1]
            pool = _replay_pool(bench, t - 1) if config.replay else None
            expert = train(
                theta_i,
                task,
                steps=config.steps_per_task,
                peak_lr=config.peak_lr,
                batch_size=config.batch_size,
                seed=derive_seed(seed, TAG_TRAIN, t),
                replay_pool=pool,
                replay_fraction=config.replay_fraction if pool else 0.0,
            )
            state.buffer.append(expert)
            update_ema(state, expert, config)
            state.deployed = deploy(state, config)
            wall = time.perf_counter() - started
            rows.append(metrics_row(state.deployed, bench, t, wall))
            if keep_deployed:
                deployed_history.append(state.deployed)
        return RunResult(
            rows=rows,
            zero_shot_row=zero_shot_row,
            theta_0=theta_0,
            final_deployed=state.deployed,
            deployed=deployed_history if keep_deployed else None,
            buffer_dir=None if tmp else str(buffer_dir),
        )
    finally:
        if tmp is not None:
            tmp.cleanup()


def multitask_reference(
    bench: ToyBench,
    config: PipelineConfig,
    hidden=(32, 32),
    seed: int = 0,
) -> MetricsRow:
    """Upper-bound run: one model trained on the union of all tasks for
    the combined budget (task_count x steps_per_task), from the same
    initial weights a run_stream with this seed would use."""
    theta_0 = init_model(
        bench.input_dim, hidden, bench.class_count, seed=derive_seed(seed, TAG_MODEL_INIT)
    )
    tasks = bench.adaptation_tasks[: config.task_count]
    union = TaskDataset(
        np.vstack([task.inputs for task in tasks]),
        np.concatenate([task.labels for task in tasks]),
        task_id="multitask",
    )
    model = train(
        theta_0,
        union,
        steps=config.steps_per_task * config.task_count,
        peak_lr=config.peak_lr,
        batch_size=config.batch_size,
        seed=derive_seed(seed, TAG_TRAIN, 0),
    )
    return metrics_row(model, bench, config.task_count)
