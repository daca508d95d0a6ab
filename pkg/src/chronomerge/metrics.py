"""Evaluation quantities: knowledge accumulation, zero-shot retention,
and their geometric mean, assembled into per-task trajectory rows."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import EmptyHoldout
from .toybench import ToyBench, evaluate


@dataclass(frozen=True)
class MetricsRow:
    """One trajectory point. geo_mean is always sqrt(a_ka * a_zs)."""

    t: int
    a_ka: float
    a_zs: float
    geo_mean: float
    wall_time: float = 0.0


def knowledge_accumulation(model, bench: ToyBench) -> float:
    """Mean accuracy over every adaptation task, seen or not.

    The denominator is the full adaptation suite at every step, so
    trajectories at different t are directly comparable.
    """
    scores = [evaluate(model, task) for task in bench.adaptation_tasks]
    return float(sum(scores) / len(scores))


def zero_shot_retention(model, bench: ToyBench) -> float:
    """Mean accuracy over the holdout tasks that were never trained on."""
    if not bench.holdout_tasks:
        raise EmptyHoldout("benchmark has no holdout tasks")
    scores = [evaluate(model, task) for task in bench.holdout_tasks]
    return float(sum(scores) / len(scores))


def geometric_mean(a_ka: float, a_zs: float) -> float:
    return math.sqrt(a_ka * a_zs)


def metrics_row(model, bench: ToyBench, t: int, wall_time: float = 0.0) -> MetricsRow:
    a_ka = knowledge_accumulation(model, bench)
    a_zs = zero_shot_retention(model, bench)
    return MetricsRow(t, a_ka, a_zs, geometric_mean(a_ka, a_zs), wall_time)
