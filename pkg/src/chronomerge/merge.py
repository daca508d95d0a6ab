"""Checkpoint merging techniques and merge-coefficient schemes.

All functions are pure: they take checkpoints (or streaming file readers,
anything with names()/shape()/tensor()) and return a new Checkpoint.
Work proceeds one tensor name at a time, accumulating in float64 and
materializing float32 results, so memory stays at one tensor times the
number of candidates.

Techniques: plain weight averaging, spherical interpolation (SLERP), task
arithmetic, TIES and its DARE / Breadcrumbs / LiNeS variants, Model Stock,
and maximum-magnitude selection (MagMax).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .checkpoint import Checkpoint, TaskVector, structural_check
from .errors import (
    ArityError,
    ConfigError,
    EmptyInput,
    InvalidCount,
    InvalidProbability,
    InvalidThresholds,
    WeightMismatch,
    ZeroTaskVector,
)
from .seeding import derive_rng

_PARALLEL_ANGLE = 1e-6  # below this angle SLERP degenerates to lerp
_ZERO_NORM = 1e-12

_LAYER_RE = re.compile(r"^layer\.(\d+)\.")


class Technique(str, Enum):
    WA = "wa"
    SLERP = "slerp"
    TA = "ta"
    TIES = "ties"
    DARE_TIES = "dare_ties"
    BREADCRUMBS_TIES = "breadcrumbs_ties"
    MODEL_STOCK = "model_stock"
    MAGMAX = "magmax"
    LINES_TIES = "lines_ties"


#: techniques that interpolate exactly two candidates at a time
PAIRWISE = (Technique.SLERP, Technique.MODEL_STOCK)

#: techniques that need a base checkpoint to form task vectors
NEEDS_BASE = tuple(t for t in Technique if t is not Technique.WA)


class Weighting(str, Enum):
    UNIFORM = "uniform"
    LINEAR = "linear"
    SQRT = "sqrt"
    QUADRATIC = "quadratic"
    CUBIC = "cubic"
    FIFTH = "fifth"
    TENTH = "tenth"
    EXP = "exp"
    LOG = "log"


@dataclass(frozen=True)
class MergeConfig:
    """A merging technique plus every hyperparameter any technique reads.

    Only the fields relevant to the chosen technique are consulted:
    lambda_scale for the task-vector family, slerp_weight for SLERP,
    prune_fraction for the TIES family, dare_p / bread_beta / bread_gamma /
    lines_alpha / lines_beta for the respective variants, ema_weight for
    running-average folds, and (weighting, reversed_weights) wherever a
    coefficient vector over candidates is consumed.
    """

    technique: Technique = Technique.WA
    lambda_scale: float = 1.0
    slerp_weight: float = 0.5
    prune_fraction: float = 0.2
    dare_p: float = 0.5
    bread_beta: float = 0.1
    bread_gamma: float = 0.1
    lines_alpha: float = 0.5
    lines_beta: float = 0.5
    ema_weight: float = 0.5
    weighting: Weighting = Weighting.UNIFORM
    reversed_weights: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "technique", Technique(self.technique))
        object.__setattr__(self, "weighting", Weighting(self.weighting))
        checks = [
            (0.0 < self.lambda_scale <= 1.0, "lambda_scale must be in (0, 1]"),
            (0.0 <= self.slerp_weight <= 1.0, "slerp_weight must be in [0, 1]"),
            (0.0 <= self.prune_fraction < 1.0, "prune_fraction must be in [0, 1)"),
            (0.0 <= self.dare_p < 1.0, "dare_p must be in [0, 1)"),
            (0.0 <= self.bread_beta < 0.5, "bread_beta must be in [0, 0.5)"),
            (0.0 <= self.bread_gamma < 0.5, "bread_gamma must be in [0, 0.5)"),
            (np.isfinite(self.lines_alpha), "lines_alpha must be finite"),
            (np.isfinite(self.lines_beta), "lines_beta must be finite"),
            # closed interval: the degenerate endpoints (freeze / track
            # latest) are legitimate running-average behaviors
            (0.0 <= self.ema_weight <= 1.0, "ema_weight must be in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _t64(provider, name: str) -> np.ndarray:
    return provider.tensor(name).astype(np.float64).ravel()


def _materialize(provider) -> Checkpoint:
    if isinstance(provider, Checkpoint):
        return provider
    return Checkpoint({name: provider.tensor(name) for name in provider.names()})


def _check_candidates(base, candidates):
    if not candidates:
        raise EmptyInput("at least one candidate checkpoint is required")
    ref = base if base is not None else candidates[0]
    for cand in candidates:
        structural_check(ref, cand)


def normalized_weights(weights, count: int) -> np.ndarray:
    """Validate a coefficient vector: length, non-negativity, unit sum."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != count:
        raise WeightMismatch(f"{w.size} weights for {count} candidates")
    if np.any(w < 0.0):
        raise WeightMismatch("weights must be non-negative")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise WeightMismatch(f"weights sum to {w.sum()!r}, expected 1")
    return w


def _resolve_weights(weights, count: int) -> np.ndarray:
    if weights is None:
        return np.full(count, 1.0 / count)
    return normalized_weights(weights, count)


def parse_layer_index(name: str) -> int | None:
    """Layer index from a ``layer.<l>.<param>`` tensor name, else None."""
    m = _LAYER_RE.match(name)
    return int(m.group(1)) if m else None


def infer_layer_count(names) -> int:
    indices = [parse_layer_index(n) for n in names]
    indices = [i for i in indices if i is not None]
    return max(indices) if indices else 1


def _layer_groups(names, layer_count: int) -> dict[int, list[str]]:
    """Group tensor names by layer; unparseable names join the last layer."""
    groups: dict[int, list[str]] = {}
    for name in names:
        idx = parse_layer_index(name)
        groups.setdefault(idx if idx is not None else layer_count, []).append(name)
    return dict(sorted(groups.items()))


# ---------------------------------------------------------------------------
# techniques
# ---------------------------------------------------------------------------


def weight_average(models, weights=None) -> Checkpoint:
    """Element-wise weighted average; uniform weights when none given."""
    if not models:
        raise EmptyInput("at least one model is required")
    ref = models[0]
    for m in models[1:]:
        structural_check(ref, m)
    w = _resolve_weights(weights, len(models))
    out = {}
    for name in ref.names():
        stack = np.stack([_t64(m, name) for m in models])
        acc = kernels.weighted_sum(stack, w)
        out[name] = acc.astype(np.float32).reshape(ref.shape(name))
    return Checkpoint(out)


def slerp(base: Checkpoint, a, b, lam: float) -> Checkpoint:
    """Spherical interpolation between two fine-tuned models around a base.

    The two task vectors (a - base, b - base) are flattened into single
    direction vectors; with Omega the angle between them, the result is

        base + sin((1-lam)*Omega)/sin(Omega) * d1
             + sin(lam*Omega)/sin(Omega)     * d2

    For nearly parallel directions (Omega below 1e-6 radians) this
    degenerates to linear interpolation of the task vectors. A (near-)zero
    task vector has no direction and raises ZeroTaskVector, as does the
    antipodal case where sin(Omega) vanishes.
    """
    structural_check(base, a)
    structural_check(base, b)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"interpolation weight {lam} outside [0, 1]")
    names = base.names()
    d1 = {name: _t64(a, name) - _t64(base, name) for name in names}
    d2 = {name: _t64(b, name) - _t64(base, name) for name in names}
    flat1 = np.concatenate([d1[n] for n in names])
    flat2 = np.concatenate([d2[n] for n in names])
    n1 = float(np.linalg.norm(flat1))
    n2 = float(np.linalg.norm(flat2))
    if n1 < _ZERO_NORM or n2 < _ZERO_NORM:
        raise ZeroTaskVector("a candidate coincides with the base checkpoint")
    cos = float(np.clip(np.dot(flat1, flat2) / (n1 * n2), -1.0, 1.0))
    omega = float(np.arccos(cos))
    if omega < _PARALLEL_ANGLE:
        c1, c2 = 1.0 - lam, lam
    elif np.pi - omega < _PARALLEL_ANGLE:
        raise ZeroTaskVector("antipodal task vectors, spherical path undefined")
    else:
        s = np.sin(omega)
        c1 = float(np.sin((1.0 - lam) * omega) / s)
        c2 = float(np.sin(lam * omega) / s)
    out = {}
    for name in names:
        acc = _t64(base, name) + c1 * d1[name] + c2 * d2[name]
        out[name] = acc.astype(np.float32).reshape(base.shape(name))
    return Checkpoint(out)


def task_arithmetic(base, experts, lam: float = 1.0, weights=None) -> Checkpoint:
    """base + lam * weighted mean of task vectors (experts - base)."""
    _check_candidates(base, experts)
    if lam <= 0.0:
        raise ValueError(f"scaling factor {lam} must be positive")
    w = _resolve_weights(weights, len(experts))
    out = {}
    for name in base.names():
        b = _t64(base, name)
        stack = np.stack([_t64(e, name) - b for e in experts])
        acc = kernels.weighted_sum(stack, w)
        out[name] = (b + lam * acc).astype(np.float32).reshape(base.shape(name))
    return Checkpoint(out)


def _trim_rows(stack: np.ndarray, prune_fraction: float) -> np.ndarray:
    """Per row, zero the floor(prune_fraction * n) smallest-magnitude
    entries; magnitude ties keep lower indices."""
    n = stack.shape[1]
    drop = int(np.floor(prune_fraction * n))
    if drop == 0:
        return stack
    out = stack.copy()
    for i in range(stack.shape[0]):
        order = np.argsort(-np.abs(stack[i]), kind="stable")
        out[i, order[n - drop :]] = 0.0
    return out


def _ties_core(base, experts, lam, prune_fraction, weights, transform=None) -> Checkpoint:
    _check_candidates(base, experts)
    if not 0.0 <= prune_fraction < 1.0:
        raise ValueError(f"prune fraction {prune_fraction} outside [0, 1)")
    w = _resolve_weights(weights, len(experts))
    out = {}
    for name in base.names():
        b = _t64(base, name)
        rows = []
        for i, e in enumerate(experts):
            d = _t64(e, name) - b
            if transform is not None:
                d = transform(name, i, d)
            rows.append(d)
        stack = _trim_rows(np.stack(rows), prune_fraction)
        merged = kernels.ties_combine(np.ascontiguousarray(stack), w)
        out[name] = (b + lam * merged).astype(np.float32).reshape(base.shape(name))
    return Checkpoint(out)


def ties_merge(base, experts, lam=1.0, prune_fraction=0.0, weights=None) -> Checkpoint:
    """Trim / elect-sign / merge over task vectors.

    Per tensor and per expert, all but the top (1 - prune_fraction)
    fraction of entries by magnitude are zeroed. Each element's sign is
    elected from the sign of the summed trimmed entries (exact zero-sum
    ties elect positive); entries whose sign disagrees (or that were
    trimmed away) are dropped, and the survivors are averaged with the
    given weights, dividing by the weight mass that agreed. The merged
    delta is applied as base + lam * delta.
    """
    return _ties_core(base, experts, lam, prune_fraction, weights)


def _dare_array(d: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if p == 0.0:
        return d
    keep = rng.random(d.size) >= p
    return np.where(keep, d / (1.0 - p), 0.0)


def dare_sparsify(delta: TaskVector, p: float, rng_seed: int) -> TaskVector:
    """Randomly zero entries with probability p and rescale survivors by
    1/(1-p), leaving the expectation unchanged.

    Each tensor draws its mask from a generator seeded by (rng_seed,
    tensor name), so results are reproducible element-for-element.
    """
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"mask probability {p} outside [0, 1)")
    out = {}
    for name in delta.names():
        d = delta.tensor(name).astype(np.float64).ravel()
        masked = _dare_array(d, p, derive_rng(rng_seed, name))
        out[name] = masked.astype(np.float32).reshape(delta.shape(name))
    return TaskVector(out, base_id=delta.base_id)


def dare_ties_merge(
    base, experts, lam=1.0, prune_fraction=0.0, p=0.5, rng_seed=0, weights=None,
    seed_context=0,
) -> Checkpoint:
    """Random sparsification of each task vector, then the TIES combine.

    Mask streams are seeded per (rng_seed, seed_context, expert index,
    tensor name); seed_context lets a caller vary masks across tasks while
    keeping one experiment-level seed.
    """
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"mask probability {p} outside [0, 1)")

    def transform(name, i, d):
        return _dare_array(d, p, derive_rng(rng_seed, seed_context, i, name))

    return _ties_core(base, experts, lam, prune_fraction, weights, transform)


def _bread_array(d: np.ndarray, beta: float, gamma: float) -> np.ndarray:
    n = d.size
    low = int(np.floor(beta * n))
    high = int(np.floor(gamma * n))
    if low == 0 and high == 0:
        return d
    order = np.argsort(np.abs(d), kind="stable")
    out = d.copy()
    out[order[:low]] = 0.0
    if high:
        out[order[n - high :]] = 0.0
    return out


def breadcrumbs_sparsify(delta: TaskVector, beta: float, gamma: float) -> TaskVector:
    """Zero both tails of the magnitude distribution: the bottom
    floor(beta*n) and top floor(gamma*n) entries per tensor."""
    if beta < 0.0 or gamma < 0.0 or beta + gamma >= 1.0:
        raise InvalidThresholds(f"tail fractions beta={beta} gamma={gamma} invalid")
    out = {}
    for name in delta.names():
        d = delta.tensor(name).astype(np.float64).ravel()
        out[name] = _bread_array(d, beta, gamma).astype(np.float32).reshape(delta.shape(name))
    return TaskVector(out, base_id=delta.base_id)


def breadcrumbs_ties_merge(
    base, experts, lam=1.0, prune_fraction=0.0, beta=0.1, gamma=0.1, weights=None
) -> Checkpoint:
    """Tail-trimmed task vectors fed through the TIES combine."""
    if beta < 0.0 or gamma < 0.0 or beta + gamma >= 1.0:
        raise InvalidThresholds(f"tail fractions beta={beta} gamma={gamma} invalid")

    def transform(name, i, d):
        return _bread_array(d, beta, gamma)

    return _ties_core(base, experts, lam, prune_fraction, weights, transform)


def model_stock(base, a, b) -> Checkpoint:
    """Geometric average of two fine-tuned models and their base.

    Per layer, with Omega the angle between the two task vectors, the
    interpolation ratio r = 2*cos(Omega) / (1 + cos(Omega)) blends the
    pairwise midpoint with the base: r * (a+b)/2 + (1-r) * base.
    Coincident experts give r = 1 (the midpoint is returned exactly);
    orthogonal task vectors give r = 0 (the base is returned).
    """
    structural_check(base, a)
    structural_check(base, b)
    names = base.names()
    layer_count = infer_layer_count(names)
    groups = _layer_groups(names, layer_count)
    out = {}
    for layer, group in groups.items():
        d1 = {name: _t64(a, name) - _t64(base, name) for name in group}
        d2 = {name: _t64(b, name) - _t64(base, name) for name in group}
        flat1 = np.concatenate([d1[n] for n in group])
        flat2 = np.concatenate([d2[n] for n in group])
        n1 = float(np.linalg.norm(flat1))
        n2 = float(np.linalg.norm(flat2))
        if n1 < _ZERO_NORM or n2 < _ZERO_NORM:
            raise ZeroTaskVector(f"zero task vector in layer {layer}")
        cos = float(np.clip(np.dot(flat1, flat2) / (n1 * n2), -1.0, 1.0))
        if 1.0 + cos < _ZERO_NORM:
            raise ZeroTaskVector(f"antipodal task vectors in layer {layer}")
        ratio = 2.0 * cos / (1.0 + cos)
        for name in group:
            mid = (_t64(a, name) + _t64(b, name)) / 2.0
            acc = ratio * mid + (1.0 - ratio) * _t64(base, name)
            out[name] = acc.astype(np.float32).reshape(base.shape(name))
    return Checkpoint(out)


def magmax_merge(base, experts, lam: float = 1.0) -> Checkpoint:
    """Per element, keep the task-vector entry with the largest magnitude
    across experts (ties keep the lowest expert index); apply with lam."""
    _check_candidates(base, experts)
    out = {}
    for name in base.names():
        b = _t64(base, name)
        stack = np.stack([_t64(e, name) - b for e in experts])
        sel = kernels.magmax_combine(np.ascontiguousarray(stack))
        out[name] = (b + lam * sel).astype(np.float32).reshape(base.shape(name))
    return Checkpoint(out)


def _lines_scale(name: str, layer_count: int, alpha: float, beta: float) -> float:
    layer = parse_layer_index(name)
    if layer is None:
        layer = layer_count
    if layer_count == 1:
        return alpha
    return alpha + beta * (layer - 1) / (layer_count - 1)


def lines_rescale(delta: TaskVector, layer_count: int, alpha: float, beta: float) -> TaskVector:
    """Depth-proportional rescaling: tensors in layer l are scaled by
    alpha + beta * (l-1)/(L-1), so early layers move least. Names without
    a layer prefix count as the final layer; L = 1 scales everything by
    alpha."""
    if layer_count < 1:
        raise InvalidCount(f"layer count {layer_count} must be >= 1")
    out = {}
    for name in delta.names():
        scale = _lines_scale(name, layer_count, alpha, beta)
        d = delta.tensor(name).astype(np.float64) * scale
        out[name] = d.astype(np.float32)
    return TaskVector(out, base_id=delta.base_id)


def lines_ties_merge(
    base, experts, lam=1.0, prune_fraction=0.0, alpha=0.5, beta=0.5, weights=None,
    layer_count=None,
) -> Checkpoint:
    """Depth-rescaled task vectors fed through the TIES combine."""
    if layer_count is None:
        layer_count = infer_layer_count(base.names())

    def transform(name, i, d):
        return d * _lines_scale(name, layer_count, alpha, beta)

    return _ties_core(base, experts, lam, prune_fraction, weights, transform)


# ---------------------------------------------------------------------------
# coefficient schemes and dispatch
# ---------------------------------------------------------------------------

_SCHEME_FNS = {
    Weighting.UNIFORM: lambda i: np.ones_like(i),
    Weighting.LINEAR: lambda i: i,
    Weighting.SQRT: np.sqrt,
    Weighting.QUADRATIC: lambda i: i**2,
    Weighting.CUBIC: lambda i: i**3,
    Weighting.FIFTH: lambda i: i**5,
    Weighting.TENTH: lambda i: i**10,
    Weighting.EXP: lambda i: 2.0 ** (i - 1.0),
    Weighting.LOG: lambda i: np.log(i + 1.0),
}


def recency_weights(n: int, scheme=Weighting.UNIFORM, reverse: bool = False) -> np.ndarray:
    """Merge coefficients over n candidates ordered oldest to newest.

    Raw values per scheme at position i = 1..n (linear i, sqrt(i), i^2,
    i^3, i^5, i^10, 2^(i-1), ln(i+1), or all-ones) are normalized to sum
    to one. reverse flips the list so older candidates weigh more.
    """
    if n < 1:
        raise InvalidCount(f"candidate count {n} must be >= 1")
    scheme = Weighting(scheme)
    raw = _SCHEME_FNS[scheme](np.arange(1, n + 1, dtype=np.float64))
    values = raw / raw.sum()
    if reverse:
        values = values[::-1].copy()
    return values


def merge(config: MergeConfig, base, candidates, seed_context: int = 0) -> Checkpoint:
    """Dispatch to the configured technique.

    base may be None only for plain weight averaging. Pairwise techniques
    (SLERP, Model Stock) require exactly two candidates here; use
    merge_all for the left-to-right fold over longer candidate lists.
    """
    if not candidates:
        raise EmptyInput("no candidates to merge")
    tech = config.technique
    if tech in PAIRWISE and len(candidates) != 2:
        raise ArityError(f"{tech.value} merges exactly 2 candidates, got {len(candidates)}")
    if base is None and tech in NEEDS_BASE:
        raise ValueError(f"technique {tech.value} requires a base checkpoint")
    if base is not None:
        _check_candidates(base, candidates)
    weights = recency_weights(len(candidates), config.weighting, config.reversed_weights)
    if tech is Technique.WA:
        return weight_average(candidates, weights)
    if tech is Technique.SLERP:
        return slerp(base, candidates[0], candidates[1], config.slerp_weight)
    if tech is Technique.TA:
        return task_arithmetic(base, candidates, config.lambda_scale, weights)
    if tech is Technique.TIES:
        return ties_merge(base, candidates, config.lambda_scale, config.prune_fraction, weights)
    if tech is Technique.DARE_TIES:
        return dare_ties_merge(
            base, candidates, config.lambda_scale, config.prune_fraction,
            config.dare_p, config.rng_seed, weights, seed_context,
        )
    if tech is Technique.BREADCRUMBS_TIES:
        return breadcrumbs_ties_merge(
            base, candidates, config.lambda_scale, config.prune_fraction,
            config.bread_beta, config.bread_gamma, weights,
        )
    if tech is Technique.MODEL_STOCK:
        return model_stock(base, candidates[0], candidates[1])
    if tech is Technique.MAGMAX:
        return magmax_merge(base, candidates, config.lambda_scale)
    if tech is Technique.LINES_TIES:
        return lines_ties_merge(
            base, candidates, config.lambda_scale, config.prune_fraction,
            config.lines_alpha, config.lines_beta, weights,
        )
    raise ConfigError(f"unknown technique {tech!r}")


def merge_all(config: MergeConfig, base, candidates, seed_context: int = 0) -> Checkpoint:
    """merge() extended to any candidate count.

    Non-pairwise techniques pass through unchanged. Pairwise techniques
    reduce left to right, merging the running result with each next
    candidate; a single candidate is returned as-is.
    """
    if not candidates:
        raise EmptyInput("no candidates to merge")
    if config.technique not in PAIRWISE:
        return merge(config, base, candidates, seed_context)
    result = _materialize(candidates[0])
    for cand in candidates[1:]:
        result = merge(config, base, [result, cand], seed_context)
    return result
