"""Desk-scale continual-learning substrate.

Synthetic classification task streams, a small dense rectifier network
represented directly as a Checkpoint (tensors ``layer.<l>.weight`` /
``layer.<l>.bias``), and deterministic minibatch gradient-descent training
with a warmup + cosine-decay schedule. Everything regenerates from seeds;
nothing here touches disk except an optional CSV dump.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .checkpoint import Checkpoint, DTYPE
from .errors import (
    DivergenceError,
    EmptyDataset,
    InvalidDimensions,
    StructureMismatch,
)
from .seeding import derive_rng


@dataclass(frozen=True)
class TaskDataset:
    """One task's samples: inputs (n, d) float64, labels (n,) int64."""

    inputs: np.ndarray
    labels: np.ndarray
    task_id: str = ""

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class ToyBench:
    """A stream of adaptation tasks plus never-trained holdout tasks."""

    adaptation_tasks: list[TaskDataset]
    holdout_tasks: list[TaskDataset]
    input_dim: int
    class_count: int
    samples_per_task: int
    stream_seed: int


def generate_stream(
    input_dim: int,
    class_count: int,
    tasks: int,
    holdouts: int,
    samples_per_task: int,
    stream_seed: int,
    center_scale: float = 2.0,
    rotation: float = 0.5,
    noise: float = 0.35,
) -> ToyBench:
    """Build a stream of related-but-distinct Gaussian-cluster tasks.

    A shared prototype set of class centers is drawn once; every task
    applies its own random plane rotations (angles within +-rotation
    radians) to the prototypes, so tasks share structure while remaining
    distinct. Holdout tasks are drawn the same way from later generator
    state, never overlapping the adaptation draws. Deterministic per seed.
    """
    if input_dim < 1 or class_count < 1 or tasks < 1 or holdouts < 0:
        raise InvalidDimensions("input_dim, class_count, tasks must be >= 1; holdouts >= 0")
    if samples_per_task < 1 or samples_per_task % class_count != 0:
        raise InvalidDimensions(
            f"samples_per_task={samples_per_task} must be a positive multiple of "
            f"class_count={class_count} so classes stay balanced"
        )
    rng = derive_rng(stream_seed, "stream")
    prototypes = rng.normal(size=(class_count, input_dim))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    prototypes *= center_scale

    def draw_task(task_id: str) -> TaskDataset:
        centers = prototypes.copy()
        pairing = rng.permutation(input_dim)
        angles = rng.uniform(-rotation, rotation, size=input_dim // 2)
        for j in range(input_dim // 2):
            p, q = pairing[2 * j], pairing[2 * j + 1]
            c, s = np.cos(angles[j]), np.sin(angles[j])
            col_p = centers[:, p].copy()
            col_q = centers[:, q].copy()
            centers[:, p] = c * col_p - s * col_q
            centers[:, q] = s * col_p + c * col_q
        per_class = samples_per_task // class_count
        labels = np.repeat(np.arange(class_count, dtype=np.int64), per_class)
        inputs = centers[labels] + noise * rng.normal(size=(samples_per_task, input_dim))
        order = rng.permutation(samples_per_task)
        return TaskDataset(inputs[order], labels[order], task_id)

    adaptation = [draw_task(f"task_{i + 1}") for i in range(tasks)]
    holdout = [draw_task(f"holdout_{i + 1}") for i in range(holdouts)]
    return ToyBench(adaptation, holdout, input_dim, class_count, samples_per_task, stream_seed)


def dump_task_csv(data: TaskDataset, path) -> None:
    """Write a task as CSV with header x0..x{d-1},label."""
    d = data.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(d)] + ["label"])
        for row, label in zip(data.inputs, data.labels):
            writer.writerow([f"{v:.9g}" for v in row] + [int(label)])


# ---------------------------------------------------------------------------
# model <-> flat parameter packing
# ---------------------------------------------------------------------------


def init_model(input_dim: int, hidden, class_count: int, seed: int = 0) -> Checkpoint:
    """Fresh dense rectifier network as a checkpoint.

    Weights use scaled-normal init (std sqrt(2/fan_in)), biases start at
    zero. Layer l spans ``layer.<l>.weight`` of shape (fan_in, fan_out)
    and ``layer.<l>.bias``.
    """
    dims = [input_dim, *list(hidden), class_count]
    if any(d < 1 for d in dims):
        raise InvalidDimensions(f"layer widths must be positive, got {dims}")
    rng = derive_rng(seed, "model-init")
    tensors = {}
    for layer in range(1, len(dims)):
        fan_in, fan_out = dims[layer - 1], dims[layer]
        tensors[f"layer.{layer}.weight"] = rng.normal(
            0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)
        ).astype(DTYPE)
        tensors[f"layer.{layer}.bias"] = np.zeros(fan_out, dtype=DTYPE)
    return Checkpoint(tensors, meta={"kind": "toy_mlp"})


def model_dims(ckpt) -> np.ndarray:
    """Layer widths [d0, d1, ..., dL] recovered from tensor names/shapes."""
    layers = {}
    for name in ckpt.names():
        parts = name.split(".")
        if len(parts) != 3 or parts[0] != "layer" or parts[2] not in ("weight", "bias"):
            raise StructureMismatch(f"unexpected tensor name {name!r} for a toy model")
        layers.setdefault(int(parts[1]), {})[parts[2]] = ckpt.shape(name)
    if sorted(layers) != list(range(1, len(layers) + 1)):
        raise StructureMismatch(f"layer indices {sorted(layers)} are not 1..L")
    dims = []
    for layer in range(1, len(layers) + 1):
        shapes = layers[layer]
        if set(shapes) != {"weight", "bias"}:
            raise StructureMismatch(f"layer {layer} is missing weight or bias")
        (fan_in, fan_out) = shapes["weight"]
        if shapes["bias"] != (fan_out,):
            raise StructureMismatch(f"layer {layer} bias shape {shapes['bias']}")
        if layer == 1:
            dims.append(fan_in)
        elif dims[-1] != fan_in:
            raise StructureMismatch(f"layer {layer} fan_in {fan_in} != previous width")
        dims.append(fan_out)
    return np.asarray(dims, dtype=np.int64)


def pack_params(ckpt) -> tuple[np.ndarray, np.ndarray]:
    """Checkpoint -> (flat float64 params, dims); layout W then bias per layer."""
    dims = model_dims(ckpt)
    chunks = []
    for layer in range(1, len(dims)):
        chunks.append(ckpt.tensor(f"layer.{layer}.weight").astype(np.float64).ravel())
        chunks.append(ckpt.tensor(f"layer.{layer}.bias").astype(np.float64).ravel())
    return np.concatenate(chunks), dims


def unpack_params(params: np.ndarray, dims: np.ndarray, meta=None) -> Checkpoint:
    tensors = {}
    off = 0
    for layer in range(1, len(dims)):
        fan_in, fan_out = int(dims[layer - 1]), int(dims[layer])
        tensors[f"layer.{layer}.weight"] = (
            params[off : off + fan_in * fan_out].astype(DTYPE).reshape(fan_in, fan_out)
        )
        off += fan_in * fan_out
        tensors[f"layer.{layer}.bias"] = params[off : off + fan_out].astype(DTYPE)
        off += fan_out
    return Checkpoint(tensors, meta=meta)


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


def lr_schedule(steps: int, peak_lr: float, warmup_fraction: float = 0.1) -> np.ndarray:
    """Per-step learning rates: linear warmup over the first
    warmup_fraction of steps, then cosine decay to zero."""
    if steps == 0:
        return np.zeros(0)
    warm = max(1, int(round(warmup_fraction * steps)))
    warm = min(warm, steps)
    lrs = np.empty(steps)
    for s in range(steps):
        if s < warm:
            lrs[s] = peak_lr * (s + 1) / warm
        else:
            progress = (s - warm) / max(1, steps - warm)
            lrs[s] = 0.5 * peak_lr * (1.0 + np.cos(np.pi * progress))
    return lrs


def _batch_plan(
    rng: np.random.Generator, n: int, steps: int, batch_size: int,
    pool_size: int, replay_fraction: float,
) -> np.ndarray:
    """Row indices per step into the (current ++ pool) stacked dataset.

    Current-task samples come from reshuffled permutation epochs; replay
    slots draw uniformly (with replacement) from the pool, offset by n.
    """
    n_replay = int(round(batch_size * replay_fraction)) if pool_size else 0
    n_current = batch_size - n_replay
    batches = np.empty((steps, batch_size), dtype=np.int64)
    perm = rng.permutation(n)
    cursor = 0
    for s in range(steps):
        if n_current > 0:
            if n_current > n:
                cur = rng.integers(0, n, size=n_current)
            else:
                if cursor + n_current > n:
                    perm = rng.permutation(n)
                    cursor = 0
                cur = perm[cursor : cursor + n_current]
                cursor += n_current
            batches[s, :n_current] = cur
        if n_replay > 0:
            batches[s, n_current:] = n + rng.integers(0, pool_size, size=n_replay)
    return batches


def train(
    init: Checkpoint,
    data: TaskDataset,
    steps: int,
    peak_lr: float = 0.05,
    batch_size: int = 32,
    seed: int = 0,
    clip_norm: float = 1.0,
    warmup_fraction: float = 0.1,
    replay_pool: tuple[np.ndarray, np.ndarray] | None = None,
    replay_fraction: float = 0.0,
) -> Checkpoint:
    """Minibatch gradient descent on softmax cross-entropy.

    Deterministic given (init, data, seed). When a replay_pool (stacked
    inputs, labels from earlier tasks) is given, each batch mixes in
    round(batch_size * replay_fraction) uniformly drawn pool samples.
    Raises DivergenceError if the loss goes non-finite.
    """
    params, dims = pack_params(init)
    meta = {"task_id": data.task_id, "steps": str(steps)}
    if steps == 0:
        return unpack_params(params, dims, meta=meta)
    if len(data) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if data.inputs.shape[1] != dims[0]:
        raise StructureMismatch(
            f"data dimension {data.inputs.shape[1]} != model input width {dims[0]}"
        )
    x = np.ascontiguousarray(data.inputs, dtype=np.float64)
    y = np.ascontiguousarray(data.labels, dtype=np.int64)
    pool_size = 0
    if replay_pool is not None and replay_fraction > 0.0:
        pool_x, pool_y = replay_pool
        pool_size = pool_x.shape[0]
        if pool_size:
            x = np.ascontiguousarray(np.vstack([x, pool_x.astype(np.float64)]))
            y = np.ascontiguousarray(np.concatenate([y, pool_y.astype(np.int64)]))
    rng = derive_rng(seed, "train")
    batches = _batch_plan(rng, len(data), steps, batch_size, pool_size, replay_fraction)
    lrs = lr_schedule(steps, peak_lr, warmup_fraction)
    loss = kernels.mlp_train(params, dims, x, y, batches, lrs, clip_norm)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss}")
    return unpack_params(params, dims, meta=meta)


def batch_loss(ckpt: Checkpoint, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of one batch, via the active training kernel
    (a zero-learning-rate step leaves the parameters untouched)."""
    params, dims = pack_params(ckpt)
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    y = np.ascontiguousarray(labels, dtype=np.int64)
    batches = np.arange(x.shape[0], dtype=np.int64)[None, :]
    return float(kernels.mlp_train(params, dims, x, y, batches, np.zeros(1), np.inf))


def batch_gradients(ckpt: Checkpoint, inputs: np.ndarray, labels: np.ndarray) -> dict:
    """Analytic loss gradients per tensor, extracted from the active
    training kernel (one unclipped step at learning rate 1)."""
    params, dims = pack_params(ckpt)
    before = params.copy()
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    y = np.ascontiguousarray(labels, dtype=np.int64)
    batches = np.arange(x.shape[0], dtype=np.int64)[None, :]
    kernels.mlp_train(params, dims, x, y, batches, np.ones(1), np.inf)
    flat = before - params
    grads = {}
    off = 0
    for layer in range(1, len(dims)):
        fan_in, fan_out = int(dims[layer - 1]), int(dims[layer])
        grads[f"layer.{layer}.weight"] = flat[off : off + fan_in * fan_out].reshape(
            fan_in, fan_out
        )
        off += fan_in * fan_out
        grads[f"layer.{layer}.bias"] = flat[off : off + fan_out]
        off += fan_out
    return grads


def evaluate(model: Checkpoint, data: TaskDataset) -> float:
    """Fraction of argmax-correct predictions; ties pick the lowest class."""
    if len(data) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    params, dims = pack_params(model)
    if data.inputs.shape[1] != dims[0]:
        raise StructureMismatch(
            f"data dimension {data.inputs.shape[1]} != model input width {dims[0]}"
        )
    logits = kernels.mlp_logits(params, dims, np.asarray(data.inputs, dtype=np.float64))
    predictions = np.argmax(logits, axis=1)
    return float(np.mean(predictions == data.labels))
