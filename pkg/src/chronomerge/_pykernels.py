"""Pure-NumPy implementations of the hot numeric kernels.

Mirrors chronomerge._ckernels. The merge reductions accumulate in float64
in the same candidate order as the compiled loops, so both backends give
bit-identical merge results; the training kernel matches the compiled one
mathematically but goes through BLAS, so trained weights may differ at
the last-ulp level between backends.
"""

from __future__ import annotations

import numpy as np


def weighted_sum(stack: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Sum_i weights[i] * stack[i], accumulated sequentially in float64.

    stack: (M, n) float64, weights: (M,) float64 -> (n,) float64.
    """
    out = np.zeros(stack.shape[1])
    for i in range(stack.shape[0]):
        out += weights[i] * stack[i]
    return out


def ties_combine(stack: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Sign-elected weighted average of already-trimmed task-vector rows.

    Per element: elect the sign of the column sum (ties go positive),
    then average the entries whose sign agrees, weighting each row and
    dividing by the weight mass of the agreeing rows. Columns with no
    agreeing entry produce zero.
    """
    m, n = stack.shape
    total = np.zeros(n)
    for i in range(m):
        total += stack[i]
    elected = np.where(total >= 0.0, 1.0, -1.0)
    num = np.zeros(n)
    mass = np.zeros(n)
    for i in range(m):
        row = stack[i]
        agree = (row != 0.0) & (np.sign(row) == elected)
        num += np.where(agree, weights[i] * row, 0.0)
        mass += np.where(agree, weights[i], 0.0)
    out = np.zeros(n)
    nz = mass > 0.0
    out[nz] = num[nz] / mass[nz]
    return out


def magmax_combine(stack: np.ndarray) -> np.ndarray:
    """Per element, the entry with the largest magnitude; ties keep the
    lowest row index. stack: (M, n) float64 -> (n,) float64."""
    idx = np.argmax(np.abs(stack), axis=0)
    return stack[idx, np.arange(stack.shape[1])].copy()


def mlp_train(params, dims, x, y, batches, lrs, clip_norm):
    """Run minibatch gradient-descent steps in place on a flat float64
    parameter vector holding dense layers (W row-major, then bias, per
    layer). Rectifier between layers, softmax cross-entropy at the top,
    global gradient-norm clipping.

    batches: (steps, B) int64 row indices into x. Returns the loss of the
    last batch evaluated (pre-update), or the first non-finite loss seen.
    """
    weights, biases = [], []
    off = 0
    for layer in range(len(dims) - 1):
        din, dout = int(dims[layer]), int(dims[layer + 1])
        weights.append(params[off : off + din * dout].reshape(din, dout))
        off += din * dout
        biases.append(params[off : off + dout])
        off += dout
    n_layers = len(weights)
    last = 0.0
    for step in range(batches.shape[0]):
        idx = batches[step]
        xb = x[idx]
        yb = y[idx]
        bsz = xb.shape[0]
        # forward
        acts = [xb]
        h = xb
        for layer in range(n_layers):
            z = h @ weights[layer] + biases[layer]
            if layer < n_layers - 1:
                h = np.maximum(z, 0.0)
                acts.append(h)
            else:
                logits = z
        zmax = logits.max(axis=1, keepdims=True)
        ez = np.exp(logits - zmax)
        sez = ez.sum(axis=1, keepdims=True)
        rows = np.arange(bsz)
        loss = -np.mean(logits[rows, yb] - zmax[:, 0] - np.log(sez[:, 0]))
        if not np.isfinite(loss):
            return float(loss)
        last = float(loss)
        # backward
        dz = ez / sez
        dz[rows, yb] -= 1.0
        dz /= bsz
        grads_w = [None] * n_layers
        grads_b = [None] * n_layers
        for layer in range(n_layers - 1, -1, -1):
            grads_w[layer] = acts[layer].T @ dz
            grads_b[layer] = dz.sum(axis=0)
            if layer > 0:
                dz = (dz @ weights[layer].T) * (acts[layer] > 0.0)
        sq = 0.0
        for layer in range(n_layers):
            sq += float(np.sum(grads_w[layer] * grads_w[layer]))
            sq += float(np.sum(grads_b[layer] * grads_b[layer]))
        gnorm = np.sqrt(sq)
        scale = lrs[step] * (clip_norm / gnorm if gnorm > clip_norm else 1.0)
        for layer in range(n_layers):
            weights[layer] -= scale * grads_w[layer]
            biases[layer] -= scale * grads_b[layer]
    return last


def mlp_logits(params, dims, x):
    """Forward pass only; returns (n, classes) float64 logits."""
    off = 0
    h = x
    for layer in range(len(dims) - 1):
        din, dout = int(dims[layer]), int(dims[layer + 1])
        w = params[off : off + din * dout].reshape(din, dout)
        off += din * dout
        b = params[off : off + dout]
        off += dout
        z = h @ w + b
        h = np.maximum(z, 0.0) if layer < len(dims) - 2 else z
    return h
