# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled numeric kernels: merge reductions and the MLP training loop.

Drop-in replacement for chronomerge._pykernels. The merge reductions use
the same float64 accumulation order as the fallback, so results match bit
for bit; the training loop is mathematically identical but accumulates in
loop order rather than through BLAS.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, isfinite, log, sqrt

cnp.import_array()


def weighted_sum(double[:, ::1] stack, double[::1] weights):
    """Sum_i weights[i] * stack[i] in float64, sequential over rows."""
    cdef Py_ssize_t m = stack.shape[0]
    cdef Py_ssize_t n = stack.shape[1]
    out_arr = np.zeros(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double w
    for i in range(m):
        w = weights[i]
        for j in range(n):
            out[j] += w * stack[i, j]
    return out_arr


def ties_combine(double[:, ::1] stack, double[::1] weights):
    """Sign-elected weighted average of already-trimmed task-vector rows."""
    cdef Py_ssize_t m = stack.shape[0]
    cdef Py_ssize_t n = stack.shape[1]
    out_arr = np.zeros(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double total, num, mass, v, elected
    for j in range(n):
        total = 0.0
        for i in range(m):
            total += stack[i, j]
        elected = 1.0 if total >= 0.0 else -1.0
        num = 0.0
        mass = 0.0
        for i in range(m):
            v = stack[i, j]
            if v != 0.0 and (v > 0.0) == (elected > 0.0):
                num += weights[i] * v
                mass += weights[i]
        if mass > 0.0:
            out[j] = num / mass
    return out_arr


def magmax_combine(double[:, ::1] stack):
    """Largest-magnitude entry per element; ties keep the lowest row."""
    cdef Py_ssize_t m = stack.shape[0]
    cdef Py_ssize_t n = stack.shape[1]
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double best, v
    for j in range(n):
        best = stack[0, j]
        for i in range(1, m):
            v = stack[i, j]
            if fabs(v) > fabs(best):
                best = v
        out[j] = best
    return out_arr


def mlp_train(double[::1] params, cnp.int64_t[::1] dims, double[:, ::1] x,
              cnp.int64_t[::1] y, cnp.int64_t[:, ::1] batches,
              double[::1] lrs, double clip_norm):
    """In-place minibatch gradient descent on a flat parameter vector.

    Same contract as _pykernels.mlp_train: dense layers (W row-major then
    bias per layer), rectifier between layers, softmax cross-entropy,
    global gradient-norm clipping. Returns the last (pre-update) batch
    loss, or the first non-finite loss.
    """
    cdef Py_ssize_t n_layers = dims.shape[0] - 1
    cdef Py_ssize_t steps = batches.shape[0]
    cdef Py_ssize_t bsz = batches.shape[1]
    cdef Py_ssize_t n_params = params.shape[0]

    cdef cnp.int64_t[::1] w_off = np.zeros(n_layers, dtype=np.int64)
    cdef cnp.int64_t[::1] b_off = np.zeros(n_layers, dtype=np.int64)
    cdef Py_ssize_t off = 0, layer
    cdef Py_ssize_t maxw = 0
    for layer in range(n_layers + 1):
        if dims[layer] > maxw:
            maxw = dims[layer]
    for layer in range(n_layers):
        w_off[layer] = off
        off += dims[layer] * dims[layer + 1]
        b_off[layer] = off
        off += dims[layer + 1]

    # activation stack: acts[0] is the gathered input batch, acts[l] the
    # post-rectifier output of layer l; the top layer writes into zbuf.
    cdef double[:, :, ::1] acts = np.zeros((n_layers, bsz, maxw))
    cdef double[:, ::1] zbuf = np.zeros((bsz, maxw))
    cdef double[:, ::1] dz = np.zeros((bsz, maxw))
    cdef double[:, ::1] dh = np.zeros((bsz, maxw))
    cdef double[:, ::1] tmp
    cdef double[::1] grads = np.zeros(n_params)
    cdef cnp.int64_t[::1] yb = np.zeros(bsz, dtype=np.int64)

    cdef Py_ssize_t step, b, i, o, p, row, din, dout, wo, bo
    cdef double av, zm, s, e, loss, last, v, gnorm, scale
    cdef Py_ssize_t n_classes = dims[n_layers]

    last = 0.0
    for step in range(steps):
        # gather batch
        din = dims[0]
        for b in range(bsz):
            row = batches[step, b]
            yb[b] = y[row]
            for i in range(din):
                acts[0, b, i] = x[row, i]
        # forward
        for layer in range(n_layers):
            din = dims[layer]
            dout = dims[layer + 1]
            wo = w_off[layer]
            bo = b_off[layer]
            for b in range(bsz):
                for o in range(dout):
                    zbuf[b, o] = params[bo + o]
                for i in range(din):
                    av = acts[layer, b, i]
                    if av != 0.0:
                        for o in range(dout):
                            zbuf[b, o] += av * params[wo + i * dout + o]
            if layer < n_layers - 1:
                for b in range(bsz):
                    for o in range(dout):
                        acts[layer + 1, b, o] = zbuf[b, o] if zbuf[b, o] > 0.0 else 0.0
        # softmax cross-entropy and dz
        loss = 0.0
        for b in range(bsz):
            zm = zbuf[b, 0]
            for o in range(1, n_classes):
                if zbuf[b, o] > zm:
                    zm = zbuf[b, o]
            s = 0.0
            for o in range(n_classes):
                e = exp(zbuf[b, o] - zm)
                dz[b, o] = e
                s += e
            loss += -(zbuf[b, yb[b]] - zm - log(s))
            for o in range(n_classes):
                dz[b, o] = dz[b, o] / s
            dz[b, yb[b]] -= 1.0
            for o in range(n_classes):
                dz[b, o] /= bsz
        loss /= bsz
        if not isfinite(loss):
            return loss
        last = loss
        # backward
        for p in range(n_params):
            grads[p] = 0.0
        for layer in range(n_layers - 1, -1, -1):
            din = dims[layer]
            dout = dims[layer + 1]
            wo = w_off[layer]
            bo = b_off[layer]
            for b in range(bsz):
                for i in range(din):
                    av = acts[layer, b, i]
                    if av != 0.0:
                        for o in range(dout):
                            grads[wo + i * dout + o] += av * dz[b, o]
                for o in range(dout):
                    grads[bo + o] += dz[b, o]
            if layer > 0:
                for b in range(bsz):
                    for i in range(din):
                        if acts[layer, b, i] > 0.0:
                            s = 0.0
                            for o in range(dout):
                                s += dz[b, o] * params[wo + i * dout + o]
                            dh[b, i] = s
                        else:
                            dh[b, i] = 0.0
                tmp = dz
                dz = dh
                dh = tmp
        # clip and update
        s = 0.0
        for p in range(n_params):
            s += grads[p] * grads[p]
        gnorm = sqrt(s)
        scale = lrs[step]
        if gnorm > clip_norm:
            scale = scale * (clip_norm / gnorm)
        for p in range(n_params):
            params[p] -= scale * grads[p]
    return last
