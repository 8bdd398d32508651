"""Input-event-indexed synaptic backprop shared by both event-driven engines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp



@dataclass
class BackwardStats:
    """Operation counters filled by the backward engines, keyed by layer index.

    ``inter_ops`` counts synaptic gradient terms (one per input event per
    receiving neuron), ``intra_ops`` membrane-recursion updates, ``reset_ops``
    spike-induced reset terms, ``timing_entries`` the output positions that
    carried a nonzero error signal.
    """

    inter_ops: dict = field(default_factory=dict)
    intra_ops: dict = field(default_factory=dict)
    reset_ops: dict = field(default_factory=dict)
    timing_entries: dict = field(default_factory=dict)
    input_events: dict = field(default_factory=dict)
    clamps: int = 0

    def merge(self, other):
        for name in ("inter_ops", "intra_ops", "reset_ops", "timing_entries", "input_events"):
            mine = getattr(self, name)
            for k, v in getattr(other, name).items():
                mine[k] = mine.get(k, 0) + v
        self.clamps += other.clamps
        return self

    def total(self):
        return sum(self.inter_ops.values()) + sum(self.intra_ops.values()) + sum(self.reset_ops.values())


def dense_event_backprop(x, err, w, static=False, need_input_grad=True, err_input=None):
    """Backprop an error signal through a dense synapse matrix, visiting input events only.

    ``x``: layer input (B, T, M); ``err``: per-step error on the synaptic
    current (B, T, N); ``w``: (N, M). Returns ``(dw, gin, ops, events)`` with
    ``dw = sum_t err[t]^T x[t]`` and ``gin[b, t, j] = sum_i w_ij err[b, t, i]``
    evaluated only where ``x[b, t, j] != 0`` (zero elsewhere). ``err_input``,
    when given, replaces ``err`` in the input-gradient term.
    """
    B, T, M = x.shape
    N = w.shape[0]
    dt = w.dtype
    if static:
        dw = err.sum(axis=1).T @ x[:, 0]
        return dw.astype(dt), None, 0, 0
    flat = x.reshape(B * T, M)
    rows, cols = np.nonzero(flat)
    if rows.size == 0:
        return np.zeros_like(w), np.zeros_like(x), 0, 0
    vals = flat[rows, cols]
    ef = err.reshape(B * T, N)
    X = sp.csr_matrix((vals, (rows, cols)), shape=(B * T, M))
    dw = np.asarray((X.T @ ef).T)
    if not need_input_grad:
        return dw.astype(dt), None, rows.size * N, rows.size
    if err_input is not None:
        ef = err_input.reshape(B * T, N)
    gathered = ef[rows] * w.T[cols]             # (events, N): one term per receiving neuron
    gin = np.zeros(B * T * M, dtype=dt)
    gin[rows * M + cols] = gathered.sum(axis=1)
    return dw.astype(dt), gin.reshape(B, T, M), gathered.size, rows.size


def layer_backprop(net, rec, err, need_input_grad, err_input=None):
    """Dispatch on layer kind. Conv layers run dense transposes, then mask to input events."""
    i = rec.index
    layer = net.spec.layers[i]
    x = rec.inputs
    if layer.kind == "dense":
        return dense_event_backprop(x, err, net.weights[i], rec.static_input, need_input_grad, err_input)
    dt = net.weights[i].dtype
    if rec.static_input:
        return net.grad_weight(i, err.sum(axis=1), x[:, 0]).astype(dt), None, 0, 0
    dw = net.grad_weight(i, err, x).astype(dt)
    events = int(np.count_nonzero(x))
    ops = err.size * int(np.prod(net.weights[i].shape[1:]))
    if not need_input_grad:
        return dw, None, ops, events
    gin = net.grad_input(i, err if err_input is None else err_input) * (x != 0)
    return dw, gin.astype(dt), ops, events
