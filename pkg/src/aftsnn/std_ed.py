"""Spike-timing-dependent event-driven backward pass for AFT-IF networks.

Each output spike at step ``t_k`` is driven by the inputs integrated since
the neuron's previous reset. In discrete time an input at step ``t`` is
integrated before the step-``t`` threshold check, and the reset at ``t_last``
clears everything up to and including that step, so the contributing window
is the step range ``t_last < t_f <= t_k``. The denominator of the timing
derivative is the weighted sum of that window, which equals the pre-reset
membrane potential recorded in the trace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .events import BackwardStats, layer_backprop
from .network import Network


@dataclass
class SpikeEvent:
    layer: int
    neuron: int
    step: int                 # 1-based
    t_last: int
    denom: float
    contrib: np.ndarray       # per-afferent summed input over the window (spike counts for spiking inputs)


def contributing_set(trace, inputs, weights, sample, neuron, step, layer=0):
    """Collect the inputs that built the potential of the spike at 1-based ``step``.

    ``inputs`` is the layer input ``(B, T, M)``; ``weights`` is ``(N, M)``.
    """
    if not trace.spikes[sample, step - 1, neuron]:
        raise ValueError(f"no spike at sample {sample}, neuron {neuron}, step {step}")
    t_last = int(trace.last_spike[sample, step - 1, neuron])
    contrib = np.asarray(inputs[sample, t_last:step], dtype=np.float64).sum(axis=0)
    denom = float(np.dot(np.asarray(weights[neuron], dtype=np.float64), contrib))
    return SpikeEvent(layer, neuron, step, t_last, denom, contrib)


def spike_time_grad(event: SpikeEvent, dl_dtout, weights, d_min=0.1):
    """dL/dt for each contributing input spike, per afferent: ``dl_dtout * w_ij / D``.

    Every spike of afferent ``j`` inside the window receives the same value;
    afferents without contributing spikes get 0.
    """
    denom = max(event.denom, d_min)
    w = np.asarray(weights[event.neuron], dtype=np.float64)
    return np.where(event.contrib != 0, dl_dtout * w / denom, 0.0)


def weight_grad(event: SpikeEvent, dl_dtout, d_min=0.1):
    """Contribution of one output spike to dL/dw_i: ``-dl_dtout * n_j / D``."""
    denom = max(event.denom, d_min)
    return -dl_dtout * event.contrib / denom


def spike_count_loss(output_spikes, labels, desired):
    """Squared spike-count error with per-spike timing gradients.

    Returns the batch-mean loss ``0.5 * sum_i (c_i - c_i*)^2`` and a timing
    gradient array shaped like ``output_spikes`` holding ``(c_i* - c_i) / B`` at
    every emitted spike of neuron ``i`` and 0 elsewhere.
    """
    c_target, c_other = desired
    if c_target < 0 or c_other < 0:
        raise tc.ConfigError("desired spike counts must be >= 0", field="desired")
    spikes = np.asarray(output_spikes)
    B, _, C = spikes.shape
    counts = spikes.sum(axis=1)
    want = np.full((B, C), c_other, dtype=tc.DTYPE)
    want[np.arange(B), np.asarray(labels)] = c_target
    diff = want - counts
    loss = 0.5 * float((diff.astype(np.float64) ** 2).sum()) / B
    grad = (diff / B)[:, None, :] * spikes
    return loss, grad.astype(tc.DTYPE)


def window_broadcast(spikes, per_spike):
    """Spread each spike's value back over its contributing window.

    ``out[b, t] = per_spike[b, t_k]`` where ``t_k`` is the first spike at or
    after ``t``; 0 after a neuron's final spike.
    """
    out = np.empty_like(per_spike)
    carry = np.zeros_like(per_spike[:, 0])
    for t in range(spikes.shape[1] - 1, -1, -1):
        fired = spikes[:, t] > 0
        carry = np.where(fired, per_spike[:, t], carry)
        out[:, t] = carry
    return out


def std_ed_backward(net: Network, records, grad_out, d_min=None):
    """Propagate output timing gradients down the network.

    ``grad_out`` is dL/dt at the output layer's spikes, shaped like its spike
    raster. Returns per-layer weight gradients (``None`` for pool layers) and
    a :class:`BackwardStats`.
    """
    if d_min is None:
        d_min = net.params.d_min
    dt = net.dtype
    d_min = dt.type(d_min)
    stats = BackwardStats()
    grads = [None] * len(records)
    G = np.asarray(grad_out, dtype=dt)
    for rec in reversed(records):
        i = rec.index
        layer = net.spec.layers[i]
        if layer.kind == "pool":
            if G is None:
                continue
            G = tc.pool_grad_input(G, rec.inputs, layer.pool_mode, layer.kernel) * (rec.inputs != 0)
            continue
        w = net.weights[i]
        if G is None:
            grads[i] = np.zeros_like(w)
            stats.inter_ops[i] = 0
            stats.timing_entries[i] = 0
            continue
        trace = rec.trace
        active = (G != 0) & (trace.spikes > 0)
        n_active = int(active.sum())
        stats.timing_entries[i] = n_active
        if n_active == 0:
            grads[i] = np.zeros_like(w)
            stats.inter_ops[i] = 0
            G = None
            continue
        low = active & (trace.u < d_min)
        stats.clamps += int(low.sum())
        denom = np.maximum(trace.u, d_min)
        a = np.where(active, G / denom, 0).astype(dt)
        A = window_broadcast(trace.spikes, a)
        dw, gin, ops, events = layer_backprop(net, rec, A, i > 0)
        dw = -dw
        stats.input_events[i] = events
        grads[i] = dw.astype(dt)
        stats.inter_ops[i] = ops
        if i == 0 or gin is None:
            G = None
        else:
            G = gin.reshape(gin.shape[:2] + tuple(net.input_layer_of(i)))
    return grads, stats


def predict_counts(output_spikes):
    return np.asarray(output_spikes).sum(axis=1).argmax(axis=-1)
