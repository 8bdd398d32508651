"""Layer stack wiring: forward simulation with recorded traces."""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from . import tensor as tc
from .neurons import AftParams, LayerTrace, integrator_run, run_neurons
from .tensor import DTYPE, NetworkSpec


@dataclass
class LayerRecord:
    index: int
    kind: str
    inputs: np.ndarray              # (B, T, *in_shape); dense layers see it flattened
    outputs: np.ndarray             # spikes, pooled values, or integrator output
    trace: LayerTrace | None = None
    static_input: bool = False      # inputs identical at every step (direct coding)


def _integrate(cur, tau):
    out = np.empty_like(cur)
    acc = np.zeros_like(cur[:, 0])
    for t in range(cur.shape[1]):
        acc = tau * acc + cur[:, t]
        out[:, t] = acc
    return out


class Network:
    """A feed-forward spiking network: a :class:`NetworkSpec` plus weights."""

    def __init__(self, spec: NetworkSpec, weights, params: AftParams = AftParams()):
        self.spec = spec
        self.weights = weights
        self.params = params.resolved(spec.time_steps)
        self.shapes = spec.shapes()
        for layer, w, (in_shape, out_shape) in zip(spec.layers, weights, self.shapes):
            if layer.kind == "dense":
                expect = (out_shape[0], prod(in_shape))
            elif layer.kind == "conv2d":
                expect = (layer.channels, in_shape[0], layer.kernel, layer.kernel)
            else:
                continue
            if w is None or tuple(w.shape) != expect:
                raise tc.ConfigError(f"weight shape {None if w is None else w.shape}, expected {expect}",
                                     field="weights")

    @property
    def dtype(self):
        return next(w.dtype for w in self.weights if w is not None)

    def astype(self, dtype):
        """Copy of this network with weights cast to ``dtype``."""
        weights = [None if w is None else w.astype(dtype) for w in self.weights]
        return Network(self.spec, weights, self.params)

    @property
    def weighted(self):
        return [i for i, l in enumerate(self.spec.layers) if l.kind != "pool"]

    def is_head(self, index):
        return index == len(self.spec.layers) - 1

    def current(self, index, x):
        layer, w = self.spec.layers[index], self.weights[index]
        if layer.kind == "dense":
            return tc.dense_current(w, x)
        return tc.conv2d_current(w, x, layer.stride, layer.padding)

    def grad_input(self, index, g):
        """Dense transpose of the synaptic map: dL/d(input) given dL/d(current)."""
        layer, w = self.spec.layers[index], self.weights[index]
        if layer.kind == "dense":
            return g @ w
        in_shape = self.shapes[index][0]
        return tc.conv2d_grad_input(w, g, in_shape[1:], layer.stride, layer.padding)

    def grad_weight(self, index, g, x):
        layer = self.spec.layers[index]
        if layer.kind == "dense":
            return g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        return tc.conv2d_grad_weight(g, x, layer.kernel, layer.stride, layer.padding)

    def forward(self, x):
        """Simulate the network.

        ``x`` is either ``(B, T, *input_shape)`` or, for direct coding,
        ``(B, *input_shape)`` which is replayed at every step.
        """
        T = self.spec.time_steps
        x = np.asarray(x, dtype=DTYPE)
        static = x.ndim == len(self.spec.input_shape) + 1
        if static:
            x = np.broadcast_to(x[:, None], (x.shape[0], T) + x.shape[1:])
        elif x.shape[1] != T:
            raise tc.ConfigError(f"input has {x.shape[1]} steps, network expects {T}", field="time_steps")
        records = []
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "pool":
                out = tc.pool(x, layer.pool_mode, layer.kernel)
                records.append(LayerRecord(i, "pool", x, out))
                x = out
                static = False
                continue
            if layer.kind == "dense":
                x = x.reshape(x.shape[:2] + (-1,))
            if static:
                cur = self.current(i, x[:, 0])
                cur = np.ascontiguousarray(np.broadcast_to(cur[:, None], (cur.shape[0], T) + cur.shape[1:]))
            else:
                cur = self.current(i, x)
            if self.is_head(i) and self.spec.output_head == "integrator":
                out = integrator_run(cur, self.params)
                records.append(LayerRecord(i, layer.kind, x, out, None, static))
            else:
                trace = run_neurons(layer.neuron_model, cur, self.params)
                records.append(LayerRecord(i, layer.kind, x, trace.spikes, trace, static))
                out = trace.spikes
            x = out
            static = False
        return records

    def promote(self, records, dtype=np.float64):
        """Higher-precision copy of the network and its records for backward checks.

        Spike rasters and thresholds are kept as recorded; synaptic currents
        and membrane potentials are recomputed in ``dtype`` along the recorded
        spike train, so no spike decision changes.
        """
        net = self.astype(dtype)
        tau = dtype(self.params.tau)
        out = []
        prev = None
        for r in records:
            x = np.asarray(r.inputs, dtype=dtype) if prev is None else prev
            if r.kind == "pool":
                y = np.asarray(r.outputs, dtype=dtype)
                out.append(LayerRecord(r.index, r.kind, x, y))
                prev = y
                continue
            if self.spec.layers[r.index].kind == "dense":
                x = x.reshape(x.shape[:2] + (-1,))
            if r.static_input:
                cur = net.current(r.index, x[:, 0])
                cur = np.broadcast_to(cur[:, None], (cur.shape[0], x.shape[1]) + cur.shape[1:])
            else:
                cur = net.current(r.index, x)
            trace = None
            if r.trace is None:
                y = _integrate(cur, tau)
            else:
                s = r.trace.spikes.astype(dtype)
                leak = dtype(1) if self.spec.layers[r.index].neuron_model == "aft_if" else tau
                u = np.empty_like(cur)
                carry = np.zeros_like(cur[:, 0])
                for t in range(cur.shape[1]):
                    carry = carry + cur[:, t]
                    u[:, t] = carry
                    carry = leak * carry * (1 - s[:, t])
                trace = LayerTrace(u, r.trace.theta.astype(dtype), s, r.trace.last_spike)
                y = s
            out.append(LayerRecord(r.index, r.kind, x, y, trace, r.static_input))
            prev = y
        return net, out

    def predict(self, records):
        out = records[-1].outputs
        if self.spec.output_head == "integrator":
            return out.mean(axis=1).argmax(axis=-1)
        return out.sum(axis=1).argmax(axis=-1)

    def input_layer_of(self, index):
        """Shape that gradients for this layer's input must be reshaped to."""
        if index == 0:
            return self.spec.input_shape
        return self.shapes[index - 1][1]
