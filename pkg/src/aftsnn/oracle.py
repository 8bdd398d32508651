"""Dense reference gradients for checking the event-driven engines.

Everything here runs in float64 on recorded forward traces and trades speed
for directness. The dense BPTT also serves as the STBP training baseline.
Finite differences are useless for these models: the loss is piecewise
constant in the weights once spikes are binary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ConfigError
from .events import BackwardStats
from .mpd_ed import MsgConfig, msg, mpd_ed_backward
from .network import Network
from .neurons import AftParams
from .std_ed import std_ed_backward


@dataclass
class OracleReport:
    max_abs_diff: float
    max_rel_diff: float
    tolerance: float
    mismatches: list = field(default_factory=list)   # (layer, post, pre, engine, oracle)

    @property
    def passed(self):
        return self.max_rel_diff <= self.tolerance

    def to_dict(self):
        return {"max_abs_diff": self.max_abs_diff, "max_rel_diff": self.max_rel_diff,
                "tolerance": self.tolerance, "passed": self.passed,
                "mismatches": [list(m) for m in self.mismatches[:10]]}


def compare(engine_grads, oracle_grads, tolerance=1e-6):
    """Per-layer relative difference, normalised by the layer's largest oracle entry."""
    max_abs = max_rel = 0.0
    mismatches = []
    for layer, (g, ref) in enumerate(zip(engine_grads, oracle_grads)):
        if g is None and ref is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        ref = np.asarray(ref, dtype=np.float64)
        diff = np.abs(g - ref)
        scale = np.abs(ref).max() if ref.size else 0.0
        layer_abs = float(diff.max()) if diff.size else 0.0
        layer_rel = layer_abs / scale if scale > 0 else layer_abs
        max_abs = max(max_abs, layer_abs)
        max_rel = max(max_rel, layer_rel)
        if layer_rel > tolerance:
            bad = np.argwhere(diff > tolerance * max(scale, 1e-30))
            order = np.argsort(-diff[tuple(bad.T)])
            for idx in bad[order][:10]:
                idx = tuple(int(v) for v in idx)
                mismatches.append((layer,) + idx[:2] + (float(g[idx]), float(ref[idx])))
    return OracleReport(max_abs, max_rel, tolerance, mismatches)


def dense_bptt(net: Network, records, grad_out, surrogate: MsgConfig, reset_path=True):
    """Full BPTT with ``surrogate`` evaluated at every neuron and step."""
    tau = net.params.tau
    stats = BackwardStats()
    grads = [None] * len(records)
    g_up = np.asarray(grad_out, dtype=np.float64)
    for rec in reversed(records):
        i = rec.index
        layer = net.spec.layers[i]
        if layer.kind == "pool":
            g_up = tc.pool_grad_input(g_up, rec.inputs, layer.pool_mode, layer.kernel)
            continue
        w = net.weights[i].astype(np.float64)
        B, T = g_up.shape[:2]
        du = np.zeros_like(g_up)
        send = np.zeros_like(g_up)
        if rec.trace is None:
            nxt = np.zeros_like(g_up[:, 0])
            for t in reversed(range(T)):
                nxt = g_up[:, t] + tau * nxt
                du[:, t] = nxt
            send = du
            stats.intra_ops[i] = du.size
        else:
            u = rec.trace.u.astype(np.float64)
            s = rec.trace.spikes.astype(np.float64)
            f = msg(rec.trace.u, rec.trace.theta, surrogate).astype(np.float64)
            nxt = np.zeros_like(g_up[:, 0])
            for t in reversed(range(T)):
                ds = g_up[:, t].copy()
                if reset_path:
                    ds += nxt * (-tau * u[:, t])
                send[:, t] = ds * f[:, t]
                du[:, t] = send[:, t] + nxt * tau * (1 - s[:, t])
                nxt = du[:, t]
            stats.intra_ops[i] = du.size
            stats.reset_ops[i] = du.size if reset_path else 0
        x = np.asarray(rec.inputs, dtype=np.float64)
        if layer.kind == "dense":
            grads[i] = np.einsum("btn,btm->nm", du, x)
            g_up = send @ w
            stats.inter_ops[i] = send.size * w.shape[1]
        else:
            grads[i] = tc.conv2d_grad_weight(du, x, layer.kernel, layer.stride, layer.padding)
            g_up = tc.conv2d_grad_input(w, send, net.input_layer_of(i)[1:], layer.stride, layer.padding)
            stats.inter_ops[i] = send.size * int(np.prod(w.shape[1:]))
        if i > 0:
            g_up = g_up.reshape(g_up.shape[:2] + tuple(net.input_layer_of(i)))
    return grads, stats


def masked_dense_backward(net, records, grad_out, cfg: MsgConfig = MsgConfig(), reset_path=True):
    """Dense BPTT with ``cfg`` applied as given; the default masked config is the MPD-ED oracle."""
    return dense_bptt(net, records, grad_out, cfg, reset_path)


def stbp_dense_backward(net, records, grad_out, sg: MsgConfig = MsgConfig(), reset_path=True):
    return dense_bptt(net, records, grad_out, sg.unmasked(), reset_path)


def naive_std_ed(net: Network, records, grad_out, d_min=None):
    """Timing-gradient backward by explicit loops over every output spike and its window."""
    if d_min is None:
        d_min = net.params.d_min
    grads = [None] * len(records)
    G = np.asarray(grad_out, dtype=np.float64)
    for rec in reversed(records):
        i = rec.index
        if net.spec.layers[i].kind != "dense" or rec.trace is None:
            raise ConfigError("naive_std_ed handles spiking dense layers only", field="layers")
        w = net.weights[i].astype(np.float64)
        x = np.asarray(rec.inputs, dtype=np.float64)
        s = rec.trace.spikes
        B, T, N = s.shape
        M = w.shape[1]
        dw = np.zeros_like(w)
        gin = np.zeros((B, T, M))
        for b in range(B):
            for n in range(N):
                for tk in range(1, T + 1):
                    if not s[b, tk - 1, n] or G[b, tk - 1, n] == 0:
                        continue
                    t_last = 0
                    for t in range(tk - 1, 0, -1):
                        if s[b, t - 1, n]:
                            t_last = t
                            break
                    counts = [0.0] * M
                    for tf in range(t_last + 1, tk + 1):
                        for j in range(M):
                            counts[j] += x[b, tf - 1, j]
                    denom = sum(w[n, j] * counts[j] for j in range(M))
                    denom = max(denom, d_min)
                    g = G[b, tk - 1, n]
                    for j in range(M):
                        dw[n, j] -= g * counts[j] / denom
                    for tf in range(t_last + 1, tk + 1):
                        for j in range(M):
                            if x[b, tf - 1, j] != 0:
                                gin[b, tf - 1, j] += g * w[n, j] / denom
        grads[i] = dw
        G = gin
    return grads


def random_instance(rng, algorithm, max_layers=3, max_neurons=16, max_steps=8, batch=2,
                    dtype=np.float64):
    """Random small dense network with binary input spikes and its forward records.

    The forward pass always runs in float32; the returned network, records and
    output gradient are then cast to ``dtype`` for the backward comparison.
    Weights carry a small positive bias so hidden layers usually fire.
    """
    n_layers = int(rng.integers(1, max_layers + 1))
    T = int(rng.integers(2, max_steps + 1))
    m = int(rng.integers(2, max_neurons + 1))
    model = "aft_if" if algorithm == "std_ed" else "aft_lif"
    head = "spiking"
    if algorithm == "mpd_ed" and rng.random() < 0.5:
        head = "integrator"
    layers = [{"kind": "dense", "fan_out": int(rng.integers(2, max_neurons + 1)), "neuron_model": model}
              for _ in range(n_layers)]
    spec = tc.NetworkSpec(input_shape=(m,), layers=layers, time_steps=T, output_head=head)
    weights = []
    for _, (in_shape, out_shape) in zip(spec.layers, spec.shapes()):
        fan_in = in_shape[0]
        w = rng.normal(0.15, 0.6, size=(out_shape[0], fan_in)) * np.sqrt(2.0 / fan_in) * 1.5
        weights.append(w.astype(tc.DTYPE))
    params = AftParams(theta0=1.0, alpha=float(rng.uniform(0.0, 0.5)), tau=float(rng.uniform(0.2, 0.9)))
    net = Network(spec, weights, params)
    x = (rng.random((batch, T, m)) < rng.uniform(0.2, 0.6)).astype(tc.DTYPE)
    records = net.forward(x)
    out = records[-1]
    g = rng.normal(size=out.outputs.shape).astype(tc.DTYPE)
    if algorithm == "std_ed":
        g = g * out.trace.spikes
    if dtype != tc.DTYPE:
        net, records = net.promote(records, dtype)
        g = g.astype(dtype)
    return net, records, g


def run_trial(rng, algorithm, tolerance=1e-6, fault=False, dtype=np.float64):
    """One engine-vs-oracle comparison; ``fault`` perturbs one engine gradient (negative control)."""
    if algorithm not in ("std_ed", "mpd_ed"):
        raise ConfigError(f"no oracle for algorithm {algorithm!r}", field="algorithm")
    net, records, g = random_instance(rng, algorithm, dtype=dtype)
    if algorithm == "std_ed":
        got, _ = std_ed_backward(net, records, g)
        ref = naive_std_ed(net, records, g)
    else:
        cfg = MsgConfig()
        got, _ = mpd_ed_backward(net, records, g, cfg)
        ref, _ = masked_dense_backward(net, records, g, cfg)
    if fault:
        got = [None if a is None else a.copy() for a in got]
        layer = int(np.argmax([np.abs(r).max() for r in ref]))
        idx = np.unravel_index(np.abs(ref[layer]).argmax(), ref[layer].shape)
        got[layer][idx] += max(1e-3 * abs(ref[layer][idx]), 1e-3)
    return compare(got, ref, tolerance)
