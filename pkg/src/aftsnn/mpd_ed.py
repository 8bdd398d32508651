"""Membrane-potential-dependent event-driven backward pass for AFT-LIF networks."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tc
from .errors import ConfigError, NumericError
from .events import BackwardStats, layer_backprop
from .network import Network

MSG_SHAPES = ("constant", "linear", "exponential", "rectangular")


@dataclass(frozen=True)
class MsgConfig:
    """Shape of the surrogate derivative. ``masked=False`` gives the dense STBP surrogate."""

    shape: str = "linear"
    width: float = 1.0
    height: float = 1.0
    masked: bool = True

    def __post_init__(self):
        if self.shape not in MSG_SHAPES:
            raise ConfigError(f"unknown surrogate shape {self.shape!r}", field="msg.shape")
        if not self.width > 0:
            raise ConfigError("width must be > 0", field="msg.width")
        if not self.height > 0:
            raise ConfigError("height must be > 0", field="msg.height")

    def unmasked(self):
        return MsgConfig(self.shape, self.width, self.height, False)

    def to_dict(self):
        return asdict(self)


def msg(u, theta, cfg: MsgConfig = MsgConfig()):
    """Surrogate spike derivative ds/du.

    Masked mode returns 0 wherever the neuron does not fire (``u < theta`` or
    ``u <= 0``, the same condition the forward pass uses), so gradient flows
    only through emitted spikes.
    """
    u = np.asarray(u)
    dt = np.result_type(u.dtype, tc.DTYPE)
    u = u.astype(dt)
    theta = np.asarray(theta, dtype=dt)
    d = np.abs(u - theta)
    h, g = dt.type(cfg.height), dt.type(cfg.width)
    if cfg.shape == "constant":
        f = np.full_like(d, h)
    elif cfg.shape == "linear":
        f = np.maximum(0, h * (1 - d / g))
    elif cfg.shape == "exponential":
        f = h * np.exp(-d / g)
    else:
        f = np.where(d <= g, h, 0)
    if cfg.masked:
        f = np.where((u >= theta) & (u > 0), f, 0)
    f = f.astype(dt)
    return f if f.ndim else float(f)


def tet_loss(outputs, labels, lam=0.05, phi=1.0):
    """Per-step cross-entropy plus a ``lam``-weighted MSE pull towards ``phi``.

    ``outputs``: (B, T, C). Returns the batch-mean loss and dL/do with the
    same shape.
    """
    if not 0 <= lam <= 1:
        raise ConfigError("lambda must lie in [0, 1]", field="tet_lambda")
    o = np.asarray(outputs, dtype=np.float64)
    B, T, C = o.shape
    labels = np.asarray(labels)
    z = o - o.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    onehot = np.zeros((B, 1, C))
    onehot[np.arange(B), 0, labels] = 1.0
    ce = -(logp * onehot).sum(axis=-1)                      # (B, T)
    mse = ((o - phi) ** 2).mean(axis=-1)
    loss = float(((1 - lam) * ce + lam * mse).mean())
    grad = (1 - lam) * (np.exp(logp) - onehot) + lam * 2.0 * (o - phi) / C
    return loss, (grad / (B * T)).astype(tc.DTYPE)


def ce_spike_loss(output_spikes, labels):
    """Cross-entropy on time-summed output spike counts.

    The count-level gradient is split evenly over the T steps, so summing the
    returned per-step gradient over time gives dL/dcount exactly.
    """
    s = np.asarray(output_spikes, dtype=np.float64)
    B, T, C = s.shape
    counts = s.sum(axis=1)
    z = counts - counts.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    labels = np.asarray(labels)
    loss = float(-logp[np.arange(B), labels].mean())
    g = np.exp(logp)
    g[np.arange(B), labels] -= 1.0
    g /= B
    per_step = np.broadcast_to((g / T)[:, None, :], s.shape)
    return loss, np.ascontiguousarray(per_step, dtype=tc.DTYPE)


def _check_finite(arr, layer, what):
    if not np.all(np.isfinite(arr)):
        b, t = np.argwhere(~np.isfinite(arr))[0][:2]
        raise NumericError(f"non-finite {what} in layer {layer} at sample {b}, step {t + 1}")


def integrator_adjoint(grad_out, tau):
    """Reverse the readout recursion ``o[t] = tau*o[t-1] + I[t]``: dL/dI from dL/do."""
    g = np.asarray(grad_out)
    out = np.empty_like(g)
    carry = np.zeros_like(g[:, 0])
    tau = g.dtype.type(tau)
    for t in range(g.shape[1] - 1, -1, -1):
        carry = g[:, t] + tau * carry
        out[:, t] = carry
    return out


def mpd_ed_backward(net: Network, records, grad_out, cfg: MsgConfig = MsgConfig(), reset_path=True):
    """Event-driven BPTT over AFT-LIF layers.

    ``grad_out`` is dL/ds for a spiking head or dL/do for an integrator head,
    shaped (B, T, classes). Per spiking layer the reverse-time sweep keeps the
    membrane adjoint ``du``; the error sent to the layer below is
    ``ds * msg``, which is nonzero only at emitted spikes, and it is evaluated
    only at the input events of this layer. Thresholds are treated as constants.
    """
    dt = net.dtype
    tau = dt.type(net.params.tau)
    stats = BackwardStats()
    grads = [None] * len(records)
    G = np.asarray(grad_out, dtype=dt)
    for rec in reversed(records):
        i = rec.index
        layer = net.spec.layers[i]
        if layer.kind == "pool":
            if G is not None:
                G = tc.pool_grad_input(G, rec.inputs, layer.pool_mode, layer.kernel) * (rec.inputs != 0)
            continue
        w = net.weights[i]
        if G is None:
            grads[i] = np.zeros_like(w)
            stats.inter_ops[i] = stats.intra_ops[i] = stats.reset_ops[i] = 0
            continue
        if rec.trace is None:
            du = integrator_adjoint(G, tau)
            send = du
            stats.intra_ops[i] = du.size
            stats.reset_ops[i] = 0
        else:
            tr = rec.trace
            spikes = tr.spikes
            if not spikes.any():
                grads[i] = np.zeros_like(w)
                stats.inter_ops[i] = stats.intra_ops[i] = stats.reset_ops[i] = 0
                G = None
                continue
            m = msg(tr.u, tr.theta, cfg)
            du = np.empty_like(G)
            send = np.zeros_like(G)
            du_next = np.zeros_like(G[:, 0])
            n_reset = 0
            for t in range(G.shape[1] - 1, -1, -1):
                fired = spikes[:, t] > 0
                ds = G[:, t]
                if reset_path and t + 1 < G.shape[1]:
                    ds = ds + np.where(fired, du_next * (-tau * tr.u[:, t]), 0).astype(dt)
                    n_reset += int(fired.sum())
                e = np.where(fired, ds * m[:, t], 0).astype(dt)
                cur = e + du_next * tau * (1 - spikes[:, t])
                send[:, t] = e
                du[:, t] = cur
                du_next = cur
            stats.intra_ops[i] = du.size
            stats.reset_ops[i] = n_reset
            _check_finite(du, i, "membrane adjoint")
        # weights see the full membrane adjoint; the layer below only the spike-gated part
        dw, gin, ops, events = layer_backprop(net, rec, du, i > 0, err_input=send)
        grads[i] = dw
        stats.inter_ops[i] = ops
        stats.input_events[i] = events
        stats.timing_entries[i] = int(np.count_nonzero(send)) if rec.trace is not None else 0
        if i == 0 or gin is None:
            G = None
        else:
            G = gin.reshape(gin.shape[:2] + tuple(net.input_layer_of(i)))
    return grads, stats

