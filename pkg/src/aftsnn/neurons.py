"""Discrete-time AFT-IF and AFT-LIF neuron dynamics.

Both simulators take input currents shaped ``(batch, T, *neurons)`` and return
a :class:`LayerTrace` with the same leading layout. Steps are 1-based in the
model (``t = 1..T``) and stored at array index ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .tensor import DTYPE


@dataclass(frozen=True)
class AftParams:
    theta0: float = 1.0
    alpha: float | None = None   # None -> 1/T
    tau: float = 0.5

    def __post_init__(self):
        if not self.theta0 > 0:
            raise ConfigError("theta0 must be > 0", field="theta0")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError("alpha must be >= 0", field="alpha")
        if not 0 <= self.tau <= 1:
            raise ConfigError("tau must lie in [0, 1]", field="tau")

    def resolved(self, time_steps):
        """Copy with ``alpha`` filled in as ``1/T`` when unset."""
        if self.alpha is not None:
            return self
        return AftParams(self.theta0, 1.0 / time_steps, self.tau)

    @property
    def d_min(self):
        return 0.1 * self.theta0


@dataclass
class LayerTrace:
    """Forward record of one spiking layer.

    ``u`` holds the membrane potential *before* any reset at that step, which is
    the value compared against ``theta``. ``last_spike[:, t-1]`` is the step of
    the most recent output spike strictly before step ``t`` (0 when none).
    """

    u: np.ndarray
    theta: np.ndarray
    spikes: np.ndarray
    last_spike: np.ndarray

    @property
    def time_steps(self):
        return self.u.shape[1]


def _check(currents):
    currents = np.asarray(currents, dtype=DTYPE)
    if currents.ndim < 2 or currents.shape[1] < 1:
        raise DataError(f"currents must be (batch, T, ...) with T >= 1, got {currents.shape}")
    if not np.all(np.isfinite(currents)):
        bad = np.argwhere(~np.isfinite(currents))[0]
        raise DataError(f"non-finite input current at index {tuple(bad)}")
    return currents


def aft_if_run(currents, params: AftParams) -> LayerTrace:
    currents = _check(currents)
    T = currents.shape[1]
    p = params.resolved(T)
    theta0, alpha = DTYPE(p.theta0), DTYPE(p.alpha)
    shape = (currents.shape[0],) + currents.shape[2:]
    u = np.zeros(shape, DTYPE)
    t_last = np.zeros(shape, np.int32)
    us = np.empty_like(currents)
    thetas = np.empty_like(currents)
    spikes = np.zeros(currents.shape, DTYPE)
    lasts = np.empty(currents.shape, np.int32)
    for t in range(1, T + 1):
        theta = np.maximum(DTYPE(0), theta0 - alpha * (t - t_last).astype(DTYPE))
        u = u + currents[:, t - 1]
        s = (u >= theta) & (u > 0)
        us[:, t - 1] = u
        thetas[:, t - 1] = theta
        spikes[:, t - 1] = s
        lasts[:, t - 1] = t_last
        u = np.where(s, DTYPE(0), u)
        t_last = np.where(s, t, t_last).astype(np.int32)
    return LayerTrace(us, thetas, spikes, lasts)


def aft_lif_run(currents, params: AftParams) -> LayerTrace:
    currents = _check(currents)
    T = currents.shape[1]
    p = params.resolved(T)
    theta0, alpha, tau = DTYPE(p.theta0), DTYPE(p.alpha), DTYPE(p.tau)
    shape = (currents.shape[0],) + currents.shape[2:]
    u_prev = np.zeros(shape, DTYPE)
    s_prev = np.zeros(shape, DTYPE)
    theta_prev = np.full(shape, theta0, DTYPE)
    t_last = np.zeros(shape, np.int32)
    us = np.empty_like(currents)
    thetas = np.empty_like(currents)
    spikes = np.zeros(currents.shape, DTYPE)
    lasts = np.empty(currents.shape, np.int32)
    for t in range(1, T + 1):
        u = tau * u_prev * (1 - s_prev) + currents[:, t - 1]
        theta = theta0 * s_prev + (theta_prev - alpha) * (1 - s_prev)
        theta = np.maximum(DTYPE(0), theta)
        s = ((u >= theta) & (u > 0)).astype(DTYPE)
        us[:, t - 1] = u
        thetas[:, t - 1] = theta
        spikes[:, t - 1] = s
        lasts[:, t - 1] = t_last
        t_last = np.where(s > 0, t, t_last).astype(np.int32)
        u_prev, s_prev, theta_prev = u, s, theta
    return LayerTrace(us, thetas, spikes, lasts)


def integrator_run(currents, params: AftParams):
    """Non-spiking readout: ``o[t] = tau * o[t-1] + I[t]``, never reset."""
    currents = _check(currents)
    tau = DTYPE(params.tau)
    out = np.empty_like(currents)
    acc = np.zeros_like(currents[:, 0])
    for t in range(currents.shape[1]):
        acc = tau * acc + currents[:, t]
        out[:, t] = acc
    return out


def run_neurons(model, currents, params):
    if model == "aft_if":
        return aft_if_run(currents, params)
    if model == "aft_lif":
        return aft_lif_run(currents, params)
    raise ConfigError(f"unknown neuron model {model!r}", field="neuron_model")
