import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aftsnn.errors import ConfigError, DataError
from aftsnn.neurons import AftParams, aft_if_run, aft_lif_run, integrator_run


def column(values):
    """(1, T, 1) current array from a per-step list."""
    return np.asarray(values, dtype=np.float32)[None, :, None]


def test_if_hand_simulation_period_two():
    tr = aft_if_run(column([0.3] * 6), AftParams(theta0=1.0, alpha=0.25))
    np.testing.assert_allclose(tr.theta[0, :, 0], [0.75, 0.5] * 3)
    np.testing.assert_allclose(tr.u[0, :, 0], [0.3, 0.6] * 3, rtol=1e-6)
    assert tr.spikes[0, :, 0].tolist() == [0, 1] * 3
    assert tr.last_spike[0, :, 0].tolist() == [0, 0, 2, 2, 4, 4]


def test_if_silent_without_input():
    tr = aft_if_run(np.zeros((1, 20, 3), np.float32), AftParams(theta0=1.0, alpha=0.0))
    assert tr.spikes.sum() == 0
    # the threshold reaching 0 does not make a neuron with u = 0 fire
    tr = aft_if_run(np.zeros((1, 20, 3), np.float32), AftParams(theta0=1.0, alpha=0.5))
    assert tr.theta[0, -1, 0] == 0 and tr.spikes.sum() == 0


def test_if_immediate_crossing():
    tr = aft_if_run(column([1.0, 0, 0]), AftParams(theta0=1.0, alpha=0.1))
    assert tr.spikes[0, :, 0].tolist() == [1, 0, 0]


def test_lif_membrane_step():
    tr = aft_lif_run(column([0.6, 0.5]), AftParams(theta0=5.0, alpha=0.0, tau=0.5))
    np.testing.assert_allclose(tr.u[0, :, 0], [0.6, 0.8], rtol=1e-6)


def test_lif_threshold_reset_and_decay_branches():
    p = AftParams(theta0=1.0, alpha=0.1, tau=0.5)
    fired = aft_lif_run(column([0.95, 0.0]), p)
    assert fired.theta[0, 0, 0] == pytest.approx(0.9) and fired.spikes[0, 0, 0] == 1
    assert fired.theta[0, 1, 0] == pytest.approx(1.0)
    silent = aft_lif_run(column([0.0, 0.0]), p)
    assert silent.theta[0, 1, 0] == pytest.approx(0.8)


def test_lif_reset_clears_membrane():
    tr = aft_lif_run(column([2.0, 0.3]), AftParams(theta0=1.0, alpha=0.0, tau=0.5))
    np.testing.assert_allclose(tr.u[0, :, 0], [2.0, 0.3])


def test_default_alpha_is_one_over_T():
    tr = aft_if_run(np.zeros((1, 4, 1), np.float32), AftParams(theta0=1.0))
    np.testing.assert_allclose(tr.theta[0, :, 0], [0.75, 0.5, 0.25, 0.0])


def test_integrator_accumulates_without_reset():
    out = integrator_run(column([1.0, 1.0, 1.0]), AftParams(tau=0.5))
    np.testing.assert_allclose(out[0, :, 0], [1.0, 1.5, 1.75])


@pytest.mark.parametrize("kwargs", [{"theta0": 0.0}, {"alpha": -0.1}, {"tau": 1.5}])
def test_param_validation(kwargs):
    with pytest.raises(ConfigError):
        AftParams(**kwargs)


@pytest.mark.parametrize("run", [aft_if_run, aft_lif_run])
def test_non_finite_current_rejected(run):
    with pytest.raises(DataError):
        run(column([0.1, np.nan]), AftParams())


currents = st.lists(st.floats(-1.0, 1.5, width=32), min_size=1, max_size=25)
params = st.builds(AftParams, theta0=st.floats(0.2, 2.0), alpha=st.floats(0.0, 0.6), tau=st.floats(0.0, 1.0))


@settings(max_examples=200, deadline=None)
@given(currents, params)
def test_if_invariants(values, p):
    tr = aft_if_run(column(values), p)
    u, th, s = tr.u[0, :, 0], tr.theta[0, :, 0], tr.spikes[0, :, 0]
    assert (th >= 0).all()
    np.testing.assert_array_equal(s > 0, (u >= th) & (u > 0))
    # u is the input summed since the last reset, recomputed from the raster
    acc = 0.0
    for t, c in enumerate(values):
        acc += np.float32(c)
        assert u[t] == pytest.approx(acc, abs=1e-5)
        if s[t]:
            acc = 0.0


@settings(max_examples=200, deadline=None)
@given(currents, params)
def test_lif_invariants(values, p):
    tr = aft_lif_run(column(values), p)
    assert (tr.theta >= 0).all()
    np.testing.assert_array_equal(tr.spikes > 0, (tr.u >= tr.theta) & (tr.u > 0))


def fixed_threshold_lif(values, theta0, tau):
    u_prev, s_prev, out = 0.0, 0, []
    for c in values:
        u = tau * u_prev * (1 - s_prev) + c
        s = int(u >= theta0 and u > 0)
        out.append(s)
        u_prev, s_prev = u, s
    return out


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1.0, 1.5, width=32), min_size=1, max_size=25),
       st.floats(0.25, 2.0, width=32), st.floats(0.0, 1.0, width=32))
def test_lif_alpha_zero_is_fixed_threshold(values, theta0, tau):
    tr = aft_lif_run(column(values), AftParams(theta0=float(theta0), alpha=0.0, tau=float(tau)))
    assert (tr.theta == np.float32(theta0)).all()
    ref = fixed_threshold_lif(np.float32(values), np.float32(theta0), np.float32(tau))
    assert tr.spikes[0, :, 0].astype(int).tolist() == ref


def anti_dormancy_violations(n=1000, T=400, seed=7):
    """Neurons whose inter-spike gap exceeds ceil(theta0/alpha) + ceil(theta0/c)."""
    rng = np.random.default_rng(seed)
    theta0 = rng.uniform(0.5, 2.0, n)
    alpha = rng.uniform(0.01, 0.5, n)
    c = rng.uniform(0.01, 1.0, n)
    bad = []
    for k in range(n):
        tr = aft_if_run(np.full((1, T, 1), c[k], np.float32), AftParams(theta0=theta0[k], alpha=alpha[k]))
        bound = math.ceil(theta0[k] / alpha[k]) + math.ceil(theta0[k] / c[k])
        steps = np.flatnonzero(tr.spikes[0, :, 0]) + 1
        gaps = np.diff(np.concatenate([[0], steps, [T + 1]]))[:-1] if steps.size else [T + 1]
        tail = T - (steps[-1] if steps.size else 0)
        if max(gaps) > bound or (tail > bound):
            bad.append(k)
    return bad


def test_anti_dormancy():
    assert anti_dormancy_violations() == []
