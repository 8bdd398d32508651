import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aftsnn import mpd_ed
from aftsnn.errors import ConfigError, NumericError
from aftsnn.mpd_ed import MsgConfig, ce_spike_loss, mpd_ed_backward, msg, tet_loss
from aftsnn.neurons import AftParams
from aftsnn.oracle import compare, masked_dense_backward, stbp_dense_backward
from conftest import binary_input, dense_net, simulate


def test_msg_examples():
    cfg = MsgConfig("linear", width=1.0, height=1.0)
    assert msg(0.9, 1.0, cfg) == 0
    assert msg(1.0, 1.0, cfg) == pytest.approx(1.0)
    assert msg(1.2, 1.0, cfg) == pytest.approx(0.8)
    assert msg(2.5, 1.0, cfg) == 0


def test_msg_zero_potential_never_passes():
    # theta can decay to 0; u = 0 then does not fire and must not pass gradient
    assert msg(0.0, 0.0, MsgConfig("constant")) == 0


@settings(max_examples=300, deadline=None)
@given(st.floats(-3, 3), st.floats(0, 2), st.sampled_from(mpd_ed.MSG_SHAPES), st.floats(0.1, 3), st.floats(0.1, 3))
def test_msg_nonnegative_and_masked(u, theta, shape, width, height):
    cfg = MsgConfig(shape, width, height)
    f = msg(u, theta, cfg)
    assert f >= 0
    if u < theta or u <= 0:
        assert f == 0
    assert msg(u, theta, cfg.unmasked()) >= f


def test_msg_config_validation():
    for kwargs in ({"shape": "sigmoid"}, {"width": 0}, {"height": -1}):
        with pytest.raises(ConfigError):
            MsgConfig(**kwargs)


def test_tet_lambda_zero_is_mean_cross_entropy(rng):
    o = rng.normal(size=(2, 3, 4))
    labels = np.array([1, 3])
    loss, _ = tet_loss(o, labels, lam=0.0)
    logp = o - np.log(np.exp(o).sum(axis=-1, keepdims=True))
    assert loss == pytest.approx(-np.mean([logp[b, :, labels[b]] for b in range(2)]))


def test_tet_uniform_logits():
    loss, _ = tet_loss(np.zeros((1, 5, 10)), [4], lam=0.0)
    assert loss == pytest.approx(math.log(10))


@pytest.mark.parametrize("lam,phi", [(0.05, 1.0), (0.5, 0.3), (1.0, 2.0)])
def test_tet_gradient_finite_differences(rng, lam, phi):
    # smooth in o, so central differences are a valid oracle here
    o = rng.normal(size=(2, 3, 4))
    labels = np.array([0, 2])
    _, g = tet_loss(o, labels, lam, phi)
    h = 1e-6
    num = np.zeros_like(o)
    for idx in np.ndindex(o.shape):
        d = np.zeros_like(o)
        d[idx] = h
        num[idx] = (tet_loss(o + d, labels, lam, phi)[0] - tet_loss(o - d, labels, lam, phi)[0]) / (2 * h)
    np.testing.assert_allclose(g, num, atol=1e-6)


def test_tet_rejects_bad_lambda():
    with pytest.raises(ConfigError):
        tet_loss(np.zeros((1, 1, 2)), [0], lam=1.5)


def test_ce_spike_examples():
    s = np.zeros((1, 40, 3))
    s[0, :, 1] = 1
    loss, _ = ce_spike_loss(s, [1])
    assert loss < 1e-15
    loss, _ = ce_spike_loss(np.ones((2, 4, 5)), [0, 3])
    assert loss == pytest.approx(math.log(5))


def test_ce_spike_gradient_sums_to_count_gradient(rng):
    s = (rng.random((3, 6, 4)) < 0.4).astype(float)
    labels = np.array([0, 1, 3])
    _, g = ce_spike_loss(s, labels)
    c = s.sum(axis=1)
    p = np.exp(c) / np.exp(c).sum(axis=-1, keepdims=True)
    p[np.arange(3), labels] -= 1
    np.testing.assert_allclose(g.sum(axis=1), p / 3, rtol=1e-6)
    np.testing.assert_allclose(g[:, 0], g[:, -1])


HAND = AftParams(theta0=1.0, alpha=0.1, tau=0.5)


@pytest.mark.parametrize("w,reset_path,expect", [
    # spikes at both steps: f = (0.4, 0.5); du2 = 0.7*0.5; ds1 = 0.3 - 0.35*0.5*1.5
    (1.5, True, 0.015 + 0.35),
    (1.5, False, 0.12 + 0.35),
])
def test_single_neuron_hand_chain(w, reset_path, expect):
    net = dense_net([1, 1], 2, weights=[[[w]]], params=HAND)
    records = simulate(net, np.ones((1, 2, 1)))
    assert records[0].outputs[0, :, 0].tolist() == [1, 1]
    g = np.array([[[0.3], [0.7]]])
    # thresholds stay at their recorded float32 values (0.9 -> 0.899999976)
    got, _ = mpd_ed_backward(net, records, g, MsgConfig(), reset_path)
    np.testing.assert_allclose(got[0], [[expect]], rtol=1e-7)
    ref, _ = masked_dense_backward(net, records, g, MsgConfig(), reset_path)
    np.testing.assert_allclose(ref[0], [[expect]], rtol=1e-7)


def test_single_neuron_leak_path():
    # u = (0.7, 1.05) with theta 1: silent step 1 passes gradient only through the leak
    net = dense_net([1, 1], 2, weights=[[[0.7]]], params=AftParams(1.0, 0.0, 0.5))
    records = simulate(net, np.ones((1, 2, 1)))
    assert records[0].outputs[0, :, 0].tolist() == [0, 1]
    got, _ = mpd_ed_backward(net, records, np.array([[[0.3], [0.7]]]))
    du2 = 0.7 * 0.95
    np.testing.assert_allclose(got[0], [[du2 * 0.5 + du2]], rtol=1e-12)


def test_silent_layer_sends_nothing(rng):
    net = dense_net([6, 5, 3], 5, weights=[-np.ones((5, 6)), np.ones((3, 5))])
    records = simulate(net, binary_input(rng, 2, 5, 6))
    grads, stats = mpd_ed_backward(net, records, rng.normal(size=(2, 5, 3)))
    assert all(not g.any() for g in grads)
    assert stats.inter_ops[0] == 0


@pytest.mark.parametrize("head", ["spiking", "integrator"])
def test_random_two_layer_matches_masked_dense(rng, head):
    for _ in range(10):
        net = dense_net([7, 8, 4], 8, head=head, rng=rng, params=AftParams(1.0, 0.1, 0.6))
        records = simulate(net, binary_input(rng, 3, 8, 7, 0.5))
        g = rng.normal(size=(3, 8, 4))
        got, _ = mpd_ed_backward(net, records, g)
        ref, _ = masked_dense_backward(net, records, g)
        assert compare(got, ref).max_rel_diff <= 1e-10


def test_reset_path_flag_matches_oracle(rng):
    net = dense_net([7, 8, 4], 8, rng=rng)
    records = simulate(net, binary_input(rng, 3, 8, 7, 0.5))
    g = rng.normal(size=(3, 8, 4))
    got, _ = mpd_ed_backward(net, records, g, reset_path=False)
    ref, _ = masked_dense_backward(net, records, g, reset_path=False)
    assert compare(got, ref).max_rel_diff <= 1e-10


def test_inter_layer_signal_zero_where_silent(rng, monkeypatch):
    sent = {}
    real = mpd_ed.layer_backprop

    def spy(net, rec, err, need, err_input=None):
        sent[rec.index] = err_input
        return real(net, rec, err, need, err_input)

    monkeypatch.setattr(mpd_ed, "layer_backprop", spy)
    net = dense_net([6, 8, 8, 3], 8, rng=rng)
    records = simulate(net, binary_input(rng, 4, 8, 6, 0.5))
    mpd_ed_backward(net, records, rng.normal(size=(4, 8, 3)))
    for i in range(3):
        silent = records[i].outputs == 0
        assert not sent[i][silent].any()


def test_non_finite_adjoint_reports_layer(rng):
    net = dense_net([4, 3], 4, rng=rng, weights=[np.ones((3, 4))])
    records = simulate(net, np.ones((1, 4, 4)))
    g = np.zeros((1, 4, 3))
    g[0, 2, 1] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(NumericError, match="layer 0"):
        mpd_ed_backward(net, records, g)


def test_unmasked_surrogate_is_stbp(rng):
    net = dense_net([5, 6, 3], 6, rng=rng)
    records = simulate(net, binary_input(rng, 2, 6, 5))
    g = rng.normal(size=(2, 6, 3))
    a, _ = masked_dense_backward(net, records, g, MsgConfig().unmasked())
    b, _ = stbp_dense_backward(net, records, g)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
