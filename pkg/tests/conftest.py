import numpy as np
import pytest

from aftsnn.network import Network
from aftsnn.neurons import AftParams
from aftsnn.tensor import NetworkSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dense_net(sizes, T, model="aft_lif", head="spiking", params=None, weights=None, rng=None, dtype=np.float64):
    """Dense stack ``sizes[0] -> sizes[1] -> ...`` with explicit or random weights."""
    layers = [{"kind": "dense", "fan_out": n, "neuron_model": model} for n in sizes[1:]]
    spec = NetworkSpec(input_shape=(sizes[0],), layers=layers, time_steps=T, output_head=head)
    if weights is None:
        rng = rng or np.random.default_rng(0)
        weights = [rng.normal(0.2, 0.6, size=(n, m)) for m, n in zip(sizes[:-1], sizes[1:])]
    weights = [np.asarray(w, dtype=dtype) for w in weights]
    return Network(spec, weights, params or AftParams(theta0=1.0, alpha=0.1, tau=0.5))


def binary_input(rng, B, T, M, p=0.4, dtype=np.float64):
    return (rng.random((B, T, M)) < p).astype(dtype)


def simulate(net, x, dtype=np.float64):
    """Forward pass (float32), then recompute currents and potentials in ``dtype`` along the spikes."""
    return net.promote(net.forward(x), dtype)[1]


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
