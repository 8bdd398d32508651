"""Spike-activity accounting, training-cost formulas and SOP energy estimates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

PJ_PER_SOP = 1.49          # 40 MHz, 0.56 V operating point
PJ_PER_SOP_FAST = 4.16     # 210 MHz, 0.9 V

# Validation network, second FC layer (hidden -> output)
REPORTED_CASES = (
    {"algorithm": "std_ed", "M": 200, "N": 10, "T": 30, "zeta_in": 0.0086, "zeta_out": 0.0604, "expected": 99.14},
    {"algorithm": "mpd_ed", "M": 200, "N": 10, "T": 30, "zeta_in": 0.0527, "zeta_out": 0.1287, "expected": 94.22},
)


def record_activity(raster):
    """Mean spikes per neuron per step, averaged over samples. ``raster``: (B, T, ...)."""
    r = np.asarray(raster)
    if r.size == 0:
        return 0.0
    return float(np.count_nonzero(r)) / r.size


@dataclass
class ActivityStats:
    """Running per-layer spike totals; ``zeta`` gives the mean activity so far."""

    spikes: dict = field(default_factory=dict)
    slots: dict = field(default_factory=dict)

    def add(self, layer, raster):
        r = np.asarray(raster)
        self.spikes[layer] = self.spikes.get(layer, 0) + int(np.count_nonzero(r))
        self.slots[layer] = self.slots.get(layer, 0) + r.size

    def merge(self, other):
        for k in other.slots:
            self.spikes[k] = self.spikes.get(k, 0) + other.spikes.get(k, 0)
            self.slots[k] = self.slots.get(k, 0) + other.slots[k]
        return self

    def zeta(self, layer):
        n = self.slots.get(layer, 0)
        return self.spikes.get(layer, 0) / n if n else 0.0

    def as_dict(self):
        return {k: self.zeta(k) for k in sorted(self.slots)}


def _check_dims(M, N, T):
    for name, v in (("M", M), ("N", N), ("T", T)):
        if v <= 0:
            raise ConfigError(f"{name} must be positive, got {v}", field=name)


def training_costs(M, N, T, zeta_in, zeta_out):
    """Backward operation counts of one M->N fully connected layer, per algorithm."""
    _check_dims(M, N, T)
    return {
        "stbp": M * N * T + 2 * N * T,
        "mpd_ed": zeta_in * M * N * T + N * T + zeta_out * N * T,
        "std_ed": zeta_in * M * N * T,
    }


def complexity_reduction(M, N, T, zeta_in, zeta_out, algorithm):
    """Fractional cost saving of ``algorithm`` relative to dense STBP."""
    costs = training_costs(M, N, T, zeta_in, zeta_out)
    if algorithm not in costs:
        raise ConfigError(f"unknown algorithm {algorithm!r}", field="algorithm")
    return 1.0 - costs[algorithm] / costs["stbp"]


def energy_estimate(sop_count, pj_per_sop=PJ_PER_SOP):
    """Energy in joules for ``sop_count`` synaptic operations."""
    return sop_count * pj_per_sop * 1e-12


def forward_sops(net, records):
    """Synaptic operations of a forward pass: one per input event per receiving synapse."""
    total = 0
    for rec in records:
        layer = net.spec.layers[rec.index]
        if layer.kind == "pool":
            continue
        events = np.count_nonzero(rec.inputs)
        w = net.weights[rec.index]
        if layer.kind == "dense":
            total += int(events) * w.shape[0]
        else:
            total += int(events) * w.shape[0] * layer.kernel ** 2
    return total


def paper_check(tolerance_pp=0.01):
    """Recompute the two reported reductions; returns a list of result dicts."""
    results = []
    for case in REPORTED_CASES:
        red = 100.0 * complexity_reduction(case["M"], case["N"], case["T"],
                                           case["zeta_in"], case["zeta_out"], case["algorithm"])
        results.append({**case, "reduction_pct": red,
                        "passed": abs(red - case["expected"]) <= tolerance_pp})
    return results


def layer_report(M, N, T, zeta_in, zeta_out):
    costs = training_costs(M, N, T, zeta_in, zeta_out)
    return {
        "M": M, "N": N, "T": T, "zeta_in": zeta_in, "zeta_out": zeta_out,
        "costs": costs,
        "reduction": {alg: 1.0 - costs[alg] / costs["stbp"] for alg in ("mpd_ed", "std_ed")},
    }
