"""Training loop, optimizers, learning-rate schedule and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

import numpy as np

from . import complexity as cx
from .errors import ConfigError, NumericError
from .events import BackwardStats
from .mpd_ed import MsgConfig, ce_spike_loss, mpd_ed_backward, tet_loss
from .network import Network
from .neurons import AftParams
from .oracle import stbp_dense_backward
from .std_ed import spike_count_loss, std_ed_backward
from .tensor import DTYPE, NetworkSpec, init_weights

log = logging.getLogger(__name__)

ALGORITHMS = ("std_ed", "mpd_ed", "stbp")
OPTIMIZERS = ("sgd_momentum", "adamw")
LOSSES = ("spike_count", "tet", "ce_spike")
CKPT_MAGIC = b"AFTSNN01"


@dataclass
class TrainConfig:
    algorithm: str = "mpd_ed"
    epochs: int = 1
    batch_size: int = 64
    optimizer: str = "adamw"
    lr_max: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss: str = "tet"
    desired: tuple = (5, 1)
    tet_lambda: float = 0.05
    tet_phi: float | None = None          # None -> theta0
    aft: AftParams = field(default_factory=AftParams)
    msg: MsgConfig = field(default_factory=MsgConfig)
    reset_path: bool = True
    checkpoint_every: int = 5
    train_subset: int | None = None
    test_subset: int | None = None
    eval_batch_size: int = 256
    threads: int = 1
    micro_batch: int | None = None      # gradient accumulation chunk size

    def __post_init__(self):
        if isinstance(self.aft, dict):
            self.aft = AftParams(**self.aft)
        if isinstance(self.msg, dict):
            self.msg = MsgConfig(**self.msg)
        self.betas = tuple(self.betas)
        self.desired = tuple(self.desired)
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"must be one of {ALGORITHMS}", field="train.algorithm")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"must be one of {OPTIMIZERS}", field="train.optimizer")
        if self.loss not in LOSSES:
            raise ConfigError(f"must be one of {LOSSES}", field="train.loss")
        for name in ("batch_size", "eval_batch_size", "threads", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", field=f"train.{name}")
        if self.micro_batch is not None and self.micro_batch < 1:
            raise ConfigError("must be >= 1", field="train.micro_batch")
        if self.epochs < 0:
            raise ConfigError("must be >= 0", field="train.epochs")
        if self.lr_max <= 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ConfigError("need 0 <= lr_min <= lr_max and lr_max > 0", field="train.lr_max")
        if self.weight_decay < 0:
            raise ConfigError("must be >= 0", field="train.weight_decay")
        if len(self.desired) != 2 or min(self.desired) < 0:
            raise ConfigError("need [target, non_target] counts >= 0", field="train.desired")
        if self.algorithm == "std_ed" and self.loss != "spike_count":
            raise ConfigError("std_ed trains with the spike_count loss", field="train.loss")
        if self.algorithm != "std_ed" and self.loss == "spike_count":
            raise ConfigError("spike_count loss needs algorithm std_ed", field="train.loss")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", field="train")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e), field="train") from None

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["desired"] = list(self.desired)
        return d


@dataclass
class RunConfig:
    dataset: str
    network: NetworkSpec
    train: TrainConfig

    def __post_init__(self):
        if self.dataset not in ("fmnist", "nmnist", "arrays"):
            raise ConfigError(f"unknown dataset {self.dataset!r}", field="dataset")
        models = {l.neuron_model for l in self.network.layers if l.kind != "pool"}
        want = "aft_if" if self.train.algorithm == "std_ed" else "aft_lif"
        if models != {want}:
            raise ConfigError(f"{self.train.algorithm} needs {want} neurons, got {sorted(models)}",
                              field="network.layers")
        head = self.network.output_head
        if self.train.loss == "tet" and head != "integrator":
            raise ConfigError("tet loss needs an integrator output head", field="network.output_head")
        if self.train.loss in ("ce_spike", "spike_count") and head != "spiking":
            raise ConfigError(f"{self.train.loss} loss needs a spiking output head", field="network.output_head")

    @classmethod
    def from_dict(cls, d):
        for key in ("dataset", "network"):
            if key not in d:
                raise ConfigError("missing key", field=key)
        return cls(d["dataset"], NetworkSpec.from_dict(d["network"]), TrainConfig.from_dict(d.get("train", {})))

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}", field=str(path)) from None
        return cls.from_dict(d)

    def to_dict(self):
        return {"dataset": self.dataset, "network": self.network.to_dict(), "train": self.train.to_dict()}


def cosine_lr(epoch, total, lr_max, lr_min):
    if total <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * epoch / total))


def _check_grads(grads):
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {i}")


class SGDMomentum:
    def __init__(self, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, params, grads, lr):
        _check_grads(grads)
        for i, (p, g) in enumerate(zip(params, grads)):
            if p is None:
                continue
            g = g + self.weight_decay * p if self.weight_decay else g
            v = self.state.get(i)
            v = g.copy() if v is None else self.momentum * v + g
            self.state[i] = v
            p -= (lr * v).astype(p.dtype)


class AdamW:
    """Adam with bias-corrected moments and weight decay applied directly to the weights."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr):
        _check_grads(grads)
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            if p is None:
                continue
            m = self.m.get(i, np.zeros_like(p))
            v = self.v.get(i, np.zeros_like(p))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[i], self.v[i] = m, v
            if self.weight_decay:
                p -= (lr * self.weight_decay * p).astype(p.dtype)
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adamw":
        return AdamW(cfg.betas, cfg.eps, cfg.weight_decay)
    return SGDMomentum(cfg.momentum, cfg.weight_decay)


def save_checkpoint(path, spec: NetworkSpec, cfg, epoch, metrics, weights, dataset=None):
    """Header: magic, u32 LE JSON length, JSON; then float32 LE weight blobs in layer order."""
    blobs = [(i, np.ascontiguousarray(w, dtype="<f4")) for i, w in enumerate(weights) if w is not None]
    header = {
        "network": spec.to_dict(),
        "dataset": dataset,
        "train": cfg.to_dict() if hasattr(cfg, "to_dict") else cfg,
        "epoch": epoch,
        "metrics": metrics,
        "blobs": [{"layer": i, "shape": list(b.shape)} for i, b in blobs],
    }
    raw = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", len(raw)) + raw)
        for _, b in blobs:
            f.write(b.tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ConfigError("not a checkpoint file", field=str(path))
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n])
    spec = NetworkSpec.from_dict(header["network"])
    weights = [None] * len(spec.layers)
    off = 12 + n
    for b in header["blobs"]:
        count = int(np.prod(b["shape"]))
        if off + 4 * count > len(data):
            raise ConfigError(f"blob for layer {b['layer']} runs past the end of the file", field=str(path))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(b["shape"])
        weights[b["layer"]] = arr.astype(DTYPE)
        off += 4 * count
    if off != len(data):
        raise ConfigError(f"blob lengths do not match file size ({off} != {len(data)})", field=str(path))
    header["network"] = spec
    header["weights"] = weights
    return header


def batch_gradients(net: Network, x, labels, cfg: TrainConfig):
    """Forward + loss + algorithm-dispatched backward on one batch chunk."""
    records = net.forward(x)
    out = records[-1]
    if cfg.loss == "spike_count":
        loss, g = spike_count_loss(out.outputs, labels, cfg.desired)
    elif cfg.loss == "ce_spike":
        loss, g = ce_spike_loss(out.outputs, labels)
    else:
        phi = net.params.theta0 if cfg.tet_phi is None else cfg.tet_phi
        loss, g = tet_loss(out.outputs, labels, cfg.tet_lambda, phi)
    if cfg.algorithm == "std_ed":
        grads, stats = std_ed_backward(net, records, g)
    elif cfg.algorithm == "mpd_ed":
        grads, stats = mpd_ed_backward(net, records, g, cfg.msg, cfg.reset_path)
    else:
        grads, stats = stbp_dense_backward(net, records, g, cfg.msg, cfg.reset_path)
        grads = [None if a is None else a.astype(DTYPE) for a in grads]
    correct = int((net.predict(records) == labels).sum())
    return loss, grads, correct, stats, records


def _chunks(n, k):
    bounds = np.linspace(0, n, min(k, n) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def activity_layers(net):
    """(column name, record index) for each spiking layer plus the input."""
    cols = [("zeta_L0", None)]
    k = 0
    for i, layer in enumerate(net.spec.layers):
        if layer.kind == "pool":
            continue
        k += 1
        if net.is_head(i) and net.spec.output_head == "integrator":
            continue
        cols.append((f"zeta_L{k}", i))
    return cols


def _record_activity(stats: cx.ActivityStats, net, records):
    for name, i in activity_layers(net):
        stats.add(name, records[0].inputs if i is None else records[i].outputs)


def _split(n, cfg):
    k = cfg.threads
    if cfg.micro_batch:
        k = max(k, -(-n // cfg.micro_batch))
    return _chunks(n, k)


def train_step(net, x, labels, cfg, pool=None):
    """Batch-mean loss and gradients, reduced over chunks in a fixed order.

    The batch is cut into ``threads`` chunks run concurrently, or into chunks
    of at most ``micro_batch`` samples run one after another so that only one
    chunk's traces are alive at a time. Returns ``(loss, grads, correct,
    stats, activity, forward_sops)``.
    """
    n = len(labels)
    parts = _split(n, cfg)

    def run(s):
        loss, g, c, st, records = batch_gradients(net, x[s], labels[s], cfg)
        act = cx.ActivityStats()
        _record_activity(act, net, records)
        return loss, g, c, st, act, cx.forward_sops(net, records)

    results = pool.map(run, parts) if pool is not None and len(parts) > 1 else map(run, parts)
    loss = 0.0
    grads = None
    correct = sops = 0
    stats = BackwardStats()
    activity = cx.ActivityStats()
    for s, (l, g, c, st, act, fs) in zip(parts, results):
        w = (s.stop - s.start) / n
        loss += w * l
        if len(parts) > 1:
            g = [None if a is None else a * DTYPE(w) for a in g]
        grads = g if grads is None else [None if a is None else a + b for a, b in zip(grads, g)]
        correct += c
        sops += fs
        stats.merge(st)
        activity.merge(act)
    return loss, grads, correct, stats, activity, sops


def evaluate(net: Network, dataset, batch_size=256, activity=None):
    correct = 0
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        x, y = dataset.batch(idx)
        records = net.forward(x)
        correct += int((net.predict(records) == y).sum())
        if activity is not None:
            _record_activity(activity, net, records)
    return correct / max(len(dataset), 1)


@dataclass
class TrainResult:
    metrics: list
    network: Network
    best_acc: float
    activity: cx.ActivityStats
    stats: BackwardStats
    forward_sops: int
    samples_seen: int


def train(config: RunConfig, train_set, test_set, out_dir=None, weights=None, progress=None):
    """Run the configured number of epochs; writes metrics.csv, checkpoints and a report to ``out_dir``."""
    cfg = config.train
    spec = config.network
    rng = np.random.default_rng(cfg.seed)
    if weights is None:
        weights = init_weights(spec, rng)
    net = Network(spec, weights, cfg.aft)
    train_set = train_set.subset(cfg.train_subset, rng) if cfg.train_subset else train_set
    test_set = test_set.subset(cfg.test_subset) if cfg.test_subset else test_set
    opt = make_optimizer(cfg)
    out = Path(out_dir) if out_dir else None
    if out:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    columns = ["epoch", "lr", "train_loss", "train_acc", "test_acc"] + \
        [name for name, _ in activity_layers(net)] + ["wall_seconds"]
    metrics = []
    all_activity = cx.ActivityStats()
    all_stats = BackwardStats()
    fwd_sops = 0
    seen = 0
    best = -1.0
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def emit(row):
        metrics.append(row)
        if out:
            new = not (out / "metrics.csv").exists()
            with open(out / "metrics.csv", "a", newline="") as f:
                w = csv.DictWriter(f, fieldnames=columns)
                if new:
                    w.writeheader()
                w.writerow(row)
        if progress:
            progress(row)

    if out and (out / "metrics.csv").exists():
        (out / "metrics.csv").unlink()
    if cfg.epochs == 0:
        t0 = time.perf_counter()
        act = cx.ActivityStats()
        acc = evaluate(net, test_set, cfg.eval_batch_size, act)
        row = {"epoch": 0, "lr": 0.0, "train_loss": float("nan"), "train_acc": float("nan"), "test_acc": acc,
               **{name: act.zeta(name) for name, _ in activity_layers(net)},
               "wall_seconds": time.perf_counter() - t0}
        emit(row)
        best = acc
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
        order = rng.permutation(len(train_set))
        act = cx.ActivityStats()
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = train_set.batch(idx)
            loss, grads, c, stats, batch_act, sops = train_step(net, x, y, cfg, pool)
            opt.step(net.weights, grads, lr)
            loss_sum += loss * len(idx)
            correct += c
            all_stats.merge(stats)
            act.merge(batch_act)
            all_activity.merge(batch_act)
            fwd_sops += sops
            seen += len(idx)
        acc = evaluate(net, test_set, cfg.eval_batch_size)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": loss_sum / len(order),
               "train_acc": correct / len(order), "test_acc": acc,
               **{name: act.zeta(name) for name, _ in activity_layers(net)},
               "wall_seconds": time.perf_counter() - t0}
        emit(row)
        if out:
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                save_checkpoint(out / "checkpoints" / f"epoch{epoch + 1:04d}.snn", spec, cfg, epoch + 1, row, net.weights,
                                config.dataset)
            if acc > best:
                save_checkpoint(out / "checkpoints" / "best.snn", spec, cfg, epoch + 1, row, net.weights,
                                config.dataset)
        best = max(best, acc)
    if pool:
        pool.shutdown()
    result = TrainResult(metrics, net, best, all_activity, all_stats, fwd_sops, seen)
    if out:
        (out / "complexity.json").write_text(json.dumps(run_report(result, cfg), indent=2))
    return result


def run_report(result: TrainResult, cfg: TrainConfig):
    """Per-layer activity, closed-form costs, measured backward counters and energy estimates."""
    net = result.network
    T = net.spec.time_steps
    cols = dict(activity_layers(net))
    layers = []
    k = 0
    prev = "zeta_L0"
    for i, layer in enumerate(net.spec.layers):
        if layer.kind == "pool":
            continue
        k += 1
        name = f"zeta_L{k}"
        entry = {"layer": i, "kind": layer.kind}
        if layer.kind == "dense":
            # an integrator head never spikes, so it has no reset term
            M, N = net.weights[i].shape[1], net.weights[i].shape[0]
            zo = result.activity.zeta(name) if name in cols else 0.0
            entry.update(cx.layer_report(M, N, T, result.activity.zeta(prev), zo))
        entry["measured"] = {
            "inter_ops": result.stats.inter_ops.get(i, 0),
            "intra_ops": result.stats.intra_ops.get(i, 0),
            "reset_ops": result.stats.reset_ops.get(i, 0),
        }
        if result.samples_seen:
            entry["measured_per_sample"] = {key: v / result.samples_seen for key, v in entry["measured"].items()}
        layers.append(entry)
        prev = name
    backward = result.stats.total()
    return {
        "algorithm": cfg.algorithm,
        "samples": result.samples_seen,
        "activity": result.activity.as_dict(),
        "layers": layers,
        "sops": {"forward": result.forward_sops, "backward": backward, "total": result.forward_sops + backward},
        "energy_joules": {
            "at_1.49pJ": cx.energy_estimate(result.forward_sops + backward, cx.PJ_PER_SOP),
            "at_4.16pJ": cx.energy_estimate(result.forward_sops + backward, cx.PJ_PER_SOP_FAST),
        },
        "clamps": result.stats.clamps,
        "best_test_acc": result.best_acc,
    }
