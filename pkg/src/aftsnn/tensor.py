"""Synaptic-current layers shared by both learning engines.

Arrays are numpy float32. Every operation accepts arbitrary leading batch
dimensions (typically ``(batch, time)``) in front of the per-sample shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from math import prod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

DTYPE = np.float32

LAYER_KINDS = ("dense", "conv2d", "pool")
POOL_MODES = ("max", "scaled_average")
NEURON_MODELS = ("aft_if", "aft_lif", "none")
OUTPUT_HEADS = ("spiking", "integrator")


def dense_current(weights, inputs):
    """``out[..., i] = sum_j weights[i, j] * inputs[..., j]``."""
    weights = np.asarray(weights)
    inputs = np.asarray(inputs)
    if weights.ndim != 2 or inputs.shape[-1] != weights.shape[1]:
        raise ConfigError(
            f"dense_current: weights {weights.shape} incompatible with input {inputs.shape}")
    return inputs @ weights.T


def _conv_windows(inputs, kernel, stride, padding):
    if padding:
        pad = [(0, 0)] * (inputs.ndim - 2) + [(padding, padding), (padding, padding)]
        inputs = np.pad(inputs, pad)
    win = sliding_window_view(inputs, (kernel, kernel), axis=(-2, -1))
    return win[..., ::stride, ::stride, :, :]


def conv2d_current(weights, inputs, stride=1, padding=0):
    """2-D cross-correlation. ``weights``: (out_ch, in_ch, k, k); ``inputs``: (..., in_ch, H, W)."""
    weights = np.asarray(weights)
    inputs = np.asarray(inputs)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ConfigError(f"conv2d_current: bad kernel shape {weights.shape}")
    if inputs.ndim < 3 or inputs.shape[-3] != weights.shape[1]:
        raise ConfigError(
            f"conv2d_current: weights {weights.shape} incompatible with input {inputs.shape}")
    k = weights.shape[2]
    if k > inputs.shape[-1] + 2 * padding or k > inputs.shape[-2] + 2 * padding:
        raise ConfigError(f"conv2d_current: kernel {k} exceeds input extent {inputs.shape[-2:]}")
    lead = inputs.shape[:-3]
    x = inputs.reshape((-1,) + inputs.shape[-3:])
    win = _conv_windows(x, k, stride, padding)  # (B, C, Ho, Wo, k, k)
    out = np.tensordot(win, weights, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out.reshape(lead + out.shape[1:])


def conv2d_grad_input(weights, grad_out, in_hw, stride=1, padding=0):
    """Transpose of :func:`conv2d_current` with respect to its input."""
    out_ch, in_ch, k, _ = weights.shape
    lead = grad_out.shape[:-3]
    g = grad_out.reshape((-1,) + grad_out.shape[-3:])
    ho, wo = g.shape[-2:]
    h, w = in_hw
    dx = np.zeros((g.shape[0], in_ch, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(g, weights[:, :, i, j], axes=([1], [0]))  # (B, Ho, Wo, C)
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx.reshape(lead + dx.shape[1:])


def conv2d_grad_weight(grad_out, inputs, kernel, stride=1, padding=0):
    """Gradient of ``sum(grad_out * conv2d_current(W, inputs))`` with respect to ``W``."""
    g = grad_out.reshape((-1,) + grad_out.shape[-3:])
    x = inputs.reshape((-1,) + inputs.shape[-3:])
    win = _conv_windows(x, kernel, stride, padding)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)


def _pool_view(inputs, window):
    *lead, c, h, w = inputs.shape
    if h % window or w % window:
        raise ConfigError(f"pool: window {window} does not divide input extent {(h, w)}")
    return inputs.reshape(*lead, c, h // window, window, w // window, window)


def pool(inputs, mode, window=2):
    """Non-overlapping pooling over the last two axes.

    ``max`` takes the window maximum; ``scaled_average`` returns the window
    sum (average times window size) so binary spikes pool to integer counts.
    """
    if mode not in POOL_MODES:
        raise ConfigError(f"unknown pool mode {mode!r}", field="pool_mode")
    v = _pool_view(np.asarray(inputs), window)
    if mode == "max":
        return v.max(axis=(-3, -1))
    return v.sum(axis=(-3, -1))


def pool_grad_input(grad_out, inputs, mode, window=2):
    """Route pooled-output gradients back to input positions.

    Sum pooling copies the gradient to every window element; max pooling
    sends it to the first maximal element of each window.
    """
    if mode == "scaled_average":
        g = np.repeat(np.repeat(grad_out, window, axis=-2), window, axis=-1)
        return g
    v = _pool_view(inputs, window)
    *lead, c, ho, _, wo, _ = v.shape
    flat = np.moveaxis(v, -3, -2).reshape(*lead, c, ho, wo, window * window)
    first = flat.argmax(axis=-1)
    onehot = np.zeros_like(flat, dtype=grad_out.dtype)
    np.put_along_axis(onehot, first[..., None], 1, axis=-1)
    g = onehot * grad_out[..., None]
    g = g.reshape(*lead, c, ho, wo, window, window)
    g = np.moveaxis(g, -2, -3).reshape(inputs.shape)
    return g


@dataclass
class LayerSpec:
    kind: str
    fan_out: int | None = None        # dense
    channels: int | None = None       # conv2d output channels
    kernel: int = 2                   # conv2d kernel or pool window
    stride: int = 1
    padding: int = 0
    pool_mode: str | None = None
    neuron_model: str = "none"
    fan_in: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}", field="kind")
        if self.neuron_model not in NEURON_MODELS:
            raise ConfigError(f"unknown neuron model {self.neuron_model!r}", field="neuron_model")
        if self.kind == "pool":
            if self.neuron_model != "none":
                raise ConfigError("pool layers carry no neurons", field="neuron_model")
            if self.pool_mode not in POOL_MODES:
                raise ConfigError(f"unknown pool mode {self.pool_mode!r}", field="pool_mode")
        elif self.neuron_model == "none":
            raise ConfigError(f"{self.kind} layer needs a neuron model", field="neuron_model")
        if self.kind == "dense" and (self.fan_out is None or self.fan_out < 1):
            raise ConfigError("dense layer needs fan_out >= 1", field="fan_out")
        if self.kind == "conv2d" and (self.channels is None or self.channels < 1):
            raise ConfigError("conv2d layer needs channels >= 1", field="channels")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", field="layers")
        return cls(**d)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    def out_shape(self, in_shape):
        if self.kind == "dense":
            m = prod(in_shape)
            if self.fan_in is not None and self.fan_in != m:
                raise ConfigError(f"fan_in {self.fan_in} but input has {m} values", field="fan_in")
            return (self.fan_out,)
        if len(in_shape) != 3:
            raise ConfigError(f"{self.kind} expects (C, H, W) input, got {in_shape}", field="layers")
        c, h, w = in_shape
        if self.kind == "pool":
            if h % self.kernel or w % self.kernel:
                raise ConfigError(f"pool window {self.kernel} does not divide {(h, w)}", field="kernel")
            return (c, h // self.kernel, w // self.kernel)
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if self.kernel > hp or self.kernel > wp:
            raise ConfigError(f"kernel {self.kernel} larger than input {(h, w)}", field="kernel")
        return (self.channels, (hp - self.kernel) // self.stride + 1, (wp - self.kernel) // self.stride + 1)


@dataclass
class NetworkSpec:
    input_shape: tuple
    layers: list = field(default_factory=list)
    time_steps: int = 1
    output_head: str = "spiking"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in self.layers]
        if self.time_steps < 1:
            raise ConfigError("time_steps must be >= 1", field="time_steps")
        if self.output_head not in OUTPUT_HEADS:
            raise ConfigError(f"unknown output head {self.output_head!r}", field="output_head")
        if not self.layers or self.layers[-1].kind != "dense":
            raise ConfigError("last layer must be dense", field="layers")
        self.shapes()

    def shapes(self):
        """List of (in_shape, out_shape) per layer; raises if adjacent layers do not compose."""
        out = []
        shape = self.input_shape
        for layer in self.layers:
            nxt = layer.out_shape(shape)
            out.append((shape, nxt))
            shape = nxt
        return out

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(input_shape=d["input_shape"], layers=d["layers"],
                       time_steps=int(d.get("time_steps", 1)),
                       output_head=d.get("output_head", "spiking"))
        except KeyError as e:
            raise ConfigError("missing key", field=f"network.{e.args[0]}") from None

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers],
                "time_steps": self.time_steps, "output_head": self.output_head}


def init_weights(spec: NetworkSpec, rng):
    """Fan-in scaled uniform weights, one array per dense/conv layer (``None`` for pools)."""
    weights = []
    for layer, (in_shape, out_shape) in zip(spec.layers, spec.shapes()):
        if layer.kind == "dense":
            m = prod(in_shape)
            bound = np.sqrt(1.0 / m)
            weights.append(rng.uniform(-bound, bound, size=(layer.fan_out, m)).astype(DTYPE))
        elif layer.kind == "conv2d":
            m = in_shape[0] * layer.kernel ** 2
            bound = np.sqrt(1.0 / m)
            shape = (layer.channels, in_shape[0], layer.kernel, layer.kernel)
            weights.append(rng.uniform(-bound, bound, size=shape).astype(DTYPE))
        else:
            weights.append(None)
    return weights
