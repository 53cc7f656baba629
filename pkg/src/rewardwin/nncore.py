#############################
#  RewardWin - Neural Core
#
#  Small feed-forward networks (dense, conv,
#  pooling) with hand-written backpropagation
#  and the Adam optimizer.
#
#  This program is distributed free
#  of charge (open source) under the
#  GNU General Public License
#############################

"""
Networks are immutable values. `forward` returns the output together with a
tape (activation cache); `backward` turns the tape and an output gradient into
parameter gradients with the same layout as the parameters.

All arrays are float64 and carry a leading batch axis. Dense layers compute
`x @ W + b` with W of shape (in, out); Conv2d weights are (out, in, k, k) with
stride 1 and "same" zero padding.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .constants import (ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, KIND_CONV2D, KIND_DENSE,
                        KIND_FLATTEN, KIND_MAXPOOL2D, KIND_RELU, KIND_SOFTMAX, KIND_TANH,
                        NETWORK_MAGIC, NETWORK_VERSION)
from .rewardwin_common import (BinaryReader, BinaryWriter, ConfigError, DimensionMismatchError, FormatError,
                               NonFiniteError, ShapeError, StaleTapeError, read_bytes,
                               write_atomically)

log = logging.getLogger(__name__)

Shape = Tuple[int, ...]

DENSE = "dense"
CONV2D = "conv2d"
MAXPOOL2D = "maxpool2d"
RELU = "relu"
TANH = "tanh"
FLATTEN = "flatten"
SOFTMAX = "softmax"

_TAGS = {DENSE: KIND_DENSE, CONV2D: KIND_CONV2D, MAXPOOL2D: KIND_MAXPOOL2D, RELU: KIND_RELU,
         TANH: KIND_TANH, FLATTEN: KIND_FLATTEN, SOFTMAX: KIND_SOFTMAX}
_KINDS = {tag: kind for kind, tag in _TAGS.items()}
_DIM_COUNT = {DENSE: 2, CONV2D: 3, MAXPOOL2D: 1, RELU: 0, TANH: 0, FLATTEN: 0, SOFTMAX: 0}
_PARAMETRIC = (DENSE, CONV2D)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: Tuple[int, ...] = ()

    @classmethod
    def dense(cls, n_in: int, n_out: int) -> "LayerSpec":
        return cls(DENSE, (int(n_in), int(n_out)))

    @classmethod
    def conv2d(cls, in_ch: int, out_ch: int, k: int = 3) -> "LayerSpec":
        return cls(CONV2D, (int(in_ch), int(out_ch), int(k)))

    @classmethod
    def maxpool2d(cls, size: int = 2) -> "LayerSpec":
        return cls(MAXPOOL2D, (int(size),))

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(RELU)

    @classmethod
    def tanh(cls) -> "LayerSpec":
        return cls(TANH)

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls(FLATTEN)

    @classmethod
    def softmax(cls) -> "LayerSpec":
        return cls(SOFTMAX)

    @property
    def has_params(self) -> bool:
        return self.kind in _PARAMETRIC

    def param_shapes(self) -> Tuple[Optional[Shape], Optional[Shape]]:
        if self.kind == DENSE:
            return (self.dims[0], self.dims[1]), (self.dims[1],)
        if self.kind == CONV2D:
            c_in, c_out, k = self.dims
            return (c_out, c_in, k, k), (c_out,)
        return None, None

    def __str__(self) -> str:
        if self.dims:
            return "%s(%s)" % (self.kind, ",".join(str(d) for d in self.dims))
        return self.kind


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[LayerSpec, ...]
    input_shape: Shape

    def __init__(self, layers: Sequence[LayerSpec], input_shape: Sequence[int]):
        object.__setattr__(self, "layers", tuple(layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in input_shape))


def layer_output_shape(index: int, layer: LayerSpec, shape: Shape) -> Shape:
    kind = layer.kind
    if kind not in _DIM_COUNT:
        raise ShapeError("layer %d: unknown kind %r" % (index, kind))
    if len(layer.dims) != _DIM_COUNT[kind] or any(d < 1 for d in layer.dims):
        raise ShapeError("layer %d (%s): bad dimensions %r" % (index, kind, layer.dims))
    if kind == DENSE:
        if shape != (layer.dims[0],):
            raise ShapeError("layer %d (%s) expects input shape (%d,), got %r"
                             % (index, layer, layer.dims[0], shape))
        return (layer.dims[1],)
    if kind == CONV2D:
        c_in, c_out, k = layer.dims
        if len(shape) != 3 or shape[0] != c_in:
            raise ShapeError("layer %d (%s) expects (%d, H, W) input, got %r" % (index, layer, c_in, shape))
        if k % 2 == 0:
            raise ShapeError("layer %d (%s): 'same' padding needs an odd kernel" % (index, layer))
        return (c_out, shape[1], shape[2])
    if kind == MAXPOOL2D:
        s = layer.dims[0]
        if len(shape) != 3:
            raise ShapeError("layer %d (%s) expects (C, H, W) input, got %r" % (index, layer, shape))
        out = (shape[0], shape[1] // s, shape[2] // s)
        if out[1] < 1 or out[2] < 1:
            raise ShapeError("layer %d (%s): input %r pools down to nothing" % (index, layer, shape))
        return out
    if kind == FLATTEN:
        return (int(np.prod(shape)),)
    if kind == SOFTMAX and len(shape) != 1:
        raise ShapeError("layer %d (softmax) expects a vector input, got %r" % (index, shape))
    return shape


@dataclass(frozen=True, eq=False)
class NetworkParams:
    layers: Tuple[LayerSpec, ...]
    input_shape: Shape
    weights: Tuple[Optional[np.ndarray], ...]
    biases: Tuple[Optional[np.ndarray], ...]
    seed: Optional[int] = None

    @property
    def shapes(self) -> List[Shape]:
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shapes.append(layer_output_shape(i, layer, shapes[-1]))
        return shapes

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1]

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                yield w
                yield b

    def with_arrays(self, weights, biases) -> "NetworkParams":
        return dataclasses.replace(self, weights=tuple(weights), biases=tuple(biases))

    def same_as(self, other: "NetworkParams") -> bool:
        if self.layers != other.layers or self.input_shape != other.input_shape:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def build_network(layers: Sequence[LayerSpec], input_shape: Sequence[int], seed: int = 0) -> NetworkParams:
    input_shape = tuple(int(d) for d in input_shape)
    shape = input_shape
    for i, layer in enumerate(layers):
        shape = layer_output_shape(i, layer, shape)

    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in layers:
        w_shape, b_shape = layer.param_shapes()
        if w_shape is None:
            weights.append(None)
            biases.append(None)
            continue
        if layer.kind == DENSE:
            fan_in, fan_out = layer.dims[0], layer.dims[1]
        else:
            c_in, c_out, k = layer.dims
            fan_in, fan_out = c_in * k * k, c_out * k * k
        limit = glorot_limit(fan_in, fan_out)
        weights.append(rng.uniform(-limit, limit, size=w_shape))
        biases.append(np.zeros(b_shape))
    return NetworkParams(tuple(layers), input_shape, tuple(weights), tuple(biases), seed)


@dataclass
class Tape:
    params: NetworkParams
    caches: list = field(default_factory=list)
    output: Optional[np.ndarray] = None

    def pattern(self) -> list:
        # ReLU masks and max-pool winners; equal patterns mean no kink was crossed
        out = []
        for layer, cache in zip(self.params.layers, self.caches):
            if layer.kind == RELU:
                out.append(cache)
            elif layer.kind == MAXPOOL2D:
                out.append(cache[0])
        return out


def _dense_forward(w, b, x):
    return x @ w + b, x


def _dense_backward(w, cache, g):
    x = cache
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _conv_forward(w, b, x):
    n, c, h, wd = x.shape
    c_out, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
    out = cols @ w.reshape(c_out, -1).T + b
    return out.reshape(n, h, wd, c_out).transpose(0, 3, 1, 2), (cols, x.shape)


def _conv_backward(w, cache, g):
    cols, x_shape = cache
    n, c, h, wd = x_shape
    c_out, _, k, _ = w.shape
    p = k // 2
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dw = (g2.T @ cols).reshape(w.shape)
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(c_out, -1)).reshape(n, h, wd, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + h, p:p + wd], dw, db


def _pool_forward(size, x):
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    win = x[:, :, :ho * size, :wo * size].reshape(n, c, ho, size, wo, size)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def _pool_backward(size, cache, g):
    idx, x_shape = cache
    n, c, h, w = x_shape
    ho, wo = h // size, w // size
    gw = np.zeros((n, c, ho, wo, size * size))
    np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
    gw = gw.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
    dx = np.zeros(x_shape)
    dx[:, :, :ho * size, :wo * size] = gw
    return dx


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: NetworkParams, x: np.ndarray) -> Tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != len(params.input_shape) + 1 or tuple(x.shape[1:]) != params.input_shape:
        first = params.layers[0] if params.layers else "input"
        raise ShapeError("layer 0 (%s) expects batches of shape %r, got %r"
                         % (first, params.input_shape, tuple(x.shape)))
    tape = Tape(params)
    for i, layer in enumerate(params.layers):
        kind = layer.kind
        if kind == DENSE:
            x, cache = _dense_forward(params.weights[i], params.biases[i], x)
        elif kind == CONV2D:
            x, cache = _conv_forward(params.weights[i], params.biases[i], x)
        elif kind == MAXPOOL2D:
            x, cache = _pool_forward(layer.dims[0], x)
        elif kind == RELU:
            cache = x > 0
            x = np.where(cache, x, 0.0)
        elif kind == TANH:
            x = np.tanh(x)
            cache = x
        elif kind == FLATTEN:
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif kind == SOFTMAX:
            x = softmax(x)
            cache = x
        else:
            raise ShapeError("layer %d: unknown kind %r" % (i, kind))
        tape.caches.append(cache)
    tape.output = x
    return x, tape


def backward_with_input(params: NetworkParams, tape: Tape, output_gradient: np.ndarray,
                        logits_gradient: bool = False) -> Tuple[NetworkParams, np.ndarray]:
    """
    Backpropagate `output_gradient` through the recorded tape.

    With logits_gradient=True the network must end in Softmax and the gradient
    is taken to be with respect to the Softmax input (fused softmax and
    cross-entropy). Returns the parameter gradients and the input gradient.
    """
    if tape.params is not params or len(tape.caches) != len(params.layers):
        raise StaleTapeError("tape was recorded for a different set of parameters")
    g = np.asarray(output_gradient, dtype=np.float64)
    if tape.output is None or g.shape != tape.output.shape:
        raise StaleTapeError("output gradient shape %r does not match the tape output %r"
                             % (g.shape, None if tape.output is None else tape.output.shape))
    layers = params.layers
    last = len(layers) - 1
    if logits_gradient and (not layers or layers[-1].kind != SOFTMAX):
        raise ShapeError("layer %d: fused cross-entropy gradient needs a final softmax" % last)

    d_weights: List[Optional[np.ndarray]] = [None] * len(layers)
    d_biases: List[Optional[np.ndarray]] = [None] * len(layers)
    for i in range(last, -1, -1):
        layer, cache = layers[i], tape.caches[i]
        kind = layer.kind
        if kind == DENSE:
            g, d_weights[i], d_biases[i] = _dense_backward(params.weights[i], cache, g)
        elif kind == CONV2D:
            g, d_weights[i], d_biases[i] = _conv_backward(params.weights[i], cache, g)
        elif kind == MAXPOOL2D:
            g = _pool_backward(layer.dims[0], cache, g)
        elif kind == RELU:
            g = g * cache
        elif kind == TANH:
            g = g * (1.0 - cache * cache)
        elif kind == FLATTEN:
            g = g.reshape(cache)
        elif kind == SOFTMAX:
            if not (logits_gradient and i == last):
                g = cache * (g - (g * cache).sum(axis=-1, keepdims=True))
    grads = NetworkParams(params.layers, params.input_shape, tuple(d_weights), tuple(d_biases), None)
    return grads, g


def backward(params: NetworkParams, tape: Tape, output_gradient: np.ndarray,
             logits_gradient: bool = False) -> NetworkParams:
    return backward_with_input(params, tape, output_gradient, logits_gradient)[0]


def softmax_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of integer labels, and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = probs.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def cross_entropy(probs: np.ndarray, target: np.ndarray) -> float:
    # target may be any distribution; zero-probability target entries contribute nothing
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    logp = np.log(np.maximum(probs, np.finfo(np.float64).tiny))
    return float(np.mean(-np.sum(np.where(target > 0, target * logp, 0.0), axis=-1)))


@dataclass(frozen=True, eq=False)
class AdamState:
    m: Tuple[Optional[np.ndarray], ...]
    v: Tuple[Optional[np.ndarray], ...]
    t: int
    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPSILON

    @classmethod
    def create(cls, params: NetworkParams, lr: float = 1e-3) -> "AdamState":
        def zeros():
            return tuple(None if w is None else (np.zeros_like(w), np.zeros_like(b))
                         for w, b in zip(params.weights, params.biases))
        return cls(zeros(), zeros(), 0, float(lr))


def adam_step(params: NetworkParams, grads: NetworkParams, state: AdamState) -> Tuple[NetworkParams, AdamState]:
    if state.lr <= 0:
        raise ConfigError("learning rate must be positive, got %r" % state.lr)
    if grads.layers != params.layers or len(state.m) != len(params.layers):
        raise ShapeError("gradients/optimizer state do not match the network layout")
    for i, (g_w, g_b) in enumerate(zip(grads.weights, grads.biases)):
        if g_w is None:
            continue
        if g_w.shape != params.weights[i].shape or g_b.shape != params.biases[i].shape:
            raise ShapeError("layer %d: gradient shape %r does not match parameter %r"
                             % (i, g_w.shape, params.weights[i].shape))
        if not (np.all(np.isfinite(g_w)) and np.all(np.isfinite(g_b))):
            raise NonFiniteError("layer %d (%s): non-finite gradient" % (i, params.layers[i]))

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_w, new_b, new_m, new_v = [], [], [], []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if w is None:
            new_w.append(None)
            new_b.append(None)
            new_m.append(None)
            new_v.append(None)
            continue
        out_p, out_m, out_v = [], [], []
        for p, g, m, v in ((w, grads.weights[i], state.m[i][0], state.v[i][0]),
                           (b, grads.biases[i], state.m[i][1], state.v[i][1])):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            p = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            out_p.append(p)
            out_m.append(m)
            out_v.append(v)
        new_w.append(out_p[0])
        new_b.append(out_p[1])
        new_m.append((out_m[0], out_m[1]))
        new_v.append((out_v[0], out_v[1]))
    new_state = dataclasses.replace(state, m=tuple(new_m), v=tuple(new_v), t=t)
    return params.with_arrays(new_w, new_b), new_state


def grad_check(spec: NetworkSpec, seed: int = 0, eps: float = 1e-5, batch: int = 2) -> float:
    """
    Max relative error between backward() and central finite differences,
    |a - n| / max(1e-8, |a| + |n|), over every parameter entry.

    Entries whose +/-eps perturbation flips a ReLU mask or a max-pool winner
    sit on a kink and are left out.
    """
    params = build_network(spec.layers, spec.input_shape, seed)
    if params.num_params >= 5000:
        log.warning("grad_check on %d parameters will be slow", params.num_params)
    rng = np.random.default_rng(seed + 7919)
    x = rng.normal(size=(batch,) + params.input_shape)
    x = np.where(np.abs(x) < 1e-3, 1e-3, x)
    out, tape = forward(params, x)
    fused = params.layers[-1].kind == SOFTMAX
    if fused:
        labels = rng.integers(0, out.shape[-1], size=batch)
    else:
        weighting = rng.normal(size=out.shape)

    def loss_of(p: NetworkParams):
        y, t = forward(p, x)
        if fused:
            return softmax_cross_entropy(y, labels)[0], t.pattern()
        return float(np.sum(y * weighting)), t.pattern()

    if fused:
        grads = backward(params, tape, softmax_cross_entropy(out, labels)[1], logits_gradient=True)
    else:
        grads = backward(params, tape, weighting)
    base = tape.pattern()

    worst = 0.0
    for i in range(len(params.layers)):
        if params.weights[i] is None:
            continue
        for which in ("w", "b"):
            analytic = grads.weights[i] if which == "w" else grads.biases[i]
            target = params.weights[i] if which == "w" else params.biases[i]
            for idx in np.ndindex(target.shape):
                values = []
                for sign in (1.0, -1.0):
                    changed = target.copy()
                    changed[idx] += sign * eps
                    ws, bs = list(params.weights), list(params.biases)
                    if which == "w":
                        ws[i] = changed
                    else:
                        bs[i] = changed
                    values.append(loss_of(params.with_arrays(ws, bs)))
                (up, pat_up), (down, pat_down) = values
                if not (_same_pattern(base, pat_up) and _same_pattern(base, pat_down)):
                    continue
                numeric = (up - down) / (2.0 * eps)
                a = float(analytic[idx])
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
    return worst


def _same_pattern(a: list, b: list) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def write_network(writer: BinaryWriter, params: NetworkParams) -> BinaryWriter:
    writer.raw(NETWORK_MAGIC).pack("HH", NETWORK_VERSION, len(params.layers))
    for i, layer in enumerate(params.layers):
        writer.pack("B", _TAGS[layer.kind])
        for d in layer.dims:
            writer.pack("I", d)
        if layer.has_params:
            writer.f64(params.weights[i]).f64(params.biases[i])
    return writer


def read_network(reader: BinaryReader, input_shape: Optional[Sequence[int]] = None) -> NetworkParams:
    reader.expect_magic(NETWORK_MAGIC)
    reader.expect_version(NETWORK_VERSION)
    count = reader.unpack("H")
    layers, weights, biases = [], [], []
    for i in range(count):
        tag = reader.unpack("B")
        if tag not in _KINDS:
            raise FormatError("%s: layer %d has unknown kind tag %d" % (reader.what, i, tag))
        kind = _KINDS[tag]
        dims = tuple(reader.unpack("I") for _ in range(_DIM_COUNT[kind]))
        layer = LayerSpec(kind, dims)
        layers.append(layer)
        w_shape, b_shape = layer.param_shapes()
        if w_shape is None:
            weights.append(None)
            biases.append(None)
        else:
            weights.append(reader.f64(int(np.prod(w_shape))).reshape(w_shape))
            biases.append(reader.f64(int(np.prod(b_shape))).reshape(b_shape))
    if input_shape is None:
        if not layers or layers[0].kind != DENSE:
            raise DimensionMismatchError("%s: input shape needed for a network starting with %s"
                                         % (reader.what, layers[0] if layers else "nothing"))
        input_shape = (layers[0].dims[0],)
    input_shape = tuple(int(d) for d in input_shape)
    shape = input_shape
    for i, layer in enumerate(layers):
        try:
            shape = layer_output_shape(i, layer, shape)
        except ShapeError as e:
            raise DimensionMismatchError("%s: %s" % (reader.what, e)) from e
    return NetworkParams(tuple(layers), input_shape, tuple(weights), tuple(biases), None)


def network_to_bytes(params: NetworkParams) -> bytes:
    return write_network(BinaryWriter(), params).getvalue()


def network_from_bytes(data: bytes, input_shape: Optional[Sequence[int]] = None) -> NetworkParams:
    reader = BinaryReader(data, "network")
    params = read_network(reader, input_shape)
    reader.expect_end()
    return params


def save_network(path: Union[str, Path], params: NetworkParams) -> Path:
    return write_atomically(path, network_to_bytes(params))


def load_network(path: Union[str, Path], input_shape: Optional[Sequence[int]] = None) -> NetworkParams:
    reader = BinaryReader(read_bytes(path), str(path))
    params = read_network(reader, input_shape)
    reader.expect_end()
    return params
