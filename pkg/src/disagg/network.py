"""Minimal dense feed-forward engine.

Layers apply row-wise (each row of the input is one pixel) with shared
weights. Forward passes record the intermediate values needed for exact
reverse-mode gradients; dropout uses inverted scaling so expected
activations match the no-dropout network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

__all__ = [
    "ACTIVATIONS",
    "Adam",
    "Dense",
    "Dropout",
    "MIN_RATE",
    "NetworkSpec",
    "Params",
    "RngStream",
    "SGD",
    "backward_gradients",
    "forward_network",
    "init_params",
    "make_optimizer",
    "poisson_loss",
    "poisson_loss_grad",
]

#: Floor applied to predictions inside the loss, guarding log(0).
MIN_RATE = 1e-12

_MODES = ("train", "infer", "mc_infer")


class RngStream:
    """Seeded random stream with a platform-stable draw sequence (PCG64)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def poisson(self, lam):
        return self._gen.poisson(lam)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


@dataclass(frozen=True)
class Dense:
    """Fully connected layer: ``out = activation(x @ W + b)``."""

    units: int
    activation: str = "linear"

    def __post_init__(self):
        if self.units < 1:
            raise ValueError("dense layer needs at least one unit")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class Dropout:
    """Inverted dropout: kept units are scaled by 1/(1-rate)."""

    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(pre, out):
    return (pre > 0).astype(np.float64)


def _sigmoid(x):
    return expit(x)


def _sigmoid_grad(pre, out):
    return out * (1.0 - out)


def _tanh_grad(pre, out):
    return 1.0 - out * out


def _identity(x):
    return x


def _ones_grad(pre, out):
    return np.ones_like(pre)


#: activation -> (function, derivative from (pre-activation, output))
ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "sigmoid": (_sigmoid, _sigmoid_grad),
    "tanh": (np.tanh, _tanh_grad),
    "linear": (_identity, _ones_grad),
}


@dataclass(frozen=True)
class NetworkSpec:
    """An input width plus an ordered stack of layers."""

    input_width: int
    layers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_width < 1:
            raise ValueError("input width must be positive")
        for layer in self.layers:
            if not isinstance(layer, (Dense, Dropout)):
                raise TypeError(f"unsupported layer {layer!r}")

    @property
    def output_width(self) -> int:
        width = self.input_width
        for layer in self.layers:
            if isinstance(layer, Dense):
                width = layer.units
        return width

    def dense_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for each dense layer, chained through the stack."""
        shapes = []
        width = self.input_width
        for layer in self.layers:
            if isinstance(layer, Dense):
                shapes.append((width, layer.units))
                width = layer.units
        return shapes

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.dense_shapes())


class Params:
    """Dense-layer weights and biases stored in one flat vector.

    Layout: for each dense layer in network order, the weight matrix
    (fan_in x fan_out, row-major) followed by the bias vector.
    """

    def __init__(self, spec: NetworkSpec, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got {flat.shape}")
        self.spec = spec
        self.flat = flat
        self._slices = []
        offset = 0
        for fan_in, fan_out in spec.dense_shapes():
            w = slice(offset, offset + fan_in * fan_out)
            b = slice(w.stop, w.stop + fan_out)
            self._slices.append((w, b, fan_in, fan_out))
            offset = b.stop

    @property
    def n_dense(self) -> int:
        return len(self._slices)

    def weights(self, i: int) -> np.ndarray:
        w, _, fan_in, fan_out = self._slices[i]
        return self.flat[w].reshape(fan_in, fan_out)

    def bias(self, i: int) -> np.ndarray:
        _, b, _, _ = self._slices[i]
        return self.flat[b]

    def to_jsonable(self) -> list[dict]:
        return [
            {"weights": self.weights(i).tolist(), "bias": self.bias(i).tolist()}
            for i in range(self.n_dense)
        ]

    @classmethod
    def from_jsonable(cls, spec: NetworkSpec, blocks: list[dict]) -> "Params":
        pieces = []
        for block in blocks:
            pieces.append(np.asarray(block["weights"], dtype=np.float64).ravel())
            pieces.append(np.asarray(block["bias"], dtype=np.float64))
        flat = np.concatenate(pieces) if pieces else np.empty(0)
        return cls(spec, flat)


def init_params(spec: NetworkSpec, rng: RngStream) -> Params:
    """Fan-balanced uniform weights in +/- sqrt(6/(fan_in+fan_out)); zero biases."""
    pieces = []
    for fan_in, fan_out in spec.dense_shapes():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        pieces.append(rng.uniform(-limit, limit, fan_in * fan_out))
        pieces.append(np.zeros(fan_out))
    flat = np.concatenate(pieces) if pieces else np.empty(0)
    return Params(spec, flat)


def forward_network(spec: NetworkSpec, params: Params, x: np.ndarray,
                    mode: str = "infer", rng: RngStream | None = None):
    """Run the network over a (rows x input_width) matrix of pixels.

    Dropout is active in ``train`` and ``mc_infer`` modes (requiring
    ``rng``) and an identity map in ``infer`` mode.

    Returns
    -------
    out : np.ndarray
        (rows x output_width) activations of the last layer.
    trace : list
        Per-layer records (inputs, pre-activations, dropout masks) consumed
        by :func:`backward_gradients`.
    """
    if mode not in _MODES:
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_width:
        raise ValueError(
            f"input width mismatch: expected (rows, {spec.input_width}), got {x.shape}"
        )
    dropout_active = mode in ("train", "mc_infer")
    if dropout_active and rng is None and any(isinstance(l, Dropout) for l in spec.layers):
        raise ValueError(f"mode {mode!r} requires an rng when dropout layers are present")

    trace = []
    out = x
    i_dense = 0
    for layer in spec.layers:
        if isinstance(layer, Dense):
            w = params.weights(i_dense)
            b = params.bias(i_dense)
            pre = out @ w + b
            act, _ = ACTIVATIONS[layer.activation]
            new = act(pre)
            trace.append(("dense", i_dense, layer.activation, out, pre, new))
            out = new
            i_dense += 1
        else:
            if dropout_active:
                keep = 1.0 - layer.rate
                mask = (rng.random(out.shape) >= layer.rate) * (1.0 / keep)
            else:
                mask = None
            trace.append(("dropout", mask))
            if mask is not None:
                out = out * mask
    return out, trace


def backward_gradients(spec: NetworkSpec, params: Params, trace: list,
                       upstream: np.ndarray) -> np.ndarray:
    """Exact gradients of a scalar loss w.r.t. every parameter.

    ``upstream`` is the loss gradient w.r.t. the network output from the
    matching forward pass; dropout masks recorded in the trace are reused.
    """
    grad = np.zeros_like(params.flat)
    g = np.asarray(upstream, dtype=np.float64)
    for record in reversed(trace):
        if record[0] == "dense":
            _, i_dense, activation, x_in, pre, out = record
            _, dact = ACTIVATIONS[activation]
            dpre = g * dact(pre, out)
            w_slice, b_slice, fan_in, fan_out = params._slices[i_dense]
            grad[w_slice] += (x_in.T @ dpre).ravel()
            grad[b_slice] += dpre.sum(axis=0)
            g = dpre @ params.weights(i_dense).T
        else:
            mask = record[1]
            if mask is not None:
                g = g * mask
    return grad


def poisson_loss(y, yhat) -> float:
    """Mean Poisson loss ``mean(yhat - y * log(yhat))``.

    Omits the constant ``log(y!)`` term, so values may be negative; its
    minimizer coincides with the Poisson maximum-likelihood estimate.
    Predictions are floored at ``MIN_RATE`` inside the log.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: y {y.shape} vs yhat {yhat.shape}")
    clamped = np.maximum(yhat, MIN_RATE)
    return float(np.mean(clamped - y * np.log(clamped)))


def poisson_loss_grad(y, yhat) -> np.ndarray:
    """Gradient of :func:`poisson_loss` w.r.t. ``yhat`` (exact, clamp-aware)."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: y {y.shape} vs yhat {yhat.shape}")
    clamped = np.maximum(yhat, MIN_RATE)
    inner = np.where(yhat > MIN_RATE, y / clamped, 0.0)
    return (1.0 - inner) / y.size


@dataclass
class Adam:
    """Adam with bias-corrected moments; framework-default settings."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def step(self, flat: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(flat)
            self.v = np.zeros_like(flat)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return flat - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


@dataclass
class SGD:
    """Plain full-batch gradient descent."""

    learning_rate: float = 0.001
    t: int = 0

    def step(self, flat: np.ndarray, grads: np.ndarray) -> np.ndarray:
        self.t += 1
        return flat - self.learning_rate * grads


def make_optimizer(kind: str, learning_rate: float):
    if kind == "adam":
        return Adam(learning_rate=learning_rate)
    if kind == "sgd":
        return SGD(learning_rate=learning_rate)
    raise ValueError(f"unknown optimizer {kind!r}")
