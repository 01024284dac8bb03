"""Declarative networks and a reverse-mode autodiff engine that keeps every
intermediate needed for rank analysis.

Row-vector convention throughout: a dense layer computes ``Z = A @ W`` with
``W`` of shape (in, out), so the weight gradient is ``A_prev.T @ Delta``.
Sequences are passed as (N, features, T) and stored time-major, (T, N, h),
inside a trace. Convolution inputs are (N, C, *spatial).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import ClassVar

import numpy as np

from .conv import ConvGeometry, GeometryError, col2im, im2col
from .linalg import resolve_dtype


@dataclass(frozen=True)
class Activation:
    """Identity or Leaky-ReLU; ``alpha`` is the negative-domain slope."""

    kind: str = "identity"
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "leaky_relu"):
            raise ValueError(f"unknown activation {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.kind == "identity" and self.alpha != 1.0:
            raise ValueError("identity activation has no alpha")

    @classmethod
    def leaky(cls, alpha):
        return cls("leaky_relu", float(alpha))

    @property
    def is_linear(self) -> bool:
        return self.kind == "identity" or self.alpha == 1.0

    def __call__(self, Z):
        if self.kind == "identity":
            return Z
        return np.where(Z > 0, Z, Z * Z.dtype.type(self.alpha))

    def derivative(self, Z):
        """Elementwise mask: 1 on the positive domain, alpha elsewhere (including 0)."""
        if self.kind == "identity":
            return np.ones_like(Z)
        return np.where(Z > 0, Z.dtype.type(1), Z.dtype.type(self.alpha))


def as_activation(value) -> Activation:
    if isinstance(value, Activation):
        return value
    if value is None or value == "identity":
        return Activation()
    if value == "relu":
        return Activation.leaky(0.0)
    if isinstance(value, dict):
        return Activation(**value)
    if isinstance(value, str) and value.startswith("leaky_relu"):
        # "leaky_relu" or "leaky_relu:0.1"
        _, _, alpha = value.partition(":")
        return Activation.leaky(float(alpha) if alpha else 0.01)
    raise ValueError(f"cannot interpret activation {value!r}")


def _positive(name, value):
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    activation: Activation = Activation()
    bias: bool = False
    kind: ClassVar[str] = "dense"

    def __post_init__(self):
        _positive("in_features", self.in_features)
        _positive("out_features", self.out_features)
        object.__setattr__(self, "activation", as_activation(self.activation))

    def param_shapes(self):
        shapes = {"W": (self.in_features, self.out_features)}
        if self.bias:
            shapes["b"] = (self.out_features,)
        return shapes

    def fan_in(self, name):
        return self.in_features


@dataclass(frozen=True)
class Recurrent:
    """Elman cell: ``H_t = phi(X_t U + H_{t-1} V + b)`` with ``H_0 = 0``."""

    in_features: int
    hidden_features: int
    activation: Activation = Activation()
    bias: bool = False
    kind: ClassVar[str] = "recurrent"

    def __post_init__(self):
        _positive("in_features", self.in_features)
        _positive("hidden_features", self.hidden_features)
        object.__setattr__(self, "activation", as_activation(self.activation))

    @property
    def out_features(self):
        return self.hidden_features

    def param_shapes(self):
        h = self.hidden_features
        shapes = {"U": (self.in_features, h), "V": (h, h)}
        if self.bias:
            shapes["b"] = (h,)
        return shapes

    def fan_in(self, name):
        return self.in_features if name == "U" else self.hidden_features


@dataclass(frozen=True)
class Conv:
    """m-D cross-correlation; the spatial rank m is ``len(kernel_size)``."""

    in_channels: int
    out_channels: int
    kernel_size: tuple
    stride: tuple = 1
    padding: tuple = 0
    dilation: tuple = 1
    activation: Activation = Activation()
    bias: bool = False
    kind: ClassVar[str] = "conv"

    def __post_init__(self):
        _positive("in_channels", self.in_channels)
        _positive("out_channels", self.out_channels)
        k = self.kernel_size
        k = (int(k),) if np.isscalar(k) else tuple(int(v) for v in k)
        object.__setattr__(self, "kernel_size", k)
        for name in ("stride", "padding", "dilation"):
            v = getattr(self, name)
            v = (int(v),) * len(k) if np.isscalar(v) else tuple(int(x) for x in v)
            if len(v) != len(k):
                raise ValueError(f"{name} has {len(v)} entries, kernel has {len(k)}")
            object.__setattr__(self, name, v)
        if min(k + self.stride + self.dilation) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid convolution hyper-parameters: {self}")
        object.__setattr__(self, "activation", as_activation(self.activation))

    @property
    def spatial_dims(self):
        return len(self.kernel_size)

    @property
    def in_features(self):
        return self.in_channels

    @property
    def out_features(self):
        return self.out_channels

    def geometry(self, w_in) -> ConvGeometry:
        return ConvGeometry(tuple(w_in), self.kernel_size, self.stride, self.padding, self.dilation)

    def param_shapes(self):
        shapes = {"K": (self.out_channels, self.in_channels) + self.kernel_size}
        if self.bias:
            shapes["b"] = (self.out_channels,)
        return shapes

    def fan_in(self, name):
        return self.in_channels * prod(self.kernel_size)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    loss: str = "mse"
    truncation_length: int | None = None
    precision: str = "double"

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("a network needs at least one layer")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}; only 'mse' is available")
        resolve_dtype(self.precision)
        kinds = {layer.kind for layer in layers}
        if "conv" in kinds and kinds != {"conv"}:
            raise ValueError("convolution layers cannot be mixed with dense/recurrent layers")
        if len({layer.spatial_dims for layer in layers if layer.kind == "conv"}) > 1:
            raise ValueError("all convolution layers must share the same spatial rank")
        for i in range(1, len(layers)):
            prev, cur = layers[i - 1], layers[i]
            if cur.in_features != prev.out_features:
                raise ValueError(
                    f"layer {i + 1}: expects {cur.in_features} input features but "
                    f"layer {i} produces {prev.out_features}"
                )
        if "recurrent" in kinds:
            T = self.truncation_length
            if T is None or int(T) != T or T < 1:
                raise ValueError("recurrent networks need truncation_length >= 1")

    @property
    def kind(self) -> str:
        kinds = {layer.kind for layer in self.layers}
        if kinds == {"conv"}:
            return "conv"
        if "recurrent" in kinds:
            return "sequence"
        return "dense"

    @property
    def dtype(self):
        return resolve_dtype(self.precision)

    @property
    def in_features(self):
        return self.layers[0].in_features

    @property
    def out_features(self):
        return self.layers[-1].out_features

    @property
    def is_linear(self) -> bool:
        return all(layer.activation.is_linear for layer in self.layers)


@dataclass
class ParameterSet:
    """Per-layer parameter arrays; ``layers[i]`` belongs to layer ``i + 1``."""

    layers: list
    seed: int | None = None
    scheme: str = "gaussian"
    scale: str = "1/sqrt(fan_in)"

    def items(self):
        for i, layer in enumerate(self.layers, start=1):
            for name, arr in layer.items():
                yield i, name, arr

    def copy(self):
        return ParameterSet(
            [{k: v.copy() for k, v in layer.items()} for layer in self.layers],
            self.seed, self.scheme, self.scale,
        )

    @property
    def size(self) -> int:
        return sum(arr.size for _, _, arr in self.items())


def init_parameters(spec: NetworkSpec, seed: int, recurrent_init: str = "gaussian",
                    recurrent_gain: float = 1.0) -> ParameterSet:
    """Gaussian weights scaled by 1/sqrt(fan_in); biases start at zero.

    Hidden-to-hidden weights ``V`` are multiplied by ``recurrent_gain``.
    With ``recurrent_init="orthogonal"`` they are instead ``gain * Q`` for a
    Haar-random orthogonal Q, which keeps long linear recurrences bounded.
    """
    if recurrent_init not in ("gaussian", "orthogonal"):
        raise ValueError(f"unknown recurrent_init {recurrent_init!r}")
    rng = np.random.default_rng(seed)
    dtype = spec.dtype
    layers = []
    for layer in spec.layers:
        params = {}
        for name, shape in layer.param_shapes().items():
            if name == "b":
                params[name] = np.zeros(shape, dtype=dtype)
                continue
            w = rng.standard_normal(shape)
            if name == "V" and recurrent_init == "orthogonal":
                q, r = np.linalg.qr(w)
                w = q * np.sign(np.diag(r))
            else:
                w = w / np.sqrt(layer.fan_in(name))
            if name == "V":
                w = w * recurrent_gain
            params[name] = w.astype(dtype)
        layers.append(params)
    scheme = "gaussian" if recurrent_init == "gaussian" else "gaussian+orthogonal-recurrent"
    if recurrent_gain != 1.0:
        scheme += f"(gain={recurrent_gain})"
    return ParameterSet(layers, seed=seed, scheme=scheme)


def _check_params(spec, params):
    if len(params.layers) != len(spec.layers):
        raise ValueError(
            f"parameter set has {len(params.layers)} layers, network has {len(spec.layers)}"
        )
    for i, (layer, p) in enumerate(zip(spec.layers, params.layers), start=1):
        shapes = layer.param_shapes()
        if set(p) != set(shapes):
            raise ValueError(f"layer {i}: parameters {sorted(p)} != expected {sorted(shapes)}")
        for name, shape in shapes.items():
            if p[name].shape != shape:
                raise ValueError(f"layer {i}: {name} has shape {p[name].shape}, expected {shape}")


@dataclass
class ExecutionTrace:
    """Everything recorded during one forward/backward pass.

    ``Z``, ``A`` and ``delta`` are indexed by layer number: index 0 is the
    input side (``A[0]`` is the network input, ``delta[0]`` the gradient of
    the loss with respect to it). Recurrent and sequence entries are
    time-major arrays of shape (T, N, features). ``grads`` is aligned with
    ``ParameterSet.layers``.
    """

    Z: list
    A: list
    hidden0: dict = field(default_factory=dict)
    cols: dict = field(default_factory=dict)
    out_sizes: dict = field(default_factory=dict)
    delta: list | None = None
    grads: list | None = None
    loss: float | None = None

    @property
    def output(self):
        return self.A[-1]


def _to_internal(spec, X, what="input"):
    dtype = spec.dtype
    X = np.asarray(X, dtype=dtype)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{what} contains NaN or Inf entries")
    return X


def forward(spec: NetworkSpec, params: ParameterSet, X) -> ExecutionTrace:
    _check_params(spec, params)
    a = _to_internal(spec, X)
    first = spec.layers[0]
    if spec.kind == "dense":
        if a.ndim != 2 or a.shape[1] != first.in_features:
            raise ValueError(
                f"layer 1: expected input of shape (N, {first.in_features}), got {a.shape}"
            )
    elif spec.kind == "sequence":
        T = spec.truncation_length
        if a.ndim != 3 or a.shape[1] != first.in_features or a.shape[2] != T:
            raise ValueError(
                f"layer 1: expected sequences of shape (N, {first.in_features}, {T}), got {a.shape}"
            )
        a = np.ascontiguousarray(np.moveaxis(a, 2, 0))
    else:
        if a.ndim != 2 + first.spatial_dims or a.shape[1] != first.in_channels:
            raise ValueError(
                f"layer 1: expected input of shape (N, {first.in_channels}, "
                f"<{first.spatial_dims} spatial dims>), got {a.shape}"
            )

    trace = ExecutionTrace(Z=[None], A=[a])
    for i, (layer, p) in enumerate(zip(spec.layers, params.layers), start=1):
        phi = layer.activation
        if layer.kind == "dense":
            z = a @ p["W"]
            if "b" in p:
                z = z + p["b"]
            a = phi(z)
        elif layer.kind == "recurrent":
            T, N = a.shape[0], a.shape[1]
            h = np.zeros((N, layer.hidden_features), dtype=a.dtype)
            trace.hidden0[i] = h
            z = np.empty((T, N, layer.hidden_features), dtype=a.dtype)
            out = np.empty_like(z)
            for t in range(T):
                zt = a[t] @ p["U"] + h @ p["V"]
                if "b" in p:
                    zt = zt + p["b"]
                z[t] = zt
                h = out[t] = phi(zt)
            a = out
        else:
            try:
                geom = layer.geometry(a.shape[2:])
                cols, w_out = im2col(a, geom)
            except GeometryError as exc:
                raise GeometryError(f"layer {i}: {exc}") from None
            N = a.shape[0]
            kmat = p["K"].reshape(layer.out_channels, -1).T
            rows = cols @ kmat
            if "b" in p:
                rows = rows + p["b"]
            z = np.moveaxis(rows.reshape((N,) + w_out + (layer.out_channels,)), -1, 1)
            trace.cols[i] = cols
            trace.out_sizes[i] = w_out
            a = phi(z)
        trace.Z.append(z)
        trace.A.append(a)
    return trace


def _target(spec, trace, Y):
    Y = _to_internal(spec, Y, "target")
    if spec.kind == "sequence":
        if Y.ndim != 3:
            raise ValueError(f"target must be (N, features, T), got {Y.shape}")
        Y = np.moveaxis(Y, 2, 0)
    if Y.shape != trace.output.shape:
        expected = trace.output.shape
        if spec.kind == "sequence":
            expected = (expected[1], expected[2], expected[0])
        raise ValueError(f"target shape {Y.shape} does not match network output {expected}")
    return Y


def _batch_size(spec, out):
    return out.shape[1] if spec.kind == "sequence" else out.shape[0]


def mse_loss(spec, output, Y) -> float:
    """Sum of squared errors divided by the batch size."""
    N = _batch_size(spec, output)
    diff = output - Y
    return float(np.sum(diff * diff) / N)


def backward(spec: NetworkSpec, params: ParameterSet, trace: ExecutionTrace, Y) -> ExecutionTrace:
    """Populate adjoints, gradients and the loss on a forward trace."""
    if not isinstance(trace, ExecutionTrace) or len(trace.A) != len(spec.layers) + 1:
        raise RuntimeError("backward() needs the trace returned by forward() for this network")
    Y = _target(spec, trace, Y)
    out = trace.output
    N = _batch_size(spec, out)
    trace.loss = mse_loss(spec, out, Y)
    g = (out - Y) * out.dtype.type(2.0 / N)

    L = len(spec.layers)
    delta = [None] * (L + 1)
    grads = [None] * L
    for i in range(L, 0, -1):
        layer, p = spec.layers[i - 1], params.layers[i - 1]
        z, a_prev = trace.Z[i], trace.A[i - 1]
        dphi = layer.activation.derivative
        gp = {}
        if layer.kind == "dense":
            d = g * dphi(z)
            if d.ndim == 2:
                gp["W"] = a_prev.T @ d
            else:
                gp["W"] = a_prev.reshape(-1, a_prev.shape[-1]).T @ d.reshape(-1, d.shape[-1])
            if "b" in p:
                gp["b"] = d.reshape(-1, d.shape[-1]).sum(axis=0)
            g = d @ p["W"].T
        elif layer.kind == "recurrent":
            U, V = p["U"], p["V"]
            T = z.shape[0]
            d = np.empty_like(z)
            d_next = np.zeros_like(z[0])  # Delta_{T+1} = 0
            for t in range(T - 1, -1, -1):
                d_next = d[t] = (g[t] + d_next @ V.T) * dphi(z[t])
            gU = np.zeros_like(U)
            gV = np.zeros_like(V)
            h_prev = trace.hidden0[i]
            for t in range(T):
                gU += a_prev[t].T @ d[t]
                gV += h_prev.T @ d[t]
                h_prev = trace.A[i][t]
            gp["U"], gp["V"] = gU, gV
            if "b" in p:
                gp["b"] = d.sum(axis=(0, 1))
            g = d @ U.T
        else:
            d = g * dphi(z)
            n_out = layer.out_channels
            rows = np.moveaxis(d, 1, -1).reshape(-1, n_out)
            kmat = p["K"].reshape(n_out, -1).T
            gp["K"] = (trace.cols[i].T @ rows).T.reshape(p["K"].shape)
            if "b" in p:
                gp["b"] = rows.sum(axis=0)
            geom = layer.geometry(a_prev.shape[2:])
            g = col2im(rows @ kmat.T, geom, a_prev.shape[0], layer.in_channels)
        delta[i] = d
        grads[i - 1] = gp
    delta[0] = g
    trace.delta = delta
    trace.grads = grads
    return trace


def loss_and_grads(spec, params, X, Y) -> ExecutionTrace:
    return backward(spec, params, forward(spec, params, X), Y)


def sgd_step(params: ParameterSet, trace: ExecutionTrace, learning_rate: float) -> ParameterSet:
    """Return ``params - learning_rate * grad`` for every parameter."""
    if trace.grads is None:
        raise RuntimeError("trace has no gradients; run backward() first")
    new = params.copy()
    for layer, grads in zip(new.layers, trace.grads):
        for name, arr in layer.items():
            arr -= arr.dtype.type(learning_rate) * grads[name]
    return new


def finite_difference_check(spec, params, X, Y, step: float = 1e-5) -> float:
    """Worst relative deviation between central differences and backward().

    The deviation of one parameter tensor is
    ``||fd - grad|| / max(||fd||, ||grad||)``; the maximum over tensors is
    returned. Cost is two forward passes per scalar parameter.
    """
    trace = loss_and_grads(spec, params, X, Y)
    work = params.copy()
    Yi = _target(spec, trace, Y)
    worst = 0.0
    for li, layer in enumerate(work.layers):
        for name, arr in layer.items():
            fd = np.zeros(arr.shape)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + step
                up = mse_loss(spec, forward(spec, work, X).output, Yi)
                arr[idx] = orig - step
                down = mse_loss(spec, forward(spec, work, X).output, Yi)
                arr[idx] = orig
                fd[idx] = (up - down) / (2 * step)
            g = trace.grads[li][name].astype(np.float64)
            scale = max(np.linalg.norm(fd), np.linalg.norm(g))
            if scale > 0:
                worst = max(worst, float(np.linalg.norm(fd - g) / scale))
    return worst
