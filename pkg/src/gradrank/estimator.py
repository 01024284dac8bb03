"""scikit-learn style wrapper: train a network with minibatch SGD and track
the numerical ranks of its gradients, activations and adjoints."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .linalg import machine_epsilon, numerical_rank, scaled_epsilon
from .network import NetworkSpec, backward, forward, init_parameters, sgd_step


def _flatten_channels(arr):
    """(N, C, *spatial) -> (N * prod(spatial), C)."""
    return np.moveaxis(arr, 1, -1).reshape(-1, arr.shape[1])


def trace_matrices(spec: NetworkSpec, params, trace):
    """Yield ``(label, kind, matrix)`` for every rank-measured quantity.

    Gradients are labelled by layer (``"2"``), or layer and parameter for
    recurrent layers (``"2.U"``); activations by layer with ``"0"`` the
    input. For sequences the activation is the last hidden state and the
    adjoint the first-step adjoint. Convolution tensors are flattened to
    (positions, channels) and kernels to (C_in * prod(k), C_out).
    """
    L = len(spec.layers)
    for i in range(0, L + 1):
        a = trace.A[i]
        if spec.kind == "sequence":
            a = a[-1]
        elif spec.kind == "conv":
            a = _flatten_channels(a)
        yield str(i), "activation", a
    for i, layer in enumerate(spec.layers, start=1):
        grads = trace.grads[i - 1]
        if layer.kind == "dense":
            yield str(i), "gradient", grads["W"]
        elif layer.kind == "recurrent":
            yield f"{i}.U", "gradient", grads["U"]
            yield f"{i}.V", "gradient", grads["V"]
        else:
            yield str(i), "gradient", grads["K"].reshape(layer.out_channels, -1).T
        d = trace.delta[i]
        if spec.kind == "sequence":
            d = d[0]
        elif spec.kind == "conv":
            d = _flatten_channels(d)
        yield str(i), "adjoint", d


def resolve_epsilon(epsilon, shape, dtype) -> float:
    """``"auto"`` scales machine epsilon by the larger dimension, ``None``
    is plain machine epsilon, and a number is used as given."""
    if epsilon == "auto":
        return scaled_epsilon(shape, dtype)
    if epsilon is None:
        return machine_epsilon(dtype)
    return float(epsilon)


def measure_ranks(spec, params, trace, epsilon="auto"):
    """``[(label, kind, shape, RankEstimate), ...]`` for one trace."""
    out = []
    for label, kind, M in trace_matrices(spec, params, trace):
        eps = resolve_epsilon(epsilon, M.shape, M.dtype)
        out.append((label, kind, M.shape, numerical_rank(M, eps)))
    return out


class GradientRankNetwork(RegressorMixin, BaseEstimator):
    """Minibatch SGD on an MSE objective, with rank tracking.

    Parameters
    ----------
    spec : NetworkSpec
    learning_rate : float
    epochs : int
    batch_size : int
        Minibatch size; the last minibatch of an epoch may be smaller.
    random_state : int
        Seeds both parameter initialization and minibatch shuffling.
    epsilon : "auto", float or None
        Rank threshold passed to :func:`resolve_epsilon`.
    track_ranks : bool
        Measure ranks on the probe batch at the end of every epoch.
    recurrent_init, recurrent_gain
        Passed to :func:`init_parameters`.
    clip_norm : float or None
        Rescale the step so the global gradient norm is at most this value.
        A uniform rescaling leaves every rank unchanged.

    Without ``y`` the network is trained as an autoencoder. Sequence data
    is (N, features, T) and convolution data (N, C, *spatial).
    """

    def __init__(self, spec=None, learning_rate=1e-3, epochs=10, batch_size=256,
                 random_state=0, epsilon="auto", track_ranks=True,
                 recurrent_init="gaussian", recurrent_gain=1.0, clip_norm=None):
        self.spec = spec
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.epsilon = epsilon
        self.track_ranks = track_ranks
        self.recurrent_init = recurrent_init
        self.recurrent_gain = recurrent_gain
        self.clip_norm = clip_norm

    def _validate(self, X, name="X"):
        spec = self.spec
        X = check_array(X, allow_nd=spec.kind != "dense", dtype=spec.dtype,
                        input_name=name)
        if spec.kind == "dense" and X.shape[1] != spec.in_features:
            raise ValueError(f"{name} has {X.shape[1]} features, network expects {spec.in_features}")
        return X

    def fit(self, X, y=None, probe=None):
        """Train on ``(X, y)``; ``probe`` is an ``(X, y)`` pair (``y`` may be
        None) used for rank tracking, defaulting to the first minibatch."""
        if not isinstance(self.spec, NetworkSpec):
            raise TypeError("spec must be a NetworkSpec")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        X = self._validate(X)
        Y = X if y is None else self._validate(y, "y")
        if len(Y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(Y)}")
        if probe is None:
            probe = (X[: self.batch_size], Y[: self.batch_size])
        Xp, Yp = probe
        Xp = self._validate(Xp, "probe X")
        Yp = Xp if Yp is None else self._validate(Yp, "probe y")

        spec = self.spec
        rng = np.random.default_rng(self.random_state)
        params = init_parameters(spec, self.random_state, self.recurrent_init,
                                 self.recurrent_gain)
        self.loss_curve_ = []
        self.rank_history_ = []
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            losses = []
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                trace = backward(spec, params, forward(spec, params, X[idx]), Y[idx])
                if not np.isfinite(trace.loss):
                    raise FloatingPointError("training diverged: loss is not finite")
                losses.append(trace.loss)
                params = sgd_step(params, trace, self._step_size(trace))
            self.loss_curve_.append(float(np.mean(losses)))
            if self.track_ranks:
                trace = backward(spec, params, forward(spec, params, Xp), Yp)
                self.rank_history_.append(measure_ranks(spec, params, trace, self.epsilon))
        self.params_ = params
        self.n_features_in_ = spec.in_features
        return self

    def _step_size(self, trace):
        if self.clip_norm is None:
            return self.learning_rate
        norm = np.sqrt(sum(float(np.sum(g * g)) for grads in trace.grads for g in grads.values()))
        return self.learning_rate * min(1.0, self.clip_norm / norm) if norm > 0 else self.learning_rate

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = self._validate(X)
        out = forward(self.spec, self.params_, X).output
        if self.spec.kind == "sequence":
            out = np.moveaxis(out, 0, 2)
        return out
