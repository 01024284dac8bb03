"""Closed-form upper bounds on gradient rank, and Leaky-ReLU rank thresholds.

Bounds are evaluated from the architecture alone (plus optional data-rank
inputs). Every bound is also capped by the shape of the matrix it bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from .conv import ConvGeometry, GeometryError, conv_out_size
from .linalg import SingularSpectrum, machine_epsilon, rank_from_spectrum, svd

__all__ = [
    "BoundInputs", "Bound", "ConvGeometry", "GeometryError", "DomainCounts", "LeakyThresholds",
    "UnsupportedSpecError", "linear_bound", "explain_linear_bound", "activation_bounds",
    "adjoint_bounds", "rnn_bound", "explain_rnn_bound", "conv_out_size", "conv_bound",
    "explain_conv_bound", "domain_counts", "leaky_threshold_pre", "leaky_threshold_post",
    "adjoint_derivative_bound",
]


class UnsupportedSpecError(ValueError):
    pass


@dataclass(frozen=True)
class BoundInputs:
    """Data-dependent ranks feeding the bounds. ``None`` means "full".

    ``weight_ranks`` maps ``(layer, name)`` (layer numbers start at 1) to a
    measured rank; unspecified weights are assumed full rank, which holds
    with probability 1 under continuous initialization.
    """

    batch_size: int
    input_rank: int | None = None
    loss_grad_rank: int | None = None
    weight_ranks: dict = field(default_factory=dict)
    step_input_ranks: tuple | None = None
    step_loss_ranks: tuple | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("input_rank", "loss_grad_rank"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class Bound:
    """A bound value, the term of the min that produced it, and all terms."""

    value: int
    binding: str
    terms: dict

    @classmethod
    def from_terms(cls, terms: dict) -> "Bound":
        # dict order breaks ties: the first minimal term is reported
        binding = min(terms, key=lambda k: terms[k])
        return cls(int(terms[binding]), binding, dict(terms))


def _widths(spec):
    return [spec.layers[0].in_features] + [layer.out_features for layer in spec.layers]


def _width_label(j, L):
    if j == 0:
        return "input width"
    if j == L:
        return "output width"
    return f"layer {j} width"


def _weight_rank(spec, inputs, j, name, widths):
    """Rank of layer j's input weight and a label naming what limits it."""
    override = inputs.weight_ranks.get((j, name))
    if override is not None:
        return override, f"layer {j} {name} rank"
    L = len(spec.layers)
    if widths[j] <= widths[j - 1]:
        return widths[j], _width_label(j, L)
    return widths[j - 1], _width_label(j - 1, L)


def _input_rank(inputs, widths):
    full = min(inputs.batch_size, widths[0])
    r = full if inputs.input_rank is None else inputs.input_rank
    if r > full:
        raise ValueError(f"input_rank {r} exceeds min(batch, features) = {full}")
    return r


def _loss_rank(inputs, widths):
    full = min(inputs.batch_size, widths[-1])
    r = full if inputs.loss_grad_rank is None else inputs.loss_grad_rank
    if r > full:
        raise ValueError(f"loss_grad_rank {r} exceeds min(batch, outputs) = {full}")
    return r


def _require_dense(spec):
    bad = [i for i, layer in enumerate(spec.layers, 1) if layer.kind != "dense"]
    if bad:
        kinds = ", ".join(f"layer {i} is {spec.layers[i - 1].kind}" for i in bad)
        raise UnsupportedSpecError(f"linear_bound needs dense layers only ({kinds})")


def _activation_chain(spec, inputs, widths):
    """(value, label) upper bounds on rank(A_i) for i = 0..L in a linear net.

    A bias adds ``1 b^T`` to Z and so at most one to the rank.
    """
    chain = [(_input_rank(inputs, widths), "input rank")]
    for j, layer in enumerate(spec.layers, start=1):
        prev = chain[-1]
        w = _weight_rank(spec, inputs, j, "W", widths)
        value, label = min(prev, w, key=lambda t: t[0])
        if layer.bias:
            value, label = value + 1, f"{label} + layer {j} bias"
        chain.append((value, label))
    return chain


def _adjoint_chain(spec, inputs, widths):
    """(value, label) upper bounds on rank(Delta_i) for i = 1..L (index 0 unused)."""
    L = len(spec.layers)
    chain = [None] * (L + 1)
    chain[L] = (_loss_rank(inputs, widths), "loss gradient rank")
    for i in range(L - 1, 0, -1):
        w = _weight_rank(spec, inputs, i + 1, "W", widths)
        chain[i] = min(chain[i + 1], w, key=lambda t: t[0])
    return chain


def explain_linear_bound(spec, inputs: BoundInputs) -> list[Bound]:
    """Gradient rank bound per dense layer, with the binding term.

    rank(grad W_i) <= min(rank A_{i-1}, rank Delta_i), where the activation
    side is capped by rank(X) and W_1..W_{i-1} and the adjoint side by
    W_{i+1}..W_L and the loss gradient. Only valid for linear activations
    (identity, or Leaky-ReLU with alpha = 1).
    """
    _require_dense(spec)
    widths = _widths(spec)
    act = _activation_chain(spec, inputs, widths)
    adj = _adjoint_chain(spec, inputs, widths)
    out = []
    for i in range(1, len(spec.layers) + 1):
        terms = {}
        terms[act[i - 1][1]] = act[i - 1][0]
        terms.setdefault(adj[i][1], adj[i][0])
        terms.setdefault("batch size", inputs.batch_size)
        terms.setdefault("gradient shape", min(widths[i - 1], widths[i]))
        out.append(Bound.from_terms(terms))
    return out


def linear_bound(spec, inputs: BoundInputs) -> list[int]:
    return [b.value for b in explain_linear_bound(spec, inputs)]


def activation_bounds(spec, inputs: BoundInputs) -> list[int]:
    """Bounds on rank(A_i), i = 0..L, for a linear dense network."""
    _require_dense(spec)
    widths = _widths(spec)
    chain = _activation_chain(spec, inputs, widths)
    return [min(v, inputs.batch_size, widths[i]) for i, (v, _) in enumerate(chain)]


def adjoint_bounds(spec, inputs: BoundInputs) -> list[int]:
    """Bounds on rank(Delta_i), i = 1..L, for a linear dense network.

    W_i itself does not enter: Delta_i = Delta_{i+1} W_{i+1}^T.
    """
    _require_dense(spec)
    widths = _widths(spec)
    chain = _adjoint_chain(spec, inputs, widths)
    return [min(chain[i][0], inputs.batch_size, widths[i]) for i in range(1, len(spec.layers) + 1)]


# --- parameter tying: recurrent layers ---------------------------------------

def _paths(T, q):
    """Number of accumulated terms a rank cut contributes.

    Terms reaching the gradient through recurrent layers can be grouped by
    their total delay, 0..T-1, so any path with at least one recurrence
    yields T terms; a path with none yields only the zero-delay term.
    """
    return T if q else 1


def explain_rnn_bound(spec, inputs: BoundInputs, T: int | None = None) -> list[dict]:
    """Gradient rank bounds for a sequence network, per layer and parameter.

    The gradient of a tied weight is a sum of per-step products, so a rank
    cut r anywhere along a path that crosses a recurrence contributes
    ``r * T``; cuts reached without crossing one contribute ``r``. At T = 1
    this is the linear bound of the unrolled step. The network input
    contributes the span of all per-step inputs, ``min(m, sum_t rank X_t)``.
    """
    if spec.kind != "sequence":
        raise UnsupportedSpecError("rnn_bound needs a network with a recurrent layer")
    T = spec.truncation_length if T is None else T
    if T is None or T < 1:
        raise ValueError(f"sequence length T must be >= 1, got {T}")
    widths = _widths(spec)
    L = len(spec.layers)
    N = inputs.batch_size
    rec = [layer.kind == "recurrent" for layer in spec.layers]  # rec[j-1] for layer j

    def n_rec(lo, hi):
        return sum(rec[j - 1] for j in range(lo, hi + 1))

    step_in = inputs.step_input_ranks or (min(N, widths[0]),) * T
    step_loss = inputs.step_loss_ranks or (min(N, widths[-1]),) * T
    if len(step_in) != T or len(step_loss) != T:
        raise ValueError("per-step rank lists must have length T")
    input_space = min(widths[0], sum(step_in))
    if inputs.input_rank is not None:
        input_space = min(input_space, inputs.input_rank)
    loss_space = min(widths[-1], sum(step_loss))
    if inputs.loss_grad_rank is not None:
        loss_space = min(loss_space, inputs.loss_grad_rank)

    out = []
    for i, layer in enumerate(spec.layers, start=1):
        names = ["U", "V"] if layer.kind == "recurrent" else ["W"]
        per_param = {}
        for name in names:
            # V_i's gradient pairs H_{t-1,i} with Delta_{t,i}: layer i's own
            # recurrence sits on the activation side as well
            act_top = i if name == "V" else i - 1
            rows, cols = layer.param_shapes()[name]
            terms = {}

            def add(label, value):
                terms.setdefault(label, value)

            q = n_rec(1, act_top)
            add(_accum_label("input rank", input_space, _paths(T, q)), input_space * _paths(T, q))
            for j in range(1, act_top + 1):
                if j == i:
                    continue
                q = n_rec(j + 1, act_top)
                add(_accum_label(_width_label(j, L), widths[j], _paths(T, q)),
                    widths[j] * _paths(T, q))
                name_j = "U" if rec[j - 1] else "W"
                r, lab = _weight_rank(spec, inputs, j, name_j, widths)
                q = n_rec(j, act_top)
                add(_accum_label(lab, r, _paths(T, q)), r * _paths(T, q))
            for j in range(i + 1, L + 1):
                name_j = "U" if rec[j - 1] else "W"
                r, lab = _weight_rank(spec, inputs, j, name_j, widths)
                q = n_rec(i, j - 1)
                add(_accum_label(lab, r, _paths(T, q)), r * _paths(T, q))
            q = n_rec(i, L)
            add(_accum_label("loss gradient rank", loss_space, _paths(T, q)),
                loss_space * _paths(T, q))
            add("batch size x T", N * T)
            add("gradient shape", min(rows, cols))
            per_param[name] = Bound.from_terms(terms)
        out.append(per_param)
    return out


def _accum_label(what, r, paths):
    return what if paths == 1 else f"{paths}x{r} accumulation ({what})"


def rnn_bound(spec, inputs: BoundInputs, T: int | None = None) -> list[dict]:
    """``[{param_name: bound}, ...]`` per layer; see :func:`explain_rnn_bound`."""
    return [{k: b.value for k, b in layer.items()} for layer in explain_rnn_bound(spec, inputs, T)]


# --- parameter tying: convolution --------------------------------------------

def explain_conv_bound(geom: ConvGeometry, linear_bound_B: int, kernel_matrix_shape=None) -> Bound:
    """``min(B * prod(w_out), kernel matrix shape)``.

    The kernel gradient, flattened to (C_in * prod(k)) x C_out, is a sum of
    one rank-<=B term per output position.
    """
    if linear_bound_B < 0:
        raise ValueError("B must be non-negative")
    positions = prod(conv_out_size(geom))
    if positions == 1:
        terms = {"per-position bound B": linear_bound_B}
    else:
        terms = {f"{positions}x{linear_bound_B} accumulation over output positions":
                 linear_bound_B * positions}
    if kernel_matrix_shape is not None:
        terms["gradient shape"] = min(kernel_matrix_shape)
    return Bound.from_terms(terms)


def conv_bound(geom: ConvGeometry, linear_bound_B: int, kernel_matrix_shape=None) -> int:
    return explain_conv_bound(geom, linear_bound_B, kernel_matrix_shape).value


# --- Leaky-ReLU thresholds -------------------------------------------------

@dataclass(frozen=True)
class DomainCounts:
    """Negative/positive-branch tallies of Z per column and per row.

    Entries with Z <= 0 take the alpha branch.
    """

    col_neg: np.ndarray
    col_pos: np.ndarray
    row_neg: np.ndarray
    row_pos: np.ndarray
    alpha: float

    @property
    def column_norms(self) -> np.ndarray:
        # hypot keeps tiny alpha from underflowing when squared
        return np.hypot(np.sqrt(self.col_neg) * self.alpha, np.sqrt(self.col_pos))

    @property
    def row_norms(self) -> np.ndarray:
        return np.hypot(np.sqrt(self.row_neg) * self.alpha, np.sqrt(self.row_pos))

    @property
    def c1(self) -> float:
        return float(self.column_norms.max())

    @property
    def r1(self) -> float:
        return float(self.row_norms.max())


def domain_counts(Z, alpha: float) -> DomainCounts:
    Z = np.asarray(Z)
    if Z.ndim != 2:
        raise ValueError(f"Z must be 2-D, got shape {Z.shape}")
    neg = Z <= 0
    return DomainCounts(
        col_neg=neg.sum(axis=0), col_pos=(~neg).sum(axis=0),
        row_neg=neg.sum(axis=1), row_pos=(~neg).sum(axis=1),
        alpha=float(alpha),
    )


@dataclass(frozen=True)
class LeakyThresholds:
    sigma1_pre: float
    c1: float
    r1: float
    epsilon: float
    bound_pre: float
    bound_post: float | None = None
    rank_pre: int | None = None
    rank_post: int | None = None


def leaky_threshold_pre(spectrum_pre: SingularSpectrum, counts: DomainCounts, epsilon: float) -> float:
    """``eps * min(c1, r1) * sigma_1(Z)``: a rank-contribution cutoff for
    phi(Z) that needs only the pre-activation spectrum and branch counts."""
    return float(epsilon * min(counts.c1, counts.r1) * spectrum_pre.sigma_max)


def leaky_threshold_post(Z, alpha: float, epsilon: float | None = None) -> LeakyThresholds:
    """Compare the post-activation cutoff ``eps * sigma_1(phi(Z))`` with the
    pre-activation one, and count singular values of phi(Z) above each."""
    Z = np.asarray(Z)
    if epsilon is None:
        epsilon = machine_epsilon(Z.dtype)
    counts = domain_counts(Z, alpha)
    spec_pre = svd(Z)
    post = np.where(Z > 0, Z, Z * Z.dtype.type(alpha))
    spec_post = svd(post)
    pre_bound = leaky_threshold_pre(spec_pre, counts, epsilon)
    post_bound = float(epsilon * spec_post.sigma_max)
    values = spec_post.values
    rank_pre = int(np.count_nonzero(values >= pre_bound)) if spec_post.sigma_max > 0 else 0
    rank_post = rank_from_spectrum(spec_post, epsilon).numerical_rank
    return LeakyThresholds(
        sigma1_pre=spec_pre.sigma_max, c1=counts.c1, r1=counts.r1, epsilon=float(epsilon),
        bound_pre=pre_bound, bound_post=post_bound, rank_pre=rank_pre, rank_post=rank_post,
    )


def adjoint_derivative_bound(counts: DomainCounts, spectrum_pre: SingularSpectrum,
                             epsilon: float, k=None):
    """Verdict per index k (1-based) for the derivative mask ``D_alpha``.

    ``spectrum_pre`` is the spectrum of the matrix the mask multiplies
    elementwise: Z itself, or the all-ones matrix for the derivative.

    ``"deficient"`` when ``min(c_k, r_k) <= eps * min(c_1, r_1) * s_1 / s_k``
    with norms sorted in decreasing order, ``"contributes"`` otherwise, and
    ``"vacuous"`` when ``s_k = 0`` (the right-hand side is unbounded, so the
    inequality holds trivially). Returns a list over all k, or one verdict
    if ``k`` is given.
    """
    c = np.sort(counts.column_norms)[::-1]
    r = np.sort(counts.row_norms)[::-1]
    s = spectrum_pre.values
    K = min(len(c), len(r), len(s))
    scale = epsilon * min(c[0], r[0]) * spectrum_pre.sigma_max
    verdicts = []
    for idx in range(K):
        if s[idx] == 0:
            verdicts.append("vacuous")
        elif min(c[idx], r[idx]) <= scale / s[idx]:
            verdicts.append("deficient")
        else:
            verdicts.append("contributes")
    if k is not None:
        if not 1 <= k <= K:
            raise ValueError(f"k must lie in [1, {K}]")
        return verdicts[k - 1]
    return verdicts
