"""Hypothesis experiments: train, measure ranks every epoch, compare with bounds.

A run is a grid of independent jobs over (sweep value, fold, seed). Each
job trains one network on all folds but one and measures ranks on the
held-out fold, so the probe batch is fixed throughout training.
"""

from __future__ import annotations

import dataclasses
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bounds as B
from .datagen import (
    GaussianConfig, LatentRankMatrixConfig, SinusoidConfig, gaussian_batch,
    latent_rank_matrices, low_rank_images, shard_seed, sinusoid_batch,
)
from .estimator import GradientRankNetwork, resolve_epsilon
from .linalg import resolve_dtype
from .network import Activation, Conv, Dense, NetworkSpec, Recurrent, forward, init_parameters

HYPOTHESES = ("H1", "H2", "H3", "H4", "S1", "CONV")
DENSE_EXPERIMENTS = ("H1", "H4", "S1")
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class EmptyReportError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Flat experiment description; see :func:`default_config` for values.

    ``widths`` is the full feature chain, input first (channels for CONV).
    ``sweep`` holds the swept quantity: bottleneck width (H1), T (H2),
    alpha (H3, H4), input latent rank (S1) or input size (CONV, crossed
    with ``strides``).
    """

    hypothesis: str
    widths: list = field(default_factory=list)
    sweep: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    activation: str = "identity"
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-3
    folds: int = 5
    seeds: int = 4
    seed: int = 0
    precision: str = "double"
    epsilon: float | str | None = "auto"
    clip_norm: float | None = None
    recurrent_init: str = "gaussian"
    recurrent_gain: float = 1.0
    kernel_size: int = 3
    padding: int = 1
    strides: list = field(default_factory=lambda: [1])
    image_rank: int = 1
    matrix_count: int = 1000
    matrix_size: int = 64
    latent_rank: int = 8
    precisions: list = field(default_factory=lambda: ["double", "single"])

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.hypothesis not in HYPOTHESES:
            raise ConfigError(f"hypothesis must be one of {', '.join(HYPOTHESES)}")
        for name in ("epochs", "batch_size", "folds", "seeds"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not self.sweep:
            raise ConfigError("sweep must list at least one value")
        try:
            resolve_dtype(self.precision)
            for p in self.precisions:
                resolve_dtype(p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        eps = self.epsilon
        if not (eps is None or eps == "auto" or (isinstance(eps, (int, float)) and 0 < eps < 1)):
            raise ConfigError(f"epsilon must be 'auto', null or a number in (0, 1), got {eps!r}")
        if self.hypothesis != "H3" and len(self.widths) < 2:
            raise ConfigError("widths needs at least an input and an output entry")
        if self.hypothesis in ("H3", "H4") and not all(0 <= a <= 1 for a in self.sweep):
            raise ConfigError("alpha values must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "hypothesis" not in data:
            raise ConfigError("missing required key 'hypothesis'")
        if "schema_version" not in data:
            raise ConfigError("missing required key 'schema_version'")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_config(hypothesis: str) -> ExperimentConfig:
    """Desk-scale defaults for each hypothesis."""
    h = hypothesis.upper()
    if h == "H1":
        return ExperimentConfig("H1", widths=[128, 128, 16, 128], sweep=[16])
    if h == "S1":
        return ExperimentConfig("S1", widths=[128, 128, 128, 128], sweep=[16, 128])
    if h == "H2":
        return ExperimentConfig(
            "H2", widths=[128, 128, 2, 128], sweep=[1, 5, 10, 25, 50], learning_rate=1e-2,
            clip_norm=1.0, recurrent_init="orthogonal", recurrent_gain=0.9,
        )
    if h == "H3":
        return ExperimentConfig("H3", sweep=[0.0, 0.1, 0.25, 0.5, 0.75, 1.0], folds=1, seeds=1)
    if h == "H4":
        return ExperimentConfig(
            "H4", widths=[128, 128, 128, 2, 128, 128, 128], activation="leaky_relu",
            sweep=[0.0, 0.01, 0.1, 0.5, 0.9, 1.0],
        )
    if h == "CONV":
        return ExperimentConfig(
            "CONV", widths=[2, 8, 8], sweep=[4, 8, 16, 32], strides=[1, 2], batch_size=1,
            clip_norm=1.0,
        )
    raise ConfigError(f"unknown hypothesis {hypothesis!r}")


@dataclass(frozen=True)
class RankRecord:
    experiment: str
    sweep_value: object
    fold: int
    seed: int
    epoch: int
    layer: str
    kind: str
    observed_rank: int
    bound: int
    sigma_max: float
    threshold: float

    def sort_key(self):
        return (self.experiment, str(self.sweep_value), self.fold, self.seed, self.epoch,
                self.kind, self.layer)


RECORD_FIELDS = tuple(f.name for f in dataclasses.fields(RankRecord))


@dataclass
class BoundReport:
    """Means and standard errors per (experiment, sweep value, epoch, layer,
    kind), plus violation counts."""

    groups: list
    n_records: int
    violations: int
    violation_rows: list
    factorization_violations: int
    summary: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)


# --- network and data construction ------------------------------------------

def _activation(cfg, sweep_value):
    if cfg.hypothesis == "H4":
        return Activation.leaky(sweep_value)
    return cfg.activation


def _bottleneck_index(widths):
    return len(widths) // 2


def build_spec(cfg: ExperimentConfig, sweep_value) -> NetworkSpec:
    widths = list(cfg.widths)
    act = _activation(cfg, sweep_value)
    if cfg.hypothesis == "H1":
        widths[_bottleneck_index(widths)] = int(sweep_value)
    if cfg.hypothesis == "H2":
        layers = [Recurrent(a, b, act) for a, b in zip(widths, widths[1:])]
        return NetworkSpec(layers, truncation_length=int(sweep_value), precision=cfg.precision)
    if cfg.hypothesis == "CONV":
        _, stride = sweep_value
        layers = [
            Conv(a, b, (cfg.kernel_size,) * 2, stride=stride if j == 0 else 1,
                 padding=cfg.padding, activation=act)
            for j, (a, b) in enumerate(zip(widths, widths[1:]))
        ]
        return NetworkSpec(layers, precision=cfg.precision)
    layers = [Dense(a, b, act) for a, b in zip(widths, widths[1:])]
    return NetworkSpec(layers, precision=cfg.precision)


def make_data(cfg: ExperimentConfig, spec: NetworkSpec, sweep_value):
    """(X, Y) with ``folds * batch_size`` samples; Y is None for autoencoders."""
    n = cfg.folds * cfg.batch_size
    m = cfg.widths[0]
    if cfg.hypothesis == "H2":
        X = sinusoid_batch(SinusoidConfig(n, m, int(sweep_value), seed=cfg.seed,
                                          precision=cfg.precision))
        return X, None
    if cfg.hypothesis == "CONV":
        w, _ = sweep_value
        X = low_rank_images(n, m, (w, w), rank=cfg.image_rank, seed=cfg.seed,
                            precision=cfg.precision)
        teacher = init_parameters(spec, shard_seed(cfg.seed, 1_000_003))
        return X, forward(spec, teacher, X).output
    latent = int(sweep_value) if cfg.hypothesis == "S1" else None
    X = gaussian_batch(GaussianConfig(n, m, latent_rank=latent, seed=cfg.seed,
                                      precision=cfg.precision))
    return X, None


def sweep_points(cfg: ExperimentConfig):
    if cfg.hypothesis == "CONV":
        return [(int(w), int(s)) for w in cfg.sweep for s in cfg.strides]
    return list(cfg.sweep)


def sweep_label(cfg, value):
    if cfg.hypothesis == "CONV":
        w, s = value
        return f"{w}x{w}/s{s}"
    return value


# --- bounds per measured matrix ----------------------------------------------

def bound_table(cfg: ExperimentConfig, spec: NetworkSpec, sweep_value, N: int) -> dict:
    """``{(label, kind): bound}`` matching the labels of :func:`trace_matrices`."""
    widths = [spec.in_features] + [layer.out_features for layer in spec.layers]
    L = len(spec.layers)
    table = {}
    if spec.kind == "dense":
        input_rank = min(N, widths[0])
        if cfg.hypothesis == "S1":
            input_rank = min(input_rank, int(sweep_value))
        inputs = B.BoundInputs(batch_size=N, input_rank=input_rank)
        if spec.is_linear:
            grads = B.linear_bound(spec, inputs)
            acts = B.activation_bounds(spec, inputs)
            adjs = B.adjoint_bounds(spec, inputs)
        else:
            grads = [min(N, widths[i - 1], widths[i]) for i in range(1, L + 1)]
            acts = [input_rank] + [min(N, w) for w in widths[1:]]
            adjs = [min(N, w) for w in widths[1:]]
        for i in range(L + 1):
            table[(str(i), "activation")] = acts[i]
        for i in range(1, L + 1):
            table[(str(i), "gradient")] = grads[i - 1]
            table[(str(i), "adjoint")] = adjs[i - 1]
    elif spec.kind == "sequence":
        rnn = B.rnn_bound(spec, B.BoundInputs(batch_size=N))
        for i in range(L + 1):
            table[(str(i), "activation")] = min(N, widths[i])
        for i, layer in enumerate(spec.layers, start=1):
            for name, value in rnn[i - 1].items():
                table[(f"{i}.{name}", "gradient")] = value
            table[(str(i), "adjoint")] = min(N, widths[i])
    else:
        size = tuple(spec_input_size(cfg, sweep_value))
        table[("0", "activation")] = min(N * math.prod(size), widths[0])
        for i, layer in enumerate(spec.layers, start=1):
            geom = layer.geometry(size)
            w_out = B.conv_out_size(geom)
            kshape = (layer.in_channels * math.prod(layer.kernel_size), layer.out_channels)
            b = min(N, *kshape)
            table[(str(i), "gradient")] = B.conv_bound(geom, b, kshape)
            rows = N * math.prod(w_out)
            table[(str(i), "activation")] = min(rows, widths[i])
            table[(str(i), "adjoint")] = min(rows, widths[i])
            size = w_out
    return table


def spec_input_size(cfg, sweep_value):
    w, _ = sweep_value
    return (w, w)


# --- jobs ---------------------------------------------------------------------

def model_seed(cfg: ExperimentConfig, fold: int, seed_index: int) -> int:
    return shard_seed(cfg.seed + seed_index, fold)


def run_job(cfg: ExperimentConfig, sweep_value, fold: int, seed_index: int) -> list[RankRecord]:
    """Train one model and return its rank records for every epoch."""
    spec = build_spec(cfg, sweep_value)
    X, Y = make_data(cfg, spec, sweep_value)
    bs = cfg.batch_size
    probe = slice(fold * bs, (fold + 1) * bs)
    if cfg.folds > 1:
        train = np.r_[0:fold * bs, (fold + 1) * bs:len(X)]
    else:
        train = np.arange(len(X))
    est = GradientRankNetwork(
        spec, learning_rate=cfg.learning_rate, epochs=cfg.epochs, batch_size=bs,
        random_state=model_seed(cfg, fold, seed_index), epsilon=cfg.epsilon,
        recurrent_init=cfg.recurrent_init, recurrent_gain=cfg.recurrent_gain,
        clip_norm=cfg.clip_norm,
    )
    Yt = None if Y is None else Y[train]
    Yp = None if Y is None else Y[probe]
    est.fit(X[train], Yt, probe=(X[probe], Yp))
    N = X[probe].shape[0]
    table = bound_table(cfg, spec, sweep_value, N)
    label = sweep_label(cfg, sweep_value)
    records = []
    for epoch, measured in enumerate(est.rank_history_, start=1):
        for layer, kind, _, est_rank in measured:
            records.append(RankRecord(
                cfg.hypothesis, label, fold, cfg.seed + seed_index, epoch, layer, kind,
                est_rank.numerical_rank, int(table[(layer, kind)]),
                est_rank.spectrum.sigma_max, est_rank.threshold,
            ))
    return records


def _job_entry(args):
    cfg, value, fold, s = args
    return run_job(cfg, value, fold, s)


def _map(fn, tasks, jobs):
    if jobs is None or jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def run_training(cfg: ExperimentConfig, jobs: int = 1) -> list[RankRecord]:
    tasks = [(cfg, v, f, s) for v in sweep_points(cfg)
             for f in range(cfg.folds) for s in range(cfg.seeds)]
    records = [r for batch in _map(_job_entry, tasks, jobs) for r in batch]
    return sorted(records, key=RankRecord.sort_key)


# --- H3: threshold comparison --------------------------------------------------

@dataclass(frozen=True)
class ThresholdRow:
    precision: str
    alpha: float
    matrix: int
    sigma1_pre: float
    bound_pre: float
    bound_post: float
    abs_error: float
    rank_pre: int
    rank_post: int
    within_ulp: bool


THRESHOLD_FIELDS = tuple(f.name for f in dataclasses.fields(ThresholdRow))


def _h3_task(args):
    cfg, precision = args
    mats = latent_rank_matrices(LatentRankMatrixConfig(
        cfg.matrix_size, cfg.latent_rank, cfg.matrix_count, seed=cfg.seed, precision=precision))
    dtype = resolve_dtype(precision)
    rows = []
    for alpha in cfg.sweep:
        for j, Z in enumerate(mats):
            eps = resolve_epsilon(cfg.epsilon, Z.shape, dtype)
            th = B.leaky_threshold_post(Z, alpha, eps)
            slack = 4 * float(np.spacing(dtype.type(th.bound_pre)))
            rows.append(ThresholdRow(
                precision, float(alpha), j, th.sigma1_pre, th.bound_pre, th.bound_post,
                abs(th.bound_pre - th.bound_post), th.rank_pre, th.rank_post,
                th.bound_post <= th.bound_pre + slack,
            ))
    return rows


def run_h3_table(cfg: ExperimentConfig, jobs: int = 1) -> list[ThresholdRow]:
    tasks = [(cfg, p) for p in cfg.precisions]
    return [row for rows in _map(_h3_task, tasks, jobs) for row in rows]


def h3_records(rows) -> list[RankRecord]:
    """Rank under the pre-activation threshold against rank under the
    post-activation one: the looser cutoff can only keep more values."""
    return sorted(
        (RankRecord("H3", r.alpha, 0, r.matrix, 0, r.precision, "activation",
                    r.rank_pre, r.rank_post, r.sigma1_pre, r.bound_pre) for r in rows),
        key=RankRecord.sort_key,
    )


def summarize_thresholds(rows, claim: float = 1e-6) -> dict:
    """Per precision and alpha: worst error, ordering and agreement counts."""
    out = {}
    grouped = defaultdict(list)
    for r in rows:
        grouped[(r.precision, r.alpha)].append(r)
    for (precision, alpha), rs in sorted(grouped.items()):
        worst = max(r.abs_error for r in rs)
        out.setdefault(precision, {})[repr(alpha)] = {
            "cases": len(rs),
            "max_abs_error": worst,
            "ordering_failures": sum(not r.within_ulp for r in rs),
            "rank_disagreements": sum(r.rank_pre != r.rank_post for r in rs),
            "exceeds_claim": worst >= claim,
        }
    return out


# --- aggregation ----------------------------------------------------------------

def _factorization_violations(records):
    """Count dense-layer gradients whose rank exceeds
    min(rank A_{i-1}, rank Delta_i)."""
    ranks = {}
    for r in records:
        ranks[(r.experiment, str(r.sweep_value), r.fold, r.seed, r.epoch, r.layer, r.kind)] = \
            r.observed_rank
    bad = 0
    for r in records:
        if r.kind != "gradient" or r.experiment not in DENSE_EXPERIMENTS:
            continue
        key = (r.experiment, str(r.sweep_value), r.fold, r.seed, r.epoch)
        a = ranks.get(key + (str(int(r.layer) - 1), "activation"))
        d = ranks.get(key + (r.layer, "adjoint"))
        if a is not None and d is not None and r.observed_rank > min(a, d):
            bad += 1
    return bad


def aggregate(records) -> BoundReport:
    records = list(records)
    if not records:
        raise EmptyReportError("no records to aggregate")
    groups = defaultdict(list)
    bounds = defaultdict(set)
    violation_rows = []
    for idx, r in enumerate(records):
        key = (r.experiment, str(r.sweep_value), r.epoch, r.layer, r.kind)
        groups[key].append(r.observed_rank)
        bounds[key].add(r.bound)
        if r.observed_rank > r.bound:
            violation_rows.append(idx)
    rows = []
    for key in sorted(groups):
        vals = np.asarray(groups[key], dtype=float)
        se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        rows.append({
            "experiment": key[0], "sweep_value": key[1], "epoch": key[2], "layer": key[3],
            "kind": key[4], "n": len(vals), "mean": float(vals.mean()), "se": se,
            "min": int(vals.min()), "max": int(vals.max()), "bound": int(min(bounds[key])),
        })
    return BoundReport(
        groups=rows, n_records=len(records), violations=len(violation_rows),
        violation_rows=violation_rows,
        factorization_violations=_factorization_violations(records),
    )


# --- entry points ------------------------------------------------------------

def _check(cfg, hypothesis):
    if cfg.hypothesis != hypothesis:
        raise ConfigError(f"config is for {cfg.hypothesis}, expected {hypothesis}")


def run_experiment(cfg: ExperimentConfig, jobs: int = 1):
    """Returns ``(records, report, threshold_rows)``; threshold rows are
    only produced for H3."""
    if cfg.hypothesis == "H3":
        rows = run_h3_table(cfg, jobs)
        records = h3_records(rows)
        report = aggregate(records)
        report.summary = {"thresholds": summarize_thresholds(rows)}
        return records, report, rows
    records = run_training(cfg, jobs)
    return records, aggregate(records), None


def run_h1(cfg, jobs=1) -> BoundReport:
    _check(cfg, "H1")
    return run_experiment(cfg, jobs)[1]


def run_h2(cfg, jobs=1) -> BoundReport:
    _check(cfg, "H2")
    return run_experiment(cfg, jobs)[1]


def run_h3(cfg, jobs=1) -> BoundReport:
    _check(cfg, "H3")
    return run_experiment(cfg, jobs)[1]


def run_h4(cfg, jobs=1) -> BoundReport:
    _check(cfg, "H4")
    return run_experiment(cfg, jobs)[1]


def run_s1(cfg, jobs=1) -> BoundReport:
    _check(cfg, "S1")
    return run_experiment(cfg, jobs)[1]


def run_conv(cfg, jobs=1) -> BoundReport:
    _check(cfg, "CONV")
    return run_experiment(cfg, jobs)[1]
