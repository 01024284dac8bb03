"""Command line: ``gradrank bound|run|verify|gen-config``.

Exit codes: 0 success, 1 usage or config error, 2 bound violation,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from datetime import datetime, timezone
from math import prod
from pathlib import Path

import numpy as np

from . import __version__
from . import bounds as B
from .config import ArchitectureError, dump_config, load_architecture, load_config
from .experiments import HYPOTHESES, ConfigError, default_config, run_experiment
from .linalg import DecompositionError
from .report import build_bundle, verify_bundle

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _epsilon(value):
    if value == "auto":
        return value
    try:
        eps = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a number, got {value!r}") from None
    if not 0 < eps < 1:
        raise argparse.ArgumentTypeError("epsilon must lie in (0, 1)")
    return eps


def build_parser():
    parser = _Parser(prog="gradrank", description="Gradient rank bounds and experiments.")
    parser.add_argument("--version", action="version", version=f"gradrank {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("bound", help="evaluate rank bounds for an architecture file")
    p.add_argument("architecture")
    p.add_argument("--precision", choices=["single", "double"])

    p = sub.add_parser("run", help="run an experiment config and write a report bundle")
    p.add_argument("config")
    p.add_argument("--out-dir", default="gradrank-out")
    p.add_argument("--precision", choices=["single", "double"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=_epsilon)
    p.add_argument("--charts", action="store_true", help="also write SVG charts")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("verify", help="re-check a report bundle")
    p.add_argument("bundle")

    p = sub.add_parser("gen-config", help="print the default config for a hypothesis")
    p.add_argument("hypothesis", type=str.upper, choices=HYPOTHESES)
    p.add_argument("--out-dir", help="write <hypothesis>.json here instead of stdout")
    p.add_argument("--precision", choices=["single", "double"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=_epsilon)
    return parser


# --- bound -------------------------------------------------------------------

def architecture_bounds(arch):
    """``[(layer, param, shape, Bound), ...]`` for every weight tensor."""
    spec, N = arch.spec, arch.batch_size
    inputs = B.BoundInputs(N, arch.input_rank, arch.loss_rank, arch.weight_ranks)
    rows = []
    if spec.kind == "dense":
        if spec.is_linear:
            found = B.explain_linear_bound(spec, inputs)
        else:
            found = [B.Bound.from_terms({"batch size": N,
                                         "gradient shape": min(layer.param_shapes()["W"])})
                     for layer in spec.layers]
        for i, (layer, b) in enumerate(zip(spec.layers, found), start=1):
            rows.append((i, "W", layer.param_shapes()["W"], b))
    elif spec.kind == "sequence":
        for i, (layer, per) in enumerate(zip(spec.layers, B.explain_rnn_bound(spec, inputs)), 1):
            for name, b in per.items():
                rows.append((i, name, layer.param_shapes()[name], b))
    else:
        size = arch.input_size
        for i, layer in enumerate(spec.layers, start=1):
            geom = layer.geometry(size)
            kshape = (layer.in_channels * prod(layer.kernel_size), layer.out_channels)
            b = B.explain_conv_bound(geom, min(N, *kshape), kshape)
            rows.append((i, "K", kshape, b))
            size = B.conv_out_size(geom)
    return rows


def cmd_bound(args):
    arch = load_architecture(args.architecture)
    if args.precision:
        arch.spec = type(arch.spec)(arch.spec.layers, arch.spec.loss,
                                    arch.spec.truncation_length, args.precision)
    rows = architecture_bounds(arch)
    print(f"{'layer':<6}{'param':<7}{'shape':<12}{'bound':>6}  binding")
    for layer, name, shape, b in rows:
        print(f"{layer:<6}{name:<7}{'x'.join(map(str, shape)):<12}{b.value:>6}  {b.binding}")
    return EXIT_OK


# --- run / verify / gen-config ----------------------------------------------

def _apply_overrides(cfg, args):
    if getattr(args, "precision", None):
        cfg.precision = args.precision
        cfg.precisions = [args.precision]
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epsilon", None) is not None:
        cfg.epsilon = args.epsilon
    cfg.__post_init__()
    return cfg


def cmd_run(args):
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    cfg = _apply_overrides(load_config(args.config), args)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    try:
        records, report, rows = run_experiment(cfg, jobs=args.jobs)
    except (DecompositionError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"gradrank: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    bundle = build_bundle(cfg, records, report, rows, charts=args.charts, started=started,
                          jobs=args.jobs)

    out_dir = Path(args.out_dir)
    created = not out_dir.exists()
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, data in bundle.files.items():
            path = out_dir / name
            path.write_bytes(data)
            written.append(path)
    except OSError as exc:
        for path in written:
            path.unlink(missing_ok=True)
        if created and out_dir.exists() and not any(out_dir.iterdir()):
            out_dir.rmdir()
        print(f"gradrank: cannot write {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE

    print(f"{cfg.hypothesis}: {report.n_records} records written to {out_dir}")
    print(f"bound violations: {report.violations}; "
          f"factorization violations: {report.factorization_violations}")
    for precision, by_alpha in report.summary.get("thresholds", {}).items():
        worst = max(v["max_abs_error"] for v in by_alpha.values())
        flag = "  [flagged: exceeds 1e-6]" if worst >= 1e-6 else ""
        disagree = sum(v["rank_disagreements"] for v in by_alpha.values())
        print(f"{precision}: max |bound_pre - bound_post| = {worst:.3e}, "
              f"rank disagreements = {disagree}{flag}")
    if report.violations or report.factorization_violations:
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_verify(args):
    result = verify_bundle(args.bundle)
    for line in result.problems + result.violations:
        print(line)
    if result.violations:
        return EXIT_VIOLATION
    if result.problems:
        return EXIT_USAGE
    print(f"{args.bundle}: ok")
    return EXIT_OK


def cmd_gen_config(args):
    cfg = _apply_overrides(default_config(args.hypothesis), args)
    text = dump_config(cfg)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{args.hypothesis.lower()}.json"
        path.write_text(text)
        print(path)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"bound": cmd_bound, "run": cmd_run, "verify": cmd_verify, "gen-config": cmd_gen_config}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ArchitectureError, B.UnsupportedSpecError, B.GeometryError) as exc:
        print(f"gradrank: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"gradrank: {exc}", file=sys.stderr)
        return EXIT_USAGE
