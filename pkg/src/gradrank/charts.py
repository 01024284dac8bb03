"""SVG charts of mean rank (with standard error) per layer and sweep value."""

from __future__ import annotations

import io
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "gradrank"


def _svg(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def _final_epoch(groups):
    last = max(g["epoch"] for g in groups)
    return [g for g in groups if g["epoch"] == last]


def rank_bars(report, kind, title):
    """Grouped bars: one group per layer, one bar per sweep value."""
    groups = [g for g in _final_epoch(report.groups) if g["kind"] == kind]
    sweeps = list(dict.fromkeys(g["sweep_value"] for g in groups))
    layers = list(dict.fromkeys(g["layer"] for g in groups))
    table = {(g["sweep_value"], g["layer"]): g for g in groups}
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(sweeps), 1)
    x = np.arange(len(layers))
    for j, s in enumerate(sweeps):
        rows = [table.get((s, layer)) for layer in layers]
        mean = [r["mean"] if r else 0 for r in rows]
        se = [r["se"] if r else 0 for r in rows]
        bound = [r["bound"] if r else 0 for r in rows]
        pos = x + (j - (len(sweeps) - 1) / 2) * width
        ax.bar(pos, mean, width, yerr=se, label=str(s), capsize=2)
        ax.scatter(pos, bound, marker="_", color="black", s=80, zorder=3)
    ax.set_xticks(x, layers)
    ax.set_xlabel("layer")
    ax.set_ylabel(f"{kind} rank")
    ax.set_title(title)
    ax.legend(title="sweep", fontsize="small")
    fig.tight_layout()
    return _svg(fig)


def threshold_errors(rows):
    worst = defaultdict(dict)
    for r in rows:
        cur = worst[r.precision].get(r.alpha, 0.0)
        worst[r.precision][r.alpha] = max(cur, r.abs_error)
    fig, ax = plt.subplots(figsize=(6, 4))
    for precision, by_alpha in sorted(worst.items()):
        alphas = sorted(by_alpha)
        ax.semilogy(alphas, [max(by_alpha[a], 1e-300) for a in alphas], marker="o", label=precision)
    ax.axhline(1e-6, color="grey", linestyle="--", linewidth=0.8)
    ax.set_xlabel("alpha")
    ax.set_ylabel("max |bound_pre - bound_post|")
    ax.legend()
    fig.tight_layout()
    return _svg(fig)


def render_charts(cfg, report, threshold_rows=None) -> dict:
    h = cfg.hypothesis.lower()
    if cfg.hypothesis == "H3":
        return {f"{h}_threshold_error.svg": threshold_errors(threshold_rows)}
    return {
        f"{h}_{kind}.svg": rank_bars(report, kind, f"{cfg.hypothesis}: {kind} rank, final epoch")
        for kind in ("gradient", "activation", "adjoint")
    }
