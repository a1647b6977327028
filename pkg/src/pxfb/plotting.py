"""SVG plots of run tables.

Plots are best effort: failures are returned as notes and never abort a run.
SVG output carries no date and uses a fixed hash salt, so it is reproducible.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["emit_plots", "scatter_svg", "decay_svg"]

_RC = {"svg.hashsalt": "pxfb", "svg.fonttype": "none"}


def _read_table(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [], []
    return rows[0], rows[1:]


def _numeric(col):
    try:
        return [float(v) for v in col]
    except ValueError:
        return None


def _save(fig, path: Path):
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def scatter_svg(header, rows, path: Path, logy: bool = False) -> bool:
    """Scatter of the second column against the first; labels from the header."""
    if len(header) < 2 or not rows:
        return False
    x = _numeric([r[0] for r in rows])
    y = _numeric([r[1] for r in rows])
    if x is None or y is None:
        return False
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(x, y, "o")
    ax.set_xlabel(header[0])
    ax.set_ylabel(header[1])
    if logy and all(v > 0 for v in y):
        ax.set_yscale("log")
    fig.tight_layout()
    _save(fig, path)
    return True


def decay_svg(k, eps, alpha, path: Path) -> bool:
    """``log eps_k`` against ``k`` with the fitted exponent in the title."""
    pts = [(a, b) for a, b in zip(k, eps) if b > 0]
    fig, ax = plt.subplots(figsize=(5, 4))
    if pts:
        ax.semilogy([p[0] for p in pts], [p[1] for p in pts], "o-")
    else:
        ax.plot(k, eps, "o-")
    ax.set_xlabel("k")
    ax.set_ylabel("eps_k")
    title = "alpha = n/a" if alpha is None or not math.isfinite(alpha) else f"alpha = {alpha:.3f}"
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    return True


def emit_plots(run_dir, kind: str) -> tuple[list[str], list[str]]:
    """Write the plots of a run directory; returns (file names, notes)."""
    run_dir = Path(run_dir)
    paths, notes = [], []
    table = run_dir / "table.csv"
    try:
        header, rows = _read_table(table) if table.exists() else ([], [])
        if not rows:
            notes.append("empty table: no plot")
            return paths, notes
        if kind == "flatness_iteration":
            summary = json.loads((run_dir / "summary.json").read_text())
            k = [float(r[0]) for r in rows]
            eps = [float(r[2]) for r in rows]
            if decay_svg(k, eps, summary.get("alpha"), run_dir / "decay.svg"):
                paths.append("decay.svg")
        elif kind == "barrier_certification":
            x = [r[0] for r in rows]
            sub = [["eps", "v_margin"]] + [[a, r[2]] for a, r in zip(x, rows)]
            if scatter_svg(sub[0], sub[1:], run_dir / "margins.svg"):
                paths.append("margins.svg")
        elif kind == "viscosity_battery":
            sub = [[r[0], r[3]] for r in rows if r[2] != "exempt"]
            if scatter_svg(["index", "value"], sub, run_dir / "values.svg"):
                paths.append("values.svg")
        elif scatter_svg(header, rows, run_dir / "table.svg", logy=kind == "dirichlet_benchmark"):
            paths.append("table.svg")
        else:
            notes.append("table has no numeric leading columns: no plot")
    except Exception as exc:  # plotting never fails a run
        notes.append(f"plot failed: {type(exc).__name__}: {exc}")
    return paths, notes
