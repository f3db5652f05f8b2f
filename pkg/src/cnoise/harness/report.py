"""CSV reporting and SVG plots for run results."""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path
from types import SimpleNamespace

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

from ..errors import ParameterError
from .runner import ARMS, aggregate_records

__all__ = ["CSV_COLUMNS", "write_csv", "read_csv", "aggregate_csv", "write_manifest", "emit_plots"]

CSV_COLUMNS = (
    "run_id", "trial", "arm", "seed", "B", "tau", "gamma", "eta", "n_opt", "w",
    "lambda_kl", "guidance", "vendi", "mss", "modes_hit", "fidelity_logdensity",
    "final_loss", "wall_ms",
)
_INT_COLUMNS = {"trial", "seed", "B", "n_opt", "modes_hit"}
_STR_COLUMNS = {"run_id", "arm", "w"}
ARM_STYLE = {"ddim": ("tab:gray", "o"), "cno": ("tab:blue", "^")}


def _f(x) -> str:
    return format(float(x), ".9g")


def _as_list(results):
    return [results] if hasattr(results, "records") else list(results)


def _rows(result):
    cfg = result.config
    c = cfg.cno
    for r in sorted(result.records, key=lambda r: (r.trial, ARMS.index(r.arm))):
        yield [
            result.run_id, r.trial, r.arm, r.seed, c.batch_size, _f(c.temperature), _f(c.gamma),
            _f(c.learning_rate), c.n_opt, "full" if c.window is None else c.window, _f(c.kl_weight),
            _f(cfg.model.guidance), _f(r.vendi), _f(r.mss), r.modes_hit, _f(r.fidelity_logdensity),
            _f(r.final_loss), _f(r.wall_ms if cfg.timing else 0.0),
        ]


def write_csv(results, path) -> Path:
    """One header row, then one row per trial per arm, ordered by trial.

    Floats carry 9 significant digits.  ``wall_ms`` is written as 0 unless
    the config enables timing, so that reruns are byte-identical.
    """
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for res in _as_list(results):
                w.writerows(_rows(res))
    except OSError as exc:
        raise ParameterError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k, v in row.items():
            if k in _INT_COLUMNS:
                row[k] = int(v)
            elif k not in _STR_COLUMNS:
                row[k] = float(v)
    return rows


def aggregate_csv(path, run_id: str | None = None) -> dict:
    """Per-arm aggregates recomputed from an emitted CSV."""
    rows = [r for r in read_csv(path) if run_id is None or r["run_id"] == run_id]
    return aggregate_records([SimpleNamespace(**r) for r in rows])


def write_manifest(results, path) -> Path:
    path = Path(path)
    payload = [
        dict(res.manifest, aggregate=res.aggregate(), failure_messages=[f.message for f in res.failures])
        for res in _as_list(results)
    ]
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._=-]+", "_", name)


def _save(fig, path):
    # fixed hash salt and no date stamp keep SVG bytes reproducible
    with matplotlib.rc_context({"svg.hashsalt": "cnoise", "svg.fonttype": "path"}):
        FigureCanvasSVG(fig)
        fig.savefig(path, format="svg", metadata={"Date": None})


def _scatter(result, path):
    model = result.config.model.build()
    fig = Figure(figsize=(8, 4))
    axes = fig.subplots(1, 2, sharex=True, sharey=True)
    for ax, arm in zip(axes, ARMS):
        pts = [r.endpoints for r in result.arm(arm) if r.endpoints is not None]
        if pts:
            xy = np.concatenate(pts)
            color, marker = ARM_STYLE[arm]
            ax.scatter(xy[:, 0], xy[:, 1], s=6, c=color, marker=marker, alpha=0.5, linewidths=0)
        ax.scatter(model.means[:, 0], model.means[:, 1], s=40, c="k", marker="x", label="modes")
        ax.set_title(arm)
        ax.set_aspect("equal")
    axes[0].legend(loc="upper right")
    fig.suptitle(result.run_id)
    _save(fig, path)


def _pareto(results, path):
    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    for arm in ARMS:
        pts = []
        for res in results:
            agg = res.aggregate()
            if np.isfinite(agg[f"{arm}.vendi.mean"]):
                pts.append((agg[f"{arm}.vendi.mean"], agg[f"{arm}.fidelity_logdensity.mean"]))
        color, marker = ARM_STYLE[arm]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, color=color, marker=marker, linestyle="-", label=arm)
    ax.set_xlabel("Vendi score")
    ax.set_ylabel("mean log-density")
    if ax.lines:
        ax.legend()
    _save(fig, path)


def emit_plots(results, out_dir) -> tuple[list[Path], list[str]]:
    """Endpoint scatters (2-D models only) and one Pareto plot.

    Returns the written paths and any notes about skipped plots.
    """
    results = _as_list(results)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths, notes = [], []
    for res in results:
        dim = res.config.model.build().dim
        if dim != 2:
            notes.append(f"scatter skipped for {res.run_id}: latent dimension {dim} != 2")
            continue
        p = out_dir / f"scatter_{_safe(res.run_id)}.svg"
        _scatter(res, p)
        paths.append(p)
    p = out_dir / "pareto.svg"
    _pareto(results, p)
    paths.append(p)
    return paths, notes
