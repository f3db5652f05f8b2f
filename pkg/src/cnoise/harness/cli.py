"""Command-line entry point.

Subcommands: ``run``, ``sweep``, ``mi-check``, ``gamma`` and ``metrics``.
Failures print exactly one line ``error: <Kind>: <message>`` on stderr and
exit nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from ..cno import desirable_gamma
from ..errors import NumericError, ParameterError, UnknownConditionError
from ..metrics import mean_pairwise_similarity, similarity_matrix, vendi_score
from ..mi_bounds import check_bounds, default_sweep
from .config import load_config
from .report import emit_plots, write_csv, write_manifest
from .runner import ARMS, gamma_stability, paired_sign_test, run_experiment, run_sweep


class CliError(Exception):
    def __init__(self, kind, message, code=1):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("UsageError", message, 2)


def _one_line(text) -> str:
    return " ".join(str(text).split())


def _floats(text):
    try:
        return [float(v) if v != "full" else v for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError("UsageError", f"bad value list {text!r}", 2) from exc


def _config(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.plots:
        changes["emit_plots"] = True
    return cfg.replace(**changes)


def _summary(res, out):
    agg = res.aggregate()
    for arm in ARMS:
        print(
            f"{res.run_id} {arm}: vendi={agg[f'{arm}.vendi.mean']:.6g} mss={agg[f'{arm}.mss.mean']:.6g} "
            f"modes={agg[f'{arm}.modes_hit.mean']:.6g} fidelity={agg[f'{arm}.fidelity_logdensity.mean']:.6g}",
            file=out,
        )
    if res.records:
        wins, n, p = paired_sign_test(res)
        print(f"{res.run_id} sign test on vendi: {wins}/{n} trials improved, p={p:.3g}", file=out)
    print(f"{res.run_id} failures: {len(res.failures)}", file=out)


def _finish(results, cfg, stem, out):
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(results, out_dir / f"{stem}.csv")
    write_manifest(results, out_dir / f"{stem}_manifest.json")
    if cfg.emit_plots:
        _, notes = emit_plots(results, out_dir)
        for note in notes:
            print(note, file=out)
    print(f"wrote {out_dir / (stem + '.csv')}", file=out)


def cmd_run(args, out):
    cfg = _config(args)
    res = run_experiment(cfg)
    _summary(res, out)
    _finish(res, cfg, "results", out)


def cmd_sweep(args, out):
    cfg = _config(args)
    if args.stability_etas:
        if args.axis != "gamma":
            raise CliError("UsageError", "--stability-etas needs --axis gamma", 2)
        stab = gamma_stability(cfg, tuple(_floats(args.values)), tuple(_floats(args.stability_etas)))
        results = [r for g in stab.gammas for r in stab.runs[g]]
        for g in stab.gammas:
            v = stab.variances[g]
            print(f"gamma={g:g} s2_vendi={v['vendi']:.6g} s2_mss={v['mss']:.6g} s2_fidelity={v['fidelity_logdensity']:.6g}", file=out)
    else:
        results = run_sweep(cfg, args.axis, _floats(args.values))
        for res in results:
            _summary(res, out)
    _finish(results, cfg, "sweep", out)


def cmd_mi_check(args, out):
    if args.sweep != "default":
        raise CliError("UsageError", f"unknown sweep {args.sweep!r}", 2)
    results = check_bounds(default_sweep(args.num_batches, args.seed or 0))
    header = ["d", "rho_pos", "rho_neg", "B", "gamma", "loss", "stderr", "rhs_classical", "rhs_prop1", "rhs_prop2", "ok"]
    rows = []
    for r in results:
        e = r.experiment
        rows.append([e.dim, e.rho_pos, e.rho_neg, e.batch, r.gamma, r.empirical_loss, r.loss_stderr,
                     r.rhs_classical, r.rhs_prop1, r.rhs_prop2, int(r.all_ok)])
    for row in rows:
        print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in zip(header, row)), file=out)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "mi_bounds.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows([[format(v, ".9g") if isinstance(v, float) else v for v in row] for row in rows])
    bad = sum(not r.all_ok for r in results)
    print(f"{len(results) - bad}/{len(results)} cells satisfy all bounds", file=out)
    if bad:
        raise CliError("BoundViolation", f"{bad} cells violate a bound beyond 3 standard errors")


def cmd_gamma(args, out):
    print(format(desirable_gamma(args.tau, args.batch), ".9g"), file=out)


def cmd_metrics(args, out):
    try:
        with open(args.points, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise CliError("IOError", f"cannot read {args.points}: {exc.strerror}") from exc
    try:
        float(rows[0][0])
    except (ValueError, IndexError):
        rows = rows[1:]
    try:
        x = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise CliError("ParseError", f"{args.points}: non-numeric or ragged rows") from exc
    if x.ndim != 2 or x.shape[0] < 2:
        raise CliError("ParseError", f"{args.points}: need at least two rows of points")
    k = similarity_matrix(x, args.kernel)
    mss = mean_pairwise_similarity(similarity_matrix(x, "cosine"))
    print(f"n={x.shape[0]} dim={x.shape[1]} vendi={vendi_score(k):.9g} mss={mss:.9g}", file=out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cnoise", description="Contrastive noise optimization experiments on toy diffusion models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("config", help="experiment config in key = value format")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--out", help="override output.dir")
        sp.add_argument("--plots", action="store_true", help="emit SVG plots")
        sp.add_argument("--trials", type=int, help="override run.trials")

    sp = sub.add_parser("run", help="run one paired DDIM/CNO experiment")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="sweep one CNO hyperparameter")
    common(sp)
    sp.add_argument("--axis", required=True, choices=["gamma", "tau", "eta", "B", "w", "lambda"])
    sp.add_argument("--values", required=True, help="comma-separated values, 'full' allowed for w")
    sp.add_argument("--stability-etas", help="with --axis gamma: learning rates for the stability study")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("mi-check", help="Monte-Carlo check of the InfoNCE bounds")
    sp.add_argument("--sweep", default="default")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--num-batches", type=int, default=2000)
    sp.set_defaults(func=cmd_mi_check)

    sp = sub.add_parser("gamma", help="print the balancing gamma for a temperature and batch size")
    sp.add_argument("--tau", type=float, required=True)
    sp.add_argument("--batch", type=int, required=True)
    sp.set_defaults(func=cmd_gamma)

    sp = sub.add_parser("metrics", help="Vendi score and mean pairwise similarity of a CSV of points")
    sp.add_argument("points")
    sp.add_argument("--kernel", default="cosine", choices=["cosine", "rbf"])
    sp.set_defaults(func=cmd_metrics)
    return p


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        args.func(args, out)
    except CliError as exc:
        print(f"error: {exc.kind}: {_one_line(exc)}", file=err)
        return exc.code
    except (ParameterError, NumericError, UnknownConditionError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {type(exc).__name__}: {_one_line(msg)}", file=err)
        return 1
    return 0
