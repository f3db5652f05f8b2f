"""Paired DDIM-vs-CNO experiments, sweeps and the gamma-stability study.

Every trial draws its initial noise once from a per-trial seed; the DDIM arm
samples from it directly and the CNO arm optimizes a copy first.  Trial
seeds are ``SeedSequence([seed, trial])`` collapsed to one 64-bit word, so
trials are independent of each other and of execution order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .. import __version__
from ..cno import cno_objective, optimize_noise, prepare_targets
from ..diffusion import LatentBatch, ddim_sample, epsilon_oracle, tweedie_estimate
from ..errors import NumericError, ParameterError, UnknownConditionError
from ..metrics import evaluate_batch
from .config import ExperimentConfig

__all__ = [
    "ARMS",
    "METRICS",
    "ArmRecord",
    "TrialFailure",
    "RunResult",
    "trial_seed",
    "run_experiment",
    "run_sweep",
    "gamma_stability",
    "StabilityResult",
    "paired_sign_test",
    "aggregate_records",
]

ARMS = ("ddim", "cno")
METRICS = ("vendi", "mss", "modes_hit", "fidelity_logdensity", "final_loss")
SWEEP_AXES = {
    "gamma": "gamma",
    "tau": "temperature",
    "eta": "learning_rate",
    "B": "batch_size",
    "w": "window",
    "lambda": "kl_weight",
}


@dataclass(frozen=True)
class ArmRecord:
    trial: int
    arm: str
    seed: int
    vendi: float
    mss: float
    modes_hit: int
    mode_histogram: tuple
    fidelity_logdensity: float
    final_loss: float
    wall_ms: float = field(default=0.0, compare=False)
    loss_trace: tuple = field(default=())
    endpoints: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class TrialFailure:
    trial: int
    seed: int
    message: str


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    run_id: str = "run"

    @property
    def manifest(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_hash": self.config.config_hash(),
            "seed": int(self.config.seed),
            "trials": int(self.config.trials),
            "failures": len(self.failures),
            "version": __version__,
        }

    def arm(self, name: str) -> list:
        return [r for r in self.records if r.arm == name]

    def aggregate(self) -> dict:
        return aggregate_records(self.records)

    def overhead_ratio(self) -> float:
        """Mean wall-clock of the CNO arm over the DDIM arm."""
        a = np.mean([r.wall_ms for r in self.arm("ddim")]) if self.records else np.nan
        b = np.mean([r.wall_ms for r in self.arm("cno")]) if self.records else np.nan
        return float(b / a) if a > 0 else float("nan")


def aggregate_records(records) -> dict:
    """Per-arm mean and sample variance (ddof=1) of every metric."""
    out = {}
    for arm in ARMS:
        rows = [r for r in records if r.arm == arm]
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in rows], dtype=np.float64)
            out[f"{arm}.{m}.mean"] = float(vals.mean()) if vals.size else float("nan")
            out[f"{arm}.{m}.var"] = float(vals.var(ddof=1)) if vals.size > 1 else float("nan")
    return out


def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(trial)]).generate_state(1, np.uint64)[0])


def _arm_record(trial, arm, seed, endpoints, model, condition, kernel, loss, wall_ms, trace=()):
    rep = evaluate_batch(endpoints, model, condition, kernel)
    return ArmRecord(
        trial=trial,
        arm=arm,
        seed=seed,
        vendi=rep.vendi,
        mss=rep.mss,
        modes_hit=rep.modes_hit,
        mode_histogram=tuple(int(h) for h in rep.mode_histogram),
        fidelity_logdensity=rep.fidelity_logdensity,
        final_loss=float(loss),
        wall_ms=wall_ms,
        loss_trace=tuple(trace),
        endpoints=endpoints,
    )


def _one_trial(trial, config, model, schedule, shape):
    cfg = config.cno
    condition = config.model.condition
    seed = trial_seed(config.seed, trial)
    z = np.random.default_rng(seed).standard_normal((cfg.batch_size, model.dim))
    steps = config.schedule.steps

    start = time.perf_counter()
    base = ddim_sample(LatentBatch(z.copy(), shape), model, condition, schedule, steps)
    ddim_ms = 1e3 * (time.perf_counter() - start)

    start = time.perf_counter()
    opt, snapshot, trace = optimize_noise(model, schedule, condition, cfg, initial=LatentBatch(z, shape))
    ours = ddim_sample(opt, model, condition, schedule, steps)
    cno_ms = 1e3 * (time.perf_counter() - start)

    # the CNO objective of the noise each arm actually sampled from
    t = schedule.T
    w = cfg.resolved_window(shape, model.dim)
    eps0 = epsilon_oracle(model, snapshot.data, t, condition, schedule)
    targets = prepare_targets(tweedie_estimate(snapshot.data, t, eps0, schedule), w, shape)
    eps1 = epsilon_oracle(model, opt.data, t, condition, schedule)
    final = cno_objective(opt.data, eps1, schedule, cfg, targets, shape)
    kernel = config.kernel
    return [
        _arm_record(trial, "ddim", seed, base.data, model, condition, kernel, trace.losses[0], ddim_ms),
        _arm_record(trial, "cno", seed, ours.data, model, condition, kernel, final, cno_ms, trace.losses),
    ]


def run_experiment(config: ExperimentConfig, run_id: str | None = None) -> RunResult:
    """Run ``config.trials`` paired trials.

    A trial that raises a parameter or numeric error is recorded in
    ``failures`` and skipped; the run carries on.
    """
    model = config.model.build()
    schedule = config.schedule.build()
    shape = config.model.latent_shape
    model.component_subset(config.model.condition)
    config.cno.resolved_window(shape, model.dim)
    result = RunResult(config, run_id=run_id or config.name)
    for trial in range(config.trials):
        try:
            result.records.extend(_one_trial(trial, config, model, schedule, shape))
        except (NumericError, ParameterError, UnknownConditionError) as exc:
            result.failures.append(TrialFailure(trial, trial_seed(config.seed, trial), f"{type(exc).__name__}: {exc}"))
    return result


def _cno_value(axis, value):
    if axis not in SWEEP_AXES:
        raise ParameterError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    if axis == "w" and value in ("full", None):
        return None
    if axis in ("B", "w"):
        return int(value)
    return float(value)


def run_sweep(base: ExperimentConfig, axis: str, values) -> list:
    """One ``RunResult`` per value of ``axis``; ``run_id`` is ``name-axis=value``."""
    out = []
    for v in values:
        v = _cno_value(axis, v)
        config = base.with_cno(**{SWEEP_AXES[axis]: v})
        label = "full" if v is None else f"{v:g}"
        out.append(run_experiment(config, f"{base.name}-{axis}={label}"))
    return out


@dataclass
class StabilityResult:
    gammas: tuple
    etas: tuple
    runs: dict
    variances: dict

    def vendi_variances(self) -> list:
        return [self.variances[g]["vendi"] for g in self.gammas]


def gamma_stability(base: ExperimentConfig, gammas=(1.0, 0.9, 0.8, 0.7), etas=(0.01, 0.015, 0.02)):
    """For each gamma run every eta, then take the sample variance across eta.

    Each metric is first averaged over trials (CNO arm) per ``(gamma, eta)``
    cell; the variance (ddof=1) of those cell means across eta is reported
    per gamma.
    """
    if len(etas) < 2:
        raise ParameterError("need at least two learning rates")
    runs, variances = {}, {}
    for g in gammas:
        cells = run_sweep(base.with_cno(gamma=float(g)), "eta", etas)
        runs[g] = cells
        means = {m: [c.aggregate()[f"cno.{m}.mean"] for c in cells] for m in METRICS}
        variances[g] = {m: float(np.var(v, ddof=1)) for m, v in means.items()}
    return StabilityResult(tuple(gammas), tuple(etas), runs, variances)


def paired_sign_test(result: RunResult, metric: str = "vendi") -> tuple[int, int, float]:
    """One-sided sign test that CNO beats DDIM on ``metric`` per trial.

    Ties are dropped.  Returns ``(wins, n_nonzero, p_value)``.
    """
    a = {r.trial: getattr(r, metric) for r in result.arm("ddim")}
    b = {r.trial: getattr(r, metric) for r in result.arm("cno")}
    delta = np.array([b[t] - a[t] for t in sorted(a)])
    nz = delta[delta != 0]
    wins = int(np.sum(nz > 0))
    if nz.size == 0:
        return 0, 0, 1.0
    return wins, int(nz.size), float(binomtest(wins, nz.size, 0.5, alternative="greater").pvalue)

