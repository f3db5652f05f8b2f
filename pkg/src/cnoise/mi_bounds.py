"""Monte-Carlo checks of InfoNCE lower bounds on correlated Gaussians.

Anchors are ``Z ~ N(0, I_d)``.  The positive and each of the ``B - 1``
negatives are ``rho * Z + sqrt(1 - rho^2) * xi`` with their own ``rho`` and
independent ``xi``, so every pair has closed-form mutual information and
the critic can be the exact density ratio ``p(z | z') / p(z)``.

Three inequalities are checked:

* classical:  ``L >= log B - I_pos``
* negatives:  ``L >= -I_pos + I_neg + log(B - 1)``
* gamma:      ``L_gamma >= -I_pos / gamma + I_neg + log(B - 1)``

where ``L`` is the plain InfoNCE value and ``L_gamma`` divides the positive
log-critic in the numerator by ``gamma``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ParameterError

__all__ = [
    "MiExperiment",
    "BoundCheckResult",
    "gaussian_mi",
    "log_density_ratio",
    "empirical_infonce",
    "check_bounds",
    "default_sweep",
]

# absolute slack for exact ties (e.g. rho = 0 gives a zero-variance loss)
ROUNDOFF = 1e-12


@dataclass(frozen=True)
class MiExperiment:
    dim: int = 1
    rho_pos: float = 0.9
    rho_neg: float = 0.0
    batch: int = 4
    num_batches: int = 2000
    seed: int = 0

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ParameterError("dim must be a positive integer")
        for name in ("rho_pos", "rho_neg"):
            if not abs(getattr(self, name)) < 1.0:
                raise ParameterError(f"|{name}| must be < 1")
        if int(self.batch) != self.batch or self.batch < 2:
            raise ParameterError("batch must be an integer >= 2")
        if int(self.num_batches) != self.num_batches or self.num_batches < 2:
            raise ParameterError("num_batches must be an integer >= 2")


@dataclass(frozen=True)
class BoundCheckResult:
    experiment: MiExperiment
    gamma: float
    empirical_loss: float
    loss_stderr: float
    empirical_loss_plain: float
    plain_stderr: float
    i_pos: float
    i_neg: float
    rhs_classical: float
    rhs_prop1: float
    rhs_prop2: float

    @staticmethod
    def _holds(value, stderr, rhs):
        return bool(value >= rhs - 3.0 * stderr - ROUNDOFF * max(1.0, abs(rhs)))

    @property
    def classical_ok(self) -> bool:
        return self._holds(self.empirical_loss_plain, self.plain_stderr, self.rhs_classical)

    @property
    def prop1_ok(self) -> bool:
        return self._holds(self.empirical_loss_plain, self.plain_stderr, self.rhs_prop1)

    @property
    def prop2_ok(self) -> bool:
        return self._holds(self.empirical_loss, self.loss_stderr, self.rhs_prop2)

    @property
    def all_ok(self) -> bool:
        return self.classical_ok and self.prop1_ok and self.prop2_ok


def gaussian_mi(rho: float, d: int = 1) -> float:
    """I(X; Y) in nats for ``d`` coordinates each correlated by ``rho``."""
    if not abs(rho) < 1.0:
        raise ParameterError("|rho| must be < 1")
    if int(d) != d or d < 1:
        raise ParameterError("d must be a positive integer")
    return float(-0.5 * d * np.log1p(-rho * rho))


def log_density_ratio(z, z_other, rho: float) -> np.ndarray:
    """log p(z | z') - log p(z) for the rho-correlated pair, over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    z_other = np.asarray(z_other, dtype=np.float64)
    d = z.shape[-1]
    v = 1.0 - rho * rho
    resid = z - rho * z_other
    return (
        -0.5 * d * np.log(v)
        - 0.5 * np.sum(resid * resid, axis=-1) / v
        + 0.5 * np.sum(z * z, axis=-1)
    )


def _draw(exp: MiExperiment):
    rng = np.random.default_rng(np.random.SeedSequence(exp.seed))
    n, b, d = exp.num_batches, exp.batch, exp.dim
    z = rng.standard_normal((n, d))
    xi_pos = rng.standard_normal((n, d))
    xi_neg = rng.standard_normal((n, b - 1, d))
    z_pos = exp.rho_pos * z + np.sqrt(1.0 - exp.rho_pos**2) * xi_pos
    z_neg = exp.rho_neg * z[:, None, :] + np.sqrt(1.0 - exp.rho_neg**2) * xi_neg
    return z, z_pos, z_neg


def _losses(log_pos, log_neg, gamma):
    denom = logsumexp(np.concatenate([log_pos[:, None], log_neg], axis=1), axis=1)
    return denom - log_pos / gamma


def _mean_se(x):
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(x.size))


def empirical_infonce(exp: MiExperiment, gamma: float = 1.0) -> BoundCheckResult:
    """Estimate the (gamma-)InfoNCE loss with the exact critic and all bound RHS.

    Per replication the loss is
    ``-log( f_pos^(1/gamma) / (f_pos + sum_i f_neg_i) )`` evaluated in the log
    domain.  The plain (gamma = 1) loss is computed on the same draws.
    """
    if not gamma > 0.0:
        raise ParameterError("gamma must be positive")
    z, z_pos, z_neg = _draw(exp)
    log_pos = log_density_ratio(z, z_pos, exp.rho_pos)
    log_neg = log_density_ratio(z[:, None, :], z_neg, exp.rho_neg)
    loss, se = _mean_se(_losses(log_pos, log_neg, gamma))
    plain, plain_se = _mean_se(_losses(log_pos, log_neg, 1.0))
    i_pos = gaussian_mi(exp.rho_pos, exp.dim)
    i_neg = gaussian_mi(exp.rho_neg, exp.dim)
    b = exp.batch
    return BoundCheckResult(
        experiment=exp,
        gamma=float(gamma),
        empirical_loss=loss,
        loss_stderr=se,
        empirical_loss_plain=plain,
        plain_stderr=plain_se,
        i_pos=i_pos,
        i_neg=i_neg,
        rhs_classical=float(np.log(b) - i_pos),
        rhs_prop1=float(-i_pos + i_neg + np.log(b - 1)),
        rhs_prop2=float(-i_pos / gamma + i_neg + np.log(b - 1)),
    )


def default_sweep(num_batches: int = 2000, seed: int = 0):
    """The 48-cell grid over rho_pos, rho_neg, B, gamma and d.

    Each cell gets its own seed ``seed + index`` so cells are independent.
    """
    grid = itertools.product((0.0, 0.5, 0.9), (0.0, 0.3), (4, 16), (0.7, 1.0), (1, 4))
    return [
        (MiExperiment(d, rp, rn, b, num_batches, seed + k), g)
        for k, (rp, rn, b, g, d) in enumerate(grid)
    ]


def check_bounds(sweep=None) -> list[BoundCheckResult]:
    """Evaluate every ``(MiExperiment, gamma)`` pair (default grid if omitted)."""
    if sweep is None:
        sweep = default_sweep()
    return [empirical_infonce(exp, gamma) for exp, gamma in sweep]
