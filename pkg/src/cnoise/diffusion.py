"""Noise schedules, an analytic Gaussian-mixture noise oracle, and samplers.

Step indices follow the usual 1-based convention: ``t`` runs from 1 to ``T``
and ``t = 0`` denotes clean data with ``alpha_bar(0) == 1``.  Every array op
accepts either a single vector of shape ``(D,)`` or a batch ``(B, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import NumericError, ParameterError, UnknownConditionError

__all__ = [
    "NoiseSchedule",
    "GaussianMixtureModel",
    "LatentBatch",
    "build_schedule",
    "schedule_from_betas",
    "circle_mixture",
    "grid_mixture",
    "forward_marginal_sample",
    "mixture_log_density",
    "epsilon_oracle",
    "tweedie_estimate",
    "ddim_step",
    "ddpm_step",
    "timestep_grid",
    "ddim_run",
    "ddim_sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized variance schedule.

    Arrays are stored 0-based, so ``betas[t - 1]`` is beta at step ``t``.
    Use :meth:`alpha_bar` for the 1-based lookup with the ``t = 0`` endpoint.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def check_step(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if not (lo <= int(t) <= self.T) or int(t) != t:
            raise ParameterError(f"step {t!r} outside [{lo}, {self.T}]")
        return int(t)

    def alpha_bar(self, t: int) -> float:
        t = self.check_step(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_step(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.check_step(t) - 1])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self.check_step(t) - 1])


def schedule_from_betas(betas: Sequence[float]) -> NoiseSchedule:
    """Build the derived ladders from an explicit beta vector.

    ``sigmas`` holds the DDPM posterior std
    ``sqrt(beta_t * (1 - abar_{t-1}) / (1 - abar_t))``, which is 0 at ``t = 1``.
    """
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size == 0:
        raise ParameterError("betas must be a non-empty vector")
    if not np.all((betas > 0.0) & (betas < 1.0)):
        raise ParameterError("every beta must lie in (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    sigmas = np.sqrt(betas * (1.0 - prev) / (1.0 - alpha_bars))
    for arr in (betas, alphas, alpha_bars, sigmas):
        arr.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bars, sigmas)


def build_schedule(
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
) -> NoiseSchedule:
    """Linear or scaled-linear (linear in sqrt(beta)) schedule."""
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(beta_start**0.5, beta_end**0.5, int(T), dtype=np.float64) ** 2
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}")
    return schedule_from_betas(betas)


@dataclass(frozen=True)
class GaussianMixtureModel:
    """Isotropic Gaussian mixture acting as the data distribution.

    ``conditions`` maps a label to the component indices that make up the
    conditional distribution; the conditional uses the subset's weights
    renormalized to 1.
    """

    means: np.ndarray
    scales: np.ndarray
    weights: np.ndarray
    conditions: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    guidance_scale: float = 0.0

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k = means.shape[0]
        scales = np.broadcast_to(np.asarray(self.scales, dtype=np.float64), (k,)).copy()
        weights = np.broadcast_to(np.asarray(self.weights, dtype=np.float64), (k,)).copy()
        if not np.all(np.isfinite(means)):
            raise ParameterError("means must be finite")
        if not np.all(scales > 0.0):
            raise ParameterError("all scales must be positive")
        if not np.all(weights > 0.0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ParameterError("weights must be positive and sum to 1")
        if not (self.guidance_scale >= 0.0):
            raise ParameterError("guidance_scale must be non-negative")
        conds = {}
        for label, idx in dict(self.conditions).items():
            idx = tuple(int(i) for i in idx)
            if not idx or any(i < 0 or i >= k for i in idx) or len(set(idx)) != len(idx):
                raise ParameterError(f"condition {label!r} has invalid component subset {idx}")
            conds[str(label)] = idx
        for arr in (means, scales, weights):
            arr.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "conditions", conds)
        object.__setattr__(self, "guidance_scale", float(self.guidance_scale))

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def n_components(self) -> int:
        return int(self.means.shape[0])

    def component_subset(self, condition: str | None) -> np.ndarray:
        """Component indices of ``condition`` (all components for ``None``)."""
        if condition is None:
            return np.arange(self.n_components)
        try:
            return np.asarray(self.conditions[condition])
        except KeyError:
            raise UnknownConditionError(condition) from None

    def subset_params(self, condition: str | None):
        idx = self.component_subset(condition)
        w = self.weights[idx]
        return self.means[idx], self.scales[idx], w / w.sum()


def circle_mixture(
    n_modes: int = 8,
    radius: float = 5.0,
    scale: float = 0.1,
    guidance_scale: float = 6.0,
    conditions: Mapping[str, Sequence[int]] | None = None,
) -> GaussianMixtureModel:
    """Equal-weight 2-D modes evenly spaced on a circle.

    Mode ``k`` sits at angle ``2 pi k / n_modes``.  By default two conditions
    are defined: ``"all"`` (every mode) and ``"half"`` (the first
    ``n_modes // 2`` consecutive modes).
    """
    angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if conditions is None:
        conditions = {"all": tuple(range(n_modes)), "half": tuple(range(max(1, n_modes // 2)))}
    return GaussianMixtureModel(
        means=means,
        scales=np.full(n_modes, float(scale)),
        weights=np.full(n_modes, 1.0 / n_modes),
        conditions=conditions,
        guidance_scale=guidance_scale,
    )


def grid_mixture(
    shape: tuple[int, int, int] = (4, 32, 32),
    n_modes: int = 8,
    mode_scale: float = 1.0,
    scale: float = 0.3,
    seed: int = 0,
    guidance_scale: float = 6.0,
) -> GaussianMixtureModel:
    """Mixture over flattened ``(C, S, S)`` latents with random centered means.

    Mean entries are drawn i.i.d. ``N(0, mode_scale^2)`` from ``seed`` and the
    mixture mean is subtracted so it sits at the origin.  Conditions are
    ``"all"`` and ``"half"`` as in :func:`circle_mixture`.
    """
    d = int(np.prod(shape))
    means = np.random.default_rng(seed).standard_normal((n_modes, d)) * mode_scale
    means -= means.mean(axis=0)
    return GaussianMixtureModel(
        means=means,
        scales=np.full(n_modes, float(scale)),
        weights=np.full(n_modes, 1.0 / n_modes),
        conditions={"all": tuple(range(n_modes)), "half": tuple(range(max(1, n_modes // 2)))},
        guidance_scale=guidance_scale,
    )


@dataclass
class LatentBatch:
    """B flattened latents plus the grid shape they came from.

    ``shape`` is ``(C, S, S)`` for image-like latents or ``None`` for flat
    vectors without spatial structure.
    """

    data: np.ndarray
    shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.shape is not None:
            self.shape = tuple(int(s) for s in self.shape)
            if len(self.shape) != 3 or self.shape[1] != self.shape[2]:
                raise ParameterError(f"grid shape must be (C, S, S), got {self.shape}")
            if int(np.prod(self.shape)) != self.dim:
                raise ParameterError(f"shape {self.shape} does not match dimension {self.dim}")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("latent batch contains non-finite entries")

    @property
    def batch_size(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def copy(self) -> "LatentBatch":
        return LatentBatch(self.data.copy(), self.shape)


def forward_marginal_sample(z0, t: int, schedule: NoiseSchedule, noise) -> np.ndarray:
    """Draw from q(z_t | z_0) given the standard-normal ``noise``."""
    schedule.check_step(t)
    a = schedule.alpha_bar(t)
    return np.sqrt(a) * np.asarray(z0, dtype=np.float64) + np.sqrt(1.0 - a) * np.asarray(
        noise, dtype=np.float64
    )


def _diffused_terms(means, scales, weights, z, a):
    """Per-component log densities and variances of the diffused mixture."""
    d = means.shape[1]
    var = a * scales**2 + (1.0 - a)  # (K,)
    diff = z[:, None, :] - np.sqrt(a) * means[None, :, :]  # (B, K, D)
    sq = np.einsum("bkd,bkd->bk", diff, diff)
    logn = -0.5 * sq / var - 0.5 * d * np.log(2.0 * np.pi * var)
    return np.log(weights)[None, :] + logn, diff, var


def mixture_log_density(
    model: GaussianMixtureModel,
    z,
    alpha_bar: float = 1.0,
    condition: str | None = None,
) -> np.ndarray:
    """log p_t(z) of the mixture diffused to noise level ``alpha_bar``.

    ``alpha_bar = 1`` gives the data density itself.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    means, scales, weights = model.subset_params(condition)
    logits, _, _ = _diffused_terms(means, scales, weights, np.atleast_2d(z), alpha_bar)
    out = logsumexp(logits, axis=1)
    return out[0] if single else out


def _mixture_score(means, scales, weights, z, a):
    logits, diff, var = _diffused_terms(means, scales, weights, z, a)
    resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    return -np.einsum("bk,bkd->bd", resp / var[None, :], diff)


def epsilon_oracle(
    model: GaussianMixtureModel,
    z_t,
    t: int,
    condition: str | None,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Exact noise prediction ``-sqrt(1 - abar_t) * grad log p_t(z_t)``.

    With a condition and a positive guidance scale ``s`` the conditional and
    unconditional predictions are blended as ``eps_u + s * (eps_c - eps_u)``.
    """
    schedule.check_step(t)
    z = np.asarray(z_t, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    a = schedule.alpha_bar(t)
    if condition is not None:
        cond_params = model.subset_params(condition)  # raises on unknown labels
    s = model.guidance_scale
    # overflow shows up as non-finite output and is reported below
    with np.errstate(over="ignore", invalid="ignore"):
        eps = -np.sqrt(1.0 - a) * _mixture_score(model.means, model.scales, model.weights, z, a)
        if condition is not None and s != 0.0:
            eps_c = -np.sqrt(1.0 - a) * _mixture_score(*cond_params, z, a)
            eps = eps + s * (eps_c - eps)
    if not np.all(np.isfinite(eps)):
        raise NumericError(f"non-finite noise prediction at step {t}")
    return eps[0] if single else eps


def tweedie_estimate(z_t, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Posterior-mean estimate of z_0 from z_t and a noise prediction."""
    schedule.check_step(t)
    a = schedule.alpha_bar(t)
    if a < 1e-30:
        raise NumericError(f"alpha_bar at step {t} is {a:g}; Tweedie division is singular")
    return (np.asarray(z_t, dtype=np.float64) - np.sqrt(1.0 - a) * np.asarray(eps)) / np.sqrt(a)


def ddim_step(z_t, t: int, t_prev: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    schedule.check_step(t)
    schedule.check_step(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ParameterError(f"t_prev={t_prev} must be smaller than t={t}")
    z0_hat = tweedie_estimate(z_t, t, eps, schedule)
    if t_prev == 0:
        return z0_hat
    a_prev = schedule.alpha_bar(t_prev)
    return np.sqrt(a_prev) * z0_hat + np.sqrt(1.0 - a_prev) * np.asarray(eps)


def ddpm_step(z_t, t: int, eps, schedule: NoiseSchedule, noise) -> np.ndarray:
    """Ancestral DDPM update from ``t`` to ``t - 1``."""
    schedule.check_step(t)
    beta, alpha, a = schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t)
    mean = (np.asarray(z_t, dtype=np.float64) - beta / np.sqrt(1.0 - a) * np.asarray(eps)) / np.sqrt(
        alpha
    )
    return mean + schedule.sigma(t) * np.asarray(noise, dtype=np.float64)


def timestep_grid(T: int, num_inference_steps: int) -> np.ndarray:
    """Decreasing integer grid ``floor(T * (n - k) / n)`` for k = 0..n.

    Always starts at ``T`` and ends at 0.
    """
    n = int(num_inference_steps)
    if not (1 <= n <= T):
        raise ParameterError(f"num_inference_steps must be in [1, {T}], got {num_inference_steps}")
    return np.array([(T * (n - k)) // n for k in range(n + 1)], dtype=np.int64)


def ddim_run(
    z,
    model: GaussianMixtureModel,
    condition: str | None,
    schedule: NoiseSchedule,
    timesteps: Sequence[int],
) -> np.ndarray:
    """Run DDIM along an explicit decreasing grid; returns the state at its end."""
    z = np.asarray(z, dtype=np.float64)
    ts = [int(t) for t in timesteps]
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps = epsilon_oracle(model, z, t, condition, schedule)
        z = ddim_step(z, t, t_prev, eps, schedule)
    return z


def ddim_sample(
    batch: LatentBatch,
    model: GaussianMixtureModel,
    condition: str | None,
    schedule: NoiseSchedule,
    num_inference_steps: int = 50,
) -> LatentBatch:
    """Deterministic DDIM from ``z_T`` to clean endpoints."""
    grid = timestep_grid(schedule.T, num_inference_steps)
    return LatentBatch(ddim_run(batch.data, model, condition, schedule, grid), batch.shape)
