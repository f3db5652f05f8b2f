"""Contrastive optimization of initial diffusion noise.

A batch of initial latents ``z_T`` is nudged by plain gradient descent on a
gamma-regulated InfoNCE loss computed between Tweedie predictions of the
current latents (repelled from each other) and the predictions of the
untouched initial latents (each sample attracted to its own anchor).

The noise predictor is held fixed during differentiation, so the Tweedie
map is affine in ``z_T`` and the whole gradient is a closed-form chain:
pooling matrix, normalization Jacobian, softmax weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .diffusion import (
    GaussianMixtureModel,
    LatentBatch,
    NoiseSchedule,
    epsilon_oracle,
    tweedie_estimate,
)
from .errors import NumericError, ParameterError

__all__ = [
    "CnoConfig",
    "OptimizationTrace",
    "StepRecord",
    "KlStats",
    "pooling_matrix",
    "downsample",
    "downsample_adjoint",
    "normalize",
    "cno_loss",
    "desirable_gamma",
    "kl_penalty",
    "prepare_targets",
    "cno_objective",
    "cno_gradient",
    "optimize_noise",
]

DEGENERATE_NORM = 1e-12
FD_STEP = 1e-4


@dataclass(frozen=True)
class CnoConfig:
    """Knobs of the optimization loop.

    ``window`` is the pooled size per spatial axis (or the pooled length for
    flat latents); ``None`` keeps full resolution.  ``kl_weight = 0`` disables
    the KL regularizer.
    """

    batch_size: int = 5
    n_opt: int = 3
    learning_rate: float = 0.01
    temperature: float = 0.1
    gamma: float = 1.0
    window: int | None = 16
    kl_weight: float = 0.0
    use_stopgrad: bool = True

    def __post_init__(self):
        if int(self.batch_size) != self.batch_size or self.batch_size < 2:
            raise ParameterError("batch_size must be an integer >= 2")
        if int(self.n_opt) != self.n_opt or self.n_opt < 1:
            raise ParameterError("n_opt must be an integer >= 1")
        # learning_rate = 0 is allowed: it is the null-update control arm.
        if not self.learning_rate >= 0.0:
            raise ParameterError("learning_rate must be non-negative")
        if not self.temperature > 0.0:
            raise ParameterError("temperature must be positive")
        if not self.gamma > 0.0:
            raise ParameterError("gamma must be positive")
        if self.window is not None and (int(self.window) != self.window or self.window < 1):
            raise ParameterError("window must be a positive integer or None")
        if not self.kl_weight >= 0.0:
            raise ParameterError("kl_weight must be non-negative")

    def resolved_window(self, shape: tuple[int, int, int] | None, dim: int) -> int:
        """Window validated against a latent layout (``None`` -> full size)."""
        full = dim if shape is None else shape[1]
        w = full if self.window is None else int(self.window)
        if not 1 <= w <= full:
            raise ParameterError(f"window {w} outside [1, {full}] for this latent layout")
        return w


@dataclass
class StepRecord:
    loss: float
    per_sample: np.ndarray
    kl: float
    grad_max_norm: float
    similarity: np.ndarray
    degenerate: np.ndarray


@dataclass
class OptimizationTrace:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def mean_pairwise_similarity(self) -> np.ndarray:
        """Mean off-diagonal similarity of the pooled predictions, per step."""
        out = []
        for r in self.records:
            s = r.similarity
            b = s.shape[0]
            out.append((s.sum() - np.trace(s)) / (b * (b - 1)))
        return np.array(out)


@dataclass(frozen=True)
class KlStats:
    mu_hat: float
    sigma2_hat: float
    d: int


@lru_cache(maxsize=64)
def _pooling_matrix_cached(size: int, w: int) -> np.ndarray:
    p = np.zeros((w, size))
    for i in range(w):
        lo = (i * size) // w
        hi = -((-(i + 1) * size) // w)  # ceil
        p[i, lo:hi] = 1.0 / (hi - lo)
    p.setflags(write=False)
    return p


def pooling_matrix(size: int, w: int) -> np.ndarray:
    """Adaptive average pooling along one axis as a ``(w, size)`` matrix.

    Bin ``i`` covers ``[floor(i*size/w), ceil((i+1)*size/w))``, so bins may
    overlap when ``size`` is not a multiple of ``w``.
    """
    if not 1 <= w <= size:
        raise ParameterError(f"window {w} outside [1, {size}]")
    return _pooling_matrix_cached(int(size), int(w))


def downsample(latent, w: int, shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Adaptive average pooling of flattened latents.

    ``latent`` is ``(D,)`` or ``(B, D)``.  With a grid ``shape = (C, S, S)``
    each channel is pooled to ``w x w``; without one the flat axis is pooled
    to length ``w``.
    """
    x = np.asarray(latent, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if shape is None:
        out = x @ pooling_matrix(x.shape[1], w).T
    else:
        c, s, _ = shape
        p = pooling_matrix(s, w)
        grid = x.reshape(x.shape[0], c, s, s)
        out = np.einsum("ih,bchk,jk->bcij", p, grid, p).reshape(x.shape[0], c * w * w)
    return out[0] if single else out


def downsample_adjoint(g, size_or_shape, w: int) -> np.ndarray:
    """Transpose of :func:`downsample`, mapping pooled gradients back."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    if isinstance(size_or_shape, (int, np.integer)):
        return g @ pooling_matrix(int(size_or_shape), w)
    c, s, _ = size_or_shape
    p = pooling_matrix(s, w)
    grid = g.reshape(g.shape[0], c, w, w)
    return np.einsum("ih,bcij,jk->bchk", p, grid, p).reshape(g.shape[0], c * s * s)


def normalize(v):
    """Row-wise unit vectors plus a degeneracy flag.

    Rows with norm below 1e-12 come back as zeros with the flag set.
    Returns ``(unit, norms, degenerate)``; a 1-D input gives scalar norm/flag.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    v2 = np.atleast_2d(v)
    norms = np.linalg.norm(v2, axis=1)
    degenerate = norms < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, norms)
    unit = np.where(degenerate[:, None], 0.0, v2 / safe[:, None])
    if single:
        return unit[0], float(norms[0]), bool(degenerate[0])
    return unit, norms, degenerate


def _loss_terms(opt, fixed, tau, gamma):
    opt = np.atleast_2d(opt)
    fixed = np.atleast_2d(fixed)
    if opt.shape[0] < 2 or opt.shape != fixed.shape:
        raise ParameterError("need matching opt/fixed sets with at least 2 members")
    sim = opt @ opt.T
    pos = np.einsum("id,id->i", opt, fixed)
    logits = sim / tau
    lse = logsumexp(logits, axis=1)
    per_sample = lse - pos / (gamma * tau)
    return per_sample, sim, logits, lse


def cno_loss(opt, fixed, tau: float, gamma: float = 1.0):
    """gamma-regulated InfoNCE over unit vectors.

    ``loss_i = -log( exp(<o_i, f_i>/(gamma tau)) / sum_j exp(<o_i, o_j>/tau) )``
    with the denominator running over the whole batch, ``j = i`` included.

    Returns ``(mean_loss, per_sample_losses)``.
    """
    per_sample, *_ = _loss_terms(opt, fixed, tau, gamma)
    return float(per_sample.mean()), per_sample


def _loss_grad_wrt_units(opt, fixed, tau, gamma):
    """Gradient of the mean loss w.r.t. each unit vector treated as free."""
    per_sample, sim, logits, lse = _loss_terms(opt, fixed, tau, gamma)
    b = opt.shape[0]
    p = np.exp(logits - lse[:, None])
    g = ((p + p.T) @ opt) / tau - fixed / (gamma * tau)
    return g / b, per_sample, sim


def desirable_gamma(tau: float, batch_size: int) -> float:
    """Attraction coefficient that balances one saturated positive term
    against ``B - 1`` saturated repulsion terms: ``1 / (tau ln(B-1) + 1)``."""
    if int(batch_size) != batch_size or batch_size < 2:
        raise ParameterError("batch_size must be an integer >= 2")
    if not tau > 0.0:
        raise ParameterError("tau must be positive")
    return 1.0 / (tau * np.log(batch_size - 1) + 1.0)


def _kl_parts(z):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    d = z.shape[1]
    if d < 2:
        raise ParameterError("KL statistics need at least 2 elements per tensor")
    mu = z.mean(axis=1)
    var = z.var(axis=1, ddof=1)
    if np.any(var < 1e-30):
        raise NumericError("sample variance too small for the KL penalty")
    kl = -0.5 * np.log(var) + 0.5 * (var + mu**2) - 0.5
    return z, mu, var, kl


def kl_penalty(batch):
    """Mean KL(N(mu_hat, sigma2_hat) || N(0, 1)) over the batch.

    Statistics pool all D elements of each tensor; the variance uses the
    unbiased ``D - 1`` divisor.  Returns ``(mean_kl, [KlStats, ...])``.
    """
    data = batch.data if isinstance(batch, LatentBatch) else batch
    z, mu, var, kl = _kl_parts(data)
    stats = [KlStats(float(m), float(v), z.shape[1]) for m, v in zip(mu, var)]
    return float(kl.mean()), stats


def _kl_gradient(z):
    z, mu, var, _ = _kl_parts(z)
    b, d = z.shape
    dvar = 0.5 - 0.5 / var
    g = mu[:, None] / d + dvar[:, None] * 2.0 * (z - mu[:, None]) / (d - 1)
    return g / b


def _pool_norm(z0, w, shape):
    return normalize(downsample(z0, w, shape))


def prepare_targets(fixed_z0, w: int, shape=None) -> np.ndarray:
    """Pooled, normalized anchors from full-resolution Tweedie predictions."""
    return _pool_norm(fixed_z0, w, shape)[0]


def _check_batch(batch_zT, config):
    data = np.atleast_2d(np.asarray(batch_zT.data, dtype=np.float64))
    if data.shape[0] != config.batch_size:
        raise ParameterError(
            f"batch has {data.shape[0]} latents but config.batch_size={config.batch_size}"
        )
    return data, batch_zT.shape


def cno_objective(zT, eps, schedule: NoiseSchedule, config: CnoConfig, fixed_targets, shape=None):
    """Scalar objective at ``zT`` with the noise prediction ``eps`` held fixed.

    This is the function whose exact gradient :func:`cno_gradient` returns on
    the stop-gradient path; it exists mainly as a finite-difference target.
    """
    zT = np.atleast_2d(zT)
    t = schedule.T
    w = config.resolved_window(shape, zT.shape[1])
    unit, _, _ = _pool_norm(tweedie_estimate(zT, t, eps, schedule), w, shape)
    loss, _ = cno_loss(unit, fixed_targets, config.temperature, config.gamma)
    if config.kl_weight > 0.0:
        loss += config.kl_weight * kl_penalty(zT)[0]
    return loss


def _tweedie_jacobian_fd(z, model, schedule, condition, t, h=FD_STEP):
    """Central-difference Jacobian of the full Tweedie map at one latent."""
    d = z.shape[0]
    jac = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        fp = tweedie_estimate(z + e, t, epsilon_oracle(model, z + e, t, condition, schedule), schedule)
        fm = tweedie_estimate(z - e, t, epsilon_oracle(model, z - e, t, condition, schedule), schedule)
        jac[:, k] = (fp - fm) / (2.0 * h)
    return jac


def _evaluate(zT, shape, model, schedule, condition, config, fixed_targets):
    t = schedule.T
    w = config.resolved_window(shape, zT.shape[1])
    eps = epsilon_oracle(model, zT, t, condition, schedule)
    z0 = tweedie_estimate(zT, t, eps, schedule)
    unit, norms, degenerate = _pool_norm(z0, w, shape)
    g_unit, per_sample, sim = _loss_grad_wrt_units(
        unit, fixed_targets, config.temperature, config.gamma
    )
    # normalization Jacobian (I - u u^T) / |v|; degenerate rows get no gradient
    g_pool = g_unit - np.einsum("bd,bd->b", g_unit, unit)[:, None] * unit
    g_pool = np.where(degenerate[:, None], 0.0, g_pool / np.where(degenerate, 1.0, norms)[:, None])
    g_z0 = downsample_adjoint(g_pool, zT.shape[1] if shape is None else shape, w)
    if config.use_stopgrad:
        grad = g_z0 / np.sqrt(schedule.alpha_bar(t))
    else:
        grad = np.stack(
            [
                _tweedie_jacobian_fd(zT[i], model, schedule, condition, t).T @ g_z0[i]
                for i in range(zT.shape[0])
            ]
        )
    loss = float(per_sample.mean())
    kl = 0.0
    if config.kl_weight > 0.0:
        kl = kl_penalty(zT)[0]
        loss += config.kl_weight * kl
        grad = grad + config.kl_weight * _kl_gradient(zT)
    return loss, per_sample, kl, grad, sim, degenerate, z0


def cno_gradient(
    batch_zT: LatentBatch,
    model: GaussianMixtureModel,
    schedule: NoiseSchedule,
    condition: str | None,
    config: CnoConfig,
    fixed_targets,
) -> np.ndarray:
    """Gradient of ``mean loss + kl_weight * KL`` with respect to each ``z_T``.

    ``fixed_targets`` are the pooled, normalized anchors from
    :func:`prepare_targets`.  With ``use_stopgrad`` the noise prediction is a
    constant and the result is exact; otherwise the Jacobian of the full
    Tweedie map is estimated by central differences (slow, reference only).
    """
    zT, shape = _check_batch(batch_zT, config)
    return _evaluate(zT, shape, model, schedule, condition, config, np.atleast_2d(fixed_targets))[3]


def optimize_noise(
    model: GaussianMixtureModel,
    schedule: NoiseSchedule,
    condition: str | None,
    config: CnoConfig,
    rng_seed=None,
    *,
    initial: LatentBatch | None = None,
    shape: tuple[int, int, int] | None = None,
):
    """Run the noise optimization loop.

    The initial batch is drawn from ``N(0, I)`` with ``rng_seed`` unless
    ``initial`` is given.  Returns ``(optimized, initial_snapshot, trace)``.
    The snapshot is a private copy and is never modified.
    """
    if initial is None:
        rng = np.random.default_rng(rng_seed)
        initial = LatentBatch(rng.standard_normal((config.batch_size, model.dim)), shape)
    zT, shape = _check_batch(initial, config)
    snapshot = LatentBatch(zT.copy(), shape)
    snapshot.data.setflags(write=False)
    zT = zT.copy()
    w = config.resolved_window(shape, zT.shape[1])
    trace = OptimizationTrace()
    targets = None
    for n in range(1, config.n_opt + 1):
        if targets is None:
            eps = epsilon_oracle(model, zT, schedule.T, condition, schedule)
            targets = prepare_targets(tweedie_estimate(zT, schedule.T, eps, schedule), w, shape)
        try:
            loss, per_sample, kl, grad, sim, degenerate, _ = _evaluate(
                zT, shape, model, schedule, condition, config, targets
            )
        except NumericError as exc:
            raise NumericError(f"iteration {n}: {exc}") from exc
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericError(f"non-finite loss or gradient at iteration {n}")
        trace.records.append(
            StepRecord(
                loss=loss,
                per_sample=per_sample,
                kl=kl,
                grad_max_norm=float(np.linalg.norm(grad, axis=1).max()),
                similarity=sim,
                degenerate=degenerate,
            )
        )
        zT = zT - config.learning_rate * grad
    return LatentBatch(zT, shape), snapshot, trace
