"""Diversity and fidelity measurements for a batch of samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .diffusion import GaussianMixtureModel, mixture_log_density
from .errors import NumericError, ParameterError

__all__ = [
    "SimilarityMatrix",
    "MetricReport",
    "similarity_matrix",
    "vendi_score",
    "mean_pairwise_similarity",
    "mode_coverage",
    "fidelity_logdensity",
    "evaluate_batch",
]

EIG_CLIP = 1e-9


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    kernel: str = "cosine"
    bandwidth: float | None = None

    @property
    def size(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class MetricReport:
    vendi: float
    mss: float
    modes_hit: int
    mode_histogram: np.ndarray
    fidelity_logdensity: float


def similarity_matrix(samples, kernel: str = "cosine", bandwidth: float | None = None) -> SimilarityMatrix:
    """Pairwise similarity of the rows of ``samples``.

    ``cosine`` normalizes rows first; zero rows get similarity 0 to everything
    else and 1 to themselves.  ``rbf`` uses ``exp(-|x_i - x_j|^2 / (2 h^2))``
    with ``h`` defaulting to the median pairwise distance.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if kernel == "cosine":
        norms = np.linalg.norm(x, axis=1)
        zero = norms < 1e-12
        u = np.where(zero[:, None], 0.0, x / np.where(zero, 1.0, norms)[:, None])
        k = u @ u.T
        k = 0.5 * (k + k.T)
        np.fill_diagonal(k, 1.0)
        return SimilarityMatrix(k, "cosine")
    if kernel == "rbf":
        if bandwidth is None:
            d = pdist(x) if x.shape[0] > 1 else np.array([])
            bandwidth = float(np.median(d)) if d.size and np.median(d) > 0 else 1.0
        if not bandwidth > 0:
            raise ParameterError("rbf bandwidth must be positive")
        sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
        return SimilarityMatrix(np.exp(-sq / (2.0 * bandwidth**2)), "rbf", bandwidth)
    raise ParameterError(f"unknown kernel {kernel!r}")


def _values(k) -> np.ndarray:
    return k.values if isinstance(k, SimilarityMatrix) else np.asarray(k, dtype=np.float64)


def vendi_score(k) -> float:
    """exp of the Shannon entropy of the eigenvalues of ``K / B``."""
    values = _values(k)
    b = values.shape[0]
    try:
        lam = np.linalg.eigvalsh(values / b)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    lam = np.where(lam < EIG_CLIP, 0.0, lam)
    lam = lam / lam.sum()
    nz = lam[lam > 0]
    return float(np.exp(-np.sum(nz * np.log(nz))))


def mean_pairwise_similarity(k) -> float:
    """Mean of the off-diagonal entries."""
    values = _values(k)
    b = values.shape[0]
    if b < 2:
        raise ParameterError("need at least 2 samples")
    return float((values.sum() - np.trace(values)) / (b * (b - 1)))


def mode_coverage(endpoints, model: GaussianMixtureModel, condition: str | None = None):
    """Assign each endpoint to its nearest component of the condition.

    Ties go to the component that comes first in the condition's subset.
    Returns ``(modes_hit, histogram)`` with the histogram ordered like the
    subset.
    """
    x = np.atleast_2d(np.asarray(endpoints, dtype=np.float64))
    means, _, _ = model.subset_params(condition)
    d2 = np.sum((x[:, None, :] - means[None, :, :]) ** 2, axis=-1)
    hist = np.bincount(np.argmin(d2, axis=1), minlength=means.shape[0])
    return int(np.count_nonzero(hist)), hist


def fidelity_logdensity(endpoints, model: GaussianMixtureModel, condition: str | None = None) -> float:
    """Mean log-density of the endpoints under the conditional data mixture."""
    x = np.atleast_2d(np.asarray(endpoints, dtype=np.float64))
    return float(np.mean(mixture_log_density(model, x, 1.0, condition)))


def evaluate_batch(endpoints, model, condition=None, kernel: str = "cosine") -> MetricReport:
    k = similarity_matrix(endpoints, kernel)
    hits, hist = mode_coverage(endpoints, model, condition)
    return MetricReport(
        vendi=vendi_score(k),
        mss=mean_pairwise_similarity(similarity_matrix(endpoints, "cosine")),
        modes_hit=hits,
        mode_histogram=hist,
        fidelity_logdensity=fidelity_logdensity(endpoints, model, condition),
    )
