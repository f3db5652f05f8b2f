"""Contrastive optimization of initial diffusion noise on analytic toy models."""

__version__ = "0.1.0"

from .cno import (  # noqa: E402
    CnoConfig,
    OptimizationTrace,
    cno_gradient,
    cno_loss,
    desirable_gamma,
    downsample,
    kl_penalty,
    normalize,
    optimize_noise,
)
from .diffusion import (  # noqa: E402
    GaussianMixtureModel,
    LatentBatch,
    NoiseSchedule,
    build_schedule,
    circle_mixture,
    ddim_sample,
    ddim_step,
    ddpm_step,
    epsilon_oracle,
    forward_marginal_sample,
    grid_mixture,
    tweedie_estimate,
)
from .errors import NumericError, ParameterError, UnknownConditionError  # noqa: E402
from .metrics import (  # noqa: E402
    evaluate_batch,
    fidelity_logdensity,
    mean_pairwise_similarity,
    mode_coverage,
    similarity_matrix,
    vendi_score,
)
from .mi_bounds import MiExperiment, check_bounds, empirical_infonce, gaussian_mi  # noqa: E402
