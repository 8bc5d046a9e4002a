"""Maximum likelihood inference for inner-product latent space network models."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    Family,
    InvalidEdgeError,
    LatentState,
    Link,
    ModelSpec,
    Network,
    link_eval,
    loglik_derivs,
    loglik_edge,
    score,
    total_loglik,
)
from .estimation import (  # noqa: E402
    FitConfig,
    FitError,
    FitResult,
    apply_identifiability,
    estimate_rho,
    fit,
    fit_pgd,
    project_ball,
    svt_init,
)
from .inference import (  # noqa: E402
    CovarianceBundle,
    ConfidenceRegion,
    InferenceUnavailable,
    ci_individual,
    ci_link_probability,
    confidence_ellipse,
    covariance_bundle,
    omega_hat,
    omega_individual,
    sigma_hat,
    var_sandwich,
)

__all__ = [name for name in dir() if not name.startswith("_")]
