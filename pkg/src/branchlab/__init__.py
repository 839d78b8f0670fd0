"""branchlab: spectral analysis and fluctuation experiments for finite-type
supercritical branching models.

Layers, bottom to top: :mod:`~branchlab.model` (mechanisms, validation,
config), :mod:`~branchlab.semigroup` (mean semigroup and Jordan spectral
data), :mod:`~branchlab.moments` (variances and limit constants),
:mod:`~branchlab.classify` (regime classification and limit-law
prediction), :mod:`~branchlab.simulate` (Euler jump-diffusion ensembles),
:mod:`~branchlab.fluctlab` (statistical experiments), :mod:`~branchlab.cli`.
"""

from .model import (
    JumpAtom,
    Mechanism,
    MomentOperators,
    ValidationReport,
    dump_model,
    load_model,
    mean_matrix,
    model_hash,
    validate,
    vartheta,
)
from .semigroup import (
    EigenTriplet,
    SpectralData,
    apply_semigroup,
    delta_t,
    eigen_triplet,
    solve_cumulant,
    spectral_decompose,
)
from .moments import (
    big_theta,
    covariance_of_functionals,
    delta_sq,
    limit_constants,
    martingale_variance,
    rho_f_sq,
    sigma_phi_sq,
    variance_asymptote,
    variance_of_functional,
    varrho_sq,
)
from .classify import (
    Classification,
    GaussianMixture,
    L2MartingaleLimit,
    LimitLawPrediction,
    classify,
    mean_shape_diagnostic,
    predict,
)
from .simulate import (
    Ensemble,
    SimConfig,
    Trajectory,
    simulate_ensemble,
    simulate_path,
)
from .fluctlab import (
    ExperimentResult,
    fclt_experiment,
    lln_experiment,
    null_cdf_threshold,
    regime_experiment,
    write_results_csv,
)

__version__ = "0.1.0"

__all__ = [
    "JumpAtom",
    "Mechanism",
    "MomentOperators",
    "ValidationReport",
    "dump_model",
    "load_model",
    "mean_matrix",
    "model_hash",
    "validate",
    "vartheta",
    "EigenTriplet",
    "SpectralData",
    "apply_semigroup",
    "delta_t",
    "eigen_triplet",
    "solve_cumulant",
    "spectral_decompose",
    "big_theta",
    "covariance_of_functionals",
    "delta_sq",
    "limit_constants",
    "martingale_variance",
    "rho_f_sq",
    "sigma_phi_sq",
    "variance_asymptote",
    "variance_of_functional",
    "varrho_sq",
    "Classification",
    "GaussianMixture",
    "L2MartingaleLimit",
    "LimitLawPrediction",
    "classify",
    "mean_shape_diagnostic",
    "predict",
    "Ensemble",
    "SimConfig",
    "Trajectory",
    "simulate_ensemble",
    "simulate_path",
    "ExperimentResult",
    "fclt_experiment",
    "lln_experiment",
    "null_cdf_threshold",
    "regime_experiment",
    "write_results_csv",
    "__version__",
]
