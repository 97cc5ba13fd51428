"""certmark: layer-adaptive parameter-space watermarking with certified radii.

The pipeline: probe layer sensitivity on surrogate fine-tuning tasks
(``pilot``), convert the sensitivities into a budget-preserving per-layer
noise allocation (``allocate``), embed a trigger-free watermark by shaping a
private energy classifier's posterior under that smoothing noise (``embed``),
then test suspects with a paired hypothesis test (``verify``) and bound the
watermark's survival against any parameter perturbation inside a
noise-weighted norm ball (``certify``).  ``attack`` stress-tests the result.
"""

from . import rng
from .attack import (
    AdversarialDirection,
    AttackResult,
    adversarial_direction,
    compress,
    finetune_drift,
    image_suspiciousness,
    landscape_sweep,
    make_sign_test_metric,
    make_vsr_metric,
    pgd_attack,
    random_direction,
    surrogate_task_image,
)
from .certify import (
    Certificate,
    RadiusSolution,
    ThresholdGrid,
    build_grid,
    certified_lhs,
    certify,
    gaussian_beta2,
    solve_radius,
    trial_statistics,
    worst_case_classifier,
)
from .certify import WorstCaseSampler
from .checkpoint import (
    load_model,
    load_params,
    load_trajectory,
    save_model,
    save_params,
    save_trajectory,
)
from .embed import (
    EmbedConfig,
    StepRecord,
    embed,
    kl_loss,
    schedule,
    smoothed_gradient,
    ssim_loss,
)
from .errors import (
    AttackFailureError,
    CertmarkError,
    CheckpointFormatError,
    DegenerateAuditError,
    DegenerateTrajectoryError,
    InfeasibleThresholdError,
    InsufficientSamplesError,
    InvalidArgumentError,
    InvalidConfigurationError,
    NumericDomainError,
    SingularGeometryError,
    TrainingFailureError,
    UsageError,
)
from .msssim import default_scales, ms_ssim
from .params import (
    LayeredParams,
    NoiseSpec,
    StabilityReport,
    TrainingTrajectory,
    allocate,
    avg_l2_norm,
    lfs,
    mahalanobis_norm,
    rank_dispersion_and_stability,
    sample_noise,
)
from .stats import (
    ConfidenceBound,
    PairedTStatistic,
    binom_cdf,
    binom_sf,
    dkw_lower,
    hoeffding_upper,
    paired_t_statistic,
    phi,
    phi_inv,
    t_cdf,
    t_quantile,
)
from .toymodel import (
    ClassifierArch,
    EnergyClassifier,
    GeneratorArch,
    ToyGenerator,
    build_private_classifier,
    init_classifier,
    grad_params,
    init_generator,
    posterior_from_energies,
    train_energy_classifier,
    watermark_pattern,
)
from .verify import (
    VerificationReport,
    closed_form_threshold,
    decide_ownership,
    reference_probability,
    sign_test_tpr,
    verify_models,
    watermark_robustness,
)

__version__ = "0.1.0"

__all__ = [
    "AdversarialDirection",
    "AttackFailureError",
    "AttackResult",
    "Certificate",
    "CertmarkError",
    "CheckpointFormatError",
    "ClassifierArch",
    "ConfidenceBound",
    "DegenerateAuditError",
    "DegenerateTrajectoryError",
    "EmbedConfig",
    "EnergyClassifier",
    "GeneratorArch",
    "InfeasibleThresholdError",
    "InsufficientSamplesError",
    "InvalidArgumentError",
    "InvalidConfigurationError",
    "LayeredParams",
    "NoiseSpec",
    "NumericDomainError",
    "PairedTStatistic",
    "RadiusSolution",
    "SingularGeometryError",
    "StabilityReport",
    "StepRecord",
    "ThresholdGrid",
    "ToyGenerator",
    "TrainingFailureError",
    "TrainingTrajectory",
    "UsageError",
    "VerificationReport",
    "WorstCaseSampler",
    "adversarial_direction",
    "allocate",
    "avg_l2_norm",
    "binom_cdf",
    "binom_sf",
    "build_grid",
    "build_private_classifier",
    "certified_lhs",
    "certify",
    "closed_form_threshold",
    "compress",
    "decide_ownership",
    "default_scales",
    "dkw_lower",
    "embed",
    "finetune_drift",
    "gaussian_beta2",
    "grad_params",
    "hoeffding_upper",
    "image_suspiciousness",
    "init_classifier",
    "init_generator",
    "kl_loss",
    "landscape_sweep",
    "lfs",
    "load_model",
    "load_params",
    "load_trajectory",
    "mahalanobis_norm",
    "make_sign_test_metric",
    "make_vsr_metric",
    "ms_ssim",
    "paired_t_statistic",
    "pgd_attack",
    "phi",
    "phi_inv",
    "posterior_from_energies",
    "random_direction",
    "rank_dispersion_and_stability",
    "reference_probability",
    "rng",
    "sample_noise",
    "save_model",
    "save_params",
    "save_trajectory",
    "schedule",
    "sign_test_tpr",
    "smoothed_gradient",
    "solve_radius",
    "ssim_loss",
    "surrogate_task_image",
    "t_cdf",
    "t_quantile",
    "train_energy_classifier",
    "trial_statistics",
    "verify_models",
    "watermark_pattern",
    "watermark_robustness",
    "worst_case_classifier",
]
