"""Pathwise gradient estimators from transport-equation velocity fields.

Subpackages:

    numerics         special functions, finite differences, Adam, RNG streams
    distributions    Normal / Student-t / four mixture families
    velocity_fields  closed-form transport solutions per parameter coordinate
    estimators       pathwise, score, hybrid, Gumbel-Softmax; variance
    avf_adaptation   adaptive null-solution tuning (variance descent)
    verification     residual / boundary / unbiasedness oracles
    bench_cli        reproducible benchmark harness (CSV output)
"""

from .distributions import (
    DiagNormals,
    GSM,
    MixtureParams,
    MultivariateNormalParams,
    Sample,
    SharedDiagCov,
    StudentTParams,
    ZeroMeanGSM,
    log_density,
    sample,
    sample_batch,
    score_component_params,
    score_logits,
    softmax,
)
from .numerics import (
    AdamState,
    FiniteDiffConfig,
    RngStream,
    adam_step,
    erfc,
    finite_diff_divergence,
    radial_cdf,
    std_normal_cdf,
    std_normal_pdf,
)
from .velocity_fields import (
    AvfParams,
    MixtureGeometry,
    VelocityFieldSet,
    component_fields,
    logit_fields,
    logit_fields_diag_normals,
    logit_fields_gsm,
    logit_fields_shared_cov,
    logit_fields_zero_mean_gsm,
    mixture_fields,
    mvn_fields,
    negative_example_cdf_field,
    student_t_fields,
)
from .estimators import (
    GradientBatch,
    GumbelConfig,
    TestFunction,
    estimate_variance,
    gumbel_softmax_grad,
    hybrid_grad,
    pathwise_grad,
    score_grad,
)
from .verification import (
    ResidualReport,
    ZTestReport,
    analytic_grad_oracle,
    boundary_decay_probe,
    transport_residual,
    unbiasedness_ztest,
)

__version__ = "0.1.0"
