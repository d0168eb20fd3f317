"""Joint stochastic optimization of θ = (μ, L) and the null-solution
parameters λ = (B, C) by descending a gradient-variance surrogate.

Per iteration: draw z ~ q_θ, form the pathwise θ-gradient with the
current adaptive fields, form the λ-gradient of the single-sample
second-moment surrogate

    S(λ) = Σ_α (∇_z f · v_λ^{θα})²,

and step both.  The squared-mean term of the variance is dropped from
the λ-gradient (its expectation is the unbiased gradient, independent
of λ), so descending S descends the variance up to a λ-free constant.
λ updates default to Adam (they want a much larger effective step than
θ); plain SGD is available for exact replication of the update rule.
θ may ascend (ELBO-style objectives), descend, or stay frozen — frozen
is how the variance benchmarks operate.

The λ-gradient is exact: with u = ∇f(z), ε = L⁻¹(z-μ), t = Lᵀu,

    g_ab = u_a ε_b + s_ab m_ab,      m_ab = t_a ε_b - t_b ε_a,
    ∂S/∂s_ab = 2 g_ab m_ab,          s = BᵀC,
    ∂S/∂B_ℓa = Σ_b 2 g_ab m_ab C_ℓb,  ∂S/∂C_ℓb = Σ_a 2 g_ab m_ab B_ℓa

summed over the strictly-lower (a > b) Cholesky coordinates (diagonal
and mean coordinates carry no λ dependence).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg as sla

from .distributions import MultivariateNormalParams, sample_batch
from .estimators import TestFunction, pathwise_batch_mvn
from .numerics import AdamState, RngStream, adam_step
from .velocity_fields import AvfParams

_MIN_CHOL_DIAG = 1e-8


@dataclass(frozen=True)
class AvfOptimizerConfig:
    """Step sizes, iteration counts, and mode switches for Algorithm-style
    adaptation runs."""
    step_size_theta: float
    step_size_lambda: float
    n_steps: int
    samples_per_step: int = 1
    rank: int = 1
    theta_mode: str = "frozen"        # "ascent" | "descent" | "frozen"
    lambda_optimizer: str = "adam"    # "adam" | "sgd"
    theta_optimizer: str = "adam"     # "adam" | "sgd"

    def __post_init__(self):
        if not (self.step_size_theta >= 0 and self.step_size_lambda >= 0):
            raise ValueError("step sizes must be nonnegative")
        if self.n_steps < 1 or self.samples_per_step < 1 or self.rank < 1:
            raise ValueError("n_steps, samples_per_step, rank must be >= 1")
        if self.theta_mode not in ("ascent", "descent", "frozen"):
            raise ValueError(f"unknown theta_mode {self.theta_mode!r}")
        if self.lambda_optimizer not in ("adam", "sgd") or \
                self.theta_optimizer not in ("adam", "sgd"):
            raise ValueError("optimizers must be 'adam' or 'sgd'")


# ---------------------------------------------------------------------------
# Surrogate and its exact λ-gradient
# ---------------------------------------------------------------------------

def _field_dot_terms(params: MultivariateNormalParams, avf: AvfParams,
                     f: TestFunction, z: np.ndarray):
    """Per-coordinate dot products and null-term factors at one z."""
    u = f.gradient(z)
    eps = sla.solve_triangular(params.cholesky, z - params.mean, lower=True)
    t = params.cholesky.T @ u
    m = np.outer(t, eps) - np.outer(eps, t)          # m_ab = t_a ε_b - t_b ε_a
    g = np.outer(u, eps) + avf.s_matrix() * m
    return u, g, m


def surrogate_second_moment(params: MultivariateNormalParams, avf: AvfParams,
                            f: TestFunction, z: np.ndarray) -> float:
    """S = Σ_α (∇f·v^{θα})² over all mean and Cholesky coordinates."""
    z = np.asarray(z, dtype=float)
    u, g, _ = _field_dot_terms(params, avf, f, z)
    lower = np.tril_indices(params.dim)
    return float(np.sum(u ** 2) + np.sum(g[lower] ** 2))


def variance_grad_lambda(params: MultivariateNormalParams, avf: AvfParams,
                         f: TestFunction,
                         z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact ∂S/∂B and ∂S/∂C for the single-sample surrogate at z."""
    z = np.asarray(z, dtype=float)
    if z.shape != (params.dim,):
        raise ValueError(f"z must have shape ({params.dim},), got {z.shape}")
    if avf.dim != params.dim:
        raise ValueError("AvfParams dimension mismatch")
    _, g, m = _field_dot_terms(params, avf, f, z)
    p = np.tril(2.0 * g * m, k=-1)       # only strictly-lower coords are free
    return avf.c_matrix @ p.T, avf.b_matrix @ p


# ---------------------------------------------------------------------------
# θ flattening (order matches pathwise_batch_mvn columns)
# ---------------------------------------------------------------------------

def mvn_to_vector(params: MultivariateNormalParams) -> np.ndarray:
    rows, cols = np.tril_indices(params.dim)
    return np.concatenate([params.mean, params.cholesky[rows, cols]])


def mvn_from_vector(vec: np.ndarray, dim: int) -> MultivariateNormalParams:
    mean = vec[:dim]
    chol = np.zeros((dim, dim))
    rows, cols = np.tril_indices(dim)
    chol[rows, cols] = vec[dim:]
    diag = np.diag_indices(dim)
    chol[diag] = np.maximum(chol[diag], _MIN_CHOL_DIAG)
    return MultivariateNormalParams(mean, chol)


# ---------------------------------------------------------------------------
# Adaptation loop
# ---------------------------------------------------------------------------

@dataclass
class AdaptationTrajectory:
    """Per-step surrogate values plus sparse (θ, λ) checkpoints."""
    surrogate: np.ndarray
    theta_norm: np.ndarray
    checkpoints: list[tuple[int, MultivariateNormalParams, AvfParams]]
    final_params: MultivariateNormalParams
    final_avf: AvfParams


def avf_optimize(params_init: MultivariateNormalParams,
                 avf_init: Optional[AvfParams], f: TestFunction,
                 cfg: AvfOptimizerConfig, rng: RngStream) -> AdaptationTrajectory:
    """Run the joint (θ, λ) adaptation loop.

    With avf_init None, λ starts at a tiny seeded perturbation of
    B = C = 0 (induced s = BᵀC ~ 1e-6, indistinguishable from the
    reparameterization-trick estimator).  The exact origin is a
    stationary point of the bilinear surrogate (∂S/∂B ∝ C and
    ∂S/∂C ∝ B both vanish there), so starting exactly at zero would
    freeze the adaptation.  Checkpoints are stored at the start,
    midpoint, and end (unbiasedness must hold at every λ).
    """
    d = params_init.dim
    params = params_init
    if avf_init is not None:
        avf = avf_init
    else:
        avf = AvfParams(1e-3 * rng.gen.standard_normal((cfg.rank, d)),
                        1e-3 * rng.gen.standard_normal((cfg.rank, d)))
    if avf.dim != d:
        raise ValueError("AvfParams dimension mismatch")

    theta = mvn_to_vector(params)
    lam = np.concatenate([avf.b_matrix.ravel(), avf.c_matrix.ravel()])
    n_b = avf.b_matrix.size
    update_theta = cfg.theta_mode != "frozen" and cfg.step_size_theta > 0
    update_lambda = cfg.step_size_lambda > 0  # ε_λ = 0 freezes λ exactly
    adam_theta = AdamState.init(theta.size, cfg.step_size_theta) \
        if update_theta and cfg.theta_optimizer == "adam" else None
    adam_lam = AdamState.init(lam.size, cfg.step_size_lambda) \
        if update_lambda and cfg.lambda_optimizer == "adam" else None

    surrogate = np.zeros(cfg.n_steps)
    theta_norm = np.zeros(cfg.n_steps)
    checkpoints = [(0, params, avf)]
    mid = cfg.n_steps // 2

    for step in range(cfg.n_steps):
        z_batch, _ = sample_batch(params, rng, cfg.samples_per_step)

        grad_b = np.zeros_like(avf.b_matrix)
        grad_c = np.zeros_like(avf.c_matrix)
        s_val = 0.0
        for z in z_batch:
            gb, gc = variance_grad_lambda(params, avf, f, z)
            grad_b += gb
            grad_c += gc
            s_val += surrogate_second_moment(params, avf, f, z)
        grad_b /= cfg.samples_per_step
        grad_c /= cfg.samples_per_step
        surrogate[step] = s_val / cfg.samples_per_step
        theta_norm[step] = float(np.linalg.norm(theta))

        if not (np.all(np.isfinite(grad_b)) and np.all(np.isfinite(grad_c))):
            raise RuntimeError(
                f"non-finite λ-gradient at step {step}: "
                f"|B|={np.linalg.norm(avf.b_matrix):.3e}, "
                f"|C|={np.linalg.norm(avf.c_matrix):.3e}")

        if update_theta:
            batch = pathwise_batch_mvn(params, f, z_batch, avf=avf)
            theta_grad = batch.mean()
            if not np.all(np.isfinite(theta_grad)):
                raise RuntimeError(f"non-finite θ-gradient at step {step}")
            signed = -theta_grad if cfg.theta_mode == "ascent" else theta_grad
            if adam_theta is not None:
                adam_theta, theta = adam_step(adam_theta, theta, signed)
            else:
                theta = theta - cfg.step_size_theta * signed
            params = mvn_from_vector(theta, d)

        if update_lambda:
            lam_grad = np.concatenate([grad_b.ravel(), grad_c.ravel()])
            if adam_lam is not None:
                adam_lam, lam = adam_step(adam_lam, lam, lam_grad)
            else:
                lam = lam - cfg.step_size_lambda * lam_grad
            avf = AvfParams(lam[:n_b].reshape(avf.b_matrix.shape),
                            lam[n_b:].reshape(avf.c_matrix.shape))

        if step + 1 == mid:
            checkpoints.append((step + 1, params, avf))

    checkpoints.append((cfg.n_steps, params, avf))
    return AdaptationTrajectory(surrogate, theta_norm, checkpoints, params, avf)
