"""Parameter containers, sampling, densities, and analytic scores.

Supported families:

* multivariate Normal, parameterized by a mean μ and a lower-triangular
  Cholesky factor L (covariance Σ = LLᵀ),
* multivariate Student-t with the same (μ, L) plus degrees of freedom ν,
  sampled as z = μ + τ^{-1/2} L ε with τ ~ Gamma(ν/2, ν/2),
* four mixture-of-diagonal-Normals families, distinguished by what the
  components share:

      shared_diag_cov   N(z | μ_j, σ)        shared per-dim scale
      zero_mean_gsm     N(z | 0,  λ_j σ)     scale mixture, common center
      gsm               N(z | μ_j, λ_j σ)    scale mixture with means
      diag_normals      N(z | μ_j, σ_j)      fully per-component scales

Mixture weights are always derived from softmax logits ℓ, never stored
as probabilities, so weight derivatives are softmax-logit derivatives
and the simplex constraint stays implicit.  All mixture densities are
evaluated through log-sum-exp; scores are analytic and are checked
against finite differences of log_density in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import linalg as sla
from scipy.special import logsumexp

from .numerics import LOG_2PI, RngStream


def softmax(logits) -> np.ndarray:
    """Shift-invariant softmax; safe for logits up to ±~700."""
    logits = np.asarray(logits, dtype=float)
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    return logits - logsumexp(logits, axis=-1, keepdims=True)


def _as_vector(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"{name} must be a 1-d array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")
    return x


def _as_matrix(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")
    return x


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MultivariateNormalParams:
    """Mean vector and lower-triangular Cholesky factor (positive diagonal)."""
    mean: np.ndarray
    cholesky: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean, "mean")
        chol = _as_matrix(self.cholesky, "cholesky")
        d = mean.size
        if chol.shape != (d, d):
            raise ValueError(f"cholesky must be {d}x{d}, got {chol.shape}")
        if np.any(np.triu(chol, k=1) != 0.0):
            raise ValueError("cholesky must be lower triangular")
        if np.any(np.diag(chol) <= 0.0):
            raise ValueError("cholesky diagonal must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cholesky", chol)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class StudentTParams:
    """Elliptical Student-t: location, Cholesky scale matrix, dof ν > 0."""
    mean: np.ndarray
    cholesky: np.ndarray
    dof: float

    def __post_init__(self):
        mean = _as_vector(self.mean, "mean")
        chol = _as_matrix(self.cholesky, "cholesky")
        d = mean.size
        if chol.shape != (d, d):
            raise ValueError(f"cholesky must be {d}x{d}, got {chol.shape}")
        if np.any(np.triu(chol, k=1) != 0.0):
            raise ValueError("cholesky must be lower triangular")
        if np.any(np.diag(chol) <= 0.0):
            raise ValueError("cholesky diagonal must be strictly positive")
        if not self.dof > 0:
            raise ValueError(f"dof must be positive, got {self.dof}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cholesky", chol)

    @property
    def dim(self) -> int:
        return self.mean.size


class MixtureFamily:
    """Shared behaviour for the four mixture families.

    Subclasses provide component_means() and component_stds(), both
    (K, D); everything else (weights, densities, responsibilities,
    sampling support) is generic over diagonal-Gaussian components.
    """

    family: str = ""

    @property
    def n_components(self) -> int:
        return self.logits.size

    @property
    def dim(self) -> int:
        return self.component_means().shape[1]

    def weights(self) -> np.ndarray:
        return softmax(self.logits)

    def log_weights(self) -> np.ndarray:
        return log_softmax(self.logits)

    def component_means(self) -> np.ndarray:
        raise NotImplementedError

    def component_stds(self) -> np.ndarray:
        raise NotImplementedError

    def coordinate_groups(self) -> tuple[str, ...]:
        raise NotImplementedError


@dataclass(frozen=True)
class SharedDiagCov(MixtureFamily):
    """Mixture of Normals with per-component means and one shared scale."""
    logits: np.ndarray
    means: np.ndarray
    scale: np.ndarray

    family = "shared_diag_cov"

    def __post_init__(self):
        logits = _as_vector(self.logits, "logits")
        means = _as_matrix(self.means, "means")
        scale = _as_vector(self.scale, "scale")
        if means.shape[0] != logits.size:
            raise ValueError("means must have one row per component")
        if scale.size != means.shape[1]:
            raise ValueError("scale length must match dimension")
        if np.any(scale <= 0.0):
            raise ValueError("scale entries must be positive")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scale", scale)

    def component_means(self) -> np.ndarray:
        return self.means

    def component_stds(self) -> np.ndarray:
        return np.broadcast_to(self.scale, self.means.shape)

    def coordinate_groups(self) -> tuple[str, ...]:
        return ("logit", "comp_mean", "shared_scale")


@dataclass(frozen=True)
class ZeroMeanGSM(MixtureFamily):
    """Zero-mean Gaussian scale mixture: components N(0, λ_j σ)."""
    logits: np.ndarray
    scale: np.ndarray
    multipliers: np.ndarray

    family = "zero_mean_gsm"

    def __post_init__(self):
        logits = _as_vector(self.logits, "logits")
        scale = _as_vector(self.scale, "scale")
        mult = _as_vector(self.multipliers, "multipliers")
        if mult.size != logits.size:
            raise ValueError("multipliers must have one entry per component")
        if np.any(scale <= 0.0) or np.any(mult <= 0.0):
            raise ValueError("scale and multipliers must be positive")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "multipliers", mult)

    def component_means(self) -> np.ndarray:
        return np.zeros((self.logits.size, self.scale.size))

    def component_stds(self) -> np.ndarray:
        return self.multipliers[:, None] * self.scale[None, :]

    def coordinate_groups(self) -> tuple[str, ...]:
        return ("logit", "shared_scale", "multiplier")


@dataclass(frozen=True)
class GSM(MixtureFamily):
    """Gaussian scale mixture with means: components N(μ_j, λ_j σ)."""
    logits: np.ndarray
    means: np.ndarray
    scale: np.ndarray
    multipliers: np.ndarray

    family = "gsm"

    def __post_init__(self):
        logits = _as_vector(self.logits, "logits")
        means = _as_matrix(self.means, "means")
        scale = _as_vector(self.scale, "scale")
        mult = _as_vector(self.multipliers, "multipliers")
        if means.shape[0] != logits.size or mult.size != logits.size:
            raise ValueError("means/multipliers must match component count")
        if scale.size != means.shape[1]:
            raise ValueError("scale length must match dimension")
        if np.any(scale <= 0.0) or np.any(mult <= 0.0):
            raise ValueError("scale and multipliers must be positive")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "multipliers", mult)

    def component_means(self) -> np.ndarray:
        return self.means

    def component_stds(self) -> np.ndarray:
        return self.multipliers[:, None] * self.scale[None, :]

    def coordinate_groups(self) -> tuple[str, ...]:
        return ("logit", "comp_mean", "shared_scale", "multiplier")


@dataclass(frozen=True)
class DiagNormals(MixtureFamily):
    """Mixture of diagonal Normals, fully per-component means and scales."""
    logits: np.ndarray
    means: np.ndarray
    scales: np.ndarray

    family = "diag_normals"

    def __post_init__(self):
        logits = _as_vector(self.logits, "logits")
        means = _as_matrix(self.means, "means")
        scales = _as_matrix(self.scales, "scales")
        if means.shape[0] != logits.size:
            raise ValueError("means must have one row per component")
        if scales.shape != means.shape:
            raise ValueError("scales must have the same shape as means")
        if np.any(scales <= 0.0):
            raise ValueError("scale entries must be positive")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scales", scales)

    def component_means(self) -> np.ndarray:
        return self.means

    def component_stds(self) -> np.ndarray:
        return self.scales

    def coordinate_groups(self) -> tuple[str, ...]:
        return ("logit", "comp_mean", "comp_scale")


MixtureParams = Union[SharedDiagCov, ZeroMeanGSM, GSM, DiagNormals]
Distribution = Union[MultivariateNormalParams, StudentTParams, SharedDiagCov,
                     ZeroMeanGSM, GSM, DiagNormals]


@dataclass(frozen=True)
class Sample:
    """One draw; component_index is set iff drawn from a mixture."""
    value: np.ndarray
    component_index: Optional[int] = None


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_batch(params: Distribution, rng: RngStream,
                 n: int) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Draw n samples; returns (values (n, D), component indices or None)."""
    gen = rng.gen
    if isinstance(params, MultivariateNormalParams):
        eps = gen.standard_normal((n, params.dim))
        return params.mean + eps @ params.cholesky.T, None
    if isinstance(params, StudentTParams):
        eps = gen.standard_normal((n, params.dim))
        tau = gen.gamma(shape=params.dof / 2.0, scale=2.0 / params.dof, size=n)
        return params.mean + (eps @ params.cholesky.T) / np.sqrt(tau)[:, None], None
    if isinstance(params, MixtureFamily):
        comps = gen.choice(params.n_components, size=n, p=params.weights())
        eps = gen.standard_normal((n, params.dim))
        means = params.component_means()[comps]
        stds = params.component_stds()[comps]
        return means + stds * eps, comps
    raise TypeError(f"unsupported distribution {type(params).__name__}")


def sample(params: Distribution, rng: RngStream) -> Sample:
    """Draw one sample (ancestral for mixtures, recording the component)."""
    values, comps = sample_batch(params, rng, 1)
    idx = None if comps is None else int(comps[0])
    return Sample(value=values[0], component_index=idx)


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

def _whiten(params, z: np.ndarray) -> np.ndarray:
    """Solve L ε = (z - μ)ᵀ for each row of z; returns (N, D)."""
    diff = np.atleast_2d(z) - params.mean
    return sla.solve_triangular(params.cholesky, diff.T, lower=True).T


def log_component_densities(params: MixtureFamily, z) -> np.ndarray:
    """log N(z | μ_j, s_j) for every component; shape (..., K)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    means = params.component_means()
    stds = params.component_stds()
    e = (z2[:, None, :] - means[None, :, :]) / stds[None, :, :]
    out = (-0.5 * np.sum(e * e, axis=-1)
           - np.sum(np.log(stds), axis=-1)[None, :]
           - 0.5 * z2.shape[1] * LOG_2PI)
    return out[0] if single else out


def log_density(params: Distribution, z) -> np.ndarray:
    """Exact log q_θ(z); z may be one point (D,) or a batch (N, D)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    d = z2.shape[1]
    if isinstance(params, MultivariateNormalParams):
        eps = _whiten(params, z2)
        out = (-0.5 * np.sum(eps * eps, axis=-1)
               - np.sum(np.log(np.diag(params.cholesky)))
               - 0.5 * d * LOG_2PI)
    elif isinstance(params, StudentTParams):
        nu = params.dof
        eps = _whiten(params, z2)
        quad = np.sum(eps * eps, axis=-1)
        out = (math.lgamma(0.5 * (nu + d)) - math.lgamma(0.5 * nu)
               - 0.5 * d * math.log(nu * math.pi)
               - np.sum(np.log(np.diag(params.cholesky)))
               - 0.5 * (nu + d) * np.log1p(quad / nu))
    elif isinstance(params, MixtureFamily):
        comp = log_component_densities(params, z2)
        out = logsumexp(comp + params.log_weights()[None, :], axis=-1)
    else:
        raise TypeError(f"unsupported distribution {type(params).__name__}")
    return out[0] if single else out


def log_responsibilities(params: MixtureFamily, z) -> np.ndarray:
    """log(π_j q_j / q); shape (..., K)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    comp = log_component_densities(params, np.atleast_2d(z))
    joint = comp + params.log_weights()[None, :]
    out = joint - logsumexp(joint, axis=-1, keepdims=True)
    return out[0] if single else out


def responsibilities(params: MixtureFamily, z) -> np.ndarray:
    return np.exp(log_responsibilities(params, z))


def grad_log_density(params: Distribution, z) -> np.ndarray:
    """∇_z log q_θ(z), used when the test function contains log q itself."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if isinstance(params, MultivariateNormalParams):
        eps = _whiten(params, z2)
        out = -sla.solve_triangular(params.cholesky, eps.T, lower=True,
                                    trans="T").T
    elif isinstance(params, StudentTParams):
        nu = params.dof
        eps = _whiten(params, z2)
        quad = np.sum(eps * eps, axis=-1)
        sig_inv_diff = sla.solve_triangular(params.cholesky, eps.T, lower=True,
                                            trans="T").T
        out = -(nu + z2.shape[1]) / (nu + quad)[:, None] * sig_inv_diff
    elif isinstance(params, MixtureFamily):
        resp = responsibilities(params, z2)
        means = params.component_means()
        stds = params.component_stds()
        comp_grad = -(z2[:, None, :] - means[None, :, :]) / stds[None, :, :] ** 2
        out = np.sum(resp[:, :, None] * comp_grad, axis=1)
    else:
        raise TypeError(f"unsupported distribution {type(params).__name__}")
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------

def score_logits(params: MixtureFamily, z) -> np.ndarray:
    """∂ log q/∂ℓ_j = π_j (q_j - q)/q; entries sum to zero."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    resp = responsibilities(params, np.atleast_2d(z))
    out = resp - params.weights()[None, :]
    return out[0] if single else out


def score_component_params(params: MixtureFamily, z) -> dict[str, np.ndarray]:
    """Analytic ∂ log q/∂θ for the component parameters of a mixture.

    Keys depend on the family: comp_mean (K, D), comp_scale (K, D),
    shared_scale (D,), multiplier (K,).  Every entry is the component
    score weighted by the responsibility π_j q_j / q.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim != 1:
        raise ValueError("score_component_params expects a single point")
    resp = responsibilities(params, z)
    means = params.component_means()
    stds = params.component_stds()
    e = (z[None, :] - means) / stds  # standardized residuals (K, D)
    out: dict[str, np.ndarray] = {}
    groups = params.coordinate_groups()
    if "comp_mean" in groups:
        out["comp_mean"] = resp[:, None] * e / stds
    if "comp_scale" in groups:
        out["comp_scale"] = resp[:, None] * (e * e - 1.0) / params.scales
    if "shared_scale" in groups:
        out["shared_scale"] = np.sum(
            resp[:, None] * (e * e - 1.0), axis=0) / params.scale
    if "multiplier" in groups:
        out["multiplier"] = (resp * (np.sum(e * e, axis=1) - z.size)
                             / params.multipliers)
    return out


def score_mvn(params: MultivariateNormalParams, z) -> dict[str, np.ndarray]:
    """∂ log q/∂μ and ∂ log q/∂L for the multivariate Normal.

    ∂ log q/∂μ = Σ⁻¹(z-μ) and ∂ log q/∂L = L⁻ᵀ(εεᵀ - I) restricted to
    the lower triangle, with ε = L⁻¹(z-μ).
    """
    z = np.asarray(z, dtype=float)
    eps = _whiten(params, z[None, :])[0]
    l_inv_t = sla.solve_triangular(params.cholesky, np.eye(params.dim),
                                   lower=True).T
    chol_score = l_inv_t @ (np.outer(eps, eps) - np.eye(params.dim))
    return {"mean": sla.solve_triangular(params.cholesky, eps, lower=True,
                                         trans="T"),
            "chol": np.tril(chol_score)}
