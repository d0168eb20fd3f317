"""Closed-form velocity fields solving ∂q/∂θ_α + ∇·(q v^{θα}) = 0.

One vector field per free parameter coordinate, for every supported
family.  A field set paired with a test function f gives the pathwise
gradient sample ∇_z f · v^{θα}.

Multivariate Normal / elliptical (θ = (μ, L)):

    v^{μ_a}      = e_a
    v^{L_ab}     = e_a ε_b + (L A^{ab} L⁻¹ (z-μ)),   ε = L⁻¹(z-μ)

where A^{ab} = s_ab (E_ab - E_ba) with s = BᵀC is the antisymmetric
null-solution parameterization.  The null term is an infinitesimal
rotation in whitened coordinates; it is divergence-free against q and
adds a zero-mean control variate.  The same field solves the transport
equation for every elliptical density with scale matrix L (Student-t
included), so these functions take either parameter type.

Mixtures.  Component-parameter fields repurpose the single-component
reparameterization fields weighted by the responsibility π_j q_j / q.
Mixture-weight (softmax logit) fields superpose pairwise solutions

    q_j - q_k + ∇·(q ṽ^{jk}) = 0,      v^{ℓ_j} = π_j Σ_{k≠j} π_k ṽ^{jk}

with closed forms per family: mass transport along the line joining two
means (shared scale), radial shrink/dilate flows through the D-dim
radial tail integral (scale mixtures), a per-dimension telescopic
solution through a common reference Normal (fully diagonal case), and
the superposition of line plus radial flows (scale mixture with means).

All flux magnitudes are computed in log space and exponentiated against
log q at the last step, so fields stay finite far into the tails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import linalg as sla

from .distributions import (
    GSM,
    DiagNormals,
    MixtureFamily,
    MixtureParams,
    MultivariateNormalParams,
    SharedDiagCov,
    StudentTParams,
    ZeroMeanGSM,
    log_component_densities,
    log_density,
    responsibilities,
)
from .numerics import LOG_2PI, log_normal_cdf_interval, log_radial_cdf, std_normal_cdf

DEGENERATE_PAIR_TOL = 1e-12

EllipticalParams = Union[MultivariateNormalParams, StudentTParams]


# ---------------------------------------------------------------------------
# Field-set container and coordinate labels
# ---------------------------------------------------------------------------

@dataclass
class VelocityFieldSet:
    """Named per-coordinate vector fields; each evaluator maps z -> (D,)."""
    fields: dict[str, Callable[[np.ndarray], np.ndarray]]

    def labels(self) -> list[str]:
        return list(self.fields.keys())

    def __getitem__(self, label: str) -> Callable[[np.ndarray], np.ndarray]:
        return self.fields[label]

    def __contains__(self, label: str) -> bool:
        return label in self.fields

    def evaluate(self, label: str, z) -> np.ndarray:
        return self.fields[label](np.asarray(z, dtype=float))

    def evaluate_all(self, z) -> dict[str, np.ndarray]:
        z = np.asarray(z, dtype=float)
        return {label: f(z) for label, f in self.fields.items()}

    def merged(self, other: "VelocityFieldSet") -> "VelocityFieldSet":
        both = dict(self.fields)
        both.update(other.fields)
        return VelocityFieldSet(both)


def mvn_coordinate_labels(dim: int) -> list[str]:
    labels = [f"mean[{a}]" for a in range(dim)]
    labels += [f"chol[{a},{b}]" for a in range(dim) for b in range(a + 1)]
    return labels


def mixture_coordinate_labels(params: MixtureFamily) -> list[str]:
    k, d = params.n_components, params.dim
    labels = [f"logit[{j}]" for j in range(k)]
    groups = params.coordinate_groups()
    if "comp_mean" in groups:
        labels += [f"comp_mean[{j},{i}]" for j in range(k) for i in range(d)]
    if "comp_scale" in groups:
        labels += [f"comp_scale[{j},{i}]" for j in range(k) for i in range(d)]
    if "shared_scale" in groups:
        labels += [f"shared_scale[{i}]" for i in range(d)]
    if "multiplier" in groups:
        labels += [f"multiplier[{j}]" for j in range(k)]
    return labels


# ---------------------------------------------------------------------------
# Adaptive-velocity-field parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AvfParams:
    """Null-solution parameters λ = (B, C), both of shape (M, D).

    The induced matrix A^{ab} = s_ab (E_ab - E_ba) with s = BᵀC is
    antisymmetric by construction, so the null field reduces to

        ṽ^{L_ab}(z) = s_ab (L_{:,a} ε_b - L_{:,b} ε_a),  ε = L⁻¹(z-μ)

    which needs one triangular solve per z and no other inverses.
    """
    b_matrix: np.ndarray
    c_matrix: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b_matrix, dtype=float)
        c = np.asarray(self.c_matrix, dtype=float)
        if b.ndim != 2 or b.shape != c.shape:
            raise ValueError(
                f"B and C must be equal-shape (M, D) matrices, got "
                f"{b.shape} and {c.shape}")
        object.__setattr__(self, "b_matrix", b)
        object.__setattr__(self, "c_matrix", c)

    @property
    def rank(self) -> int:
        return self.b_matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.b_matrix.shape[1]

    def s_matrix(self) -> np.ndarray:
        """s_ab = Σ_ℓ B_ℓa C_ℓb, the scalar coefficient of each A^{ab}."""
        return self.b_matrix.T @ self.c_matrix

    def induced_antisymmetric(self, a: int, b: int) -> np.ndarray:
        """The full matrix A^{ab}; trace-free and antisymmetric."""
        d = self.dim
        s = float(self.s_matrix()[a, b])
        out = np.zeros((d, d))
        out[a, b] = s
        out[b, a] = -s
        return out

    @staticmethod
    def zeros(rank: int, dim: int) -> "AvfParams":
        if rank < 1:
            raise ValueError("rank must be positive")
        return AvfParams(np.zeros((rank, dim)), np.zeros((rank, dim)))


# ---------------------------------------------------------------------------
# Multivariate Normal / elliptical fields
# ---------------------------------------------------------------------------

def _check_avf(params: EllipticalParams, avf: Optional[AvfParams]) -> None:
    if avf is not None and avf.dim != params.dim:
        raise ValueError(
            f"AvfParams dimension {avf.dim} does not match D={params.dim}")


def mvn_fields(params: EllipticalParams,
               avf: Optional[AvfParams] = None) -> VelocityFieldSet:
    """Mean and Cholesky fields for a multivariate Normal (or any
    elliptical distribution with the same (μ, L) parameterization).

    With avf absent or B = C = 0 the Cholesky fields are exactly the
    reparameterization-trick reference solution e_a ε_b.
    """
    _check_avf(params, avf)
    d = params.dim
    mu, chol = params.mean, params.cholesky
    s = avf.s_matrix() if avf is not None else None

    fields: dict[str, Callable] = {}
    for a in range(d):
        basis = np.zeros(d)
        basis[a] = 1.0
        fields[f"mean[{a}]"] = (lambda z, e=basis: e.copy())

    def chol_field(z, a: int, b: int) -> np.ndarray:
        eps = sla.solve_triangular(chol, np.asarray(z, dtype=float) - mu,
                                   lower=True)
        out = np.zeros(d)
        out[a] = eps[b]
        if s is not None and s[a, b] != 0.0:
            out = out + s[a, b] * (chol[:, a] * eps[b] - chol[:, b] * eps[a])
        return out

    for a in range(d):
        for b in range(a + 1):
            fields[f"chol[{a},{b}]"] = (
                lambda z, a=a, b=b: chol_field(z, a, b))
    return VelocityFieldSet(fields)


def student_t_fields(params: StudentTParams,
                     avf: Optional[AvfParams] = None) -> VelocityFieldSet:
    """Identical field formulas as the Normal; the elliptical null
    solution is density-shape independent, only (μ, L) enter."""
    if not isinstance(params, StudentTParams):
        raise TypeError("student_t_fields expects StudentTParams")
    return mvn_fields(params, avf)


def mvn_null_field(params: EllipticalParams, avf: AvfParams,
                   a: int, b: int) -> Callable[[np.ndarray], np.ndarray]:
    """The bare null term ṽ^{L_ab} = s_ab(L_{:,a} ε_b - L_{:,b} ε_a)."""
    _check_avf(params, avf)
    s = float(avf.s_matrix()[a, b])
    chol, mu = params.cholesky, params.mean

    def field(z):
        eps = sla.solve_triangular(chol, np.asarray(z, dtype=float) - mu,
                                   lower=True)
        return s * (chol[:, a] * eps[b] - chol[:, b] * eps[a])

    return field


# ---------------------------------------------------------------------------
# Mixture geometry (shared-scale pairwise coordinates)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureGeometry:
    """Whitened pairwise coordinates for shared-scale mixtures.

    mu_hat[j, k] is the unit direction from component k to component j
    in whitened coordinates (antisymmetric in (j, k)); z_par and mu_par
    are projections onto it; z_perp_norm is the perpendicular distance
    of z̃ from the common perpendicular offset of the pair's means.
    Degenerate pairs (coincident means) have mu_hat = 0.
    """
    z_tilde: np.ndarray      # (D,)
    mu_tilde: np.ndarray     # (K, D)
    mu_hat: np.ndarray       # (K, K, D)
    z_par: np.ndarray        # (K, K)
    z_perp_norm: np.ndarray  # (K, K)
    mu_par: np.ndarray       # (K, K)


def mixture_geometry(means: np.ndarray, scale: np.ndarray,
                     z: np.ndarray) -> MixtureGeometry:
    means = np.asarray(means, dtype=float)
    scale = np.asarray(scale, dtype=float)
    z = np.asarray(z, dtype=float)
    k = means.shape[0]
    mu_t = means / scale
    z_t = z / scale
    mu_hat = np.zeros((k, k, means.shape[1]))
    z_par = np.zeros((k, k))
    z_perp = np.zeros((k, k))
    mu_par = np.zeros((k, k))
    for j in range(k):
        for l in range(k):
            if j == l:
                continue
            delta = mu_t[j] - mu_t[l]
            nrm = float(np.linalg.norm(delta))
            if nrm < DEGENERATE_PAIR_TOL:
                continue
            hat = delta / nrm
            mu_hat[j, l] = hat
            z_par[j, l] = float(z_t @ hat)
            mu_par[j, l] = float(mu_t[j] @ hat)
            m_perp = mu_t[j] - mu_par[j, l] * hat
            z_perp[j, l] = math.sqrt(max(
                float(np.sum((z_t - m_perp) ** 2)) - z_par[j, l] ** 2, 0.0))
    return MixtureGeometry(z_t, mu_t, mu_hat, z_par, z_perp, mu_par)


# ---------------------------------------------------------------------------
# Logit fields: batched flux/q matrices, one family at a time
# ---------------------------------------------------------------------------

def _shared_cov_logit_matrix(z2: np.ndarray, log_q: np.ndarray,
                             means: np.ndarray, scale: np.ndarray,
                             weights: np.ndarray) -> np.ndarray:
    """v^{ℓ_j}(z) for the shared-scale pairwise solution; (N, K, D).

    Pairwise flux from k to j, along the whitened direction μ̂ between
    the means:

        q ṽ^{jk} = [Φ(z̃_∥ - μ̃_∥^k) - Φ(z̃_∥ - μ̃_∥^j)]
                   · exp(-|z̃_⊥ - μ̃_⊥|²/2) / ((2π)^{(D-1)/2} Π σ_i)
                   · diag(σ) μ̂

    where μ̃_⊥ is the (shared) perpendicular offset of both means.
    Coincident means make the pairwise source vanish identically, so
    those pairs contribute the zero field.
    """
    n, d = z2.shape
    k = means.shape[0]
    out = np.zeros((n, k, d))
    if k == 1:
        return out
    mu_t = means / scale
    z_t = z2 / scale
    log_norm = -0.5 * (d - 1) * LOG_2PI - float(np.sum(np.log(scale)))
    for j in range(k):
        for l in range(j + 1, k):
            delta = mu_t[j] - mu_t[l]
            nrm = float(np.linalg.norm(delta))
            if nrm < DEGENERATE_PAIR_TOL:
                continue
            hat = delta / nrm
            a = float(mu_t[j] @ hat)
            b = float(mu_t[l] @ hat)
            m_perp = mu_t[j] - a * hat
            z_par = z_t @ hat
            perp_sq = np.maximum(
                np.sum((z_t - m_perp) ** 2, axis=1) - z_par ** 2, 0.0)
            log_mag = (log_normal_cdf_interval(z_par - b, z_par - a)
                       - 0.5 * perp_sq + log_norm)
            ratio = np.exp(log_mag - log_q)
            vec = ratio[:, None] * (scale * hat)[None, :]
            out[:, j, :] += weights[j] * weights[l] * vec
            out[:, l, :] -= weights[j] * weights[l] * vec
    return out


def _radial_flux_ratio(r: np.ndarray, log_q: np.ndarray, lam: float,
                       scale: np.ndarray, dim: int) -> np.ndarray:
    """Φ̃(r/λ) / (q λ^{D-1} Π σ_i) with r the whitened radius; (N,)."""
    safe_r = np.where(r > 0.0, r, 1.0)
    log_mag = (log_radial_cdf(safe_r / lam, dim)
               - (dim - 1) * math.log(lam) - float(np.sum(np.log(scale))))
    return np.where(r > 0.0, np.exp(log_mag - log_q), 0.0)


def _zero_mean_gsm_logit_matrix(z2: np.ndarray, log_q: np.ndarray,
                                scale: np.ndarray, multipliers: np.ndarray,
                                weights: np.ndarray) -> np.ndarray:
    """Radial logit fields v^{ℓ_j} = π_j(ṽ^j - Σ_k π_k ṽ^k); (N, K, D).

    ṽ^j points along z/r (r the whitened radius); at z = 0 the radial
    direction is undefined and the fields are taken to be zero
    (measure-zero, leaves the estimator unbiased).
    """
    n, d = z2.shape
    k = multipliers.size
    r = np.linalg.norm(z2 / scale, axis=1)
    ratios = np.stack([
        _radial_flux_ratio(r, log_q, float(lam), scale, d)
        for lam in multipliers], axis=1)                      # (N, K)
    direction = np.where(r[:, None] > 0.0, z2 / np.where(r > 0, r, 1.0)[:, None],
                         0.0)                                  # (N, D)
    v = ratios[:, :, None] * direction[:, None, :]             # (N, K, D)
    v_bar = np.einsum("k,nkd->nd", weights, v)
    return weights[None, :, None] * (v - v_bar[:, None, :])


def _diag_normals_breve_matrix(z2: np.ndarray, log_q: np.ndarray,
                               means: np.ndarray, scales: np.ndarray,
                               ref_mean: np.ndarray,
                               ref_scale: np.ndarray) -> np.ndarray:
    """Telescopic per-dimension solutions v̆^j / q for DiagNormals; (N, K, D).

    Dimension i of v̆^j carries the 1-d CDF difference between the
    reference Normal and component j, times the component density in
    dimensions before i and the reference density in dimensions after i
    (fixed ordering 0..D-1).  Each v̆^j moves component j's mass onto
    the common reference Normal (μ⁰, σ⁰); differences of two v̆ solve
    the pairwise equations, so the reference cancels from the
    superposition.
    """
    n, d = z2.shape
    k = means.shape[0]
    u_ref = (z2 - ref_mean) / ref_scale                     # (N, D)
    lp_ref = -0.5 * u_ref ** 2 - np.log(ref_scale) - 0.5 * LOG_2PI
    # suffix sums over the reference log-densities: Σ_{k>i} lp_ref
    suffix = np.zeros((n, d))
    if d > 1:
        suffix[:, :-1] = np.cumsum(lp_ref[:, ::-1], axis=1)[:, ::-1][:, 1:]
    out = np.empty((n, k, d))
    for j in range(k):
        u_j = (z2 - means[j]) / scales[j]
        lp_j = -0.5 * u_j ** 2 - np.log(scales[j]) - 0.5 * LOG_2PI
        prefix = np.zeros((n, d))
        if d > 1:
            prefix[:, 1:] = np.cumsum(lp_j, axis=1)[:, :-1]
        hi = np.maximum(u_ref, u_j)
        lo = np.minimum(u_ref, u_j)
        log_mag = log_normal_cdf_interval(hi, lo) + prefix + suffix
        sign = np.sign(u_ref - u_j)
        out[:, j, :] = sign * np.exp(log_mag - log_q[:, None])
    return out


def _superpose_breve(breve: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """v^{ℓ_j} = π_j (v̆^j - Σ_k π_k v̆^k) from stacked v̆; (N, K, D)."""
    v_bar = np.einsum("k,nkd->nd", weights, breve)
    return weights[None, :, None] * (breve - v_bar[:, None, :])


def default_reference_scale(params: DiagNormals) -> np.ndarray:
    """σ⁰_i = min_j σ_ji (the empirically preferred choice)."""
    return np.min(params.scales, axis=0)


def default_reference_mean(params: DiagNormals) -> np.ndarray:
    """Mixture centroid Σ_j π_j μ_j; the reference Normal must be common
    to all components for the pairwise differences to telescope."""
    return params.weights() @ params.means


def logit_field_matrix(params: MixtureParams, z,
                       ref_scale: Optional[np.ndarray] = None,
                       ref_mean: Optional[np.ndarray] = None,
                       ref_multiplier: Optional[float] = None) -> np.ndarray:
    """All K logit fields at once; (K, D) for one z, (N, K, D) batched.

    The optional reference knobs apply to the families whose solutions
    carry an arbitrary reference (diag_normals: σ⁰, μ⁰; gsm: λ₀); the
    defaults follow min-scale / centroid conventions.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    log_q = np.atleast_1d(log_density(params, z2))
    w = params.weights()
    if isinstance(params, SharedDiagCov):
        out = _shared_cov_logit_matrix(z2, log_q, params.means, params.scale, w)
    elif isinstance(params, ZeroMeanGSM):
        out = _zero_mean_gsm_logit_matrix(z2, log_q, params.scale,
                                          params.multipliers, w)
    elif isinstance(params, DiagNormals):
        rs = default_reference_scale(params) if ref_scale is None else \
            np.asarray(ref_scale, dtype=float)
        rm = default_reference_mean(params) if ref_mean is None else \
            np.asarray(ref_mean, dtype=float)
        breve = _diag_normals_breve_matrix(z2, log_q, params.means,
                                           params.scales, rm, rs)
        out = _superpose_breve(breve, w)
    elif isinstance(params, GSM):
        lam0 = float(np.min(params.multipliers)) if ref_multiplier is None \
            else float(ref_multiplier)
        # line transport between means at the common reference scale λ₀σ
        out = _shared_cov_logit_matrix(z2, log_q, params.means,
                                       lam0 * params.scale, w)
        # radial shrink/dilate flows centered on each component mean
        n, d = z2.shape
        k = params.n_components
        w_tilde = np.zeros((n, k, d))
        for j in range(k):
            diff = z2 - params.means[j]
            r = np.linalg.norm(diff / params.scale, axis=1)
            lam_j = float(params.multipliers[j])
            ratio = (_radial_flux_ratio(r, log_q, lam_j, params.scale, d)
                     - _radial_flux_ratio(r, log_q, lam0, params.scale, d))
            direction = np.where(r[:, None] > 0.0,
                                 diff / np.where(r > 0, r, 1.0)[:, None], 0.0)
            w_tilde[:, j, :] = ratio[:, None] * direction
        out = out + _superpose_breve(w_tilde, w)
    else:
        raise TypeError(f"unsupported mixture family {type(params).__name__}")
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Spec'd per-family constructors returning field sets
# ---------------------------------------------------------------------------

def _logit_field_set(params: MixtureParams, **kwargs) -> VelocityFieldSet:
    fields = {}
    for j in range(params.n_components):
        fields[f"logit[{j}]"] = (
            lambda z, j=j: logit_field_matrix(params, z, **kwargs)[j])
    return VelocityFieldSet(fields)


def logit_fields_shared_cov(params: SharedDiagCov) -> VelocityFieldSet:
    if not isinstance(params, SharedDiagCov):
        raise TypeError("expected SharedDiagCov")
    return _logit_field_set(params)


def logit_fields_zero_mean_gsm(params: ZeroMeanGSM) -> VelocityFieldSet:
    if not isinstance(params, ZeroMeanGSM):
        raise TypeError("expected ZeroMeanGSM")
    return _logit_field_set(params)


def logit_fields_diag_normals(params: DiagNormals,
                              ref_scale: Optional[np.ndarray] = None,
                              ref_mean: Optional[np.ndarray] = None,
                              ) -> VelocityFieldSet:
    if not isinstance(params, DiagNormals):
        raise TypeError("expected DiagNormals")
    return _logit_field_set(params, ref_scale=ref_scale, ref_mean=ref_mean)


def logit_fields_gsm(params: GSM,
                     ref_multiplier: Optional[float] = None) -> VelocityFieldSet:
    if not isinstance(params, GSM):
        raise TypeError("expected GSM")
    return _logit_field_set(params, ref_multiplier=ref_multiplier)


def logit_fields(params: MixtureParams) -> VelocityFieldSet:
    """Dispatch to the family's logit-field solution."""
    return _logit_field_set(params)


# ---------------------------------------------------------------------------
# Component-parameter fields (responsibility-weighted single-component RT)
# ---------------------------------------------------------------------------

def component_fields(params: MixtureParams) -> VelocityFieldSet:
    """Single-component reparameterization fields, weighted by the
    responsibility π_j q_j / q, one per component-parameter coordinate."""
    if not isinstance(params, MixtureFamily):
        raise TypeError("component_fields expects a mixture family")
    k, d = params.n_components, params.dim
    groups = params.coordinate_groups()
    fields: dict[str, Callable] = {}

    def resp(z):
        return responsibilities(params, z)

    if "comp_mean" in groups:
        for j in range(k):
            for i in range(d):
                def f(z, j=j, i=i):
                    out = np.zeros(d)
                    out[i] = resp(z)[j]
                    return out
                fields[f"comp_mean[{j},{i}]"] = f
    if "comp_scale" in groups:
        for j in range(k):
            for i in range(d):
                def f(z, j=j, i=i):
                    out = np.zeros(d)
                    out[i] = resp(z)[j] * (z[i] - params.means[j, i]) / \
                        params.scales[j, i]
                    return out
                fields[f"comp_scale[{j},{i}]"] = f
    if "shared_scale" in groups:
        means = params.component_means()
        for i in range(d):
            def f(z, i=i):
                out = np.zeros(d)
                out[i] = float(resp(z) @ (z[i] - means[:, i])) / params.scale[i]
                return out
            fields[f"shared_scale[{i}]"] = f
    if "multiplier" in groups:
        means = params.component_means()
        for j in range(k):
            def f(z, j=j):
                return resp(z)[j] * (z - means[j]) / params.multipliers[j]
            fields[f"multiplier[{j}]"] = f
    return VelocityFieldSet(fields)


def mixture_fields(params: MixtureParams) -> VelocityFieldSet:
    """Logit fields plus component-parameter fields (the full set)."""
    return logit_fields(params).merged(component_fields(params))


# ---------------------------------------------------------------------------
# Cautionary CDF-based field (violates the boundary condition for D >= 2)
# ---------------------------------------------------------------------------

def negative_example_cdf_matrix(params: DiagNormals, z) -> np.ndarray:
    """Logit fields built from the per-dimension CDF construction

        v^{π_j}_i = -F_ji(z_i) q_{j,-i} / (D q_θ)

    composed through the softmax Jacobian.  A genuine pointwise solution
    of the logit transport equation, but q v does not vanish along
    axis-aligned rays for D >= 2 (mass is sent to infinity), so the
    induced estimator is biased there.  Shipped for verification only.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    n, d = z2.shape
    k = params.n_components
    log_q = np.atleast_1d(log_density(params, z2))
    w = params.weights()
    u = (z2[:, None, :] - params.means[None, :, :]) / params.scales[None, :, :]
    lp = -0.5 * u ** 2 - np.log(params.scales)[None, :, :] - 0.5 * LOG_2PI
    lp_row = np.sum(lp, axis=2, keepdims=True)           # (N, K, 1)
    log_q_minus_i = lp_row - lp                          # (N, K, D)
    cdf = std_normal_cdf(u)                              # (N, K, D)
    v_pi = -cdf * np.exp(log_q_minus_i - log_q[:, None, None]) / d
    v_bar = np.einsum("k,nkd->nd", w, v_pi)
    out = w[None, :, None] * (v_pi - v_bar[:, None, :])
    return out[0] if single else out


def negative_example_cdf_field(params: DiagNormals) -> VelocityFieldSet:
    if not isinstance(params, DiagNormals):
        raise TypeError("expected DiagNormals")
    fields = {}
    for j in range(params.n_components):
        fields[f"logit[{j}]"] = (
            lambda z, j=j: negative_example_cdf_matrix(params, z)[j])
    return VelocityFieldSet(fields)
