"""Gradient estimators and gradient-variance estimation.

Per-sample estimators (dicts keyed by coordinate label) sit next to
batched kernels (GradientBatch matrices) used by the variance benchmarks
and z-tests; the two compute identical quantities.

    pathwise    ∇_z f(z) · v^{θα}(z)          unbiased, needs a field set
    score       f(z) ∂ log q/∂θ_α             unbiased, no fields needed
    hybrid      score for logits, pathwise (responsibility-weighted
                component fields) for component parameters
    GS-soft /   relaxed-categorical mixing z = Σ_k y_k (μ_k + ε σ_k)
    GS-hard     with temperature-τ softmax weights y (hard: arg max with
                a straight-through logit Jacobian) — biased baselines

Synthetic test functions follow the benchmark recipe: a symmetric 0/1
coupling matrix Q (strictly-lower Bernoulli(0.5), symmetrized) feeding
cos(Σ_ij Q_ij z_i / D), zᵀQz, and (zᵀQz)².
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import linalg as sla

from .distributions import (
    DiagNormals,
    MixtureFamily,
    MixtureParams,
    MultivariateNormalParams,
    Sample,
    responsibilities,
    score_component_params,
    score_logits,
    score_mvn,
    softmax,
)
from .numerics import RngStream
from .velocity_fields import (
    AvfParams,
    VelocityFieldSet,
    component_fields,
    logit_field_matrix,
    mixture_coordinate_labels,
    mvn_coordinate_labels,
)


# ---------------------------------------------------------------------------
# Test functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """Differentiable scalar test function with an analytic gradient.

    value and gradient accept a single point (D,) or a batch (N, D).
    coupling_matrix holds the symmetric 0/1 matrix Q of the synthetic
    benchmark functions, when applicable.
    """
    name: str
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    coupling_matrix: Optional[np.ndarray] = None


def random_coupling_matrix(dim: int, rng: RngStream) -> np.ndarray:
    """Q = Q' + Q'ᵀ with Q' strictly lower triangular Bernoulli(0.5)."""
    lower = np.tril(rng.gen.integers(0, 2, size=(dim, dim)).astype(float), k=-1)
    return lower + lower.T


def quadratic_test_function(q_matrix: np.ndarray) -> TestFunction:
    q = np.asarray(q_matrix, dtype=float)

    def value(z):
        z = np.asarray(z, dtype=float)
        return np.einsum("...i,ij,...j->...", z, q, z)

    def gradient(z):
        z = np.asarray(z, dtype=float)
        return 2.0 * z @ q.T

    return TestFunction("quadratic", value, gradient, q)


def quartic_test_function(q_matrix: np.ndarray) -> TestFunction:
    q = np.asarray(q_matrix, dtype=float)

    def value(z):
        z = np.asarray(z, dtype=float)
        return np.einsum("...i,ij,...j->...", z, q, z) ** 2

    def gradient(z):
        z = np.asarray(z, dtype=float)
        quad = np.einsum("...i,ij,...j->...", z, q, z)
        return 4.0 * quad[..., None] * (z @ q.T)

    return TestFunction("quartic", value, gradient, q)


def cosine_test_function(q_matrix: np.ndarray) -> TestFunction:
    """cos(Σ_ij Q_ij z_i / D), read as cos((Q·1)·z / D)."""
    q = np.asarray(q_matrix, dtype=float)
    c = np.sum(q, axis=1) / q.shape[0]

    def value(z):
        return np.cos(np.asarray(z, dtype=float) @ c)

    def gradient(z):
        z = np.asarray(z, dtype=float)
        return -np.sin(z @ c)[..., None] * c

    return TestFunction("cosine", value, gradient, q)


def sq_norm_test_function(dim: int) -> TestFunction:
    f = quadratic_test_function(np.eye(dim))
    return TestFunction("sq_norm", f.value, f.gradient, np.eye(dim))


def make_test_function(name: str, dim: int, rng: RngStream) -> TestFunction:
    """Benchmark test function by tag; Q drawn from the given stream."""
    if name == "sq_norm":
        return sq_norm_test_function(dim)
    q = random_coupling_matrix(dim, rng)
    if name == "quadratic":
        return quadratic_test_function(q)
    if name == "quartic":
        return quartic_test_function(q)
    if name == "cosine":
        return cosine_test_function(q)
    raise ValueError(f"unknown test function {name!r}")


# ---------------------------------------------------------------------------
# Gradient batches and variance
# ---------------------------------------------------------------------------

@dataclass
class GradientBatch:
    """Per-sample per-coordinate gradient values; samples is (N_s, P)."""
    labels: list[str]
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.shape[1] != len(self.labels):
            raise ValueError(
                f"{len(self.labels)} labels but {self.samples.shape[1]} columns")
        if self.samples.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def mean(self) -> np.ndarray:
        return np.mean(self.samples, axis=0)


def estimate_variance(batch: GradientBatch) -> tuple[float, np.ndarray]:
    """Total and per-coordinate gradient variance.

    N_s >= 2: the 1/N_s centered estimator (1/N)Σx² - ((1/N)Σx)² per
    coordinate.  N_s = 1: the uncentered second moment, the surrogate
    whose λ-gradient the adaptation loop descends.
    """
    x = batch.samples
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if x.shape[0] == 1:
        per = x[0] ** 2
    else:
        per = np.mean(x * x, axis=0) - np.mean(x, axis=0) ** 2
    return float(np.sum(per)), per


# ---------------------------------------------------------------------------
# Pathwise
# ---------------------------------------------------------------------------

def pathwise_grad(dist, fields: VelocityFieldSet, f: TestFunction,
                  z) -> dict[str, float]:
    """∇_z f(z) · v^{θα}(z) for every coordinate in the field set."""
    z = np.asarray(z, dtype=float)
    grad = f.gradient(z)
    return {label: float(grad @ fields[label](z)) for label in fields.labels()}


def pathwise_batch_mvn(params: MultivariateNormalParams, f: TestFunction,
                       z_batch: np.ndarray,
                       avf: Optional[AvfParams] = None) -> GradientBatch:
    """Reparameterization / AVF pathwise gradients for all (μ, L) coords.

    Per sample, with u = ∇f(z), ε = L⁻¹(z-μ), t = Lᵀu:

        mean[a]    = u_a
        chol[a,b]  = u_a ε_b + s_ab (t_a ε_b - t_b ε_a)
    """
    z2 = np.atleast_2d(np.asarray(z_batch, dtype=float))
    d = params.dim
    u = f.gradient(z2)
    eps = sla.solve_triangular(params.cholesky, (z2 - params.mean).T,
                               lower=True).T
    g = np.einsum("na,nb->nab", u, eps)
    if avf is not None:
        s = avf.s_matrix()
        t = u @ params.cholesky
        m = np.einsum("na,nb->nab", t, eps)
        g = g + s[None, :, :] * (m - np.swapaxes(m, 1, 2))
    rows_a, cols_b = np.tril_indices(d)
    samples = np.concatenate([u, g[:, rows_a, cols_b]], axis=1)
    return GradientBatch(mvn_coordinate_labels(d), samples)


def pathwise_batch_mixture(params: MixtureParams, f: TestFunction,
                           z_batch: np.ndarray,
                           coords: str = "all") -> GradientBatch:
    """Pathwise gradients for a mixture; coords selects 'all', 'logits',
    or 'components' to control cost on large batches."""
    z2 = np.atleast_2d(np.asarray(z_batch, dtype=float))
    u = f.gradient(z2)
    cols: list[np.ndarray] = []
    labels: list[str] = []
    k, d = params.n_components, params.dim
    if coords in ("all", "logits"):
        v = logit_field_matrix(params, z2)
        cols.append(np.einsum("nd,nkd->nk", u, v))
        labels += [f"logit[{j}]" for j in range(k)]
    if coords in ("all", "components"):
        resp = responsibilities(params, z2)
        groups = params.coordinate_groups()
        means = params.component_means()
        stds = params.component_stds()
        if "comp_mean" in groups:
            dots = np.einsum("nk,ni->nki", resp, u)
            cols.append(dots.reshape(z2.shape[0], k * d))
            labels += [f"comp_mean[{j},{i}]" for j in range(k) for i in range(d)]
        if "comp_scale" in groups:
            e = (z2[:, None, :] - means[None, :, :]) / stds[None, :, :]
            dots = resp[:, :, None] * u[:, None, :] * e
            cols.append(dots.reshape(z2.shape[0], k * d))
            labels += [f"comp_scale[{j},{i}]" for j in range(k) for i in range(d)]
        if "shared_scale" in groups:
            diff = z2[:, None, :] - means[None, :, :]
            dots = np.einsum("nk,ni,nki->ni", resp, u, diff) / params.scale
            cols.append(dots)
            labels += [f"shared_scale[{i}]" for i in range(d)]
        if "multiplier" in groups:
            diff = z2[:, None, :] - means[None, :, :]
            dots = resp * np.einsum("ni,nki->nk", u, diff) / params.multipliers
            cols.append(dots)
            labels += [f"multiplier[{j}]" for j in range(k)]
    return GradientBatch(labels, np.concatenate(cols, axis=1))


# ---------------------------------------------------------------------------
# Score function (plain, no baseline)
# ---------------------------------------------------------------------------

def score_grad(dist: Union[MixtureParams, MultivariateNormalParams],
               f: TestFunction, sample: Sample) -> dict[str, float]:
    """f(z) ∂ log q/∂θ_α per coordinate (plain reinforce, no baseline)."""
    z = np.asarray(sample.value, dtype=float)
    fval = float(f.value(z))
    out: dict[str, float] = {}
    if isinstance(dist, MultivariateNormalParams):
        sc = score_mvn(dist, z)
        for a in range(dist.dim):
            out[f"mean[{a}]"] = fval * sc["mean"][a]
        for a in range(dist.dim):
            for b in range(a + 1):
                out[f"chol[{a},{b}]"] = fval * sc["chol"][a, b]
        return out
    if isinstance(dist, MixtureFamily):
        logit_sc = score_logits(dist, z)
        for j in range(dist.n_components):
            out[f"logit[{j}]"] = fval * logit_sc[j]
        comp = score_component_params(dist, z)
        k, d = dist.n_components, dist.dim
        if "comp_mean" in comp:
            for j in range(k):
                for i in range(d):
                    out[f"comp_mean[{j},{i}]"] = fval * comp["comp_mean"][j, i]
        if "comp_scale" in comp:
            for j in range(k):
                for i in range(d):
                    out[f"comp_scale[{j},{i}]"] = fval * comp["comp_scale"][j, i]
        if "shared_scale" in comp:
            for i in range(d):
                out[f"shared_scale[{i}]"] = fval * comp["shared_scale"][i]
        if "multiplier" in comp:
            for j in range(k):
                out[f"multiplier[{j}]"] = fval * comp["multiplier"][j]
        return out
    raise TypeError(f"unsupported distribution {type(dist).__name__}")


def score_batch_mixture(params: MixtureParams, f: TestFunction,
                        z_batch: np.ndarray,
                        coords: str = "all") -> GradientBatch:
    z2 = np.atleast_2d(np.asarray(z_batch, dtype=float))
    fval = f.value(z2)
    resp = responsibilities(params, z2)
    w = params.weights()
    cols: list[np.ndarray] = []
    labels: list[str] = []
    k, d = params.n_components, params.dim
    if coords in ("all", "logits"):
        cols.append(fval[:, None] * (resp - w[None, :]))
        labels += [f"logit[{j}]" for j in range(k)]
    if coords in ("all", "components"):
        means = params.component_means()
        stds = params.component_stds()
        e = (z2[:, None, :] - means[None, :, :]) / stds[None, :, :]
        groups = params.coordinate_groups()
        if "comp_mean" in groups:
            sc = resp[:, :, None] * e / stds[None, :, :]
            cols.append(fval[:, None] * sc.reshape(z2.shape[0], k * d))
            labels += [f"comp_mean[{j},{i}]" for j in range(k) for i in range(d)]
        if "comp_scale" in groups:
            sc = resp[:, :, None] * (e * e - 1.0) / params.scales[None, :, :]
            cols.append(fval[:, None] * sc.reshape(z2.shape[0], k * d))
            labels += [f"comp_scale[{j},{i}]" for j in range(k) for i in range(d)]
        if "shared_scale" in groups:
            sc = np.einsum("nk,nki->ni", resp, e * e - 1.0) / params.scale
            cols.append(fval[:, None] * sc)
            labels += [f"shared_scale[{i}]" for i in range(d)]
        if "multiplier" in groups:
            sc = resp * (np.sum(e * e, axis=2) - d) / params.multipliers
            cols.append(fval[:, None] * sc)
            labels += [f"multiplier[{j}]" for j in range(k)]
    return GradientBatch(labels, np.concatenate(cols, axis=1))


def score_batch_mvn(params: MultivariateNormalParams, f: TestFunction,
                    z_batch: np.ndarray) -> GradientBatch:
    z2 = np.atleast_2d(np.asarray(z_batch, dtype=float))
    d = params.dim
    fval = f.value(z2)
    eps = sla.solve_triangular(params.cholesky, (z2 - params.mean).T,
                               lower=True).T
    m = sla.solve_triangular(params.cholesky, eps.T, lower=True, trans="T").T
    l_inv_t = sla.solve_triangular(params.cholesky, np.eye(d), lower=True).T
    chol_sc = np.einsum("na,nb->nab", m, eps) - l_inv_t[None, :, :]
    rows_a, cols_b = np.tril_indices(d)
    samples = fval[:, None] * np.concatenate(
        [m, chol_sc[:, rows_a, cols_b]], axis=1)
    return GradientBatch(mvn_coordinate_labels(d), samples)


# ---------------------------------------------------------------------------
# Hybrid (score for logits, pathwise for component parameters)
# ---------------------------------------------------------------------------

def hybrid_grad(dist: MixtureParams, f: TestFunction,
                sample: Sample) -> dict[str, float]:
    z = np.asarray(sample.value, dtype=float)
    fval = float(f.value(z))
    out = {f"logit[{j}]": fval * s
           for j, s in enumerate(score_logits(dist, z))}
    out.update(pathwise_grad(dist, component_fields(dist), f, z))
    return out


def hybrid_batch_mixture(params: MixtureParams, f: TestFunction,
                         z_batch: np.ndarray) -> GradientBatch:
    z2 = np.atleast_2d(np.asarray(z_batch, dtype=float))
    logit_part = score_batch_mixture(params, f, z2, coords="logits")
    comp_part = pathwise_batch_mixture(params, f, z2, coords="components")
    return GradientBatch(logit_part.labels + comp_part.labels,
                         np.concatenate([logit_part.samples,
                                         comp_part.samples], axis=1))


# ---------------------------------------------------------------------------
# Gumbel-Softmax baselines (biased)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GumbelConfig:
    """Relaxation temperature and soft/hard mode."""
    temperature: float
    mode: str = "soft"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.mode not in ("soft", "hard"):
            raise ValueError(f"mode must be 'soft' or 'hard', got {self.mode!r}")


def gumbel_softmax_mixing(params: DiagNormals, cfg: GumbelConfig,
                          gumbels: np.ndarray,
                          eps: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Relaxed mixing weights and samples; returns (y_soft, y_used, z).

    z_i = Σ_k y_k (μ_ki + ε_i σ_ki); hard mode replaces y with the
    arg max one-hot (the sample is then exact ancestral Gumbel-max).
    """
    y_soft = softmax((params.logits[None, :] + gumbels) / cfg.temperature)
    if cfg.mode == "hard":
        y_used = np.zeros_like(y_soft)
        y_used[np.arange(y_soft.shape[0]), np.argmax(y_soft, axis=1)] = 1.0
    else:
        y_used = y_soft
    z = y_used @ params.means + (y_used @ params.scales) * eps
    return y_soft, y_used, z


def gumbel_softmax_batch(params: DiagNormals, f: TestFunction,
                         cfg: GumbelConfig, rng: Optional[RngStream],
                         n: int,
                         noise: Optional[tuple[np.ndarray, np.ndarray]] = None
                         ) -> GradientBatch:
    """Relaxed-path gradients for logits, means, and scales.

    The chain is three linear maps (softmax Jacobian, the mixing
    equation, ∇f), hand-composed.  Biased for K > 1: the relaxed sample
    path does not follow q (soft), and the straight-through logit
    Jacobian is a surrogate (hard).  noise = (gumbels (n,K), eps (n,D))
    replays fixed draws.
    """
    if not isinstance(params, DiagNormals):
        raise TypeError("gumbel_softmax estimators expect DiagNormals")
    k, d = params.n_components, params.dim
    if noise is not None:
        gumbels, eps = noise
    else:
        gumbels = rng.gen.gumbel(size=(n, k))
        eps = rng.gen.standard_normal((n, d))
    y_soft, y_used, z = gumbel_softmax_mixing(params, cfg, gumbels, eps)
    u = f.gradient(z)
    # logits: dz_i/dℓ_j = Σ_k J_kj (μ_ki + ε_i σ_ki), J the softmax Jacobian
    mix = params.means[None, :, :] + eps[:, None, :] * params.scales[None, :, :]
    jac = (np.einsum("nk,kj->nkj", y_soft, np.eye(k))
           - np.einsum("nk,nj->nkj", y_soft, y_soft)) / cfg.temperature
    dz_dl = np.einsum("nkj,nki->nji", jac, mix)
    logit_cols = np.einsum("ni,nji->nj", u, dz_dl)
    mean_cols = np.einsum("nk,ni->nki", y_used, u).reshape(n, k * d)
    scale_cols = np.einsum("nk,ni,ni->nki", y_used, eps, u).reshape(n, k * d)
    labels = ([f"logit[{j}]" for j in range(k)]
              + [f"comp_mean[{j},{i}]" for j in range(k) for i in range(d)]
              + [f"comp_scale[{j},{i}]" for j in range(k) for i in range(d)])
    return GradientBatch(labels, np.concatenate(
        [logit_cols, mean_cols, scale_cols], axis=1))


def gumbel_softmax_grad(dist: DiagNormals, f: TestFunction, cfg: GumbelConfig,
                        rng: RngStream) -> dict[str, float]:
    batch = gumbel_softmax_batch(dist, f, cfg, rng, 1)
    return dict(zip(batch.labels, batch.samples[0]))


def batch_for(estimator: str, params, f: TestFunction, z_batch: np.ndarray,
              avf: Optional[AvfParams] = None,
              coords: str = "all") -> GradientBatch:
    """Uniform entry point used by the benchmarks and z-tests."""
    if isinstance(params, MultivariateNormalParams):
        if estimator in ("rt", "pathwise"):
            return pathwise_batch_mvn(params, f, z_batch)
        if estimator == "avf":
            return pathwise_batch_mvn(params, f, z_batch, avf=avf)
        if estimator == "score":
            return score_batch_mvn(params, f, z_batch)
    elif isinstance(params, MixtureFamily):
        if estimator == "pathwise":
            return pathwise_batch_mixture(params, f, z_batch, coords=coords)
        if estimator == "score":
            return score_batch_mixture(params, f, z_batch, coords=coords)
        if estimator == "hybrid":
            return hybrid_batch_mixture(params, f, z_batch)
    raise ValueError(
        f"estimator {estimator!r} not available for {type(params).__name__}")
