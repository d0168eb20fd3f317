"""Oracles and statistical tests the rest of the package is judged by.

* transport_residual checks |∂q/∂θ_α + ∇·(q v)| / max(q, floor) at a
  point: the source term is analytic for softmax logits
  (π_j (q_j - q)) and a central difference in the parameter otherwise;
  the divergence is always a central difference of z ↦ q(z) v(z).
  Nothing here reuses the closed forms under test.
* boundary_decay_probe evaluates ‖q v‖ along a ray at given whitened
  radii; a usable field must decay, the cautionary CDF field must not.
* analytic_grad_oracle gives exact expectation gradients for quadratic
  test functions (E[zᵀQz] = μᵀQμ + tr(QLLᵀ) for the Normal and the
  per-component diagonal analogue for mixtures).
* unbiasedness_ztest compares a Monte Carlo estimator mean against the
  oracle coordinate-by-coordinate at a |z| <= 4 gate.  With N >= 2·10⁵
  the per-coordinate false-alarm rate is about 6e-5.
"""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from . import estimators as est
from .distributions import (
    DiagNormals,
    GSM,
    MixtureFamily,
    MixtureParams,
    MultivariateNormalParams,
    SharedDiagCov,
    StudentTParams,
    ZeroMeanGSM,
    log_component_densities,
    log_density,
    sample_batch,
)
from .numerics import FiniteDiffConfig, RngStream, finite_diff_divergence

RESIDUAL_FLOOR = 1e-300

_LABEL_RE = re.compile(r"^([a-z_]+)\[(\d+)(?:,(\d+))?\]$")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualReport:
    """Pointwise transport-equation residual for one coordinate."""
    coordinate: str
    point: np.ndarray
    source_term: float
    divergence_term: float
    relative_residual: float


@dataclass(frozen=True)
class ZTestReport:
    """Per-coordinate z-test of an estimator mean against the oracle."""
    coordinate: str
    estimator_mean: float
    oracle_value: float
    standard_error: float
    z_score: float
    passed: bool


# ---------------------------------------------------------------------------
# Parameter-coordinate perturbation (for finite-difference sources)
# ---------------------------------------------------------------------------

def parse_label(label: str) -> tuple[str, int, int | None]:
    m = _LABEL_RE.match(label)
    if m is None:
        raise ValueError(f"malformed coordinate label {label!r}")
    group, first, second = m.group(1), int(m.group(2)), m.group(3)
    return group, first, None if second is None else int(second)


def perturb_coordinate(dist, label: str, delta: float):
    """Return a copy of dist with one named coordinate shifted by delta."""
    group, i1, i2 = parse_label(label)
    if group == "mean" and isinstance(dist, (MultivariateNormalParams,
                                             StudentTParams)):
        mean = dist.mean.copy()
        mean[i1] += delta
        return dataclasses.replace(dist, mean=mean)
    if group == "chol" and isinstance(dist, (MultivariateNormalParams,
                                             StudentTParams)):
        chol = dist.cholesky.copy()
        chol[i1, i2] += delta
        return dataclasses.replace(dist, cholesky=chol)
    if isinstance(dist, MixtureFamily):
        if group == "logit":
            logits = dist.logits.copy()
            logits[i1] += delta
            return dataclasses.replace(dist, logits=logits)
        if group == "comp_mean":
            means = dist.means.copy()
            means[i1, i2] += delta
            return dataclasses.replace(dist, means=means)
        if group == "comp_scale":
            scales = dist.scales.copy()
            scales[i1, i2] += delta
            return dataclasses.replace(dist, scales=scales)
        if group == "shared_scale":
            scale = dist.scale.copy()
            scale[i1] += delta
            return dataclasses.replace(dist, scale=scale)
        if group == "multiplier":
            mult = dist.multipliers.copy()
            mult[i1] += delta
            return dataclasses.replace(dist, multipliers=mult)
    raise ValueError(
        f"coordinate {label!r} not applicable to {type(dist).__name__}")


# ---------------------------------------------------------------------------
# Transport residual
# ---------------------------------------------------------------------------

def transport_residual(dist, coordinate: str,
                       field: Callable[[np.ndarray], np.ndarray],
                       z, cfg: FiniteDiffConfig = FiniteDiffConfig(),
                       source_override: float | None = None) -> ResidualReport:
    """Residual of ∂q/∂θ_α + ∇·(q v) at z, relative to max(q, floor).

    source_override forces the source term (0.0 checks a null field).
    """
    z = np.asarray(z, dtype=float)
    q = math.exp(log_density(dist, z))
    if source_override is not None:
        source = float(source_override)
    else:
        group, j, _ = parse_label(coordinate)
        if group == "logit":
            w = dist.weights()
            q_j = math.exp(log_component_densities(dist, z)[j])
            source = w[j] * (q_j - q)
        else:
            h = cfg.step_h
            q_plus = math.exp(log_density(
                perturb_coordinate(dist, coordinate, +h), z))
            q_minus = math.exp(log_density(
                perturb_coordinate(dist, coordinate, -h), z))
            source = (q_plus - q_minus) / (2.0 * h)

    def flux(zz):
        return math.exp(log_density(dist, zz)) * field(zz)

    div = finite_diff_divergence(flux, z, cfg)
    if not (math.isfinite(source) and math.isfinite(div)):
        raise FloatingPointError(
            f"non-finite transport terms at {coordinate}: "
            f"source={source}, divergence={div}")
    rel = abs(source + div) / max(q, RESIDUAL_FLOOR)
    return ResidualReport(coordinate, z, source, div, rel)


# ---------------------------------------------------------------------------
# Boundary decay
# ---------------------------------------------------------------------------

def _ray_transform(dist) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Center and whitened-to-sample-space map for radius parameterization."""
    if isinstance(dist, (MultivariateNormalParams, StudentTParams)):
        chol = dist.cholesky
        return dist.mean, (lambda u: chol @ u)
    if isinstance(dist, MixtureFamily):
        center = dist.weights() @ dist.component_means()
        s_max = np.max(dist.component_stds(), axis=0)
        return center, (lambda u: s_max * u)
    raise TypeError(f"unsupported distribution {type(dist).__name__}")


def boundary_decay_probe(dist, field: Callable[[np.ndarray], np.ndarray],
                         ray_direction, radii) -> np.ndarray:
    """‖q(z) v(z)‖ along z(r) = center + r · T(d̂), r in whitened units."""
    d_hat = np.asarray(ray_direction, dtype=float)
    nrm = np.linalg.norm(d_hat)
    if nrm == 0.0:
        raise ValueError("ray_direction must be nonzero")
    d_hat = d_hat / nrm
    center, transform = _ray_transform(dist)
    out = []
    for r in radii:
        z = center + float(r) * transform(d_hat)
        out.append(math.exp(log_density(dist, z)) * np.linalg.norm(field(z)))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# Analytic expectation gradients (quadratic family)
# ---------------------------------------------------------------------------

def analytic_grad_oracle(dist, f: est.TestFunction) -> dict[str, float]:
    """Exact ∇_θ E_q[zᵀQz] for every free coordinate.

    Normal: E = μᵀQμ + tr(QLLᵀ), so ∂E/∂μ = 2Qμ and ∂E/∂L = 2QL.
    Mixtures (diagonal components, stds s_j): E_j = μ_jᵀQμ_j + Σ_i Q_ii s_ji²
    with E = Σ_j π_j E_j; logit gradients are π_j (E_j - E).
    """
    if f.name not in ("quadratic", "sq_norm") or f.coupling_matrix is None:
        raise ValueError(f"oracle supports quadratic test functions, "
                         f"got {f.name!r}")
    q = f.coupling_matrix
    out: dict[str, float] = {}
    if isinstance(dist, MultivariateNormalParams):
        grad_mean = 2.0 * q @ dist.mean
        grad_chol = 2.0 * q @ dist.cholesky
        for a in range(dist.dim):
            out[f"mean[{a}]"] = float(grad_mean[a])
        for a in range(dist.dim):
            for b in range(a + 1):
                out[f"chol[{a},{b}]"] = float(grad_chol[a, b])
        return out
    if isinstance(dist, MixtureFamily):
        k, d = dist.n_components, dist.dim
        w = dist.weights()
        means = dist.component_means()
        stds = dist.component_stds()
        q_diag = np.diag(q)
        e_j = np.einsum("ki,ij,kj->k", means, q, means) + stds ** 2 @ q_diag
        e_tot = float(w @ e_j)
        for j in range(k):
            out[f"logit[{j}]"] = float(w[j] * (e_j[j] - e_tot))
        groups = dist.coordinate_groups()
        if "comp_mean" in groups:
            grad_means = 2.0 * means @ q.T
            for j in range(k):
                for i in range(d):
                    out[f"comp_mean[{j},{i}]"] = float(w[j] * grad_means[j, i])
        if "comp_scale" in groups:
            for j in range(k):
                for i in range(d):
                    out[f"comp_scale[{j},{i}]"] = float(
                        w[j] * 2.0 * q_diag[i] * dist.scales[j, i])
        if "shared_scale" in groups:
            for i in range(d):
                out[f"shared_scale[{i}]"] = float(
                    2.0 * q_diag[i] / dist.scale[i] * (w @ stds[:, i] ** 2))
        if "multiplier" in groups:
            base = q_diag @ dist.scale ** 2
            for j in range(k):
                out[f"multiplier[{j}]"] = float(
                    w[j] * 2.0 * dist.multipliers[j] * base)
        return out
    raise TypeError(f"unsupported distribution {type(dist).__name__}")


# ---------------------------------------------------------------------------
# Unbiasedness z-tests
# ---------------------------------------------------------------------------

BatchEstimator = Callable[..., est.GradientBatch]


def estimator_moments(estimator: Union[str, BatchEstimator], dist,
                      f: est.TestFunction, n_samples: int, rng: RngStream,
                      chunk: int = 20000, coords: str = "all",
                      avf=None) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Streaming per-coordinate mean and variance of a batch estimator."""
    total = 0
    sum_x = None
    sum_x2 = None
    labels: list[str] = []
    while total < n_samples:
        m = min(chunk, n_samples - total)
        z_batch, _ = sample_batch(dist, rng, m)
        if callable(estimator):
            batch = estimator(dist, f, z_batch)
        else:
            batch = est.batch_for(estimator, dist, f, z_batch, avf=avf,
                                  coords=coords)
        if sum_x is None:
            labels = batch.labels
            sum_x = np.zeros(len(labels))
            sum_x2 = np.zeros(len(labels))
        sum_x += np.sum(batch.samples, axis=0)
        sum_x2 += np.sum(batch.samples ** 2, axis=0)
        total += m
    mean = sum_x / total
    var = np.maximum(sum_x2 / total - mean ** 2, 0.0)
    return labels, mean, var


def unbiasedness_ztest(estimator: Union[str, BatchEstimator], dist,
                       f: est.TestFunction, n_samples: int, rng: RngStream,
                       threshold: float = 4.0, chunk: int = 20000,
                       coords: str = "all", avf=None,
                       oracle: dict[str, float] | None = None) -> list[ZTestReport]:
    """Per-coordinate |z| <= threshold test against the analytic oracle."""
    if oracle is None:
        oracle = analytic_grad_oracle(dist, f)
    labels, mean, var = estimator_moments(estimator, dist, f, n_samples, rng,
                                          chunk=chunk, coords=coords, avf=avf)
    reports = []
    for idx, label in enumerate(labels):
        if label not in oracle:
            continue
        se = math.sqrt(var[idx] / n_samples)
        diff = mean[idx] - oracle[label]
        if se == 0.0:
            z = 0.0 if diff == 0.0 else math.inf
        else:
            z = diff / se
        reports.append(ZTestReport(label, float(mean[idx]), oracle[label],
                                   se, z, abs(z) <= threshold))
    return reports


# ---------------------------------------------------------------------------
# Random instances for oracles, property tests, and benchmarks
# ---------------------------------------------------------------------------

def random_mvn(dim: int, rng: RngStream, off_diag: float = 0.4) -> MultivariateNormalParams:
    gen = rng.gen
    mean = gen.standard_normal(dim)
    chol = np.tril(off_diag * gen.standard_normal((dim, dim)), k=-1)
    chol += np.diag(np.exp(0.3 * gen.standard_normal(dim)))
    return MultivariateNormalParams(mean, chol)


def random_student_t(dim: int, rng: RngStream, dof: float = 4.0,
                     off_diag: float = 0.4) -> StudentTParams:
    base = random_mvn(dim, rng, off_diag)
    return StudentTParams(base.mean, base.cholesky, dof)


def random_avf(rank: int, dim: int, rng: RngStream,
               scale: float = 0.3) -> "est.AvfParams":
    from .velocity_fields import AvfParams
    gen = rng.gen
    return AvfParams(scale * gen.standard_normal((rank, dim)),
                     scale * gen.standard_normal((rank, dim)))


def random_mixture(family: str, dim: int, k: int, rng: RngStream,
                   mean_spread: float = 1.5) -> MixtureParams:
    """Generic random instance of one of the four mixture families."""
    gen = rng.gen
    logits = 0.5 * gen.standard_normal(k)
    means = mean_spread * gen.standard_normal((k, dim))
    scale = np.exp(0.25 * gen.standard_normal(dim))
    multipliers = np.exp(0.4 * gen.standard_normal(k))
    if family == "shared_diag_cov":
        return SharedDiagCov(logits, means, scale)
    if family == "zero_mean_gsm":
        return ZeroMeanGSM(logits, scale, multipliers)
    if family == "gsm":
        return GSM(logits, means, scale, multipliers)
    if family == "diag_normals":
        scales = np.exp(0.25 * gen.standard_normal((k, dim)))
        return DiagNormals(logits, means, scales)
    raise ValueError(f"unknown mixture family {family!r}")


MIXTURE_FAMILIES = ("shared_diag_cov", "zero_mean_gsm", "gsm", "diag_normals")
