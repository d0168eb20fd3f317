"""Reproducible benchmark harness; every command emits CSV.

Experiments:

    check_transport   residual / boundary / antisymmetry suite, exit 0
                      iff every threshold is met
    bench_mvn         Var(AVF)/Var(RT) over off-diagonal Cholesky
                      coordinates, swept over the off-diagonal magnitude
                      r of L = I + r ΔL (ΔL strictly lower, U(0,1))
    bench_mixture     pathwise vs score logit-gradient variance per
                      mixture family (means on the radius-2 sphere,
                      near-identity scales), optional GS baselines
    sgvi_toy          stochastic variational inference against a fixed
                      2-d mixture target with a known normalizer,
                      comparing estimators under identical seeds
    adapt_avf         raw adaptation trajectories (surrogate, windowed
                      mean, θ norm)

Configuration is a flat ``key = value`` file (TOML-compatible subset);
every key can be overridden by a same-named command-line flag, and the
environment variable TG_SEED overrides the seed.  Output is CSV with a
leading comment row recording the tool version, a hash of the resolved
configuration, and the seed; identical configurations produce
byte-identical files.  Exit codes: 0 success, 1 threshold failure,
2 usage/config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import math
import os
import sys
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .avf_adaptation import AvfOptimizerConfig, avf_optimize
from .distributions import (
    DiagNormals,
    MixtureFamily,
    MultivariateNormalParams,
    grad_log_density,
    log_density,
    sample_batch,
)
from .estimators import (
    GradientBatch,
    GumbelConfig,
    TestFunction,
    batch_for,
    gumbel_softmax_batch,
    gumbel_softmax_mixing,
    make_test_function,
    pathwise_batch_mixture,
    quadratic_test_function,
    score_batch_mixture,
)
from .numerics import AdamState, RngStream, adam_step
from .velocity_fields import AvfParams, component_fields, logit_fields, mvn_fields
from .verification import (
    MIXTURE_FAMILIES,
    boundary_decay_probe,
    random_avf,
    random_mixture,
    random_mvn,
    random_student_t,
    transport_residual,
)

RESIDUAL_BOUND = 1e-5
DECAY_BOUND = 1e-8
ANTISYM_BOUND = 1e-12

EXPERIMENTS = ("check_transport", "bench_mvn", "bench_mixture", "sgvi_toy",
               "adapt_avf")
ESTIMATORS = ("pathwise", "score", "hybrid", "gs_soft", "gs_hard", "rt", "avf")
TEST_FUNCTIONS = ("quadratic", "quartic", "cosine", "sq_norm", "all")
FAMILIES = MIXTURE_FAMILIES + ("mvn", "student_t", "negative_example", "all")


class ConfigError(ValueError):
    """Malformed configuration (maps to exit code 2)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    dim: int = 8
    components: int = 3
    family: str = "all"
    estimators: tuple[str, ...] = ("pathwise", "score")
    test_function: str = "quadratic"
    samples: int = 2000
    seed: int = 0
    r_sweep: tuple[float, ...] = (1.0,)
    rank: int = 1
    steps: int = 2000
    out: str = "-"
    step_size_theta: float = 0.05
    step_size_lambda: float = 0.05
    n_seeds: int = 20
    eval_every: int = 250
    eval_samples: int = 2000
    temperature: float = 1.0

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; "
                              f"expected one of {EXPERIMENTS}")
        if not (1 <= self.dim <= 1000):
            raise ConfigError(f"dim out of range [1, 1000]: {self.dim}")
        if not (1 <= self.components <= 100):
            raise ConfigError(f"components out of range [1, 100]: {self.components}")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {e!r}")
        if self.test_function not in TEST_FUNCTIONS:
            raise ConfigError(f"unknown test function {self.test_function!r}")
        if not (1 <= self.samples <= 10_000_000):
            raise ConfigError(f"samples out of range: {self.samples}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if any(r < 0 for r in self.r_sweep) or not self.r_sweep:
            raise ConfigError("r_sweep must be nonempty and nonnegative")
        if not (1 <= self.rank <= 100):
            raise ConfigError(f"rank out of range: {self.rank}")
        if not (0 <= self.steps <= 1_000_000):
            raise ConfigError(f"steps out of range: {self.steps}")
        if self.step_size_theta < 0 or self.step_size_lambda < 0:
            raise ConfigError("step sizes must be nonnegative")
        if not (1 <= self.n_seeds <= 1000):
            raise ConfigError(f"n_seeds out of range: {self.n_seeds}")
        if self.eval_every < 1 or self.eval_samples < 1:
            raise ConfigError("eval_every and eval_samples must be >= 1")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")


_LIST_FIELDS = {"estimators", "r_sweep"}
_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if raw.startswith("[") and raw.endswith("]"):
        raw = raw[1:-1]
    if key in _LIST_FIELDS:
        items = [s.strip().strip("'\"") for s in raw.split(",") if s.strip()]
        if key == "r_sweep":
            return tuple(float(s) for s in items)
        return tuple(items)
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    raw = raw.strip("'\"")
    typ = _FIELD_TYPES.get(key, "str")
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def parse_config_file(path: str) -> dict:
    """Flat ``key = value`` file; comments start with '#'."""
    valid = {f.name for f in dataclasses.fields(ExperimentConfig)}
    out: dict = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                              f"got {line.strip()!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in valid:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") \
                from exc
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    canon = ";".join(f"{f.name}={getattr(cfg, f.name)!r}"
                     for f in dataclasses.fields(ExperimentConfig))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return f"{x:.12g}"
    return str(x)


def write_csv(cfg: ExperimentConfig, header: Sequence[str],
              rows: Sequence[Sequence]) -> None:
    lines = [f"# tgrad v{__version__} config={config_hash(cfg)} seed={cfg.seed}",
             ",".join(header)]
    lines += [",".join(_fmt(x) for x in row) for row in rows]
    text = "\n".join(lines) + "\n"
    if cfg.out == "-":
        sys.stdout.write(text)
    else:
        with open(cfg.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def fig1a_cholesky(dim: int, r: float, rng: RngStream) -> MultivariateNormalParams:
    """L = I + r ΔL with ΔL strictly lower, entries U(0, 1); mean 0."""
    delta = np.tril(rng.gen.uniform(size=(dim, dim)), k=-1)
    return MultivariateNormalParams(np.zeros(dim), np.eye(dim) + r * delta)


def fig1b_mixture(family: str, dim: int, k: int, rng: RngStream):
    """Means on the radius-2 sphere, scales narrowly around 1, multipliers
    spread over [0.5, 1.5]; components have little overlap in high D."""
    gen = rng.gen
    logits = 0.3 * gen.standard_normal(k)
    raw = gen.standard_normal((k, dim))
    means = 2.0 * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    scale = np.abs(1.0 + 0.05 * gen.standard_normal(dim))
    multipliers = gen.uniform(0.5, 1.5, size=k)
    if family == "shared_diag_cov":
        from .distributions import SharedDiagCov
        return SharedDiagCov(logits, means, scale)
    if family == "zero_mean_gsm":
        from .distributions import ZeroMeanGSM
        return ZeroMeanGSM(logits, scale, multipliers)
    if family == "gsm":
        from .distributions import GSM
        return GSM(logits, means, scale, multipliers)
    if family == "diag_normals":
        scales = np.abs(1.0 + 0.05 * gen.standard_normal((k, dim)))
        return DiagNormals(logits, means, scales)
    raise ConfigError(f"unknown mixture family {family!r}")


def total_variance(samples: np.ndarray) -> float:
    """Σ_p [mean(x_p²) - mean(x_p)²] over columns."""
    return float(np.sum(np.mean(samples ** 2, axis=0)
                        - np.mean(samples, axis=0) ** 2))


def bootstrap_variance_ratio(num: np.ndarray, den: np.ndarray,
                             n_boot: int, rng: RngStream) -> tuple[float, float, float]:
    """Paired bootstrap CI for total-variance(num)/total-variance(den).

    Resampling is expressed through multinomial row weights so each
    replicate is two matrix products instead of a gather.
    """
    n = num.shape[0]
    ratio = total_variance(num) / total_variance(den)
    counts = rng.gen.multinomial(n, np.full(n, 1.0 / n), size=n_boot) / n
    reps = []
    for x in (num, den):
        m1 = counts @ x
        m2 = counts @ (x * x)
        reps.append(np.sum(m2, axis=1) - np.sum(m1 ** 2, axis=1))
    boot = reps[0] / reps[1]
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return ratio, float(lo), float(hi)


def _chol_offdiag_columns(batch: GradientBatch) -> np.ndarray:
    idx = [i for i, lab in enumerate(batch.labels)
           if lab.startswith("chol[")
           and lab[5:-1].split(",")[0] != lab[5:-1].split(",")[1]]
    return batch.samples[:, idx]


# ---------------------------------------------------------------------------
# check_transport
# ---------------------------------------------------------------------------

def _suite_dims(cfg: ExperimentConfig) -> tuple[list[int], list[int]]:
    dims = sorted({d for d in (1, 2, 3, 5, 8) if d <= cfg.dim})
    ks = sorted({k for k in (1, 2, 3, 5) if k <= cfg.components})
    return dims, ks


def run_transport_rows(cfg: ExperimentConfig, n_points: int,
                       n_avf: int) -> list[list]:
    """Residual, boundary, and antisymmetry checks; one row per check
    with the worst value over sampled points and coordinates."""
    rows: list[list] = []
    dims, ks = _suite_dims(cfg)
    base = RngStream(cfg.seed, 1)
    families = list(MIXTURE_FAMILIES) if cfg.family == "all" else [cfg.family]

    def add(family, dim, k, coordinate, check, value, bound, ok):
        rows.append([family, dim, k, coordinate, check, value, bound,
                     int(ok)])

    def residual_rows(dist, fields, family, dim, k, n_pts, stream):
        z_batch, _ = sample_batch(dist, stream, n_pts)
        by_group: dict[str, float] = {}
        for z in z_batch:
            for lab in fields.labels():
                rep = transport_residual(dist, lab, fields[lab], z)
                group = lab.split("[")[0]
                by_group[group] = max(by_group.get(group, 0.0),
                                      rep.relative_residual)
        for group, worst in sorted(by_group.items()):
            add(family, dim, k, group, "residual", worst, RESIDUAL_BOUND,
                worst < RESIDUAL_BOUND)

    def decay_rows(dist, fields, family, dim, k, stream, expect_decay=True):
        ok_all = True
        worst = 0.0
        for lab in fields.labels():
            for _ in range(3):
                direction = stream.gen.standard_normal(dim)
                vals = boundary_decay_probe(dist, fields[lab], direction,
                                            (1.0, 10.0))
                rel = vals[1] / max(vals[0], 1e-300)
                worst = max(worst, rel)
                ok_all = ok_all and (rel < DECAY_BOUND)
        if expect_decay:
            add(family, dim, k, "all", "boundary_decay", worst, DECAY_BOUND,
                ok_all)
        else:
            # discrimination: the cautionary field must fail the bound
            add(family, dim, k, "all", "boundary_discrimination", worst,
                DECAY_BOUND, not ok_all)

    if cfg.family in ("mvn", "all"):
        for dim in dims:
            stream = base.substream(dim)
            mvn = random_mvn(dim, stream)
            residual_rows(mvn, mvn_fields(mvn), "mvn_rt", dim, 0,
                          n_points, stream)
            worst = 0.0
            for _ in range(n_avf):
                avf = random_avf(min(cfg.rank + 1, dim), dim, stream)
                fields = mvn_fields(mvn, avf)
                z_batch, _ = sample_batch(mvn, stream, max(n_points // 4, 3))
                for z in z_batch:
                    for lab in fields.labels():
                        rep = transport_residual(mvn, lab, fields[lab], z)
                        worst = max(worst, rep.relative_residual)
            add("mvn_avf", dim, 0, "chol", "residual", worst, RESIDUAL_BOUND,
                worst < RESIDUAL_BOUND)
            decay_rows(mvn, mvn_fields(mvn), "mvn_rt", dim, 0, stream)

    if cfg.family in ("student_t", "all"):
        for dim in dims:
            stream = base.substream(100 + dim)
            t = random_student_t(dim, stream, dof=4.0)
            avf = random_avf(min(cfg.rank + 1, dim), dim, stream)
            from .velocity_fields import student_t_fields
            residual_rows(t, student_t_fields(t, avf), "student_t_avf", dim,
                          0, n_points, stream)

    for family in families:
        if family in ("mvn", "student_t", "negative_example"):
            continue
        for dim in dims:
            for k in ks:
                stream = base.substream(1000 + 17 * dim + k)
                mix = random_mixture(family, dim, k, stream)
                fields = logit_fields(mix).merged(component_fields(mix))
                residual_rows(mix, fields, family, dim, k, n_points, stream)
                decay_rows(mix, fields, family, dim, k, stream)
                # pairwise antisymmetry via Σ_j v^{ℓ_j} = 0
                from .velocity_fields import logit_field_matrix
                z_batch, _ = sample_batch(mix, stream, n_points)
                v = logit_field_matrix(mix, z_batch)
                worst = float(np.max(np.abs(np.sum(v, axis=1))))
                add(family, dim, k, "logit", "antisymmetry_sum", worst,
                    ANTISYM_BOUND, worst < ANTISYM_BOUND)

    if cfg.family in ("negative_example", "all"):
        from .velocity_fields import negative_example_cdf_field
        for dim in (1, 2):
            stream = base.substream(5000 + dim)
            mix = random_mixture("diag_normals", dim, 2, stream)
            fields = negative_example_cdf_field(mix)
            residual_rows(mix, fields, "negative_example", dim, 2,
                          max(n_points // 4, 3), stream)
            axis = np.zeros(dim)
            axis[0] = 1.0
            vals = boundary_decay_probe(mix, fields["logit[0]"], axis,
                                        (1.0, 10.0))
            rel = vals[1] / max(vals[0], 1e-300)
            decays = rel < DECAY_BOUND
            if cfg.family == "negative_example":
                # treated as a positive target: D >= 2 must (and will) fail
                add("negative_example", dim, 2, "logit", "boundary_decay",
                    rel, DECAY_BOUND, decays)
            else:
                expected = decays if dim == 1 else not decays
                add("negative_example", dim, 2, "logit",
                    "boundary_discrimination", rel, DECAY_BOUND, expected)
    return rows


def cmd_check_transport(cfg: ExperimentConfig) -> int:
    n_points = min(cfg.samples, 25)
    rows = run_transport_rows(cfg, n_points=n_points, n_avf=3)
    header = ["family", "dim", "components", "coordinate", "check", "value",
              "bound", "passed"]
    write_csv(cfg, header, rows)
    return 0 if all(row[-1] == 1 for row in rows) else 1


# ---------------------------------------------------------------------------
# bench_mvn (Fig. 1a style)
# ---------------------------------------------------------------------------

def cmd_bench_mvn(cfg: ExperimentConfig) -> int:
    names = ["quadratic", "quartic", "cosine"] \
        if cfg.test_function == "all" else [cfg.test_function]
    rows = []
    for r in cfg.r_sweep:
        for name in names:
            mvn = fig1a_cholesky(cfg.dim, r, RngStream(cfg.seed, 11))
            f = make_test_function(name, cfg.dim, RngStream(cfg.seed, 12))
            if cfg.steps > 0:
                opt = AvfOptimizerConfig(
                    step_size_theta=0.0, step_size_lambda=cfg.step_size_lambda,
                    n_steps=cfg.steps, rank=cfg.rank, theta_mode="frozen")
                avf = avf_optimize(mvn, None, f, opt,
                                   RngStream(cfg.seed, 13)).final_avf
            else:
                avf = AvfParams.zeros(cfg.rank, cfg.dim)
            z_batch, _ = sample_batch(mvn, RngStream(cfg.seed, 14), cfg.samples)
            rt = _chol_offdiag_columns(
                batch_for("rt", mvn, f, z_batch))
            av = _chol_offdiag_columns(
                batch_for("avf", mvn, f, z_batch, avf=avf))
            if cfg.dim == 1:
                rows.append([r, name, "avf", cfg.samples, cfg.seed,
                             float("nan"), float("nan"), float("nan"),
                             float("nan")])
                continue
            ratio, lo, hi = bootstrap_variance_ratio(
                av, rt, n_boot=400, rng=RngStream(cfg.seed, 15))
            var_rt = np.mean(rt ** 2, axis=0) - np.mean(rt, axis=0) ** 2
            var_av = np.mean(av ** 2, axis=0) - np.mean(av, axis=0) ** 2
            coordmean = float(np.mean(var_av / np.maximum(var_rt, 1e-300)))
            rows.append([r, name, "avf", cfg.samples, cfg.seed, ratio, lo, hi,
                         coordmean])
    header = ["r", "test_function", "estimator", "n_samples", "seed",
              "var_ratio", "ci_low", "ci_high", "var_ratio_coordmean"]
    write_csv(cfg, header, rows)
    return 0


# ---------------------------------------------------------------------------
# bench_mixture (Fig. 1b style)
# ---------------------------------------------------------------------------

def cmd_bench_mixture(cfg: ExperimentConfig) -> int:
    families = list(MIXTURE_FAMILIES) if cfg.family == "all" else [cfg.family]
    f = quadratic_test_function(np.eye(cfg.dim))
    f = TestFunction("sq_norm", f.value, f.gradient, np.eye(cfg.dim))
    rows = []
    for family in families:
        mix = fig1b_mixture(family, cfg.dim, cfg.components,
                            RngStream(cfg.seed, 21))
        z_batch, _ = sample_batch(mix, RngStream(cfg.seed, 22), cfg.samples)
        per_est: dict[str, np.ndarray] = {}
        for est_name in ("pathwise", "score"):
            per_est[est_name] = batch_for(est_name, mix, f, z_batch,
                                          coords="logits").samples
        if isinstance(mix, DiagNormals):
            for est_name in cfg.estimators:
                if est_name in ("gs_soft", "gs_hard"):
                    gcfg = GumbelConfig(cfg.temperature,
                                        est_name.removeprefix("gs_"))
                    gb = gumbel_softmax_batch(mix, f, gcfg,
                                              RngStream(cfg.seed, 23),
                                              cfg.samples)
                    k = mix.n_components
                    per_est[est_name] = gb.samples[:, :k]
        var_score = total_variance(per_est["score"])
        for est_name, samples in per_est.items():
            var_tot = total_variance(samples)
            ratio = var_tot / var_score if var_score > 0 else float("nan")
            rows.append([family, cfg.dim, cfg.components, est_name,
                         cfg.samples, cfg.seed, var_tot, ratio])
    header = ["family", "dim", "components", "estimator", "n_samples", "seed",
              "var_logits", "var_ratio_vs_score"]
    write_csv(cfg, header, rows)
    return 0


# ---------------------------------------------------------------------------
# sgvi_toy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyTarget:
    """Fixed 2-d two-component Gaussian-mixture target.

    log_unnormalized = log p(z) + log_normalizer with p a proper
    mixture density, so the KL to the target is computable exactly up
    to Monte Carlo error: KL = log_normalizer - ELBO.
    """
    mixture: DiagNormals
    log_normalizer: float = 1.25

    def log_unnormalized(self, z):
        return log_density(self.mixture, z) + self.log_normalizer

    def grad_log_unnormalized(self, z):
        return grad_log_density(self.mixture, z)


def default_toy_target() -> ToyTarget:
    target = DiagNormals(
        logits=np.array([math.log(0.6), math.log(0.4)]),
        means=np.array([[-1.2, 0.8], [1.4, -0.6]]),
        scales=np.array([[0.7, 0.5], [0.6, 0.9]]))
    return ToyTarget(target)


@dataclass
class _VariationalState:
    """DiagNormals K=2 variational parameters; scales kept positive by
    optimizing log σ."""
    logits: np.ndarray
    means: np.ndarray
    log_scales: np.ndarray

    def dist(self) -> DiagNormals:
        return DiagNormals(self.logits.copy(), self.means.copy(),
                           np.exp(self.log_scales))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.logits, self.means.ravel(),
                               self.log_scales.ravel()])

    @staticmethod
    def from_vector(vec: np.ndarray, k: int, d: int) -> "_VariationalState":
        return _VariationalState(vec[:k].copy(),
                                 vec[k:k + k * d].reshape(k, d).copy(),
                                 vec[k + k * d:].reshape(k, d).copy())


def _elbo_columns(labels, k, d):
    """Map estimator batch columns onto the flat variational vector."""
    order = ([f"logit[{j}]" for j in range(k)]
             + [f"comp_mean[{j},{i}]" for j in range(k) for i in range(d)]
             + [f"comp_scale[{j},{i}]" for j in range(k) for i in range(d)])
    index = {lab: p for p, lab in enumerate(labels)}
    return [index[lab] for lab in order]


def _sgvi_gradient(estimator: str, state: _VariationalState,
                   target: ToyTarget, cfg: ExperimentConfig,
                   rng: RngStream) -> np.ndarray:
    """Single-sample ELBO gradient w.r.t. (logits, means, log σ)."""
    q = state.dist()
    k, d = q.n_components, q.dim

    if estimator in ("gs_soft", "gs_hard"):
        gcfg = GumbelConfig(cfg.temperature, estimator.removeprefix("gs_"))
        gumbels = rng.gen.gumbel(size=(1, k))
        eps = rng.gen.standard_normal((1, d))
        _, _, z_b = gumbel_softmax_mixing(q, gcfg, gumbels, eps)
        z = z_b[0]
        f_rel = TestFunction(
            "elbo_integrand",
            lambda zz: target.log_unnormalized(zz) - log_density(q, zz),
            lambda zz: target.grad_log_unnormalized(zz)
            - grad_log_density(q, zz))
        gb = gumbel_softmax_batch(q, f_rel, gcfg, None, 1,
                                  noise=(gumbels, eps))
        grad = gb.samples[0][_elbo_columns(gb.labels, k, d)]
        # explicit -∂ log q/∂θ term of the relaxed-sample objective
        sc = score_batch_mixture(q, _ONE, np.atleast_2d(z))
        grad = grad - sc.samples[0][_elbo_columns(sc.labels, k, d)]
    else:
        z_b, _ = sample_batch(q, rng, 1)
        z = z_b[0]
        f_val = float(target.log_unnormalized(z) - log_density(q, z))
        if estimator == "score":
            sc = score_batch_mixture(q, _ONE, np.atleast_2d(z))
            grad = f_val * sc.samples[0][_elbo_columns(sc.labels, k, d)]
        else:
            u = target.grad_log_unnormalized(z) - grad_log_density(q, z)
            f_lin = TestFunction("elbo_path", lambda zz: 0.0,
                                 lambda zz: np.broadcast_to(
                                     u, np.atleast_2d(zz).shape))
            if estimator == "pathwise":
                gb = pathwise_batch_mixture(q, f_lin, np.atleast_2d(z))
                grad = gb.samples[0][_elbo_columns(gb.labels, k, d)]
            elif estimator == "hybrid":
                sc = score_batch_mixture(q, _ONE, np.atleast_2d(z),
                                         coords="logits")
                comp = pathwise_batch_mixture(q, f_lin, np.atleast_2d(z),
                                              coords="components")
                logit_g = f_val * sc.samples[0]
                order = [comp.labels.index(lab) for lab in
                         [f"comp_mean[{j},{i}]" for j in range(k)
                          for i in range(d)]
                         + [f"comp_scale[{j},{i}]" for j in range(k)
                            for i in range(d)]]
                grad = np.concatenate([logit_g, comp.samples[0][order]])
            else:
                raise ConfigError(f"estimator {estimator!r} not supported "
                                  f"in sgvi_toy")
    # chain rule σ = exp(log σ): scale-coordinate gradients pick up σ
    grad = grad.copy()
    grad[k + k * d:] *= np.exp(state.log_scales).ravel()
    return grad


_ONE = TestFunction("one", lambda z: np.ones(np.atleast_2d(z).shape[0]),
                    lambda z: np.zeros(np.atleast_2d(z).shape))


def estimate_elbo(q: DiagNormals, target: ToyTarget, n: int,
                  rng: RngStream) -> float:
    z_batch, _ = sample_batch(q, rng, n)
    vals = target.log_unnormalized(z_batch) - log_density(q, z_batch)
    return float(np.mean(vals))


def initial_variational_state() -> _VariationalState:
    return _VariationalState(np.zeros(2),
                             np.array([[-0.4, 0.2], [0.4, -0.2]]),
                             np.zeros((2, 2)))


def run_sgvi(estimator: str, seed_idx: int, cfg: ExperimentConfig,
             target: Optional[ToyTarget] = None,
             init: Optional[_VariationalState] = None) -> list[list]:
    """One SGVI run; returns CSV rows [step, estimator, seed, elbo, kl]."""
    target = default_toy_target() if target is None else target
    state = initial_variational_state() if init is None else init
    k, d = state.logits.size, state.means.shape[1]
    rng = RngStream(cfg.seed, 3000 + seed_idx)
    adam = AdamState.init(state.to_vector().size, cfg.step_size_theta)
    rows = []
    vec = state.to_vector()
    for step in range(cfg.steps + 1):
        if step % cfg.eval_every == 0 or step == cfg.steps:
            eval_rng = RngStream(cfg.seed, 900_000 + seed_idx)
            elbo = estimate_elbo(state.dist(), target, cfg.eval_samples,
                                 eval_rng)
            rows.append([step, estimator, seed_idx, elbo,
                         target.log_normalizer - elbo])
        if step == cfg.steps:
            break
        grad = _sgvi_gradient(estimator, state, target, cfg, rng)
        if not np.all(np.isfinite(grad)):
            raise RuntimeError(f"non-finite {estimator} gradient at step {step}")
        adam, vec = adam_step(adam, vec, -grad)   # ascend the ELBO
        state = _VariationalState.from_vector(vec, k, d)
    return rows


def cmd_sgvi_toy(cfg: ExperimentConfig) -> int:
    names = [e for e in cfg.estimators if e != "rt" and e != "avf"]
    rows = []
    for estimator in names:
        for seed_idx in range(cfg.n_seeds):
            rows.extend(run_sgvi(estimator, seed_idx, cfg))
    header = ["step", "estimator", "seed", "elbo", "kl_to_target"]
    write_csv(cfg, header, rows)
    return 0


# ---------------------------------------------------------------------------
# adapt_avf
# ---------------------------------------------------------------------------

def cmd_adapt_avf(cfg: ExperimentConfig) -> int:
    r = cfg.r_sweep[0]
    mvn = fig1a_cholesky(cfg.dim, r, RngStream(cfg.seed, 11))
    f = make_test_function(cfg.test_function if cfg.test_function != "all"
                           else "quadratic", cfg.dim, RngStream(cfg.seed, 12))
    opt = AvfOptimizerConfig(step_size_theta=cfg.step_size_theta,
                             step_size_lambda=cfg.step_size_lambda,
                             n_steps=max(cfg.steps, 1), rank=cfg.rank,
                             theta_mode="frozen")
    traj = avf_optimize(mvn, None, f, opt, RngStream(cfg.seed, 13))
    window = 500
    rows = []
    for step in range(opt.n_steps):
        lo = max(0, step - window + 1)
        rows.append([step, traj.surrogate[step],
                     float(np.mean(traj.surrogate[lo:step + 1])),
                     traj.theta_norm[step]])
    header = ["step", "surrogate_second_moment", "var_estimate_window",
              "theta_norm"]
    write_csv(cfg, header, rows)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tgrad",
        description="Pathwise gradient estimator benchmarks (CSV output).")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--experiment", choices=EXPERIMENTS)
    p.add_argument("--dim", type=int)
    p.add_argument("--components", type=int)
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--estimators", help="comma-separated estimator tags")
    p.add_argument("--test-function", dest="test_function",
                   choices=TEST_FUNCTIONS)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--r-sweep", dest="r_sweep",
                   help="comma-separated r values")
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.add_argument("--step-size-theta", dest="step_size_theta", type=float)
    p.add_argument("--step-size-lambda", dest="step_size_lambda", type=float)
    p.add_argument("--n-seeds", dest="n_seeds", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--eval-samples", dest="eval_samples", type=int)
    p.add_argument("--temperature", type=float)
    return p


def resolve_config(argv: Sequence[str]) -> ExperimentConfig:
    args = build_parser().parse_args(argv)
    values: dict = {}
    if args.config:
        values.update(parse_config_file(args.config))
    for key in (f.name for f in dataclasses.fields(ExperimentConfig)):
        arg = getattr(args, key, None)
        if arg is None:
            continue
        if key in _LIST_FIELDS and isinstance(arg, str):
            values[key] = _parse_value(key, arg)
        else:
            values[key] = arg
    env_seed = os.environ.get("TG_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"TG_SEED must be an integer, got "
                              f"{env_seed!r}") from exc
    if "estimators" not in values and values.get("experiment") == "sgvi_toy":
        values["estimators"] = ("pathwise", "hybrid", "score", "gs_soft",
                                "gs_hard")
    if "experiment" not in values:
        raise ConfigError("an experiment must be given via --experiment "
                          "or the config file")
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = resolve_config(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    command = {
        "check_transport": cmd_check_transport,
        "bench_mvn": cmd_bench_mvn,
        "bench_mixture": cmd_bench_mixture,
        "sgvi_toy": cmd_sgvi_toy,
        "adapt_avf": cmd_adapt_avf,
    }[cfg.experiment]
    return command(cfg)


if __name__ == "__main__":
    sys.exit(main())
