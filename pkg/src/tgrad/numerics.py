"""Special functions, finite-difference helpers, RNG streams, and Adam.

Everything downstream leans on a small set of numerical primitives:

* erfc / Φ / φ for the unit Normal,
* the radial upper-tail integral

      Φ̃(z) = z^{1-D} (2π)^{-D/2} ∫_z^∞ t^{D-1} e^{-t²/2} dt

  which has closed forms via double factorials (even D) and an extra
  erfc tail term (odd D).  It is evaluated in log space so that velocity
  fields stay finite far out in the tails,
* central finite differences (gradients and divergences) used as the
  independent oracle for every analytic derivative in the package,
* a bias-corrected Adam step in functional form,
* deterministic, splittable random streams keyed by (seed, stream_id).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special as sp

SQRT2 = math.sqrt(2.0)
LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

class RngStream:
    """Deterministic random stream keyed by (seed, stream_id).

    Two streams built from the same key produce identical sequences;
    distinct stream_ids give statistically independent streams (PCG64
    seeded through a SeedSequence spawn key).  Each worker in a parallel
    Monte Carlo loop should own its own stream.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def substream(self, k: int) -> "RngStream":
        """Derive the k-th child stream (used for per-worker splits)."""
        return RngStream(self.seed, (self.stream_id << 16) + 1 + int(k))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


# ---------------------------------------------------------------------------
# Error function family
# ---------------------------------------------------------------------------

def erfc(x):
    """Complementary error function (vectorized, relative error < 1e-14)."""
    return sp.erfc(x)


def std_normal_pdf(x):
    """φ(x) = exp(-x²/2)/√(2π)."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def std_normal_cdf(x):
    """Φ(x), defined through erfc for tail accuracy."""
    return 0.5 * sp.erfc(-np.asarray(x, dtype=float) / SQRT2)


def log_std_normal_cdf(x):
    """log Φ(x), stable for x far into the left tail."""
    return sp.log_ndtr(x)


def _log1mexp(a):
    """log(1 - exp(a)) for a <= 0, stable near both ends."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    small = a < -math.log(2.0)
    out[small] = np.log1p(-np.exp(a[small]))
    out[~small] = np.log(-np.expm1(a[~small]))
    return out


def log_normal_cdf_interval(hi, lo):
    """log(Φ(hi) - Φ(lo)) for hi >= lo, stable in both tails.

    When both arguments sit in the right tail the difference is computed
    through the reflected left-tail values Φ(-lo) - Φ(-hi).
    """
    hi = np.asarray(hi, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi_b, lo_b = np.broadcast_arrays(hi, lo)
    out = np.full(hi_b.shape, -np.inf)
    eq = hi_b <= lo_b
    reflect = (hi_b + lo_b) > 0.0
    # left-tail form: logdiffexp(logPhi(hi), logPhi(lo))
    m = ~eq & ~reflect
    if np.any(m):
        la, lb = sp.log_ndtr(hi_b[m]), sp.log_ndtr(lo_b[m])
        out[m] = la + _log1mexp(lb - la)
    m = ~eq & reflect
    if np.any(m):
        la, lb = sp.log_ndtr(-lo_b[m]), sp.log_ndtr(-hi_b[m])
        out[m] = la + _log1mexp(lb - la)
    return out


# ---------------------------------------------------------------------------
# Double factorials and the radial CDF
# ---------------------------------------------------------------------------

def double_factorial(k: int) -> float:
    """k!! computed iteratively in floating point ((-1)!! = 0!! = 1)."""
    if k < -1:
        raise ValueError(f"double factorial undefined for k={k}")
    out = 1.0
    while k > 1:
        out *= k
        k -= 2
    return out


def log_double_factorial(k: int) -> float:
    """log(k!!) via the Γ identity (2n-1)!! = 2ⁿ Γ(n+1/2)/√π."""
    if k < -1:
        raise ValueError(f"double factorial undefined for k={k}")
    if k <= 0:
        return 0.0
    if k % 2 == 1:  # k = 2n-1
        n = (k + 1) // 2
        return n * math.log(2.0) + math.lgamma(n + 0.5) - 0.5 * math.log(math.pi)
    n = k // 2  # k = 2n, (2n)!! = 2^n n!
    return n * math.log(2.0) + math.lgamma(n + 1.0)


def log_radial_cdf(z, dim: int):
    """log Φ̃(z) for the D-dimensional radial upper-tail integral.

    Even D uses the finite double-factorial series; odd D adds the erfc
    tail term, evaluated through the scaled erfcx so the whole expression
    is a log-sum-exp of finite terms.  Vectorized over z.
    """
    dim = int(dim)
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0.0):
        raise ValueError("radial CDF requires z > 0")
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    logz = np.log(z)
    log_dfact_num = log_double_factorial(dim - 2)
    terms = []
    if dim % 2 == 0:
        # e^{-z²/2} (2π)^{-D/2} Σ_{k=0}^{D/2-1} (D-2)!!/(2k)!! z^{2k+1-D}
        for k in range(dim // 2):
            c = log_dfact_num - log_double_factorial(2 * k)
            terms.append(c + (2 * k + 1 - dim) * logz)
        stack = np.stack(terms, axis=0)
        body = sp.logsumexp(stack, axis=0)
        out = body - 0.5 * z * z - 0.5 * dim * LOG_2PI
    else:
        # series part k = 1..(D-1)/2 plus the erfc tail
        for k in range(1, (dim - 1) // 2 + 1):
            c = log_dfact_num - log_double_factorial(2 * k - 1)
            terms.append(c - 0.5 * z * z + (2 * k - dim) * logz)
        # (D-2)!! sqrt(pi/2) erfc(z/sqrt2) / ((2pi)^{D/2} z^{D-1}),
        # erfc(x) = erfcx(x) e^{-x²}
        tail = (log_dfact_num + 0.5 * math.log(math.pi / 2.0)
                + np.log(sp.erfcx(z / SQRT2)) - 0.5 * z * z
                - (dim - 1) * logz)
        terms.append(tail)
        stack = np.stack(terms, axis=0)
        out = sp.logsumexp(stack, axis=0) - 0.5 * dim * LOG_2PI
    return out[0] if scalar else out


def radial_cdf(z, dim: int):
    """Φ̃(z) = z^{1-D}(2π)^{-D/2} ∫_z^∞ t^{D-1} e^{-t²/2} dt, closed form."""
    return np.exp(log_radial_cdf(z, dim))


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FiniteDiffConfig:
    """Central-difference settings; step_h is on unit-scaled inputs."""
    step_h: float = 1e-5
    scheme: str = "central"

    def __post_init__(self):
        if not self.step_h > 0:
            raise ValueError(f"step_h must be positive, got {self.step_h}")
        if self.scheme != "central":
            raise ValueError(f"unsupported scheme {self.scheme!r}")


def central_diff(f: Callable[[float], float], x: float,
                 cfg: FiniteDiffConfig = FiniteDiffConfig()) -> float:
    """(f(x+h) - f(x-h)) / 2h."""
    h = cfg.step_h
    return (f(x + h) - f(x - h)) / (2.0 * h)


def finite_diff_grad(f: Callable[[np.ndarray], float], point: np.ndarray,
                     cfg: FiniteDiffConfig = FiniteDiffConfig()) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    point = np.asarray(point, dtype=float)
    h = cfg.step_h
    grad = np.zeros_like(point)
    for i in range(point.size):
        zp = point.copy(); zp[i] += h
        zm = point.copy(); zm[i] -= h
        grad[i] = (f(zp) - f(zm)) / (2.0 * h)
    return grad


def finite_diff_divergence(field: Callable[[np.ndarray], np.ndarray],
                           point: np.ndarray,
                           cfg: FiniteDiffConfig = FiniteDiffConfig()) -> float:
    """Central-difference estimate of ∇·field at point, O(h²)."""
    point = np.asarray(point, dtype=float)
    h = cfg.step_h
    div = 0.0
    for i in range(point.size):
        zp = point.copy(); zp[i] += h
        zm = point.copy(); zm[i] -= h
        div += (field(zp)[i] - field(zm)[i]) / (2.0 * h)
    return div


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    """Moment estimates and hyperparameters for one parameter vector."""
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @staticmethod
    def init(n_params: int, learning_rate: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        if not learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("beta1, beta2 must lie in (0, 1)")
        return AdamState(np.zeros(n_params), np.zeros(n_params), 0,
                         learning_rate, beta1, beta2, epsilon)


def adam_step(state: AdamState, params: np.ndarray,
              grad: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam descent step; returns (new state, new params)."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape or params.shape != state.first_moment.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.learning_rate, state.beta1,
                          state.beta2, state.epsilon)
    return new_state, new_params


def sgd_step(params: np.ndarray, grad: np.ndarray, step_size: float) -> np.ndarray:
    """Plain gradient-descent step (Algorithm-style replication path)."""
    return np.asarray(params, dtype=float) - step_size * np.asarray(grad, dtype=float)
