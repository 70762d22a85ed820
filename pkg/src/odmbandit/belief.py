"""Beta-Bernoulli posterior over the base-arm parameters.

Each base arm ``(i, j)`` (test ``i`` while the correct decision is ``j``)
carries an independent ``Beta(alpha_ij, beta_ij)`` belief over the
probability that test ``i`` comes out positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import special

#: Quantile levels used when ``1/t`` would give a degenerate or inverted interval.
EARLY_LEVELS = (0.25, 0.75)

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAXITER = 20000


class NumericalError(ArithmeticError):
    """Raised when an iterative special-function evaluation fails to converge."""


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for I_x(a, b)
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for k in range(1, _CF_MAXITER + 1):
        k2 = 2 * k
        aa = k * (b - k) * x / ((qam + k2) * (a + k2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + k) * (qab + k) * x / ((a + k2) * (qap + k2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise NumericalError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _stirling_delta(z: float) -> float:
    # lgamma(z) - [(z - 1/2) log z - z + log(2 pi) / 2]
    if z >= 10.0:
        r = 1.0 / (z * z)
        return (1.0 / 12 - r * (1.0 / 360 - r * (1.0 / 1260 - r * (1.0 / 1680 - r / 1188)))) / z
    return math.lgamma(z) - (z - 0.5) * math.log(z) + z - _HALF_LOG_2PI


def _log_ratio(num: float, den: float, diff: float) -> float:
    # log(num / den) given diff = num - den
    r = diff / den
    if -0.5 < r < 1.0:
        return math.log1p(r)
    return math.log(num) - math.log(den)


def _log_beta_prefix(a: float, b: float, x: float) -> float:
    """``log(x^a (1 - x)^b / B(a, b))``.

    Written around the mode ``x0 = a / (a + b)`` so that large ``a`` and ``b``
    do not lose digits to cancelling log-gamma values.
    """
    s = a + b
    if a <= b:
        y0 = b / s
        x0 = 1.0 - y0
    else:
        x0 = a / s
        y0 = 1.0 - x0
    d = x - x0
    core = a * _log_ratio(x, x0, d) + b * _log_ratio(1.0 - x, y0, -d)
    return (
        core + 0.5 * (math.log(a) + math.log(b) - math.log(s)) - _HALF_LOG_2PI
        + _stirling_delta(s) - _stirling_delta(a) - _stirling_delta(b)
    )


def incomplete_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function ``I_x(a, b)``, i.e. the Beta CDF."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(_log_beta_prefix(a, b, x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _beta_logpdf(x: float, a: float, b: float) -> float:
    return _log_beta_prefix(a, b, x) - math.log(x) - math.log1p(-x)


def _midpoint(lo: float, hi: float) -> float:
    # geometric steps while the bracket spans orders of magnitude, so tiny quantiles are reachable
    floor = max(lo, 1e-300)
    if hi > 4.0 * floor:
        return math.sqrt(floor * hi)
    return 0.5 * (lo + hi)


# above this concentration the Beta law is Gaussian far below double resolution of the quantile
NORMAL_REGIME = 1e10


def _normal_quantile(alpha, beta, eta):
    """Skew-corrected (Cornish-Fisher) normal approximation; error is O(sd / (alpha + beta))."""
    s = alpha + beta
    mean = alpha / s
    sd = np.sqrt(alpha * beta / (s * s * (s + 1.0)))
    skew = 2.0 * (beta - alpha) * np.sqrt(s + 1.0) / ((s + 2.0) * np.sqrt(alpha * beta))
    z = special.ndtri(eta)
    return np.clip(mean + sd * (z + skew * (z * z - 1.0) / 6.0), 0.0, 1.0)


def beta_quantile(alpha: float, beta: float, eta: float, *, tol: float = 1e-10, max_iter: int = 200) -> float:
    """Inverse of the regularized incomplete beta function.

    Safeguarded Newton iteration inside a shrinking bisection bracket; every
    rejected Newton step falls back to the bracket midpoint, so the search
    never leaves ``[0, 1]``.

    Raises
    ------
    ValueError
        If an argument is outside its domain.
    NumericalError
        If the bracket has not closed after ``max_iter`` iterations.
    """
    if not (alpha > 0 and beta > 0):
        raise ValueError(f"alpha and beta must be positive, got {alpha}, {beta}")
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if alpha == 1.0 and beta == 1.0:
        return eta
    if alpha + beta > NORMAL_REGIME:
        return float(_normal_quantile(alpha, beta, eta))

    lo, hi = 0.0, 1.0
    f_lo, f_hi = -eta, 1.0 - eta
    # start at the mean; Newton from there converges quickly for the bulk
    x = alpha / (alpha + beta)
    ftol = min(tol, 1e-12)
    for _ in range(max_iter):
        f = incomplete_beta(x, alpha, beta) - eta
        if abs(f) <= ftol:
            return x
        if f < 0.0:
            lo, f_lo = x, f
        else:
            hi, f_hi = x, f
        mid = _midpoint(lo, hi)
        if not lo < mid < hi:
            # no double strictly inside the bracket: return the better end
            return lo if -f_lo <= f_hi else hi
        step_ok = False
        if 0.0 < x < 1.0:
            logpdf = _beta_logpdf(x, alpha, beta)
            if logpdf > -700.0:
                candidate = x - f / math.exp(logpdf)
                step_ok = lo < candidate < hi
        x = candidate if step_ok else mid
    raise NumericalError(f"beta quantile did not converge for ({alpha}, {beta}, {eta})")


def beta_quantiles(alpha, beta, eta) -> np.ndarray:
    """Vectorized Beta quantiles (scipy's incomplete-beta inverse, Gaussian for huge counts)."""
    alpha, beta, eta = np.broadcast_arrays(np.asarray(alpha, float), np.asarray(beta, float), np.asarray(eta, float))
    out = special.betaincinv(alpha, beta, eta)
    huge = alpha + beta > NORMAL_REGIME
    if np.any(huge):
        out = np.where(huge, _normal_quantile(alpha, beta, eta), out)
    return out


@dataclass(frozen=True)
class ParamInterval:
    """Elementwise lower/upper parameter bounds, as handed to the oracles in BayesUCB mode."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise ValueError("lower and upper must have the same shape")
        if np.any(self.lower > self.upper):
            raise ValueError("interval lower bound exceeds upper bound")
        if np.any(self.lower < 0) or np.any(self.upper > 1):
            raise ValueError("interval bounds must lie in [0, 1]")

    @property
    def shape(self):
        return self.lower.shape

    @property
    def is_degenerate(self) -> bool:
        return bool(np.array_equal(self.lower, self.upper))


@dataclass(frozen=True, eq=False)
class BeliefState:
    """Posterior ``Beta(alpha, beta)`` for every base arm, as n x m matrices.

    Instances are treated as values: :func:`update_posterior` returns a new
    state and leaves the old one untouched.
    """

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float)
        beta = np.array(self.beta, dtype=float)
        if alpha.ndim != 2 or alpha.shape != beta.shape:
            raise ValueError(f"alpha and beta must be matching n x m matrices, got {alpha.shape} and {beta.shape}")
        if not (np.all(alpha > 0) and np.all(beta > 0)):
            raise ValueError("all Beta pseudo-counts must be positive")
        alpha.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def _trusted(cls, alpha: np.ndarray, beta: np.ndarray) -> "BeliefState":
        # skip validation for arrays derived from an already valid state by adding counts
        alpha.setflags(write=False)
        beta.setflags(write=False)
        state = object.__new__(cls)
        object.__setattr__(state, "alpha", alpha)
        object.__setattr__(state, "beta", beta)
        return state

    @classmethod
    def from_prior(cls, n: int, m: int, a: float = 2.0, b: float = 2.0) -> "BeliefState":
        return cls(np.full((n, m), float(a)), np.full((n, m), float(b)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape

    @property
    def n_tests(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_decisions(self) -> int:
        return self.alpha.shape[1]

    def mean(self) -> np.ndarray:
        return self.alpha / (self.alpha + self.beta)

    def __eq__(self, other):
        if not isinstance(other, BeliefState):
            return NotImplemented
        return np.array_equal(self.alpha, other.alpha) and np.array_equal(self.beta, other.beta)

    def to_pairs(self) -> list[tuple[float, float]]:
        """Flatten to ``(alpha, beta)`` pairs in row-major (test-major) order."""
        return list(zip(self.alpha.ravel().tolist(), self.beta.ravel().tolist()))

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence[float]], n: int, m: int) -> "BeliefState":
        arr = np.asarray(pairs, dtype=float)
        if arr.shape != (n * m, 2):
            raise ValueError(f"expected {n * m} (alpha, beta) pairs, got array of shape {arr.shape}")
        return cls(arr[:, 0].reshape(n, m), arr[:, 1].reshape(n, m))


def sample_theta(belief: BeliefState, rng: np.random.Generator) -> np.ndarray:
    """Draw one parameter matrix from the posterior (Thompson sampling step)."""
    return rng.beta(belief.alpha, belief.beta)


def map_estimate(belief: BeliefState) -> np.ndarray:
    """Posterior mode, falling back to the posterior mean where the mode sits on the boundary."""
    a, b = belief.alpha, belief.beta
    proper = (a > 1.0) & (b > 1.0)
    mode = np.where(proper, (a - 1.0) / np.where(proper, a + b - 2.0, 1.0), a / (a + b))
    return np.clip(mode, 0.0, 1.0)


def quantile_levels(t: int) -> tuple[float, float]:
    """Lower/upper quantile levels used by BayesUCB at round ``t``.

    Follows ``(1/t, 1 - 1/t)``, widened to :data:`EARLY_LEVELS` for the first
    rounds where the schedule would collapse or invert the interval.
    """
    if t < 1:
        raise ValueError(f"round index must be >= 1, got {t}")
    low = min(1.0 / t, EARLY_LEVELS[0])
    return low, 1.0 - low


def ucb_lcb(belief: BeliefState, t: int) -> ParamInterval:
    low, high = quantile_levels(t)
    lower = beta_quantiles(belief.alpha, belief.beta, low)
    upper = beta_quantiles(belief.alpha, belief.beta, high)
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise NumericalError("non-finite Beta quantile")
    # the two quantiles come from independent inversions; guard against rounding inversions
    upper = np.maximum(upper, lower)
    return ParamInterval(lower=np.clip(lower, 0.0, 1.0), upper=np.clip(upper, 0.0, 1.0))


def update_posterior(
    belief: BeliefState,
    performed: Iterable[int],
    outcomes: Mapping[int, int],
    correct_decision: int,
) -> BeliefState:
    """Conjugate update of the correct-decision column for every performed test."""
    n, m = belief.shape
    if not 0 <= correct_decision < m:
        raise ValueError(f"unknown decision index {correct_decision} (m={m})")
    performed = list(performed)
    if set(performed) != set(outcomes):
        raise ValueError("outcomes must be given for exactly the performed tests")
    if not performed:
        return belief
    alpha = belief.alpha.copy()
    beta = belief.beta.copy()
    for i in performed:
        if not 0 <= i < n:
            raise ValueError(f"unknown test index {i} (n={n})")
        x = outcomes[i]
        if x == 1:
            alpha[i, correct_decision] += 1.0
        elif x == 0:
            beta[i, correct_decision] += 1.0
        else:
            raise ValueError(f"test outcomes must be 0 or 1, got {x!r} for test {i}")
    return BeliefState._trusted(alpha, beta)
