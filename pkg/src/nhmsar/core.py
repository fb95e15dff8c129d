"""Generic finite-regime switching engine.

A concrete model supplies the transition density p1(x_k | x_{k-1}, window)
and the emission density p2(y_k | x_k, window), where ``window`` is the
block of the ``order`` observations preceding y_k (oldest first).  This
module turns them into filtered and smoothed regime probabilities, the
conditional log-likelihood given (X_0, first ``order`` observations),
simulated paths and the filter-forgetting diagnostic.

Regimes are 0-based integers throughout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from nhmsar import _kernels
from nhmsar.errors import DegenerateFilter, DimensionMismatch, NonFiniteDensity, TooLarge

BRUTE_FORCE_LIMIT = 10**6


class RegimeModel:
    """Contract fulfilled by every concrete switching model.

    Subclasses set ``num_regimes`` and ``order`` and implement the two scalar
    log-densities.  The vectorized hooks default to looping over the scalar
    ones; concrete models override them with array code.
    """

    num_regimes: int
    order: int

    def transition_logpdf(self, x_next: int, x_prev: int, window: np.ndarray) -> float:
        raise NotImplementedError

    def emission_logpdf(self, y, x: int, window: np.ndarray) -> float:
        raise NotImplementedError

    def transition_bounds(self) -> tuple[float, float]:
        """Uniform bounds (p1_minus, p1_plus) on the transition density."""
        raise NotImplementedError

    def log_transition_tensor(self, y_full: np.ndarray) -> np.ndarray:
        """``(T, M, M)`` log transitions; step t uses ``y_full[t:t+order]``."""
        s, M = self.order, self.num_regimes
        T = len(y_full) - s
        out = np.empty((T, M, M))
        for t in range(T):
            w = y_full[t:t + s]
            for i in range(M):
                for j in range(M):
                    out[t, i, j] = self.transition_logpdf(j, i, w)
        return out

    def log_emission_matrix(self, y_full: np.ndarray) -> np.ndarray:
        """``(T, M)`` log emissions of ``y_full[s:]``."""
        s, M = self.order, self.num_regimes
        T = len(y_full) - s
        out = np.empty((T, M))
        for t in range(T):
            w = y_full[t:t + s]
            for j in range(M):
                out[t, j] = self.emission_logpdf(y_full[t + s], j, w)
        return out


@dataclass(frozen=True)
class FilterResult:
    filtered: np.ndarray
    log_normalizers: np.ndarray
    log_likelihood: float


@dataclass(frozen=True)
class SmoothResult:
    gamma: np.ndarray
    xi: np.ndarray


@dataclass(frozen=True)
class ForgettingResult:
    distances: np.ndarray
    bound: np.ndarray
    rho: float


def stack_data(y_init, y) -> np.ndarray:
    y_init = np.asarray(y_init, dtype=float)
    y = np.asarray(y, dtype=float)
    if y_init.ndim != y.ndim or y_init.shape[1:] != y.shape[1:]:
        raise DimensionMismatch("y_init and y must hold observations of the same shape")
    return np.concatenate([y_init, y], axis=0)


def _check_inputs(model: RegimeModel, y_init, y) -> np.ndarray:
    if len(y_init) != model.order:
        raise DimensionMismatch(
            f"y_init has length {len(y_init)}, model order is {model.order}"
        )
    if len(y) < 1:
        raise DimensionMismatch("need at least one observation after the window")
    return stack_data(y_init, y)


def _densities(model: RegimeModel, y_full: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    log_trans = np.ascontiguousarray(model.log_transition_tensor(y_full), dtype=float)
    log_emit = np.ascontiguousarray(model.log_emission_matrix(y_full), dtype=float)
    for name, arr in (("transition", log_trans), ("emission", log_emit)):
        if np.isnan(arr).any() or np.isposinf(arr).any():
            raise NonFiniteDensity(f"{name} log-density is NaN or +inf")
    return log_trans, log_emit


def _point_mass(M: int, x0: int) -> np.ndarray:
    if not 0 <= x0 < M:
        raise ValueError(f"initial regime {x0} outside 0..{M - 1}")
    v = np.full(M, -np.inf)
    v[x0] = 0.0
    return v


def filter_densities(log_init, log_trans, log_emit) -> tuple[np.ndarray, np.ndarray]:
    """Run the compiled forward pass on precomputed densities.

    ``log_init`` is the log-distribution of X_0.  Returns the log filtered
    probabilities and the log normalizers; raises ``DegenerateFilter`` when
    some observation has zero density under every reachable regime.
    """
    log_filt, c = _kernels.forward(
        np.asarray(log_init, dtype=float), log_trans, log_emit
    )
    bad = np.flatnonzero(~np.isfinite(c))
    if bad.size:
        raise DegenerateFilter(f"zero predictive density at step {bad[0] + 1}")
    return log_filt, c


def forward_filter(model: RegimeModel, x0: int, y_init, y) -> FilterResult:
    """Scaled log-space forward algorithm conditional on X_0 = x0.

    The ``order`` values in ``y_init`` only condition the first steps; they
    contribute no emission term.
    """
    y_full = _check_inputs(model, y_init, y)
    log_trans, log_emit = _densities(model, y_full)
    log_filt, c = filter_densities(_point_mass(model.num_regimes, x0), log_trans, log_emit)
    return FilterResult(np.exp(log_filt), c, float(c.sum()))


def backward_smooth(model: RegimeModel, filt: FilterResult, x0: int, y_init, y) -> SmoothResult:
    """Marginal and pairwise posteriors given the whole record.

    ``xi[k]`` is the joint posterior of the regimes at observations k and
    k+1; the pair (X_0, X_1) is recovered with :func:`pairwise_with_start`.
    """
    y_full = _check_inputs(model, y_init, y)
    log_trans, log_emit = _densities(model, y_full)
    with np.errstate(divide="ignore"):
        log_filt = np.log(filt.filtered)
    gamma, xi = _kernels.backward(log_filt, filt.log_normalizers, log_trans, log_emit)
    return SmoothResult(gamma, xi)


def smooth(model: RegimeModel, x0: int, y_init, y) -> tuple[FilterResult, SmoothResult]:
    """Forward filter and backward smoother sharing one density evaluation."""
    y_full = _check_inputs(model, y_init, y)
    log_trans, log_emit = _densities(model, y_full)
    log_filt, c = filter_densities(_point_mass(model.num_regimes, x0), log_trans, log_emit)
    gamma, xi = _kernels.backward(log_filt, c, log_trans, log_emit)
    return FilterResult(np.exp(log_filt), c, float(c.sum())), SmoothResult(gamma, xi)


def pairwise_with_start(sm: SmoothResult, x0: int) -> np.ndarray:
    """``(T, M, M)`` pair posteriors including the known start X_0 = x0."""
    M = sm.gamma.shape[1]
    first = np.zeros((1, M, M))
    first[0, x0] = sm.gamma[0]
    return np.concatenate([first, sm.xi], axis=0)


def brute_force_loglik(model: RegimeModel, x0: int, y_init, y) -> float:
    """Exact log-likelihood by summing over every regime path.

    Uses only the scalar log-densities of ``model`` so it stays independent
    of the vectorized route taken by :func:`forward_filter`.
    """
    y_full = _check_inputs(model, y_init, y)
    M, s = model.num_regimes, model.order
    T = len(y_full) - s
    if M ** T > BRUTE_FORCE_LIMIT:
        raise TooLarge(f"{M}^{T} paths exceed the limit of {BRUTE_FORCE_LIMIT}")
    lt = np.empty((T, M, M))
    le = np.empty((T, M))
    for t in range(T):
        w = y_full[t:t + s]
        for j in range(M):
            le[t, j] = model.emission_logpdf(y_full[t + s], j, w)
            for i in range(M):
                lt[t, i, j] = model.transition_logpdf(j, i, w)
    terms = []
    for path in itertools.product(range(M), repeat=T):
        prev, acc = x0, 0.0
        for t, x in enumerate(path):
            acc += lt[t, prev, x] + le[t, x]
            prev = x
        terms.append(acc)
    return float(logsumexp(terms))


def simulate(model, x0: int, y_init, T: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw (regimes, observations) of length ``T`` from the joint law.

    ``model`` must also provide ``sample_transition(x_prev, window, rng)``
    and ``sample_emission(x, window, rng)``.
    """
    rng = np.random.default_rng(seed)
    s = model.order
    y_init = np.asarray(y_init, dtype=float)
    if len(y_init) != s:
        raise DimensionMismatch(f"y_init has length {len(y_init)}, model order is {s}")
    ys = list(y_init)
    xs = np.empty(T, dtype=int)
    x = x0
    for k in range(T):
        window = np.asarray(ys[-s:])
        x = model.sample_transition(x, window, rng)
        xs[k] = x
        ys.append(model.sample_emission(x, window, rng))
    return xs, np.asarray(ys[s:])


def attained_bounds(model: RegimeModel, y_init, y) -> tuple[float, float]:
    """Min and max transition probability over the observed windows."""
    y_full = _check_inputs(model, y_init, y)
    p = np.exp(model.log_transition_tensor(y_full))
    return float(p.min()), float(p.max())


def filter_forgetting(model: RegimeModel, y_init, y, x0a: int, x0b: int,
                      bounds: str = "attained") -> ForgettingResult:
    """Total-variation gap between filters started from two regimes.

    ``bounds="attained"`` takes p1_minus/p1_plus over the observed windows,
    ``"uniform"`` uses ``model.transition_bounds()``.
    """
    fa = forward_filter(model, x0a, y_init, y).filtered
    fb = forward_filter(model, x0b, y_init, y).filtered
    d = 0.5 * np.abs(fa - fb).sum(axis=1)
    if bounds == "attained":
        lo, hi = attained_bounds(model, y_init, y)
    elif bounds == "uniform":
        lo, hi = model.transition_bounds()
    else:
        raise ValueError(f"unknown bounds mode {bounds!r}")
    rho = 1.0 - lo / hi
    k = np.arange(1, len(d) + 1)
    return ForgettingResult(d, rho ** k, rho)
