"""Non-homogeneous HMM for multi-site daily rainfall.

The hidden weather type moves according to a Gaussian-kernel transition
driven by exogenous covariates z (one step back):

    p(x' | x, z) ∝ q[x, x'] exp(-0.5 (z - mu[x, x'])' S^{-1} (z - mu[x, x']))

and rainfall at each station is conditionally independent given the
weather type: dry with probability 1 - pi, otherwise Gamma(alpha, rate
beta).  Observation rows are ``[z_1..z_m, r_1..r_l]``; the model has
order 1 and the covariates are treated as given (their own law is never
modelled).
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import digamma, gammaln, logsumexp, polygamma

from nhmsar import core
from nhmsar.core import RegimeModel
from nhmsar.errors import (
    IdentifiabilityWarning,
    InvalidParams,
    NewtonDiverged,
    NoWetData,
    ShapeMismatch,
    SingularSigma,
)


def _frozen(a, ndim):
    arr = np.array(a, dtype=float, ndmin=ndim)
    arr.setflags(write=False)
    return arr


def _cholesky(sigma_mat):
    try:
        return np.linalg.cholesky(sigma_mat)
    except np.linalg.LinAlgError as exc:
        raise SingularSigma("covariance matrix is not positive definite") from exc


@dataclass(frozen=True, eq=False)
class RainfallNhmmParams:
    """Parameters with shapes q (M, M), mu (M, M, m), sigma_mat (m, m) and
    pi_rain / alpha / beta_gamma (M, l)."""

    q: np.ndarray
    mu: np.ndarray
    sigma_mat: np.ndarray
    pi_rain: np.ndarray
    alpha: np.ndarray
    beta_gamma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _frozen(self.q, 2))
        object.__setattr__(self, "mu", _frozen(self.mu, 3))
        object.__setattr__(self, "sigma_mat", _frozen(self.sigma_mat, 2))
        for name in ("pi_rain", "alpha", "beta_gamma"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2))
        self.validate()

    @property
    def num_regimes(self) -> int:
        return self.q.shape[0]

    @property
    def num_stations(self) -> int:
        return self.pi_rain.shape[1]

    @property
    def covariate_dim(self) -> int:
        return self.sigma_mat.shape[0]

    def validate(self, tol: float = 1e-12) -> None:
        M, m = self.q.shape[0], self.sigma_mat.shape[0]
        if self.q.shape != (M, M) or self.mu.shape != (M, M, m):
            raise InvalidParams("q must be (M, M) and mu (M, M, m)")
        l = self.pi_rain.shape[1]
        for name in ("pi_rain", "alpha", "beta_gamma"):
            if getattr(self, name).shape != (M, l):
                raise InvalidParams(f"{name} must have shape ({M}, {l})")
        if not (np.all(self.q > 0) and np.all(self.q < 1) or M == 1):
            raise InvalidParams("q entries must lie in (0, 1)")
        if np.abs(self.q.sum(axis=1) - 1).max() > tol:
            raise InvalidParams("rows of q must sum to 1")
        if np.abs(self.mu.sum(axis=1)).max() > 1e3 * tol * max(1.0, np.abs(self.mu).max()):
            raise InvalidParams("rows of mu must sum to the zero vector")
        if not (np.all(self.pi_rain > 0) and np.all(self.pi_rain < 1)):
            raise InvalidParams("wet-day probabilities must lie in (0, 1)")
        if not (np.all(self.alpha > 0) and np.all(self.beta_gamma > 0)):
            raise InvalidParams("Gamma shape and rate must be positive")
        if not np.allclose(self.sigma_mat, self.sigma_mat.T):
            raise SingularSigma("covariance matrix must be symmetric")
        _cholesky(self.sigma_mat)

    def replace(self, **changes) -> RainfallNhmmParams:
        fields = dict(q=self.q, mu=self.mu, sigma_mat=self.sigma_mat, pi_rain=self.pi_rain,
                      alpha=self.alpha, beta_gamma=self.beta_gamma)
        fields.update(changes)
        return RainfallNhmmParams(**fields)

    def permute(self, perm) -> RainfallNhmmParams:
        """New regime j is old regime ``perm[j]``."""
        p = np.asarray(perm, dtype=int)
        return self.replace(q=self.q[np.ix_(p, p)], mu=self.mu[np.ix_(p, p)],
                            pi_rain=self.pi_rain[p], alpha=self.alpha[p],
                            beta_gamma=self.beta_gamma[p])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.q.ravel(), self.mu.ravel(), self.pi_rain.ravel(),
                               self.alpha.ravel(), self.beta_gamma.ravel()])

    def vector_names(self) -> list[str]:
        M, m, l = self.num_regimes, self.covariate_dim, self.num_stations
        names = [f"q[{i},{j}]" for i in range(M) for j in range(M)]
        names += [f"mu[{i},{j},{c}]" for i in range(M) for j in range(M) for c in range(m)]
        for name in ("pi_rain", "alpha", "beta_gamma"):
            names += [f"{name}[{x},{i}]" for x in range(M) for i in range(l)]
        return names

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("q", "mu", "sigma_mat", "pi_rain", "alpha", "beta_gamma")}

    @classmethod
    def from_dict(cls, d: dict) -> RainfallNhmmParams:
        return cls(d["q"], d["mu"], d["sigma_mat"], d["pi_rain"], d["alpha"], d["beta_gamma"])


# --- transition kernel -----------------------------------------------------

def kernel_log_transitions(q, mu, sigma_mat, z) -> np.ndarray:
    """(T, M, M) log transition probabilities for covariates z of shape (T, m)."""
    L = _cholesky(np.asarray(sigma_mat, float))
    z = np.atleast_2d(np.asarray(z, float))
    diff = z[:, None, None, :] - np.asarray(mu)[None]
    T, M = z.shape[0], q.shape[0]
    w = solve_triangular(L, diff.reshape(-1, z.shape[1]).T, lower=True)
    quad = (w ** 2).sum(axis=0).reshape(T, M, M)
    with np.errstate(divide="ignore"):
        score = np.log(q)[None] - 0.5 * quad
    return score - logsumexp(score, axis=2, keepdims=True)


def kernel_transition_prob(params: RainfallNhmmParams, x_next: int, x_prev: int, z_prev) -> float:
    z_prev = np.asarray(z_prev, float)
    if z_prev.shape != (params.covariate_dim,):
        raise ShapeMismatch(f"covariate must have dimension {params.covariate_dim}")
    lt = kernel_log_transitions(params.q, params.mu, params.sigma_mat, z_prev[None])
    return float(np.exp(lt[0, x_prev, x_next]))


def recenter_kernel(q, mu, sigma_mat, shift=None):
    """Shift every ``mu[x, :]`` by a vector and compensate ``q``.

    Probabilities are unchanged.  With ``shift=None`` the shift is the row
    mean, which yields rows of ``mu`` summing to zero.
    """
    q = np.asarray(q, float)
    mu = np.asarray(mu, float)
    M = q.shape[0]
    c = mu.mean(axis=1) if shift is None else np.broadcast_to(shift, (M, mu.shape[2]))
    prec = np.linalg.inv(sigma_mat)
    # exponent gains +mu[x, x']' S^-1 c[x] after the shift; remove it through q
    log_q = np.log(q) - np.einsum("xyi,ij,xj->xy", mu, prec, c)
    log_q -= logsumexp(log_q, axis=1, keepdims=True)
    return np.exp(log_q), mu - c[:, None, :]


# --- emissions -------------------------------------------------------------

def station_logpdf(r, pi, alpha, beta):
    """Bernoulli-Gamma log-density w.r.t. (point mass at 0) + Lebesgue."""
    r = np.asarray(r, float)
    wet = r > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.log(np.where(wet, r, 1.0))
        gam = np.log(pi) + (alpha - 1) * lr + alpha * np.log(beta) - beta * r - gammaln(alpha)
    return np.where(wet, gam, np.log1p(-pi))


def emission_logpdf(params: RainfallNhmmParams, r, x: int) -> float:
    r = np.asarray(r, float)
    if r.shape != (params.num_stations,):
        raise ShapeMismatch(f"need {params.num_stations} rainfall values")
    if np.any(r < 0):
        raise InvalidParams("rainfall must be non-negative")
    return float(station_logpdf(r, params.pi_rain[x], params.alpha[x], params.beta_gamma[x]).sum())


class RainfallNhmmModel(RegimeModel):
    order = 1

    def __init__(self, params: RainfallNhmmParams):
        self.params = params
        self.num_regimes = params.num_regimes
        self._m = params.covariate_dim

    def transition_logpdf(self, x_next, x_prev, window):
        z = np.asarray(window[-1][:self._m], float)
        return math.log(kernel_transition_prob(self.params, x_next, x_prev, z))

    def emission_logpdf(self, y, x, window):
        return emission_logpdf(self.params, np.asarray(y)[self._m:], x)

    def transition_bounds(self):
        # covariates are unbounded in general; only attained bounds are meaningful
        return 0.0, 1.0

    def log_transition_tensor(self, y_full):
        y_full = np.asarray(y_full, float)
        p = self.params
        return kernel_log_transitions(p.q, p.mu, p.sigma_mat, y_full[:-1, :self._m])

    def log_emission_matrix(self, y_full):
        p = self.params
        r = np.asarray(y_full, float)[1:, self._m:]
        if np.any(r < 0):
            raise InvalidParams("rainfall must be non-negative")
        out = station_logpdf(r[:, None, :], p.pi_rain[None], p.alpha[None], p.beta_gamma[None])
        return out.sum(axis=2)


def simulate_rainfall(params: RainfallNhmmParams, z, x0: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Regimes and rainfall for steps 1..T given covariates z[0..T].

    ``z`` has T + 1 rows; row k - 1 drives the transition into step k.
    """
    rng = np.random.default_rng(seed)
    z = np.atleast_2d(np.asarray(z, float))
    lt = np.exp(kernel_log_transitions(params.q, params.mu, params.sigma_mat, z[:-1]))
    T, M, l = len(z) - 1, params.num_regimes, params.num_stations
    xs = np.empty(T, dtype=int)
    r = np.zeros((T, l))
    x = x0
    for k in range(T):
        x = int(rng.choice(M, p=lt[k, x] / lt[k, x].sum()))
        xs[k] = x
        wet = rng.random(l) < params.pi_rain[x]
        amount = rng.gamma(params.alpha[x], 1.0 / params.beta_gamma[x])
        r[k] = np.where(wet, amount, 0.0)
    return xs, r


# --- M-steps ---------------------------------------------------------------

@dataclass(frozen=True)
class GammaFit:
    pi: float
    alpha: float | None
    beta: float | None
    iterations: int


def weighted_gamma_loglik(alpha, beta, weights, r) -> float:
    """Weighted Gamma log-likelihood over the wet observations."""
    r = np.asarray(r, float)
    wet = r > 0
    w, x = np.asarray(weights, float)[wet], r[wet]
    return float(w @ ((alpha - 1) * np.log(x) + alpha * np.log(beta) - beta * x - gammaln(alpha)))


def m_step_gamma(weights, r, max_iter: int = 100, tol: float = 1e-12) -> GammaFit:
    """Weighted Bernoulli-Gamma MLE for one station and one regime.

    The shape solves log(a) - digamma(a) = log(mean) - mean(log r) by Newton
    iteration from Minka's closed-form start; the rate is a / mean.  Raises
    ``NoWetData`` when no wet day carries weight.
    """
    w = np.asarray(weights, float)
    r = np.asarray(r, float)
    total = w.sum()
    if not total > 0:
        raise ValueError("weights must have positive mass")
    wet = r > 0
    ww = w[wet]
    pi = float(ww.sum() / total)
    if not ww.sum() > 0:
        raise NoWetData("no weighted wet observations")
    x = r[wet]
    W = ww.sum()
    mean = float(ww @ x / W)
    mlog = float(ww @ np.log(x) / W)
    delta = math.log(mean) - mlog
    if not delta > 1e-14:
        raise NewtonDiverged("degenerate wet amounts: shape estimate is unbounded")
    a = (3.0 - delta + math.sqrt((delta - 3.0) ** 2 + 24.0 * delta)) / (12.0 * delta)
    for it in range(1, max_iter + 1):
        f = math.log(a) - float(digamma(a)) - delta
        fp = 1.0 / a - float(polygamma(1, a))
        step = f / fp
        a_new = a - step
        while a_new <= 0:
            step *= 0.5
            a_new = a - step
        if abs(a_new - a) <= tol * a:
            a = a_new
            return GammaFit(pi, a, a / mean, it)
        a = a_new
    raise NewtonDiverged(f"shape equation did not converge in {max_iter} iterations")


def _row_unpack(v, M, m, fix_mu):
    logits = np.concatenate([[0.0], v[:M - 1]])
    if fix_mu:
        mu = np.zeros((M, m))
    else:
        free = v[M - 1:].reshape(M - 1, m)
        mu = np.vstack([free, -free.sum(axis=0)])
    return logits, mu


def kernel_row_q(logits, mu, prec, xi_row, z) -> float:
    """Transition Q-term of one origin regime; ``xi_row`` is (T, M)."""
    diff = z[:, None, :] - mu[None]
    score = logits[None] - 0.5 * np.einsum("tai,ij,taj->ta", diff, prec, diff)
    logp = score - logsumexp(score, axis=1, keepdims=True)
    return float((xi_row * logp).sum())


def kernel_row_grad(logits, mu, prec, xi_row, z) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`kernel_row_q` in the logits and in every mu vector."""
    diff = z[:, None, :] - mu[None]
    score = logits[None] - 0.5 * np.einsum("tai,ij,taj->ta", diff, prec, diff)
    p = np.exp(score - logsumexp(score, axis=1, keepdims=True))
    resid = xi_row - xi_row.sum(axis=1, keepdims=True) * p
    g_logits = resid.sum(axis=0)
    g_mu = np.einsum("ta,tai,ij->aj", resid, diff, prec)
    return g_logits, g_mu


def kernel_free_q_and_grad(v, M, m, prec, xi_row, z, fix_mu=False):
    """Q-term and gradient in the free coordinates used by the optimizer.

    Free coordinates: logits of regimes 1..M-1 (regime 0 pinned at 0) and,
    unless ``fix_mu``, the mu vectors of regimes 0..M-2 (the last one is
    minus their sum).
    """
    logits, mu = _row_unpack(v, M, m, fix_mu)
    q = kernel_row_q(logits, mu, prec, xi_row, z)
    g_l, g_mu = kernel_row_grad(logits, mu, prec, xi_row, z)
    g = [g_l[1:]]
    if not fix_mu:
        g.append((g_mu[:-1] - g_mu[-1]).ravel())
    return q, np.concatenate(g)


@dataclass(frozen=True)
class KernelFit:
    q: np.ndarray
    mu: np.ndarray
    q_value: float
    improved: bool


def m_step_kernel(pair_weights, z, sigma_mat, q_prev, mu_prev, fix_mu: bool = False,
                  n_perturb: int = 1, rng=None) -> KernelFit:
    """Maximize the kernel transition Q-term row by row.

    ``pair_weights[t, x, x']`` is the posterior of the transition driven by
    ``z[t]``.  Each row is optimized by L-BFGS over the free coordinates of
    :func:`kernel_free_q_and_grad` from the previous iterate and
    ``n_perturb`` perturbations.  Rows that do not improve keep their
    previous values.
    """
    rng = np.random.default_rng(rng)
    pair_weights = np.asarray(pair_weights, float)
    z = np.atleast_2d(np.asarray(z, float))
    M, m = q_prev.shape[0], z.shape[1]
    prec = np.linalg.inv(sigma_mat)
    q_out = np.array(q_prev, float)
    mu_out = np.array(mu_prev, float) if not fix_mu else np.zeros((M, M, m))
    total_q = 0.0
    any_improved = False
    for x in range(M):
        xi_row = pair_weights[:, x, :]
        mass = xi_row.sum()
        if mass <= 0:
            continue
        qp, mp = recenter_kernel(q_prev, mu_prev, sigma_mat)
        logits0 = np.log(qp[x]) - math.log(qp[x, 0])
        v0 = logits0[1:]
        if not fix_mu:
            v0 = np.concatenate([v0, mp[x, :-1].ravel()])
        prev_val = kernel_free_q_and_grad(v0, M, m, prec, xi_row, z, fix_mu)[0]

        def objective(v):
            val, g = kernel_free_q_and_grad(v, M, m, prec, xi_row, z, fix_mu)
            return -val / mass, -g / mass

        starts = [v0]
        # homogeneous closed form for the logits
        freq = np.clip(xi_row.sum(axis=0) / mass, 1e-12, None)
        hom = np.log(freq) - math.log(freq[0])
        starts.append(np.concatenate([hom[1:], v0[M - 1:]]))
        for _ in range(n_perturb):
            starts.append(v0 + rng.normal(scale=0.3, size=v0.shape))
        best_val, best_v = prev_val, None
        for st in starts:
            res = minimize(objective, st, jac=True, method="L-BFGS-B",
                           options={"ftol": 1e-15, "gtol": 1e-11, "maxiter": 5000})
            val = -res.fun * mass
            if np.isfinite(val) and val > best_val:
                best_val, best_v = val, res.x
        total_q += best_val
        if best_v is None:
            continue
        any_improved = True
        logits, mu_row = _row_unpack(best_v, M, m, fix_mu)
        q_out[x] = np.exp(logits - logsumexp(logits))
        mu_out[x] = mu_row
    if not fix_mu:
        q_out, mu_out = recenter_kernel(q_out, mu_out, sigma_mat)
    return KernelFit(q_out, mu_out, total_q, any_improved)


# --- identifiability -------------------------------------------------------

def build_counterexample_pair() -> tuple[RainfallNhmmParams, RainfallNhmmParams]:
    """Two parameter sets with identical stationary rainfall laws.

    Two weather types, two stations, one covariate, mu = 0.  Both have the
    same Gamma(1, rate) blocks; they differ in q and in the wet-day
    probabilities of station 2.
    """
    mu = np.zeros((2, 2, 1))
    sig = np.eye(1)
    alpha = np.ones((2, 2))
    beta = np.array([[1.0, 2.0], [1.0, 3.0]])
    a1 = RainfallNhmmParams(np.full((2, 2), 0.5), mu, sig, np.full((2, 2), 0.5), alpha, beta)
    a2 = RainfallNhmmParams(
        np.array([[0.6, 0.4], [0.6, 0.4]]), mu, sig,
        np.array([[0.5, 0.25 / 0.6], [0.5, 0.25 / 0.4]]), alpha, beta,
    )
    return a1, a2


def stationary_law(P, tol: float = 1e-14, max_iter: int = 100000) -> np.ndarray:
    """Left fixed vector of a stochastic matrix by power iteration."""
    P = np.asarray(P, float)
    v = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(max_iter):
        nxt = v @ P
        nxt /= nxt.sum()
        if np.abs(nxt - v).max() < tol:
            return nxt
        v = nxt
    return v


def stationary_loglik(params: RainfallNhmmParams, r) -> float:
    """Log-likelihood of a rainfall record with X_1 drawn from the stationary law.

    Only defined for a homogeneous chain (mu = 0), where covariates play no
    role.
    """
    if np.abs(params.mu).max() > 0:
        raise InvalidParams("stationary likelihood needs mu = 0")
    r = np.atleast_2d(np.asarray(r, float))
    T, M = len(r), params.num_regimes
    log_emit = station_logpdf(r[:, None, :], params.pi_rain[None], params.alpha[None],
                              params.beta_gamma[None]).sum(axis=2)
    pi0 = stationary_law(params.q)
    log_trans = np.broadcast_to(np.log(params.q), (T, M, M)).copy()
    # X_1 ~ pi0: start one step earlier from pi0, one transition keeps it at pi0
    _, c = core.filter_densities(np.log(pi0), log_trans, np.ascontiguousarray(log_emit))
    return float(c.sum())


def emission_key(params: RainfallNhmmParams) -> np.ndarray:
    """(M, 3l) blocks (alpha_i, beta_i, pi_i) concatenated over stations."""
    return np.stack([params.alpha, params.beta_gamma, params.pi_rain], axis=2).reshape(
        params.num_regimes, -1)


def emission_blocks_distinct(params: RainfallNhmmParams, tol: float = 0.0) -> bool:
    """Whether (alpha_i, beta_i) differ between every pair of regimes at every station."""
    ab = np.stack([params.alpha, params.beta_gamma], axis=2)
    for x, y in itertools.combinations(range(params.num_regimes), 2):
        if np.any(np.abs(ab[x] - ab[y]).max(axis=1) <= tol):
            return False
    return True


def canonicalize_rainfall(params: RainfallNhmmParams, warn: bool = True
                          ) -> tuple[RainfallNhmmParams, np.ndarray]:
    """Sort regimes lexicographically by their emission block."""
    key = emission_key(params)
    if warn and not emission_blocks_distinct(params):
        warnings.warn("some station has equal Gamma parameters in two regimes; "
                      "the parameters may not be identifiable", IdentifiabilityWarning,
                      stacklevel=2)
    perm = np.lexsort(key.T[::-1])
    return params.permute(perm), perm


def rainfall_distance(a: RainfallNhmmParams, b: RainfallNhmmParams) -> float:
    va = a.to_vector()
    return min(float(np.abs(va - b.permute(p).to_vector()).max())
               for p in itertools.permutations(range(a.num_regimes)))
