"""Gaussian linear AR regimes with logistic non-homogeneous switching.

In regime x the observation follows

    y_k = beta_0 + beta_1 y_{k-1} + ... + beta_s y_{k-s} + sigma * eps_k

and the probability of staying in regime x is

    pi_minus + (1 - pi_minus - pi_plus) / (1 + exp(lambda0 + lambda1 * y_{k-r})).

With more than two regimes the leave mass is split evenly over the other
regimes.  Setting lambda1 = 0 gives the homogeneous MS-AR model and the
limit lambda1 -> +/-inf with fixed ratio gives a SETAR model.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from nhmsar.core import RegimeModel
from nhmsar.errors import (
    DefectiveBasis,
    InvalidParams,
    ShapeMismatch,
    SingularDesign,
)

LOG_2PI = math.log(2.0 * math.pi)
PI_MACHINE_EPS = 2.0 ** -52
LAMBDA_MAX = 1e3
LAMBDA1_EPS = 1e-6
CONSTRAINT_MODES = ("theta_double_prime", "theta_prime", "homogeneous")


def _log_sigmoid(t):
    return -np.logaddexp(0.0, -t)


def _frozen(a, ndim):
    arr = np.array(a, dtype=float, ndmin=ndim)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GaussianArParams:
    """Full parameter vector; every per-regime array has length M.

    ``beta`` has shape (M, s + 1) with the intercept in column 0.
    """

    beta: np.ndarray
    sigma: np.ndarray
    pi_minus: np.ndarray
    pi_plus: np.ndarray
    lambda0: np.ndarray
    lambda1: np.ndarray
    trans_lag: int = 1

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(self.beta, 2))
        for name in ("sigma", "pi_minus", "pi_plus", "lambda0", "lambda1"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 1))
        object.__setattr__(self, "trans_lag", int(self.trans_lag))
        self.validate()

    @property
    def num_regimes(self) -> int:
        return self.beta.shape[0]

    @property
    def order(self) -> int:
        return self.beta.shape[1] - 1

    def validate(self) -> None:
        M, s = self.num_regimes, self.order
        if M < 1 or s < 1:
            raise InvalidParams("need at least one regime and order >= 1")
        for name in ("sigma", "pi_minus", "pi_plus", "lambda0", "lambda1"):
            if getattr(self, name).shape != (M,):
                raise InvalidParams(f"{name} must have length {M}")
        if not 1 <= self.trans_lag <= s:
            raise InvalidParams(f"trans_lag must lie in 1..{s}")
        if not np.all(np.isfinite(self.beta)) or not np.all(np.isfinite(self.lambda0)) \
                or not np.all(np.isfinite(self.lambda1)):
            raise InvalidParams("non-finite coefficients")
        if not np.all(self.sigma > 0):
            raise InvalidParams("sigma must be positive")
        pm, pp = self.pi_minus, self.pi_plus
        if not (np.all(pm > 0) and np.all(pp > 0) and np.all(pm < 1 - pp)):
            raise InvalidParams("need 0 < pi_minus < 1 - pi_plus < 1 in every regime")

    def replace(self, **changes) -> GaussianArParams:
        fields = dict(beta=self.beta, sigma=self.sigma, pi_minus=self.pi_minus,
                      pi_plus=self.pi_plus, lambda0=self.lambda0, lambda1=self.lambda1,
                      trans_lag=self.trans_lag)
        fields.update(changes)
        return GaussianArParams(**fields)

    def permute(self, perm) -> GaussianArParams:
        """Relabel regimes: new regime j is old regime ``perm[j]``."""
        perm = np.asarray(perm, dtype=int)
        return self.replace(beta=self.beta[perm], sigma=self.sigma[perm],
                            pi_minus=self.pi_minus[perm], pi_plus=self.pi_plus[perm],
                            lambda0=self.lambda0[perm], lambda1=self.lambda1[perm])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.beta.ravel(), self.sigma, self.pi_minus,
                               self.pi_plus, self.lambda0, self.lambda1])

    def vector_names(self) -> list[str]:
        M, s = self.num_regimes, self.order
        names = [f"beta{j}[{x}]" for x in range(M) for j in range(s + 1)]
        for name in ("sigma", "pi_minus", "pi_plus", "lambda0", "lambda1"):
            names += [f"{name}[{x}]" for x in range(M)]
        return names

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "sigma": self.sigma.tolist(),
            "pi_minus": self.pi_minus.tolist(),
            "pi_plus": self.pi_plus.tolist(),
            "lambda0": self.lambda0.tolist(),
            "lambda1": self.lambda1.tolist(),
            "trans_lag": self.trans_lag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GaussianArParams:
        return cls(d["beta"], d["sigma"], d["pi_minus"], d["pi_plus"],
                   d["lambda0"], d["lambda1"], d["trans_lag"])


def lynx_published_params() -> GaussianArParams:
    """Published NHMS-AR(r = s = 2) fit to log10 lynx counts, pi fixed at 2^-52."""
    eps = np.full(2, PI_MACHINE_EPS)
    return GaussianArParams(
        beta=[[0.54, 1.11, -0.24], [1.03, 1.49, -0.87]],
        sigma=[0.14, 0.22],
        pi_minus=eps, pi_plus=eps,
        lambda0=[-42.4, 9.07], lambda1=[12.8, -3.33],
        trans_lag=2,
    )


# --- densities -------------------------------------------------------------

def emission_logpdf(params: GaussianArParams, y: float, x: int, window) -> float:
    """log N(y; beta_0 + sum_l beta_l y_{k-l}, sigma) for regime x.

    ``window`` holds (y_{k-s}, ..., y_{k-1}), oldest first.
    """
    s = params.order
    if len(window) != s:
        raise ShapeMismatch(f"window must have length {s}")
    b = params.beta[x]
    sd = float(params.sigma[x])
    if not sd > 0:
        raise InvalidParams("sigma must be positive")
    mean = b[0] + sum(b[l] * window[-l] for l in range(1, s + 1))
    z = (y - mean) / sd
    return -0.5 * LOG_2PI - math.log(sd) - 0.5 * z * z


def _stay_leave(params: GaussianArParams, x: int, y_lag: float) -> tuple[float, float]:
    pm, pp = float(params.pi_minus[x]), float(params.pi_plus[x])
    a = float(params.lambda0[x] + params.lambda1[x] * y_lag)
    # logistic(-a) and logistic(a) without overflow
    if a > 0:
        e = math.exp(-a)
        lo, hi = e / (1.0 + e), 1.0 / (1.0 + e)
    else:
        e = math.exp(a)
        lo, hi = 1.0 / (1.0 + e), e / (1.0 + e)
    c = 1.0 - pm - pp
    return pm + c * lo, pp + c * hi


def stay_probability(params: GaussianArParams, x: int, y_lag: float) -> float:
    return _stay_leave(params, x, y_lag)[0]


def transition_prob(params: GaussianArParams, x_next: int, x_prev: int, window) -> float:
    """p1(x_next | x_prev, window); reads y_{k-r} = window[-r]."""
    M = params.num_regimes
    if len(window) != params.order:
        raise ShapeMismatch(f"window must have length {params.order}")
    if M == 1:
        return 1.0
    stay, leave = _stay_leave(params, x_prev, window[-params.trans_lag])
    if x_next == x_prev:
        return stay
    return leave / (M - 1)


def setar_transition(threshold: float, x_next: int, window, r: int) -> float:
    """Indicator switching of the two-regime SETAR model (``<=`` goes to regime 0)."""
    target = 0 if window[-r] <= threshold else 1
    return 1.0 if x_next == target else 0.0


def log_stay_leave(lambda0, lambda1, pi_minus, pi_plus, y_lag):
    """Log stay and total leave probabilities, shape (T, M), in log space."""
    a = np.add.outer(y_lag * 0.0, lambda0) + np.multiply.outer(y_lag, lambda1)
    with np.errstate(divide="ignore"):
        log_c = np.log1p(-(pi_minus + pi_plus))
        log_stay = np.logaddexp(np.log(pi_minus), log_c + _log_sigmoid(-a))
        log_leave = np.logaddexp(np.log(pi_plus), log_c + _log_sigmoid(a))
    return log_stay, log_leave


def ar_design(y_full: np.ndarray, s: int) -> np.ndarray:
    """Rows (1, y_{k-1}, ..., y_{k-s}) for every k after the first s values."""
    T = len(y_full) - s
    cols = [np.ones(T)] + [y_full[s - l:s - l + T] for l in range(1, s + 1)]
    return np.column_stack(cols)


def lagged(y_full: np.ndarray, s: int, r: int) -> np.ndarray:
    """y_{k-r} for every k after the first s values."""
    T = len(y_full) - s
    return y_full[s - r:s - r + T]


class GaussianArModel(RegimeModel):
    def __init__(self, params: GaussianArParams):
        self.params = params
        self.num_regimes = params.num_regimes
        self.order = params.order

    def transition_logpdf(self, x_next, x_prev, window):
        p = transition_prob(self.params, x_next, x_prev, window)
        return math.log(p) if p > 0 else -math.inf

    def emission_logpdf(self, y, x, window):
        return emission_logpdf(self.params, float(y), x, window)

    def transition_bounds(self):
        p, M = self.params, self.num_regimes
        if M == 1:
            return 1.0, 1.0
        lo = min(float(p.pi_minus.min()), float(p.pi_plus.min()) / (M - 1))
        hi = max(float((1 - p.pi_plus).max()), float((1 - p.pi_minus).max()) / (M - 1))
        return lo, hi

    def log_transition_tensor(self, y_full):
        p, M = self.params, self.num_regimes
        y_full = np.asarray(y_full, dtype=float)
        T = len(y_full) - self.order
        if M == 1:
            return np.zeros((T, 1, 1))
        ylag = lagged(y_full, self.order, p.trans_lag)
        log_stay, log_leave = log_stay_leave(p.lambda0, p.lambda1, p.pi_minus, p.pi_plus, ylag)
        out = np.repeat((log_leave - math.log(M - 1))[:, :, None], M, axis=2)
        idx = np.arange(M)
        out[:, idx, idx] = log_stay
        return out

    def log_emission_matrix(self, y_full):
        p = self.params
        y_full = np.asarray(y_full, dtype=float)
        D = ar_design(y_full, self.order)
        resid = (y_full[self.order:, None] - D @ p.beta.T) / p.sigma
        return -0.5 * LOG_2PI - np.log(p.sigma) - 0.5 * resid ** 2

    def sample_transition(self, x_prev, window, rng):
        M = self.num_regimes
        if M == 1:
            return 0
        stay = stay_probability(self.params, x_prev, window[-self.params.trans_lag])
        if rng.random() < stay:
            return x_prev
        others = [j for j in range(M) if j != x_prev]
        return others[rng.integers(M - 1)]

    def sample_emission(self, x, window, rng):
        b = self.params.beta[x]
        mean = b[0] + np.dot(b[1:], window[::-1])
        return mean + self.params.sigma[x] * rng.standard_normal()


# --- SETAR -----------------------------------------------------------------

@dataclass(frozen=True)
class SetarFit:
    threshold: float
    beta: np.ndarray
    sigma: np.ndarray
    loglik: float
    order: int
    delay: int
    n_obs: int

    @property
    def npar(self) -> int:
        return 2 * (self.order + 2) + 1

    def regimes(self, y_full) -> np.ndarray:
        return (lagged(np.asarray(y_full, float), self.order, self.delay) > self.threshold).astype(int)


def _gaussian_cls(D, y):
    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    resid = y - D @ coef
    return coef, float(resid @ resid) / len(y)


def fit_setar(y_full, order: int = 2, delay: int = 2, min_frac: float = 0.15,
              threshold: float | None = None) -> SetarFit:
    """Two-regime SETAR by conditional least squares.

    The threshold is profiled over the observed values of y_{k-delay},
    keeping at least ``min_frac`` of the sample (and order + 2 points) in
    each regime, unless ``threshold`` is given.
    """
    y_full = np.asarray(y_full, dtype=float)
    D = ar_design(y_full, order)
    y = y_full[order:]
    ylag = lagged(y_full, order, delay)
    n = len(y)
    min_n = max(int(math.ceil(min_frac * n)), order + 2)
    if threshold is None:
        candidates = np.unique(ylag)
    else:
        candidates = np.array([threshold], dtype=float)
    best = None
    for c in candidates:
        low = ylag <= c
        nl = int(low.sum())
        if threshold is None and (nl < min_n or n - nl < min_n):
            continue
        b1, v1 = _gaussian_cls(D[low], y[low])
        b2, v2 = _gaussian_cls(D[~low], y[~low])
        if v1 <= 0 or v2 <= 0:
            continue
        ll = -0.5 * (nl * (LOG_2PI + math.log(v1) + 1) + (n - nl) * (LOG_2PI + math.log(v2) + 1))
        if best is None or ll > best[0]:
            best = (ll, float(c), np.vstack([b1, b2]), np.sqrt([v1, v2]))
    if best is None:
        raise SingularDesign("no admissible threshold")
    ll, c, beta, sigma = best
    return SetarFit(c, beta, sigma, ll, order, delay, n)


# --- stability -------------------------------------------------------------

def companion_matrix(params: GaussianArParams, x: int) -> np.ndarray:
    s = params.order
    A = np.zeros((s, s))
    A[:-1, 1:] = np.eye(s - 1)
    A[-1] = params.beta[x, 1:][::-1]
    return A


@dataclass(frozen=True)
class StabilityReport:
    """Spectral radii and basis-norm drift diagnostics.

    ``basis_norms`` are ||P^{-1} A P||_inf with P the unit-norm eigenvectors
    of the basis regime's companion matrix; they and the two drift flags are
    ``None`` when that matrix is defective.
    """

    spectral_radii: np.ndarray
    basis_norms: np.ndarray | None
    driftc_holds: bool | None
    driftb_holds: bool | None
    basis_regime: int
    worst_mixture: float | None = None
    euclidean_norms: np.ndarray = field(default=None)

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else [float(v) for v in a]
        return {
            "spectral_radii": arr(self.spectral_radii),
            "basis_norms": arr(self.basis_norms),
            "euclidean_norms": arr(self.euclidean_norms),
            "driftc_holds": self.driftc_holds,
            "driftb_holds": self.driftb_holds,
            "worst_mixture": self.worst_mixture,
            "basis_regime": self.basis_regime,
        }


def worst_case_mixture(params: GaussianArParams, norms) -> float:
    """Largest sum_x1 p1(x1 | x0, y) ||A_x1||^2 over x0 and admissible stay weights."""
    M = params.num_regimes
    sq = np.asarray(norms, dtype=float) ** 2
    if M == 1:
        return float(sq[0])
    worst = -np.inf
    for x0 in range(M):
        others = np.delete(sq, x0).mean()
        for w in (params.pi_minus[x0], 1.0 - params.pi_plus[x0]):
            worst = max(worst, w * sq[x0] + (1.0 - w) * others)
    return float(worst)


def stability_check(params: GaussianArParams, basis_regime: int = 1,
                    strict: bool = False, cond_limit: float = 1e12) -> StabilityReport:
    M = params.num_regimes
    mats = [companion_matrix(params, x) for x in range(M)]
    radii = np.array([np.abs(np.linalg.eigvals(A)).max() for A in mats])
    euclid = np.array([np.linalg.norm(A, 2) for A in mats])
    _, P = np.linalg.eig(mats[basis_regime])
    if not np.isfinite(np.linalg.cond(P)) or np.linalg.cond(P) > cond_limit:
        if strict:
            raise DefectiveBasis(f"companion matrix of regime {basis_regime} is defective")
        return StabilityReport(radii, None, None, None, basis_regime, None, euclid)
    Pinv = np.linalg.inv(P)
    norms = np.array([np.abs(Pinv @ A @ P).sum(axis=1).max() for A in mats])
    worst = worst_case_mixture(params, norms)
    return StabilityReport(radii, norms, bool(np.all(norms < 1)), bool(worst < 1),
                           basis_regime, worst, euclid)


# --- M-steps ---------------------------------------------------------------

def ar_q_value(beta, sigma, weights, y_full, s) -> float:
    """Gaussian part of the complete-data expected log-likelihood."""
    D = ar_design(np.asarray(y_full, float), s)
    resid = (np.asarray(y_full, float)[s:, None] - D @ np.asarray(beta).T) / sigma
    ll = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * resid ** 2
    return float((weights * ll).sum())


def m_step_ar(weights, y_full, s: int, sigma_floor: float = 0.0,
              rank_tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Weighted least squares per regime; maximizes the Gaussian Q-term.

    ``weights`` is the (T, M) matrix of smoothed regime probabilities.
    ``sigma_floor`` bounds the returned standard deviations from below.
    """
    y_full = np.asarray(y_full, dtype=float)
    weights = np.asarray(weights, dtype=float)
    D = ar_design(y_full, s)
    y = y_full[s:]
    M = weights.shape[1]
    beta = np.empty((M, s + 1))
    sigma = np.empty(M)
    for x in range(M):
        w = weights[:, x]
        G = D.T @ (w[:, None] * D)
        ev = np.linalg.eigvalsh(G)
        if ev[-1] <= 0 or ev[0] <= rank_tol * ev[-1]:
            raise SingularDesign(f"weighted design of regime {x} is rank deficient")
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(sw[:, None] * D, sw * y, rcond=None)
        resid = y - D @ coef
        beta[x] = coef
        sigma[x] = max(math.sqrt(float(w @ resid ** 2) / w.sum()), sigma_floor)
    return beta, sigma


def transition_q(theta, stay_w, leave_w, y_lag, M: int = 2) -> float:
    """Transition Q-term of one origin regime.

    ``theta = (lambda0, lambda1, pi_minus, pi_plus)``; ``stay_w`` and
    ``leave_w`` are the posterior masses of staying and of leaving.
    """
    l0, l1, pm, pp = (float(v) for v in theta)
    log_stay, log_leave = log_stay_leave(np.array([l0]), np.array([l1]),
                                         np.array([pm]), np.array([pp]), y_lag)
    q = stay_w @ log_stay[:, 0] + leave_w @ log_leave[:, 0]
    if M > 2:
        q -= leave_w.sum() * math.log(M - 1)
    return float(q)


def transition_q_grad(theta, stay_w, leave_w, y_lag, M: int = 2) -> np.ndarray:
    """Gradient of :func:`transition_q` in (lambda0, lambda1, pi_minus, pi_plus)."""
    l0, l1, pm, pp = (float(v) for v in theta)
    a = l0 + l1 * y_lag
    log_stay, log_leave = log_stay_leave(np.array([l0]), np.array([l1]),
                                         np.array([pm]), np.array([pp]), y_lag)
    log_stay, log_leave = log_stay[:, 0], log_leave[:, 0]
    ls_pos, ls_neg = _log_sigmoid(a), _log_sigmoid(-a)
    log_c = math.log1p(-(pm + pp))
    dlog = log_c + ls_pos + ls_neg
    # d/da of stay_w log p + leave_w log(1-p)
    g = -stay_w * np.exp(dlog - log_stay) + leave_w * np.exp(dlog - log_leave)
    d_pm = stay_w * np.exp(ls_pos - log_stay) - leave_w * np.exp(ls_pos - log_leave)
    d_pp = -stay_w * np.exp(ls_neg - log_stay) + leave_w * np.exp(ls_neg - log_leave)
    return np.array([g.sum(), g @ y_lag, d_pm.sum(), d_pp.sum()])


def transition_posterior_masses(pair_weights, x: int) -> tuple[np.ndarray, np.ndarray]:
    """Stay and leave masses of origin regime x from (T, M, M) pair posteriors."""
    stay = pair_weights[:, x, x]
    leave = pair_weights[:, x, :].sum(axis=1) - stay
    return stay, leave


@dataclass(frozen=True)
class TransitionFit:
    lambda0: float
    lambda1: float
    pi_minus: float
    pi_plus: float
    q_value: float
    improved: bool


def _softmax3(u):
    m = max(0.0, u[0], u[1])
    e = np.exp(np.array([u[0], u[1], 0.0]) - m)
    return e[:2] / e.sum()


def _logit3(pm, pp):
    rest = 1.0 - pm - pp
    return np.array([math.log(pm / rest), math.log(pp / rest)])


def m_step_transition_regime(
    stay_w, leave_w, y_lag, M: int, previous: tuple[float, float, float, float],
    mode: str = "theta_double_prime", pi0: float = PI_MACHINE_EPS,
    lambda_max: float = LAMBDA_MAX, lambda1_eps: float = LAMBDA1_EPS,
    n_perturb: int = 2, rng=None,
) -> TransitionFit:
    """Maximize the transition Q-term of one origin regime.

    Quasi-Newton (L-BFGS-B) on lambda (centred on the mean lag) and, in the
    ``theta_prime`` mode, on softmax logits of (pi_minus, pi_plus).  Starts
    from the previous iterate, a homogeneous closed-form start and
    ``n_perturb`` random perturbations; the previous iterate is returned
    unchanged (``improved=False``) when no candidate beats it.
    """
    if mode not in CONSTRAINT_MODES:
        raise ValueError(f"unknown constraint mode {mode!r}")
    rng = np.random.default_rng(rng)
    stay_w = np.asarray(stay_w, float)
    leave_w = np.asarray(leave_w, float)
    y_lag = np.asarray(y_lag, float)
    total = stay_w.sum() + leave_w.sum()
    if total <= 0:
        l0, l1, pm, pp = previous
        return TransitionFit(l0, l1, pm, pp, 0.0, False)
    scale = 1.0 / total
    ybar = float(np.average(y_lag, weights=stay_w + leave_w))
    l0p, l1p, pmp, ppp = previous
    if mode != "theta_prime":
        pmp = ppp = pi0
    prev_theta = np.array([l0p, l1p, pmp, ppp])
    prev_q = transition_q(prev_theta, stay_w, leave_w, y_lag, M)

    # closed-form homogeneous start: stay prob = stay mass / total mass
    ratio = float(np.clip(stay_w.sum() * scale, 1e-6, 1 - 1e-6))
    if mode == "theta_prime":
        p_lo, p_hi = pmp, 1 - ppp
    else:
        p_lo, p_hi = pi0, 1 - pi0
    ratio = min(max(ratio, p_lo + 1e-9), p_hi - 1e-9)
    frac = (ratio - p_lo) / (p_hi - p_lo)
    l0_h = float(np.clip(math.log((1 - frac) / frac), -lambda_max, lambda_max))

    def unpack(v):
        alpha = v[0]
        l1 = v[1] if mode != "homogeneous" else 0.0
        l0 = alpha - l1 * ybar
        if mode == "theta_prime":
            pm, pp = _softmax3(v[2:4])
        else:
            pm = pp = pi0
        return np.array([l0, l1, pm, pp])

    def objective(v):
        th = unpack(v)
        q = transition_q(th, stay_w, leave_w, y_lag, M)
        g = transition_q_grad(th, stay_w, leave_w, y_lag, M)
        # l0 = alpha - l1 * ybar
        gv = [g[0]]
        if mode != "homogeneous":
            gv.append(g[1] - g[0] * ybar)
        if mode == "theta_prime":
            pm, pp = th[2], th[3]
            J = np.array([[pm * (1 - pm), -pm * pp], [-pp * pm, pp * (1 - pp)]])
            gv.extend(J.T @ g[2:4])
        return -q * scale, -np.asarray(gv) * scale

    if mode == "theta_prime":
        domains = [(lambda1_eps, lambda_max), (-lambda_max, -lambda1_eps)]
    elif mode == "theta_double_prime":
        domains = [(-lambda_max, lambda_max)]
    else:
        domains = [None]
    a_max = lambda_max * (1 + abs(ybar))

    candidates = []
    for dom in domains:
        starts = []
        base_l1 = l1p
        if dom is not None:
            base_l1 = float(np.clip(l1p, *dom))
        base = [l0p + base_l1 * ybar, base_l1]
        starts.append(base)
        h_l1 = 0.0 if dom is None else float(np.clip(0.0, *dom))
        starts.append([l0_h + h_l1 * ybar, h_l1])
        for _ in range(n_perturb):
            jitter = rng.normal(scale=[1.0, 1.0])
            l1s = base_l1 + jitter[1] * max(1.0, abs(base_l1)) * 0.5
            if dom is not None:
                l1s = float(np.clip(l1s, *dom))
            starts.append([base[0] + jitter[0], l1s])
        for st in starts:
            v0 = [st[0]]
            bounds = [(-a_max, a_max)]
            if mode != "homogeneous":
                v0.append(st[1])
                bounds.append(dom)
            if mode == "theta_prime":
                v0.extend(_logit3(pmp, ppp))
                bounds.extend([(-30.0, 30.0)] * 2)  # keeps 1 - pi_minus - pi_plus > 0 in floats
            v0 = np.clip(v0, [b[0] for b in bounds], [b[1] for b in bounds])
            res = minimize(objective, v0, jac=True, method="L-BFGS-B",
                           bounds=bounds,
                           options={"ftol": 1e-15, "gtol": 1e-11, "maxiter": 3000})
            th = unpack(res.x)
            if abs(th[0]) > lambda_max:
                th[0] = math.copysign(lambda_max, th[0])
            q = transition_q(th, stay_w, leave_w, y_lag, M)
            if np.isfinite(q):
                candidates.append((q, th))
    if not candidates:
        return TransitionFit(l0p, l1p, pmp, ppp, prev_q, False)
    q_best, th_best = max(candidates, key=lambda c: c[0])
    if not q_best > prev_q:
        return TransitionFit(l0p, l1p, pmp, ppp, prev_q, False)
    return TransitionFit(*(float(v) for v in th_best), q_value=q_best, improved=True)


def m_step_transition(pair_weights, y_full, params: GaussianArParams,
                      mode: str = "theta_double_prime", pi0: float = PI_MACHINE_EPS,
                      lambda_max: float = LAMBDA_MAX, rng=None) -> tuple[GaussianArParams, bool]:
    """Update (pi_minus, pi_plus, lambda0, lambda1) of every regime.

    Returns the updated parameters and whether every regime improved.
    """
    rng = np.random.default_rng(rng)
    M, s, r = params.num_regimes, params.order, params.trans_lag
    y_lag = lagged(np.asarray(y_full, float), s, r)
    out = {k: [] for k in ("lambda0", "lambda1", "pi_minus", "pi_plus")}
    all_ok = True
    for x in range(M):
        stay, leave = transition_posterior_masses(pair_weights, x)
        fit = m_step_transition_regime(
            stay, leave, y_lag, M,
            (params.lambda0[x], params.lambda1[x], params.pi_minus[x], params.pi_plus[x]),
            mode=mode, pi0=pi0, lambda_max=lambda_max, rng=rng,
        )
        all_ok &= fit.improved
        for k in out:
            out[k].append(getattr(fit, k))
    if M == 1:
        return params, True
    return params.replace(**out), all_ok


# --- identifiability -------------------------------------------------------

def canonical_order(params: GaussianArParams) -> np.ndarray:
    """Permutation sorting regimes by sigma, then beta_0, beta_1, ..."""
    keys = [params.beta[:, j] for j in range(params.order, -1, -1)] + [params.sigma]
    return np.lexsort(keys)


def canonicalize(params: GaussianArParams) -> tuple[GaussianArParams, np.ndarray]:
    perm = canonical_order(params)
    return params.permute(perm), perm


def param_distance(a: GaussianArParams, b: GaussianArParams) -> float:
    """Max absolute coordinate difference, minimized over regime relabelings."""
    if (a.num_regimes, a.order, a.trans_lag) != (b.num_regimes, b.order, b.trans_lag):
        raise ShapeMismatch("parameters have different (M, s, r)")
    va = a.to_vector()
    return min(float(np.abs(va - b.permute(p).to_vector()).max())
               for p in itertools.permutations(range(a.num_regimes)))


def align_to(params: GaussianArParams, reference: GaussianArParams) -> GaussianArParams:
    """Relabel ``params`` to minimize the distance to ``reference``."""
    vr = reference.to_vector()
    best = min(itertools.permutations(range(params.num_regimes)),
               key=lambda p: np.abs(params.permute(p).to_vector() - vr).max())
    return params.permute(best)


def regimes_distinct(params: GaussianArParams, tol: float = 1e-8) -> bool:
    """Whether every pair of regimes has different (beta, sigma)."""
    blocks = np.column_stack([params.beta, params.sigma])
    for i, j in itertools.combinations(range(params.num_regimes), 2):
        if np.abs(blocks[i] - blocks[j]).max() <= tol:
            return False
    return True
