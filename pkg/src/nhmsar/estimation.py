"""EM estimation, restarts, model comparison and resampling studies."""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from nhmsar import core
from nhmsar import gaussian_ar as ga
from nhmsar import rainfall as rf
from nhmsar.errors import (
    AllStartsFailed,
    InconsistentData,
    InvalidParams,
    NhmsarError,
    NoWetData,
)

log = logging.getLogger(__name__)

THREADS_ENV = "REGIME_SWITCH_THREADS"


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    tol: float = 1e-8
    x0: int = 0
    bic_n: str = "conditional"  # or "full": include the conditioning values
    sigma_floor_frac: float = 1e-2


def information_criteria(loglik: float, npar: int, n_obs: int) -> tuple[float, float]:
    return -2.0 * loglik + 2.0 * npar, -2.0 * loglik + npar * math.log(n_obs)


def data_digest(y_full) -> str:
    return hashlib.sha256(np.ascontiguousarray(y_full, dtype=float).tobytes()).hexdigest()[:16]


@dataclass
class FitReport:
    family: str
    params: object
    loglik_trace: list
    converged: bool
    iterations: int
    restart_index: int
    npar: int
    n_obs: int
    aic: float = field(init=False)
    bic: float = field(init=False)
    seed: int | None = None
    config: dict = field(default_factory=dict)
    start_logliks: list = field(default_factory=list)
    data_digest: str = ""

    def __post_init__(self):
        self.aic, self.bic = information_criteria(self.loglik, self.npar, self.n_obs)

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


# --- model families --------------------------------------------------------

@dataclass(frozen=True)
class GaussianArFamily:
    """NHMS-AR (``nhmsar``) or homogeneous MS-AR (``msar``) with Gaussian regimes."""

    kind: str = "nhmsar"
    num_regimes: int = 2
    order: int = 2
    trans_lag: int = 2
    constraint: str = "theta_double_prime"
    pi0: float = ga.PI_MACHINE_EPS
    lambda_max: float = ga.LAMBDA_MAX

    def __post_init__(self):
        if self.kind not in ("nhmsar", "msar"):
            raise ValueError(f"unknown Gaussian AR family {self.kind!r}")
        if self.kind == "msar" and self.constraint == "theta_prime":
            raise ValueError("msar pins lambda1 = 0 and needs fixed pi")

    @property
    def name(self) -> str:
        return self.kind

    @property
    def mode(self) -> str:
        return "homogeneous" if self.kind == "msar" else self.constraint

    @property
    def npar(self) -> int:
        M, s = self.num_regimes, self.order
        n = M * (s + 2)
        n += M if self.mode == "homogeneous" else 2 * M
        if self.mode == "theta_prime":
            n += 2 * M
        return n

    def model(self, params):
        return ga.GaussianArModel(params)

    def m_step(self, params, sm, y_full, x0, rng, config: EmConfig):
        floor = config.sigma_floor_frac * float(np.std(y_full))
        beta, sigma = ga.m_step_ar(sm.gamma, y_full, self.order, sigma_floor=floor)
        pairs = core.pairwise_with_start(sm, x0)
        new, _ = ga.m_step_transition(
            pairs, y_full, params.replace(beta=beta, sigma=sigma), mode=self.mode,
            pi0=self.pi0, lambda_max=self.lambda_max, rng=rng,
        )
        return new

    def _fixed_pi(self):
        return np.full(self.num_regimes, self.pi0)

    def initial_params(self, y_full, rng, index: int, anchor=None):
        if anchor is not None:
            return anchor if index == 0 else self._perturb(anchor, rng)
        M, s, r = self.num_regimes, self.order, self.trans_lag
        y_full = np.asarray(y_full, float)
        D, y = ga.ar_design(y_full, s), y_full[s:]
        ylag = ga.lagged(y_full, s, r)
        sd = float(np.std(y_full))
        if index % 2 == 1:
            return self._soft_start(D, y, ylag, sd, rng)
        if index == 0:
            cuts = np.quantile(ylag, np.arange(1, M) / M)
        else:
            cuts = np.sort(np.quantile(ylag, rng.uniform(0.2, 0.8, size=M - 1)))
        groups = np.searchsorted(cuts, ylag, side="left")
        beta = np.empty((M, s + 1))
        sigma = np.empty(M)
        full_coef, *_ = np.linalg.lstsq(D, y, rcond=None)
        for x in range(M):
            sel = groups == x
            if sel.sum() >= s + 3:
                coef, *_ = np.linalg.lstsq(D[sel], y[sel], rcond=None)
            else:
                coef = full_coef
            beta[x] = coef
            sigma[x] = max(float(np.std(y[sel] - D[sel] @ coef)) if sel.sum() > 1 else sd,
                           0.05 * sd)
        if index > 0:
            beta = beta + rng.normal(scale=0.05 * (np.abs(beta) + 0.1))
            sigma = sigma * np.exp(rng.normal(scale=0.2, size=M))
        if self.mode == "homogeneous":
            lam1 = np.zeros(M)
            lam0 = np.full(M, math.log(0.25)) + (rng.normal(scale=0.5, size=M) if index else 0)
        else:
            c = (4.0 if index == 0 else rng.uniform(1.0, 12.0)) / max(float(np.std(ylag)), 1e-12)
            lam1 = np.full(M, ga.LAMBDA1_EPS * 10)
            lam0 = np.full(M, math.log(0.25))
            thr = cuts[0]
            lam1[0], lam0[0] = c, -c * thr
            lam1[-1], lam0[-1] = -c, c * cuts[-1]
        if self.mode == "theta_prime":
            pm = pp = np.full(M, 0.05)
        else:
            pm = pp = self._fixed_pi()
        lim = self.lambda_max
        return ga.GaussianArParams(beta, sigma, pm, pp, np.clip(lam0, -lim, lim),
                                   np.clip(lam1, -lim, lim), r)

    def _soft_start(self, D, y, ylag, sd, rng):
        """Weighted least squares under random soft regime assignments, gentle slopes."""
        M, r = self.num_regimes, self.trans_lag
        T = len(y)
        # persistent random assignment: smooth a random walk of logits over time
        logits = np.cumsum(rng.normal(scale=0.5, size=(T, M)), axis=0)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        w = 0.8 * w + 0.2 / M
        beta, sigma = self._weighted_ls(D, y, w, sd)
        scale = max(float(np.std(ylag)), 1e-12)
        lam1 = rng.normal(scale=0.5 / scale, size=M)
        lam0 = rng.normal(scale=0.5, size=M) - lam1 * float(np.mean(ylag))
        if self.mode == "homogeneous":
            lam1 = np.zeros(M)
        elif self.mode == "theta_prime":
            lam1 = np.where(np.abs(lam1) < ga.LAMBDA1_EPS, ga.LAMBDA1_EPS * 10, lam1)
        if self.mode == "theta_prime":
            pm = pp = np.full(M, 0.05)
        else:
            pm = pp = self._fixed_pi()
        return ga.GaussianArParams(beta, sigma, pm, pp, lam0, lam1, r)

    @staticmethod
    def _weighted_ls(D, y, w, sd):
        M = w.shape[1]
        beta = np.empty((M, D.shape[1]))
        sigma = np.empty(M)
        for x in range(M):
            sw = np.sqrt(w[:, x])
            coef, *_ = np.linalg.lstsq(sw[:, None] * D, sw * y, rcond=None)
            beta[x] = coef
            res = y - D @ coef
            sigma[x] = max(math.sqrt(float(w[:, x] @ res ** 2) / w[:, x].sum()), 0.05 * sd)
        return beta, sigma

    def _perturb(self, p, rng):
        M = self.num_regimes
        beta = p.beta + rng.normal(scale=0.05 * (np.abs(p.beta) + 0.1))
        sigma = p.sigma * np.exp(rng.normal(scale=0.1, size=M))
        lim = self.lambda_max
        lam0, lam1 = p.lambda0, p.lambda1
        if self.mode != "homogeneous":
            lam1 = np.clip(lam1 + rng.normal(scale=0.2 * (np.abs(lam1) + 1)), -lim, lim)
            if self.mode == "theta_prime":
                lam1 = np.where(np.abs(lam1) < ga.LAMBDA1_EPS,
                                np.copysign(ga.LAMBDA1_EPS * 10, lam1), lam1)
        lam0 = np.clip(lam0 + rng.normal(scale=0.2 * (np.abs(lam0) + 1)), -lim, lim)
        return p.replace(beta=beta, sigma=sigma, lambda0=lam0, lambda1=lam1)

    def simulate_like(self, params, y_full, x0, rng):
        """Series of the same length reusing the first ``order`` values."""
        s = self.order
        _, y = core.simulate(self.model(params), x0, y_full[:s], len(y_full) - s, rng)
        return np.concatenate([np.asarray(y_full[:s], float), y])

    def canonicalize(self, params):
        return ga.canonicalize(params)

    def distance(self, a, b):
        return ga.param_distance(a, b)

    def align(self, params, reference):
        return ga.align_to(params, reference)

    def identifiable(self, params) -> bool:
        return ga.regimes_distinct(params)

    def check_ergodic(self, params) -> None:
        rep = ga.stability_check(params, basis_regime=min(1, params.num_regimes - 1))
        if not (rep.driftc_holds or rep.driftb_holds):
            raise InvalidParams("parameters satisfy neither drift condition")

    def params_to_dict(self, params) -> dict:
        return params.to_dict()

    def params_from_dict(self, d):
        return ga.GaussianArParams.from_dict(d)


@dataclass(frozen=True)
class RainfallFamily:
    """Gaussian-kernel NHMM with Bernoulli-Gamma stations (``rainfall``).

    ``sigma_mat`` is fixed; ``fix_mu`` restricts to the homogeneous chain.
    """

    num_regimes: int = 2
    num_stations: int = 1
    covariate_dim: int = 1
    sigma_mat: tuple | None = None
    fix_mu: bool = False

    name = "rainfall"
    order = 1

    @property
    def sigma(self) -> np.ndarray:
        if self.sigma_mat is None:
            return np.eye(self.covariate_dim)
        return np.asarray(self.sigma_mat, float)

    @property
    def npar(self) -> int:
        M, m, l = self.num_regimes, self.covariate_dim, self.num_stations
        n = M * (M - 1) + 3 * M * l
        if not self.fix_mu:
            n += M * (M - 1) * m
        return n

    def _split_columns(self, y_full):
        y_full = np.asarray(y_full, float)
        m = self.covariate_dim
        return y_full[:, :m], y_full[:, m:]

    def model(self, params):
        return rf.RainfallNhmmModel(params)

    def m_step(self, params, sm, y_full, x0, rng, config: EmConfig):
        z, r = self._split_columns(y_full)
        r = r[1:]
        pi, alpha, beta = (np.array(a) for a in (params.pi_rain, params.alpha, params.beta_gamma))
        for x in range(self.num_regimes):
            for i in range(self.num_stations):
                try:
                    g = rf.m_step_gamma(sm.gamma[:, x], r[:, i])
                except NoWetData:
                    continue
                pi[x, i], alpha[x, i], beta[x, i] = g.pi, g.alpha, g.beta
        pi = np.clip(pi, 1e-12, 1 - 1e-12)
        pairs = core.pairwise_with_start(sm, x0)
        kfit = rf.m_step_kernel(pairs, z[:-1], self.sigma, params.q, params.mu,
                                fix_mu=self.fix_mu, rng=rng)
        q = np.clip(kfit.q, 1e-300, None)
        q = q / q.sum(axis=1, keepdims=True)
        return params.replace(q=q, mu=kfit.mu, pi_rain=pi, alpha=alpha, beta_gamma=beta)

    def initial_params(self, y_full, rng, index: int, anchor=None):
        M, m, l = self.num_regimes, self.covariate_dim, self.num_stations
        if anchor is not None and index == 0:
            return anchor
        _, r = self._split_columns(y_full)
        r = r[1:]
        if anchor is not None:
            resp = np.exp(self.model(anchor).log_emission_matrix(y_full))
            resp = resp / resp.sum(axis=1, keepdims=True)
            resp = 0.8 * resp + 0.2 * rng.dirichlet(np.ones(M), size=len(r))
        elif index == 0:
            total = r.sum(axis=1)
            ranks = np.argsort(np.argsort(total, kind="stable"), kind="stable")
            resp = np.eye(M)[np.minimum(ranks * M // len(r), M - 1)]
            resp = 0.9 * resp + 0.1 / M
        else:
            resp = rng.dirichlet(np.ones(M), size=len(r))
        pi = np.full((M, l), 0.5)
        alpha = np.ones((M, l))
        beta = np.ones((M, l))
        for x in range(M):
            for i in range(l):
                try:
                    g = rf.m_step_gamma(resp[:, x], r[:, i])
                except NoWetData:
                    continue
                pi[x, i], alpha[x, i], beta[x, i] = g.pi, g.alpha, g.beta
        pi = np.clip(pi, 1e-6, 1 - 1e-6)
        q = np.full((M, M), 0.2 / max(M - 1, 1)) + np.eye(M) * (0.8 - 0.2 / max(M - 1, 1))
        if index > 0:
            q = q * np.exp(rng.normal(scale=0.3, size=q.shape))
        q /= q.sum(axis=1, keepdims=True)
        mu = np.zeros((M, M, m))
        if not self.fix_mu and index > 0:
            mu = rng.normal(scale=0.5, size=(M, M, m))
            mu -= mu.mean(axis=1, keepdims=True)
        return rf.RainfallNhmmParams(q, mu, self.sigma, pi, alpha, beta)

    def simulate_like(self, params, y_full, x0, rng):
        """Resimulate rainfall along the observed covariate path."""
        z, r = self._split_columns(y_full)
        _, r_new = rf.simulate_rainfall(params, z, x0, rng)
        out = np.array(y_full, float)
        out[1:, self.covariate_dim:] = r_new
        return out

    def canonicalize(self, params):
        return rf.canonicalize_rainfall(params, warn=False)

    def distance(self, a, b):
        return rf.rainfall_distance(a, b)

    def align(self, params, reference):
        vr = reference.to_vector()
        perms = itertools.permutations(range(params.num_regimes))
        best = min(perms, key=lambda p: np.abs(params.permute(p).to_vector() - vr).max())
        return params.permute(best)

    def identifiable(self, params) -> bool:
        return rf.emission_blocks_distinct(params)

    def check_ergodic(self, params) -> None:
        # covariates are exogenous; ergodicity of (X, Z) is the caller's responsibility
        return None

    def params_to_dict(self, params) -> dict:
        return params.to_dict()

    def params_from_dict(self, d):
        return rf.RainfallNhmmParams.from_dict(d)


# --- EM --------------------------------------------------------------------

def _split(y_full, s):
    y_full = np.asarray(y_full, dtype=float)
    return y_full[:s], y_full[s:]


def n_obs_for(y_full, s, config: EmConfig) -> int:
    return len(y_full) if config.bic_n == "full" else len(y_full) - s


def em_fit(family, y_full, init_params, config: EmConfig = EmConfig(), rng=None,
           restart_index: int = 0, seed=None) -> FitReport:
    """Alternate smoothing and family M-steps until the improvement is < tol."""
    rng = np.random.default_rng(rng)
    y_init, y = _split(y_full, family.order)
    if len(y) <= family.npar:
        raise InvalidParams("series too short for the number of parameters")
    params = init_params
    trace: list[float] = []
    converged = False
    for _ in range(config.max_iter + 1):
        fr, sm = core.smooth(family.model(params), config.x0, y_init, y)
        trace.append(fr.log_likelihood)
        if len(trace) > 1 and trace[-1] - trace[-2] < config.tol:
            converged = True
            break
        if len(trace) > config.max_iter:
            break
        params = family.m_step(params, sm, np.asarray(y_full, float), config.x0, rng, config)
    return FitReport(
        family=family.name, params=params, loglik_trace=trace, converged=converged,
        iterations=len(trace) - 1, restart_index=restart_index, npar=family.npar,
        n_obs=n_obs_for(y_full, family.order, config), seed=seed, config=asdict(config),
        data_digest=data_digest(y_full),
    )


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Ordered map, parallel over processes when REGIME_SWITCH_THREADS > 1."""
    items = list(items)
    n = min(_workers(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _run_start(job, family, y_full, config, anchor):
    index, seq = job
    rng = np.random.default_rng(seq)
    try:
        init = family.initial_params(y_full, rng, index, anchor)
        return em_fit(family, y_full, init, config, rng=rng, restart_index=index)
    except (NhmsarError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        log.debug("start %d failed: %s", index, exc)
        return exc


def multi_start_fit(family, y_full, n_starts: int = 10, seed: int = 0,
                    config: EmConfig = EmConfig(), anchor=None) -> FitReport:
    """Best of ``n_starts`` EM runs.

    Start 0 is the quantile-split least-squares start (or ``anchor`` itself
    when given); the others are randomized.  Deterministic given ``seed``.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seqs = root.spawn(n_starts)
    results = parallel_map(
        partial(_run_start, family=family, y_full=np.asarray(y_full, float),
                config=config, anchor=anchor),
        list(enumerate(seqs)),
    )
    fits = [r for r in results if isinstance(r, FitReport)]
    if not fits:
        raise AllStartsFailed(f"all {n_starts} starts failed: {results[0]!r}")
    best = max(fits, key=lambda f: (f.loglik, -f.restart_index))
    best.seed = seed if not isinstance(seed, np.random.SeedSequence) else None
    best.start_logliks = [r.loglik if isinstance(r, FitReport) else None for r in results]
    return best


# --- SETAR benchmark -------------------------------------------------------

def setar_report(y_full, order: int = 2, delay: int = 2, config: EmConfig = EmConfig(),
                 threshold: float | None = None) -> FitReport:
    fit = ga.fit_setar(y_full, order, delay, threshold=threshold)
    params = {"threshold": fit.threshold, "beta": fit.beta.tolist(),
              "sigma": fit.sigma.tolist(), "order": order, "delay": delay}
    return FitReport(
        family="setar", params=params, loglik_trace=[fit.loglik], converged=True,
        iterations=0, restart_index=0, npar=fit.npar,
        n_obs=n_obs_for(y_full, order, config), config=asdict(config),
        data_digest=data_digest(y_full),
    )


# --- model selection -------------------------------------------------------

@dataclass(frozen=True)
class SelectionRow:
    model: str
    loglik: float
    aic: float
    bic: float
    npar: int
    n_obs: int
    best_aic: bool
    best_bic: bool


def model_select(fits) -> list[SelectionRow]:
    fits = list(fits)
    if not fits:
        return []
    if len({f.n_obs for f in fits}) > 1:
        raise InconsistentData("fits use different numbers of observations")
    digests = {f.data_digest for f in fits if f.data_digest}
    if len(digests) > 1:
        raise InconsistentData("fits were computed on different data")
    aics = [f.aic for f in fits]
    bics = [f.bic for f in fits]
    ia, ib = int(np.argmin(aics)), int(np.argmin(bics))
    return [SelectionRow(f.family, f.loglik, f.aic, f.bic, f.npar, f.n_obs, i == ia, i == ib)
            for i, f in enumerate(fits)]


# --- parametric bootstrap --------------------------------------------------

@dataclass
class BootstrapReport:
    replicates: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    failures: int
    names: list
    B: int
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "B": self.B,
            "seed": self.seed,
            "failures": self.failures,
            "names": list(self.names),
            "ci_lower": [float(v) for v in self.ci_lower],
            "ci_upper": [float(v) for v in self.ci_upper],
            "replicates": [[float(v) for v in row] for row in self.replicates],
        }


def _bootstrap_replicate(job, family, point, y_full, config, n_starts):
    b, seq = job
    sim_seq, fit_seq = seq.spawn(2)
    try:
        y_sim = family.simulate_like(point, y_full, config.x0, np.random.default_rng(sim_seq))
        fit = multi_start_fit(family, y_sim, n_starts, seed=fit_seq, config=config,
                              anchor=point)
    except (NhmsarError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.debug("replicate %d failed: %s", b, exc)
        return None
    if not fit.converged:
        return None
    return family.align(fit.params, point).to_vector()


def parametric_bootstrap(family, fitted: FitReport, y_full, B: int = 200, seed: int = 0,
                         n_starts: int = 5, config: EmConfig = EmConfig()) -> BootstrapReport:
    """Percentile intervals from refits to series simulated at the point fit."""
    point = fitted.params
    names = point.vector_names()
    if B == 0:
        empty = np.empty((0, len(names)))
        return BootstrapReport(empty, np.full(len(names), np.nan),
                               np.full(len(names), np.nan), 0, names, 0, seed)
    seqs = np.random.SeedSequence(seed).spawn(B)
    out = parallel_map(
        partial(_bootstrap_replicate, family=family, point=point,
                y_full=np.asarray(y_full, float), config=config, n_starts=n_starts),
        list(enumerate(seqs)),
    )
    reps = [v for v in out if v is not None]
    failures = B - len(reps)
    if not reps:
        raise AllStartsFailed("every bootstrap replicate failed")
    reps = np.vstack(reps)
    lo, hi = np.percentile(reps, [2.5, 97.5], axis=0)
    return BootstrapReport(reps, lo, hi, failures, names, B, seed)


# --- consistency study -----------------------------------------------------

@dataclass
class ConsistencyCell:
    n: int
    distances: list
    failures: int

    @property
    def median(self) -> float:
        return float(np.median(self.distances)) if self.distances else math.nan

    @property
    def p90(self) -> float:
        return float(np.percentile(self.distances, 90)) if self.distances else math.nan


@dataclass
class ConsistencyResult:
    cells: list
    identifiable: bool

    @property
    def medians(self) -> list[float]:
        return [c.median for c in self.cells]


def _consistency_replicate(job, family, true_params, config, n_starts, burn_in):
    n, seq = job
    sim_seq, fit_seq = seq.spawn(2)
    rng = np.random.default_rng(sim_seq)
    s = family.order
    model = family.model(true_params)
    x0 = config.x0
    _, warm = core.simulate(model, x0, np.zeros(s), burn_in + s, rng)
    y_init = warm[-s:]
    _, y = core.simulate(model, x0, y_init, n, rng)
    y_full = np.concatenate([y_init, y])
    try:
        fit = multi_start_fit(family, y_full, n_starts, seed=fit_seq, config=config)
    except (NhmsarError, FloatingPointError, np.linalg.LinAlgError):
        return None
    return family.distance(fit.params, true_params)


def consistency_experiment(family, true_params, lengths, replications: int = 20,
                           seed: int = 0, n_starts: int = 3,
                           config: EmConfig = EmConfig(), burn_in: int = 200
                           ) -> ConsistencyResult:
    """Distance of the MLE to the truth (up to relabeling) as n grows."""
    family.check_ergodic(true_params)
    root = np.random.SeedSequence(seed)
    cells = []
    for n, seq in zip(lengths, root.spawn(len(lengths))):
        jobs = [(int(n), sq) for sq in seq.spawn(replications)]
        out = parallel_map(
            partial(_consistency_replicate, family=family, true_params=true_params,
                    config=config, n_starts=n_starts, burn_in=burn_in),
            jobs,
        )
        d = [v for v in out if v is not None]
        cells.append(ConsistencyCell(int(n), d, replications - len(d)))
    return ConsistencyResult(cells, family.identifiable(true_params))
