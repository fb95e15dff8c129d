"""Acceptance criteria; each test prints one PASS/FAIL line.

The lines are collected into a summary section at the end of the pytest run.
"""
import math
import time

import numpy as np
import pytest
from scipy.special import gammaln

from conftest import ACCEPTANCE_LINES, random_ar_params
from nhmsar import core, fileio
from nhmsar import estimation as est
from nhmsar import gaussian_ar as ga
from nhmsar import rainfall as rf

EPS = 2.0 ** -52


def report(num, ok, detail, started):
    line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}  [{time.time() - started:.1f}s]"
    print("\n" + line)
    ACCEPTANCE_LINES.append(line)
    return ok


@pytest.fixture(scope="module")
def lynx():
    return np.log10(fileio.read_series(fileio.bundled("lynx.csv")).value)


@pytest.fixture(scope="module")
def lynx_fits(lynx):
    t = time.time()
    fits = {
        "nhmsar": est.multi_start_fit(est.GaussianArFamily(pi0=EPS), lynx, n_starts=20, seed=1),
        "msar": est.multi_start_fit(est.GaussianArFamily(kind="msar", pi0=EPS), lynx,
                                    n_starts=20, seed=1),
        "setar": est.setar_report(lynx),
    }
    return fits, time.time() - t


def test_criterion_01_forward_matches_enumeration():
    t = time.time()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        s = int(rng.integers(1, 3))
        p = random_ar_params(rng, M=2, s=s, r=int(rng.integers(1, s + 1)))
        T = int(rng.integers(1, 11))
        y = rng.normal(scale=1.5, size=s + T)
        model = ga.GaussianArModel(p)
        x0 = int(rng.integers(2))
        a = core.forward_filter(model, x0, y[:s], y[s:]).log_likelihood
        b = core.brute_force_loglik(model, x0, y[:s], y[s:])
        worst = max(worst, abs(a - b))
    assert report(1, worst <= 1e-10, f"max abs error {worst:.2e} over 100 instances (tol 1e-10)", t)


def test_criterion_02_em_ascent():
    t = time.time()
    rng = np.random.default_rng(202)
    worst = math.inf
    for i in range(20):
        s = int(rng.integers(1, 3))
        r = int(rng.integers(1, s + 1))
        p = random_ar_params(rng, M=2, s=s, r=r)
        _, y = core.simulate(ga.GaussianArModel(p), 0, np.zeros(s), 500, rng)
        y_full = np.concatenate([np.zeros(s), y])[: 500]
        fam = est.GaussianArFamily(order=s, trans_lag=r, pi0=0.01)
        init = fam.initial_params(y_full, rng, i)
        fit = est.em_fit(fam, y_full, init, est.EmConfig(max_iter=100), rng=rng)
        worst = min(worst, float(np.min(np.diff(fit.loglik_trace))) if fit.iterations > 1 else 0.0)
    assert report(2, worst >= -1e-9, f"smallest step {worst:.2e} over 20 runs (slack -1e-9)", t)


def test_criterion_03_lynx_table(lynx_fits):
    t = time.time()
    fits, elapsed = lynx_fits
    nh, ms, st = fits["nhmsar"], fits["msar"], fits["setar"]
    checks = {
        "NHMS-AR AIC <= -28": nh.aic <= -28.0,
        "MS-AR AIC within 2 of -0.21": abs(ms.aic + 0.21) <= 2.0,
        "AIC order NHMS-AR < SETAR < MS-AR": nh.aic < st.aic < ms.aic,
        "BIC order SETAR < NHMS-AR < MS-AR": st.bic < nh.bic < ms.bic,
    }
    detail = (f"AIC nhmsar {nh.aic:.2f} setar {st.aic:.2f} msar {ms.aic:.2f}; "
              f"BIC nhmsar {nh.bic:.2f} setar {st.bic:.2f} msar {ms.bic:.2f}; "
              + "; ".join(f"{k}: {'ok' if v else 'no'}" for k, v in checks.items())
              + f"; fits took {elapsed:.0f}s")
    assert report(3, all(checks.values()), detail, t)


def test_criterion_04_lynx_intervals(lynx_fits):
    t = time.time()
    fit = ga.align_to(lynx_fits[0]["nhmsar"].params, ga.lynx_published_params())
    lo_beta = np.array([[0.31, 0.96, -0.43], [-0.12, 1.23, -1.20]])
    hi_beta = np.array([[0.80, 1.27, -0.05], [1.86, 1.69, -0.39]])
    lo_sig, hi_sig = np.array([0.11, 0.14]), np.array([0.17, 0.26])
    inside = np.all((lo_beta < fit.beta) & (fit.beta < hi_beta)) and \
        np.all((lo_sig < fit.sigma) & (fit.sigma < hi_sig))
    detail = f"beta {np.round(fit.beta, 3).tolist()} sigma {np.round(fit.sigma, 3).tolist()}"
    assert report(4, bool(inside), detail, t)


def test_criterion_05_lynx_stability():
    t = time.time()
    p = ga.lynx_published_params()
    rep = ga.stability_check(p, basis_regime=1)
    roots = [np.abs(np.roots([1.0, -p.beta[x, 1], -p.beta[x, 2]])).max() for x in range(2)]
    ok = (np.all(np.abs(rep.spectral_radii - roots) <= 1e-3)
          and np.all(np.abs(rep.spectral_radii - [0.816, 0.933]) <= 1e-3)
          and rep.driftc_holds is True)
    detail = (f"radii {np.round(rep.spectral_radii, 4).tolist()} roots {np.round(roots, 4).tolist()} "
              f"driftc {rep.driftc_holds} (basis regime 2)")
    assert report(5, bool(ok), detail, t)


def test_criterion_06_forgetting():
    t = time.time()
    rng = np.random.default_rng(606)
    worst = -math.inf
    for _ in range(50):
        s = int(rng.integers(1, 3))
        p = random_ar_params(rng, M=2, s=s, pi0=float(rng.uniform(0.1, 0.3)))
        y = rng.normal(scale=2.0, size=200 + s)
        f = core.filter_forgetting(ga.GaussianArModel(p), y[:s], y[s:], 0, 1)
        worst = max(worst, float(np.max(f.distances - f.bound)))
    assert report(6, worst <= 1e-12, f"max d_k - rho^k {worst:.2e} over 50 models", t)


def test_criterion_07_counterexample():
    t = time.time()
    rng = np.random.default_rng(707)
    a1, a2 = rf.build_counterexample_pair()
    worst = 0.0
    for _ in range(50):
        T = int(rng.integers(1, 21))
        r = np.where(rng.uniform(size=(T, 2)) < 0.5, 0.0, rng.exponential(size=(T, 2)))
        worst = max(worst, abs(rf.stationary_loglik(a1, r) - rf.stationary_loglik(a2, r)))
    c1, _ = rf.canonicalize_rainfall(a1, warn=False)
    c2, _ = rf.canonicalize_rainfall(a2, warn=False)
    differ = not np.allclose(c1.to_vector(), c2.to_vector())
    ok = worst <= 1e-10 and differ
    assert report(7, ok, f"max gap {worst:.2e} over 50 sequences; canonical forms differ {differ}", t)


def test_criterion_08_consistency():
    t = time.time()
    truth = ga.GaussianArParams(
        beta=[[0.0, 0.95], [0.0, -0.95]], sigma=[1.0, 1.0], pi_minus=[EPS] * 2, pi_plus=[EPS] * 2,
        lambda0=[0.3, -0.3], lambda1=[0.3, -0.3], trans_lag=1,
    )
    assert ga.stability_check(truth, basis_regime=1).driftc_holds
    fam = est.GaussianArFamily(order=1, trans_lag=1)
    res = est.consistency_experiment(fam, truth, [250, 1000, 4000], replications=20, seed=0,
                                     n_starts=2)
    med = res.medians
    ok = all(b <= a for a, b in zip(med, med[1:])) and med[-1] <= 0.1
    detail = ("medians " + ", ".join(f"n={c.n}: {c.median:.4f}" for c in res.cells)
              + f"; failures {[c.failures for c in res.cells]}")
    assert report(8, ok, detail, t)


def grid_oracle(w, r, n=200, rounds=8):
    """Weighted Gamma MLE over a log-spaced n-by-n grid, zoomed around the best cell."""
    wet = r > 0
    S0, S1, S2 = w[wet].sum(), w[wet] @ np.log(r[wet]), w[wet] @ r[wet]
    la, lb = np.array([-5.0, 5.0]), np.array([-5.0, 5.0])
    for _ in range(rounds):
        A = np.exp(np.linspace(*la, n))[:, None]
        B = np.exp(np.linspace(*lb, n))[None, :]
        f = S0 * (A * np.log(B) - gammaln(A)) + (A - 1) * S1 - B * S2
        i, j = np.unravel_index(np.argmax(f), f.shape)
        a, b = A[i, 0], B[0, j]
        da, db = 3 * (la[1] - la[0]) / (n - 1), 3 * (lb[1] - lb[0]) / (n - 1)
        la = np.array([math.log(a) - da, math.log(a) + da])
        lb = np.array([math.log(b) - db, math.log(b) + db])
    return a, b


def test_criterion_09_gamma_m_step():
    t = time.time()
    rng = np.random.default_rng(909)
    worst_gap, worst_below = 0.0, 0.0
    for _ in range(20):
        n = int(rng.integers(50, 500))
        shape, rate = rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0)
        r = np.where(rng.uniform(size=n) < rng.uniform(0.2, 0.8), rng.gamma(shape, 1 / rate, size=n), 0.0)
        w = rng.uniform(size=n)
        fit = rf.m_step_gamma(w, r)
        mine = rf.weighted_gamma_loglik(fit.alpha, fit.beta, w, r)
        oracle = rf.weighted_gamma_loglik(*grid_oracle(w, r), w, r)
        worst_gap = max(worst_gap, abs(mine - oracle))
        worst_below = max(worst_below, oracle - mine)
    ok = worst_gap <= 1e-6
    assert report(9, ok, f"max objective gap {worst_gap:.2e} (oracle ahead by at most {worst_below:.2e})", t)


def test_criterion_10_finite_differences():
    t = time.time()
    rng = np.random.default_rng(1010)
    worst = 0.0

    def rel(g, fd):
        return abs(g - fd) / max(1.0, abs(fd))

    for _ in range(20):
        T = 60
        y_lag = rng.normal(size=T)
        stay, leave = rng.uniform(size=T), rng.uniform(size=T)
        theta = np.array([rng.normal(scale=2), rng.normal(scale=2),
                          rng.uniform(0.001, 0.3), rng.uniform(0.001, 0.3)])
        M = int(rng.integers(2, 4))
        g = ga.transition_q_grad(theta, stay, leave, y_lag, M)
        for k in range(4):
            h = 1e-6 * max(1.0, abs(theta[k]))
            e = np.zeros(4)
            e[k] = h
            fd = (ga.transition_q(theta + e, stay, leave, y_lag, M)
                  - ga.transition_q(theta - e, stay, leave, y_lag, M)) / (2 * h)
            worst = max(worst, rel(g[k], fd))
    for _ in range(20):
        M, m, T = int(rng.integers(2, 4)), int(rng.integers(1, 3)), 40
        z = rng.normal(size=(T, m))
        xi_row = rng.dirichlet(np.ones(M), size=T) * rng.uniform(size=(T, 1))
        A = rng.normal(size=(m, m))
        prec = np.linalg.inv(A @ A.T + 0.5 * np.eye(m))
        v = rng.normal(size=(M - 1) + (M - 1) * m)
        _, g = rf.kernel_free_q_and_grad(v, M, m, prec, xi_row, z)
        for k in range(v.size):
            e = np.zeros_like(v)
            e[k] = 1e-6
            fd = (rf.kernel_free_q_and_grad(v + e, M, m, prec, xi_row, z)[0]
                  - rf.kernel_free_q_and_grad(v - e, M, m, prec, xi_row, z)[0]) / 2e-6
            worst = max(worst, rel(g[k], fd))
    assert report(10, worst <= 1e-5, f"max relative error {worst:.2e} at 40 points (tol 1e-5)", t)
