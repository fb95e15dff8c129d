import math

import numpy as np
import pytest
from scipy import integrate
from scipy.optimize import minimize
from scipy.stats import norm

from conftest import random_ar_params
from nhmsar import core
from nhmsar import gaussian_ar as ga
from nhmsar.errors import DefectiveBasis, InvalidParams, ShapeMismatch, SingularDesign


def test_emission_matches_scipy(rng):
    p = random_ar_params(rng, s=2)
    w = rng.normal(size=2)
    for x in range(2):
        mean = p.beta[x, 0] + p.beta[x, 1] * w[1] + p.beta[x, 2] * w[0]
        assert ga.emission_logpdf(p, 0.3, x, w) == pytest.approx(
            norm.logpdf(0.3, mean, p.sigma[x]), abs=1e-13)


def test_emission_integrates_to_one(rng):
    p = random_ar_params(rng)
    w = rng.normal(size=2)
    val, _ = integrate.quad(lambda y: math.exp(ga.emission_logpdf(p, y, 1, w)), -np.inf, np.inf)
    assert val == pytest.approx(1.0, abs=1e-9)


def test_transition_rows_sum_to_one(rng):
    for M in (2, 3, 4):
        p = random_ar_params(rng, M=M)
        w = rng.normal(size=2)
        for x in range(M):
            assert sum(ga.transition_prob(p, j, x, w) for j in range(M)) == pytest.approx(1.0, abs=1e-14)


def test_stay_probability_formula(rng):
    p = random_ar_params(rng)
    y = 0.7
    for x in range(2):
        expected = p.pi_minus[x] + (1 - p.pi_minus[x] - p.pi_plus[x]) / (
            1 + math.exp(p.lambda0[x] + p.lambda1[x] * y))
        assert ga.stay_probability(p, x, y) == pytest.approx(expected, rel=1e-14)


def test_stay_probability_bounds():
    p = ga.GaussianArParams([[0, 0.5], [0, 0.5]], [1, 1], [0.05, 0.1], [0.2, 0.02],
                            [0.0, 0.0], [1e3, -1e3], 1)
    for x in range(2):
        for y in (-50.0, 50.0):
            v = ga.stay_probability(p, x, y)
            assert p.pi_minus[x] - 1e-15 <= v <= 1 - p.pi_plus[x] + 1e-15


def test_vectorized_tensor_matches_scalar(rng):
    p = random_ar_params(rng, M=3, s=2, r=1)
    model = ga.GaussianArModel(p)
    y = rng.normal(size=15)
    lt = model.log_transition_tensor(y)
    le = model.log_emission_matrix(y)
    base = core.RegimeModel.log_transition_tensor(model, y)
    np.testing.assert_allclose(lt, base, atol=1e-13)
    np.testing.assert_allclose(le, core.RegimeModel.log_emission_matrix(model, y), atol=1e-13)


def test_setar_limit():
    c = 2.9
    p = ga.GaussianArParams([[0.5, 1.2, -0.4], [2.3, 1.5, -1.2]], [0.2, 0.2],
                            [ga.PI_MACHINE_EPS] * 2, [ga.PI_MACHINE_EPS] * 2,
                            [-1e3 * c, 1e3 * c], [1e3, -1e3], 2)
    for y_lag in (2.5, 2.85, 2.95, 3.4):
        window = np.array([y_lag, 3.0])
        for prev in range(2):
            for nxt in range(2):
                assert ga.transition_prob(p, nxt, prev, window) == pytest.approx(
                    ga.setar_transition(c, nxt, window, 2), abs=1e-15)


def test_params_validation():
    with pytest.raises(InvalidParams):
        ga.GaussianArParams([[0, 0.5], [0, 0.5]], [1, -1], [0.1, 0.1], [0.1, 0.1], [0, 0], [0, 0], 1)
    with pytest.raises(InvalidParams):
        ga.GaussianArParams([[0, 0.5], [0, 0.5]], [1, 1], [0.6, 0.1], [0.5, 0.1], [0, 0], [0, 0], 1)
    with pytest.raises(InvalidParams):
        ga.GaussianArParams([[0, 0.5], [0, 0.5]], [1, 1], [0.1, 0.1], [0.1, 0.1], [0, 0], [0, 0], 3)


def test_params_are_immutable(rng):
    p = random_ar_params(rng)
    with pytest.raises(ValueError):
        p.beta[0, 0] = 5.0
    d = p.to_dict()
    assert ga.GaussianArParams.from_dict(d).to_vector().tolist() == p.to_vector().tolist()


# --- stability ---------------------------------------------------------------

def test_companion_spectral_radius_matches_roots(rng):
    p = random_ar_params(rng, M=2, s=3)
    for x in range(2):
        # roots of z^s - b1 z^{s-1} - ... - bs
        roots = np.roots(np.concatenate([[1.0], -p.beta[x, 1:]]))
        rho = np.abs(np.linalg.eigvals(ga.companion_matrix(p, x))).max()
        assert rho == pytest.approx(np.abs(roots).max(), abs=1e-10)


def test_published_lynx_stability():
    p = ga.lynx_published_params()
    rep = ga.stability_check(p, basis_regime=1)
    roots = [np.abs(np.roots([1.0, -b[1], -b[2]])).max() for b in p.beta]
    np.testing.assert_allclose(rep.spectral_radii, roots, atol=1e-12)
    assert rep.driftc_holds is True
    assert rep.basis_norms[1] == pytest.approx(rep.spectral_radii[1], abs=1e-10)


def test_defective_basis_reported():
    # double root makes the companion matrix a Jordan block
    p = ga.GaussianArParams([[0, 1.0, -0.25], [0, 0.2, 0.1]], [1, 1], [0.1] * 2, [0.1] * 2,
                            [0, 0], [0, 0], 2)
    rep = ga.stability_check(p, basis_regime=0)
    assert rep.driftc_holds is None and rep.basis_norms is None
    with pytest.raises(DefectiveBasis):
        ga.stability_check(p, basis_regime=0, strict=True)


def test_unstable_regime_flags():
    p = ga.GaussianArParams([[0, 1.1, 0.0], [0, 0.2, 0.1]], [1, 1], [0.1] * 2, [0.1] * 2,
                            [0, 0], [0, 0], 2)
    rep = ga.stability_check(p, basis_regime=1)
    assert rep.spectral_radii[0] > 1
    assert rep.driftc_holds is False


# --- M-steps -------------------------------------------------------------------

def test_ar_m_step_matches_normal_equations(rng):
    y = rng.normal(size=80).cumsum() * 0.1
    w = rng.dirichlet([1, 1], size=78)
    beta, sigma = ga.m_step_ar(w, y, 2)
    D = np.column_stack([np.ones(78), y[1:-1], y[:-2]])
    for x in range(2):
        W = np.diag(w[:, x])
        b = np.linalg.solve(D.T @ W @ D, D.T @ W @ y[2:])
        np.testing.assert_allclose(beta[x], b, atol=1e-10)
        res = y[2:] - D @ b
        assert sigma[x] == pytest.approx(math.sqrt(w[:, x] @ res ** 2 / w[:, x].sum()), rel=1e-10)


def test_ar_m_step_maximizes_q(rng):
    y = rng.normal(size=60)
    w = rng.dirichlet([1, 1, 1], size=58)
    beta, sigma = ga.m_step_ar(w, y, 2)
    best = ga.ar_q_value(beta, sigma, w, y, 2)
    for _ in range(50):
        b2 = beta + rng.normal(scale=0.05, size=beta.shape)
        s2 = sigma * np.exp(rng.normal(scale=0.05, size=3))
        assert ga.ar_q_value(b2, s2, w, y, 2) <= best + 1e-12


def test_ar_m_step_sigma_floor_and_singular(rng):
    y = rng.normal(size=30)
    w = np.column_stack([np.ones(28), np.zeros(28)])
    w[:2, 1] = 1.0
    with pytest.raises(SingularDesign):
        ga.m_step_ar(w, y, 2)
    w[:, 1] = 1e-3
    _, sigma = ga.m_step_ar(w, y, 2, sigma_floor=5.0)
    assert np.all(sigma >= 5.0)


def test_transition_gradient_finite_differences(rng):
    for _ in range(10):
        T = 50
        y_lag = rng.normal(size=T)
        stay = rng.uniform(size=T)
        leave = rng.uniform(size=T)
        theta = np.array([rng.normal(), rng.normal(), rng.uniform(0.01, 0.2), rng.uniform(0.01, 0.2)])
        g = ga.transition_q_grad(theta, stay, leave, y_lag, M=3)
        for k in range(4):
            h = 1e-6 * max(1.0, abs(theta[k]))
            e = np.zeros(4)
            e[k] = h
            fd = (ga.transition_q(theta + e, stay, leave, y_lag, 3)
                  - ga.transition_q(theta - e, stay, leave, y_lag, 3)) / (2 * h)
            assert abs(g[k] - fd) <= 1e-5 * max(1.0, abs(fd))


def test_homogeneous_transition_closed_form(rng):
    T = 100
    stay = rng.uniform(size=T)
    leave = 1 - stay
    y_lag = rng.normal(size=T)
    fit = ga.m_step_transition_regime(stay, leave, y_lag, 2, (0.0, 0.0, 0.0, 0.0),
                                      mode="homogeneous", pi0=1e-3, rng=1)
    p = ga.GaussianArParams([[0, 0], [0, 0]], [1, 1], [1e-3] * 2, [1e-3] * 2,
                            [fit.lambda0, 0], [0.0, 0], 1)
    assert fit.lambda1 == 0.0
    assert ga.stay_probability(p, 0, 0.0) == pytest.approx(stay.sum() / T, abs=1e-7)


def test_transition_m_step_beats_generic_optimizer(rng):
    T = 200
    y_lag = rng.normal(size=T)
    true = 1 / (1 + np.exp(0.3 + 1.5 * y_lag))
    stay = (rng.uniform(size=T) < true).astype(float)
    leave = 1 - stay
    fit = ga.m_step_transition_regime(stay, leave, y_lag, 2, (0.0, 0.0, 0.0, 0.0), rng=2)
    eps = ga.PI_MACHINE_EPS

    def neg(v):
        return -ga.transition_q([v[0], v[1], eps, eps], stay, leave, y_lag)

    ref = min((minimize(neg, x0, method="Nelder-Mead",
                        options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
               for x0 in ([0, 0], [1, 1], [-1, 2])), key=lambda r: r.fun)
    assert fit.q_value >= -ref.fun - 1e-8
    g = ga.transition_q_grad([fit.lambda0, fit.lambda1, eps, eps], stay, leave, y_lag)
    assert np.abs(g[:2]).max() < 1e-5


def test_transition_m_step_theta_prime(rng):
    T = 400
    y_lag = rng.normal(size=T)
    p_true = 0.1 + 0.7 / (1 + np.exp(-0.5 + 2.0 * y_lag))
    stay = (rng.uniform(size=T) < p_true).astype(float)
    fit = ga.m_step_transition_regime(stay, 1 - stay, y_lag, 2, (0.0, 0.0, 0.05, 0.05),
                                      mode="theta_prime", rng=3)
    assert fit.improved
    assert 0 < fit.pi_minus < 1 and 0 < fit.pi_plus < 1
    assert abs(fit.lambda1) >= ga.LAMBDA1_EPS


def test_transition_m_step_keeps_previous_when_optimal(rng):
    T = 100
    y_lag = rng.normal(size=T)
    stay = np.full(T, 0.5)
    prev = (0.0, 0.0, ga.PI_MACHINE_EPS, ga.PI_MACHINE_EPS)
    fit = ga.m_step_transition_regime(stay, 1 - stay, y_lag, 2, prev, rng=0)
    assert fit.q_value >= ga.transition_q(prev, stay, 1 - stay, y_lag) - 1e-12


def test_degenerate_posterior_drives_lambda_to_bound(rng):
    T = 50
    y_lag = rng.uniform(1, 3, size=T)
    stay = np.ones(T)
    fit = ga.m_step_transition_regime(stay, np.zeros(T), y_lag, 2, (0.0, 0.0, 0.0, 0.0), rng=0)
    p = ga.GaussianArParams([[0, 0], [0, 0]], [1, 1], [ga.PI_MACHINE_EPS] * 2,
                            [ga.PI_MACHINE_EPS] * 2, [fit.lambda0, 0], [fit.lambda1, 0], 1)
    assert min(ga.stay_probability(p, 0, y) for y in y_lag) > 1 - 1e-6
    assert abs(fit.lambda0) <= ga.LAMBDA_MAX and abs(fit.lambda1) <= ga.LAMBDA_MAX


# --- SETAR -----------------------------------------------------------------------

def test_setar_recovers_simulated_threshold():
    rng = np.random.default_rng(4)
    y = [0.0, 0.0]
    for _ in range(3000):
        if y[-2] <= 0.0:
            y.append(0.5 + 0.3 * y[-1] + 0.3 * rng.normal())
        else:
            y.append(-0.5 - 0.2 * y[-1] + 0.6 * rng.normal())
    fit = ga.fit_setar(np.array(y), 2, 2)
    assert abs(fit.threshold) < 0.1
    assert fit.beta[0, 0] == pytest.approx(0.5, abs=0.05)
    assert fit.sigma[1] == pytest.approx(0.6, abs=0.03)


def test_setar_lynx_fixed_threshold(lynx_log10):
    # the classical fit of the log10 lynx series at threshold 3.15
    fit = ga.fit_setar(lynx_log10, 2, 2, threshold=3.15)
    np.testing.assert_allclose(fit.beta[0], [0.51, 1.24, -0.36], atol=0.02)
    np.testing.assert_allclose(fit.beta[1], [2.32, 1.53, -1.27], atol=0.02)
    assert fit.npar == 9


# --- identifiability ---------------------------------------------------------------

def test_canonical_form_is_permutation_invariant(rng):
    p = random_ar_params(rng, M=3)
    c1, _ = ga.canonicalize(p)
    c2, _ = ga.canonicalize(p.permute([1, 2, 0]))
    np.testing.assert_array_equal(c1.to_vector(), c2.to_vector())
    assert np.all(np.diff(c1.sigma) >= 0)


def test_param_distance(rng):
    p = random_ar_params(rng, M=3)
    assert ga.param_distance(p, p.permute([2, 1, 0])) == 0.0
    q = p.replace(sigma=p.sigma + 0.1)
    assert ga.param_distance(p, q) == pytest.approx(0.1)
    with pytest.raises(ShapeMismatch):
        ga.param_distance(p, random_ar_params(rng, M=2))
    aligned = ga.align_to(q.permute([1, 0, 2]), p)
    np.testing.assert_allclose(aligned.sigma, q.sigma)


def test_regimes_distinct(rng):
    p = random_ar_params(rng)
    assert ga.regimes_distinct(p)
    same = p.replace(beta=np.vstack([p.beta[0], p.beta[0]]), sigma=[1.0, 1.0])
    assert not ga.regimes_distinct(same)
