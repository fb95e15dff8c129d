import json

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_ar_params
from nhmsar import core, fileio
from nhmsar import gaussian_ar as ga
from nhmsar import rainfall as rf

seeds = st.integers(0, 2**32 - 1)


@given(st.floats(allow_nan=False))
def test_float_text_round_trip(x):
    assert float(fileio.fmt_float(x)) == x
    assert json.loads(fileio.dumps({"v": x})) == {"v": x}


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(2, 3), st.integers(1, 2))
def test_loglik_invariant_under_relabeling(seed, M, s):
    rng = np.random.default_rng(seed)
    p = random_ar_params(rng, M=M, s=s)
    _, y = core.simulate(ga.GaussianArModel(p), 0, np.zeros(s), 60, rng)
    perm = rng.permutation(M)
    x0 = 0
    a = core.forward_filter(ga.GaussianArModel(p), x0, y[:s], y[s:]).log_likelihood
    q = p.permute(perm)
    b = core.forward_filter(ga.GaussianArModel(q), int(np.argsort(perm)[x0]), y[:s], y[s:]).log_likelihood
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(2, 4))
def test_filter_rows_sum_to_one(seed, M):
    rng = np.random.default_rng(seed)
    p = random_ar_params(rng, M=M, s=1, lam_scale=5.0)
    y = rng.normal(scale=3.0, size=80)
    f = core.forward_filter(ga.GaussianArModel(p), int(rng.integers(M)), y[:1], y[1:])
    np.testing.assert_allclose(f.filtered.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(f.filtered >= 0)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(2, 4), st.integers(1, 3))
def test_kernel_recentering_invariance(seed, M, m):
    rng = np.random.default_rng(seed)
    q = rng.dirichlet(np.ones(M), size=M)
    mu = rng.normal(scale=2.0, size=(M, M, m))
    A = rng.normal(size=(m, m))
    S = A @ A.T + 0.5 * np.eye(m)
    z = rng.normal(size=(10, m))
    q2, mu2 = rf.recenter_kernel(q, mu, S)
    np.testing.assert_allclose(rf.kernel_log_transitions(q2, mu2, S, z),
                               rf.kernel_log_transitions(q, mu, S, z), atol=1e-10)
    np.testing.assert_allclose(mu2.sum(axis=1), 0.0, atol=1e-10)
