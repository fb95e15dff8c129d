import numpy as np
import pytest

from nhmsar import fileio
from nhmsar.gaussian_ar import GaussianArParams


def random_ar_params(rng, M=2, s=2, r=None, pi0=None, lam_scale=2.0, stable=True):
    """Random Gaussian AR switching parameters with stable regimes."""
    r = s if r is None else r
    beta = np.empty((M, s + 1))
    for x in range(M):
        # coefficients from random roots inside the unit disc
        roots = rng.uniform(-0.8, 0.8, size=s) if stable else rng.uniform(-1.5, 1.5, size=s)
        poly = np.poly(roots)
        beta[x, 0] = rng.normal(scale=0.5)
        beta[x, 1:] = -poly[1:]
    sigma = rng.uniform(0.3, 1.2, size=M)
    if pi0 is None:
        pm = rng.uniform(0.01, 0.2, size=M)
        pp = rng.uniform(0.01, 0.2, size=M)
    else:
        pm = np.full(M, pi0)
        pp = np.full(M, pi0)
    return GaussianArParams(beta, sigma, pm, pp, rng.normal(scale=lam_scale, size=M),
                            rng.normal(scale=lam_scale, size=M), r)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def lynx_log10():
    sf = fileio.read_series(fileio.bundled("lynx.csv"))
    return np.log10(sf.value)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
