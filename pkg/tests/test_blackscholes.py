import math
import warnings

import numpy as np
import pytest
from scipy.integrate import quad

from indiff.blackscholes import (
    BSField,
    GreekSingularityWarning,
    bs_pde_residual,
    bs_pde_scale,
    mc_price,
    sample_q_paths,
)
from indiff.market import MarketParams, ModelError, PayoffSpec, evaluate_payoff

M = MarketParams(0.1, 0.2, 0.03, 1.0)


def lognormal_price(payoff, t, s, m=M):
    """Discounted risk-neutral expectation by adaptive quadrature in the normal variable."""
    tau = m.T - t
    sig = m.vol

    def f(x):
        sT = s * math.exp((m.r - 0.5 * sig**2) * tau + sig * math.sqrt(tau) * x)
        return float(evaluate_payoff(payoff, sT)) * math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)

    brk = [(math.log(K / s) - (m.r - 0.5 * sig**2) * tau) / (sig * math.sqrt(tau)) for K in payoff.knots]
    pts = sorted([-12.0, 12.0] + [b for b in brk if -12 < b < 12])
    val = sum(quad(f, a, b, epsabs=1e-13, epsrel=1e-12, limit=200)[0] for a, b in zip(pts[:-1], pts[1:]))
    return math.exp(-m.r * tau) * val


@pytest.mark.parametrize("payoff", [PayoffSpec.call(100), PayoffSpec.put(100), PayoffSpec.digital(100),
                                    PayoffSpec.power_call(100, 1.5), PayoffSpec.power_call(90, 2.0),
                                    PayoffSpec.custom([1, 80, 120, 2000], [0, 0, 40, 60])])
@pytest.mark.parametrize("t,s", [(0.0, 100.0), (0.5, 80.0), (0.9, 125.0)])
def test_price_against_quadrature(payoff, t, s):
    V = float(BSField(payoff, M).value(t, s))
    ref = lognormal_price(payoff, t, s)
    assert V == pytest.approx(ref, rel=1e-7, abs=1e-9)


@pytest.mark.parametrize("payoff", [PayoffSpec.call(100), PayoffSpec.power_call(100, 1.5), PayoffSpec.digital(100)])
def test_greeks_against_differences(payoff):
    f = BSField(payoff, M)
    t, s, h = 0.3, np.array([80.0, 100.0, 115.0]), 1e-2
    g = f.greeks(t, s)
    np.testing.assert_allclose(g.dV, (f.value(t, s + h) - f.value(t, s - h)) / (2 * h), rtol=1e-5, atol=1e-8)
    d2 = (f.value(t, s + h) - 2 * f.value(t, s) + f.value(t, s - h)) / h**2
    np.testing.assert_allclose(g.d2V, d2, rtol=1e-4, atol=1e-7)
    np.testing.assert_allclose(g.s2_d2V, s * s * g.d2V)


@pytest.mark.parametrize("payoff", [PayoffSpec.call(100), PayoffSpec.put(100), PayoffSpec.digital(100),
                                    PayoffSpec.forward(), PayoffSpec.power_call(100, 1.5)])
def test_pde_residual_small_relative_to_its_terms(payoff):
    f = BSField(payoff, M)
    t, s = np.meshgrid(np.linspace(0, 0.95, 8), np.linspace(40, 250, 12), indexing="ij")
    # the floor only matters where the price has underflowed below 1e-12
    res, sc = np.abs(bs_pde_residual(f, t, s)), bs_pde_scale(f, t, s)
    ratio = res / (sc + 1e-12)
    assert ratio.max() < 1e-6


def test_put_call_parity_and_terminal_values():
    t, s = np.meshgrid(np.linspace(0, 0.99, 5), np.linspace(50, 200, 7), indexing="ij")
    C = BSField(PayoffSpec.call(100), M).value(t, s)
    P = BSField(PayoffSpec.put(100), M).value(t, s)
    assert np.max(np.abs(C - P - s + 100 * np.exp(-M.r * (1 - t)))) < 1e-10
    sT = np.array([90.0, 110.0])
    np.testing.assert_allclose(BSField(PayoffSpec.call(100), M).value(1.0, sT), [0, 10])


def test_singular_greeks_warn_and_bad_inputs():
    f = BSField(PayoffSpec.call(100), M)
    with pytest.warns(GreekSingularityWarning):
        f.greeks(1.0 - 1e-6, 100.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        BSField(PayoffSpec.forward(), M).greeks(1.0 - 1e-6, 100.0)
    with pytest.raises(ModelError):
        f.greeks(1.1, 100.0)
    with pytest.raises(ModelError):
        f.greeks(0.5, -1.0)


def test_mc_price_matches_closed_form():
    f = BSField(PayoffSpec.call(100), M)
    est, se = mc_price(f, 0.0, 100.0, 40000, seed=11)
    assert abs(est - float(f.value(0.0, 100.0))) < 4 * se


def test_q_paths_are_discounted_martingales_and_reproducible(tmp_path):
    grid = np.linspace(0, 1, 6)
    b = sample_q_paths(M, 0.0, 100.0, grid, 20000, seed=5, antithetic=True)
    disc = b.paths * np.exp(-M.r * grid)[None, :]
    se = disc.std(axis=0, ddof=1) / np.sqrt(disc.shape[0])
    assert np.all(np.abs(disc.mean(axis=0) - 100.0) <= 4 * se + 1e-12)
    sub = sample_q_paths(M, 0.0, 100.0, grid, 3, seed=5, antithetic=True, path_ids=[10, 11, 12])
    np.testing.assert_array_equal(sub.paths, b.paths[10:13])
    b2 = sample_q_paths(M, 0.0, 100.0, grid, 2, seed=5)
    b2.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "time,path_id,spot" and len(lines) == 1 + 2 * grid.size
    with pytest.raises(ModelError):
        sample_q_paths(M, 0.0, 100.0, [0.0, 0.5], 10, seed=1)


def test_vanishing_volatility_paths_grow_at_r():
    # sigma = 0 is rejected by MarketParams; a tiny sigma stands in for it
    m = MarketParams(0.1, 1e-12, 0.05, 1.0)
    with pytest.raises(ModelError):
        MarketParams(0.1, 0.0, 0.05, 1.0)
    batch = sample_q_paths(m, 0.0, 100.0, np.linspace(0.0, 1.0, 5), 64, seed=1)
    assert np.allclose(batch.paths[:, -1], 100.0 * math.exp(0.05), rtol=1e-10)
    assert round(float(batch.paths[0, -1]), 3) == 105.127
