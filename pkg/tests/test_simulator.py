import numpy as np
import pytest

from indiff.frictions import Portfolio, apply_transfer, liquidation_value, transfer
from indiff.market import CostStructure, MarketParams, ModelError, PayoffSpec, Preferences
from indiff.simulator import (
    SimSetup,
    convergence_study,
    liquidate,
    nt_band,
    rebalance,
    simulate_many,
    simulate_reflected,
)

M = MarketParams(0.1, 0.2, 0.02, 0.5)
P = Preferences(1.0, 0)
CALL = PayoffSpec.call(1.0)


def setup(lam=(0.0, 0.02), payoff=CALL, m=M, prefs=P, **kw):
    kw.setdefault("s0", 1.0)
    kw.setdefault("z0", 1.0)
    return SimSetup(m, prefs, payoff, CostStructure.one_asset(*lam, 0.1), **kw)


def test_band_properties():
    st = setup(lam=(1.0, 1.0))
    b1 = nt_band(st.corrector(0.1), 0.2, np.array([0.8, 1.0, 1.2]))
    b2 = nt_band(st.corrector(0.2), 0.2, np.array([0.8, 1.0, 1.2]))
    np.testing.assert_allclose(b2.half_width, 2 * b1.half_width)
    np.testing.assert_allclose(b1.upper - b1.lower, 2 * b1.half_width)
    assert np.all(nt_band(setup(lam=(0, 0)).corrector(0.1), 0.2, 1.0).half_width == 0)
    bz = nt_band(setup(payoff=PayoffSpec.zero()).corrector(0.1), 0.2, np.array([0.5, 1.0, 3.0]))
    assert np.ptp(bz.center) == 0 and np.ptp(bz.half_width) == 0


def test_rebalance_and_liquidate_match_portfolio_accounting():
    c = CostStructure.one_asset(1.0, 2.0, 0.3)
    x, y = np.array([1.0, 1.0, 1.0]), np.array([3.0, 0.5, -1.0])
    lo, hi = np.array([0.0, 0.0, 0.0]), np.array([2.0, 2.0, 2.0])
    xn, yn, cost = rebalance(x, y, lo, hi, c)
    k10 = c.rate(1, 0)
    sold = apply_transfer(Portfolio(1.0, [3.0]), transfer(2, 1, 0, 1.0 / (1 + k10)), c)
    assert xn[0] == pytest.approx(sold.x) and yn[0] == pytest.approx(sold.y[0])
    bought = apply_transfer(Portfolio(1.0, [-1.0]), transfer(2, 0, 1, 1.0), c)
    assert xn[2] == pytest.approx(bought.x) and yn[2] == pytest.approx(bought.y[0])
    assert (xn[1], yn[1], cost[1]) == (1.0, 0.5, 0.0)
    for xi, yi in zip(x, y):
        assert liquidate(xi, yi, c) == pytest.approx(liquidation_value(Portfolio(xi, [yi]), c).value)


def test_results_are_reproducible_across_chunks_and_workers():
    st = setup()
    a = simulate_many(st, [0.2, 0.3], 600, seed=9, chunk=600)
    b = simulate_many(st, [0.2, 0.3], 600, seed=9, chunk=128, workers=3)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.utility, rb.utility)
        assert ra.u_hat == rb.u_hat and ra.stderr == rb.stderr
    c = simulate_many(st, [0.2, 0.3], 600, seed=10)
    assert not np.array_equal(a[0].utility, c[0].utility)


def test_band_residency_dominance_and_order_of_loss():
    rs = simulate_many(setup(), [0.2, 0.3], 3000, seed=1)
    for r in rs:
        assert r.max_band_excess <= 1e-12
        assert r.dominance_ok()
        assert r.delta > 3 * r.delta_stderr
    assert rs[1].delta > rs[0].delta


def test_no_costs_recovers_frictionless_value():
    r = simulate_many(setup(lam=(0.0, 0.0)), [0.1], 4000, seed=2)[0]
    assert r.mean_cost == 0.0
    assert abs(r.delta) <= 4 * r.delta_stderr + 2e-5


def test_tiny_volatility_is_deterministic():
    sig = 1e-6
    m = MarketParams(0.02 + sig**2, sig, 0.02, 0.5)  # Merton position of about one unit
    r = simulate_many(setup(m=m, payoff=PayoffSpec.zero(), lam=(1.0, 1.0)), [0.2], 200, seed=4)[0]
    assert r.mean_cost == 0.0
    assert np.std(r.utility) <= 1e-5 * abs(np.mean(r.utility))


def test_consumption_and_insolvency_are_reported():
    st = setup(prefs=Preferences(1.0, 1), lam=(0.0, 1.0), z0=0.01)
    r = simulate_many(st, [0.3], 2000, seed=5)[0]
    assert r.utility.shape == (2000,)  # nothing dropped
    assert r.insolvent_paths > 0
    assert r.mean_consumption_utility < 0
    assert r.dominance_ok()


def test_wrapper_and_validation():
    st = setup()
    x0, y0 = st.start()
    one = simulate_reflected(M, P, CALL, CostStructure.one_asset(0.0, 0.02, 0.2), 0.0, 1.0, x0, y0, 300, seed=3)
    many = simulate_many(st, [0.2], 300, seed=3)[0]
    np.testing.assert_array_equal(one.utility, many.utility)
    with pytest.raises(ModelError):
        simulate_reflected(M, P, CALL, CostStructure.one_asset(1.0, 1.0, 0.5), 0.0, 1.0, -5.0, 0.1, 100)
    with pytest.raises(ModelError):
        convergence_study(st, [0.1, 0.2], 100, 0)
    with pytest.raises(ModelError):
        convergence_study(st, [0.1, 0.2, 0.7], 100, 0)


def test_convergence_study_without_costs_has_no_signal():
    cs = convergence_study(setup(lam=(0.0, 0.0)), [0.2, 0.3, 0.4], 500, seed=1)
    assert cs.verdict == "no signal" and np.isnan(cs.slope)
    assert len(cs.rows) == 3
