import numpy as np
import pytest

from indiff.corrector import CorrectorSolution
from indiff.expansion import (
    DivergenceError,
    GridSpec,
    divergence_probe,
    graded_mesh,
    price_expansion,
    solve_u_tilde_fd,
    u_tilde_mc,
    u_tilde_quadrature,
    u_tilde_zero_closed,
)
from indiff.market import CostStructure, MarketParams, ModelError, PayoffSpec, Preferences

M = MarketParams(0.1, 0.2, 0.02, 1.0)
COSTS = CostStructure.one_asset(1.0, 1.0, 0.1)


def corr(payoff=PayoffSpec.call(100), kappa=0, costs=COSTS):
    return CorrectorSolution.build(M, Preferences(1.0, kappa), payoff, costs)


def test_graded_mesh():
    t = graded_mesh(0.2, 1.0, 50, power=3)
    assert t[0] == 0.2 and t[-1] == 1.0 and np.all(np.diff(t) > 0)
    assert np.diff(t)[-1] < np.diff(t)[0] / 100  # clustered at maturity
    with pytest.raises(ModelError):
        GridSpec(n_space=20)


@pytest.mark.parametrize("kappa", [0, 1])
def test_zero_claim_closed_form(kappa):
    c = corr(PayoffSpec.zero(), kappa)
    closed = float(u_tilde_zero_closed(c, 0.0))
    assert u_tilde_quadrature(c, 0.0, 100.0) == pytest.approx(closed, rel=1e-3)
    fd = solve_u_tilde_fd(c, GridSpec(n_space=100, n_time=100, s_center=100.0))
    assert float(fd.at(0.0, 100.0)) == pytest.approx(closed, rel=1e-3)
    if kappa == 0:
        assert closed == pytest.approx(float(c.a_bar(0.0, 1.0)) * M.T, rel=1e-12)


def test_call_fd_quadrature_and_mc_agree():
    c = corr()
    q = u_tilde_quadrature(c, 0.0, 100.0)
    fd = float(solve_u_tilde_fd(c, GridSpec(n_space=200, n_time=200, s_center=100.0)).at(0.0, 100.0))
    assert fd == pytest.approx(q, rel=5e-3)
    mc, se = u_tilde_mc(c, 0.0, 100.0, 20000, seed=3)
    assert abs(mc - q) < max(4 * se, 0.01 * q)
    assert u_tilde_mc(corr(costs=CostStructure.one_asset(0, 0, 0.1)), 0.0, 100.0, 200, 1) == (0.0, 0.0)
    with pytest.raises(ModelError):
        u_tilde_mc(c, 0.0, 100.0, 10, 1)


def test_price_expansion_structure():
    c = corr()
    eps = [0.0, 0.05, 0.1, 0.3]
    rep = price_expansion(c, 0.0, 100.0, eps, grid=GridSpec(n_space=100, n_time=100, s_center=100.0))
    V = float(c.merton.bs.value(0.0, 100.0))
    assert rep.rows[0].p_eps == V
    ratios = [(r.p_eps - r.V) / r.epsilon**2 for r in rep.rows[1:]]
    assert np.ptp(ratios) <= 1e-12 * abs(ratios[0])
    assert rep.h == pytest.approx((rep.u_tilde_g - rep.u_tilde_0) / float(c.prefs.gamma * c.merton.v1(0.0)))
    zero = price_expansion(corr(PayoffSpec.zero()), 0.0, 100.0, eps)
    assert all(r.p_eps == 0.0 for r in zero.rows)


def test_digital_is_refused_and_probe_verdicts():
    dig = corr(PayoffSpec.digital(100))
    assert divergence_probe(dig, 0.0, 100.0).verdict == "diverged"
    with pytest.raises(DivergenceError):
        price_expansion(dig, 0.0, 100.0, [0.1])
    call = divergence_probe(corr(), 0.0, 100.0)
    assert call.verdict == "converged" and np.isfinite(call.value)
