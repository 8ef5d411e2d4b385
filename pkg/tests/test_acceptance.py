"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines are printed
at the end of the session. The order check (criterion 7) takes about 90 s.
"""
import time

import numpy as np
import pytest

from indiff.blackscholes import BSField, bs_pde_residual, bs_pde_scale
from indiff.corrector import CorrectorSolution, audit_assumptions
from indiff.expansion import (
    GridSpec,
    divergence_probe,
    price_expansion,
    solve_u_tilde_fd,
    u_tilde_mc,
    u_tilde_quadrature,
    u_tilde_zero_closed,
)
from indiff.frictions import Portfolio, liquidation_gap, liquidation_limit
from indiff.market import CostStructure, MarketParams, PayoffSpec, Preferences
from indiff.merton import MertonSolution
from indiff.simulator import SimSetup, convergence_study

M = MarketParams(0.1, 0.2, 0.02, 1.0)
K = 100.0
COSTS = CostStructure.one_asset(1.0, 1.0, 0.1)
PAYOFFS = {"zero": PayoffSpec.zero(), "forward": PayoffSpec.forward(), "call": PayoffSpec.call(K)}


def ts_grid(n):
    return np.linspace(0.0, M.T - 0.05, n), K * np.exp(np.linspace(-0.6, 0.6, 50))


def test_1_merton_hjb_residual(record):
    t0 = time.perf_counter()
    ts, ss = ts_grid(50)
    tt, sg = np.meshgrid(ts, ss, indexing="ij")
    offsets = np.linspace(-5.0, 5.0, 20)
    worst = 0.0
    for kappa in (0, 1):
        for g in PAYOFFS.values():
            mert = MertonSolution(M, Preferences(1.0, kappa), g)
            V = mert.bs.value(tt, sg) if g.kind != "zero" else np.zeros_like(tt)
            zs = V[..., None] + offsets * np.asarray(mert.eta(tt))[..., None]
            res = mert.hjb_residual(tt[..., None], sg[..., None], zs)
            v = mert.value(tt[..., None], sg[..., None], zs)
            worst = max(worst, float(np.max(np.abs(res / v))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and dt < 10
    record(1, ok, f"max |HJB residual|/|v| = {worst:.2e} (< 1e-6), {dt:.1f}s")
    assert ok


def test_2_black_scholes_residual_and_parity(record):
    t0 = time.perf_counter()
    ts, ss = ts_grid(50)
    tt, sg = np.meshgrid(ts, ss, indexing="ij")
    worst = 0.0
    for g in (PayoffSpec.forward(), PayoffSpec.call(K), PayoffSpec.put(K)):
        f = BSField(g, M)
        rel = np.abs(bs_pde_residual(f, tt, sg)) / (bs_pde_scale(f, tt, sg) + 1e-300)
        worst = max(worst, float(np.max(rel)))
    C = BSField(PayoffSpec.call(K), M).value(tt, sg)
    P = BSField(PayoffSpec.put(K), M).value(tt, sg)
    parity = float(np.max(np.abs(C - P - sg + K * np.exp(-M.r * (M.T - tt)))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and parity < 1e-10 and dt < 5
    record(2, ok, f"BS residual {worst:.2e} (< 1e-6), parity {parity:.2e} (< 1e-10), {dt:.1f}s")
    assert ok


def test_3_corrector_complementarity(record):
    t0 = time.perf_counter()
    corr = CorrectorSolution.build(M, Preferences(1.0), PayoffSpec.call(K), COSTS)
    rng = np.random.default_rng(3)
    pde, slack, paste = 0.0, 0.0, 0.0
    for t, s in zip(rng.uniform(0.0, M.T - 0.05, 20), K * np.exp(rng.uniform(-0.4, 0.4, 20))):
        z = float(corr.merton.bs.value(t, s))
        vz = abs(corr.merton.merton_value(t, s, z)[1])
        x0 = float(corr.xi0(t, s))
        a = abs(float(corr.a(t, s, z)))
        xi = np.linspace(-2.0, 2.0, 400) * x0
        r = corr.corrector_residual(t, s, z, xi)
        inner = np.abs(xi) < x0
        pde = max(pde, float(np.max(np.abs(r.pde_part[inner]))) / a)
        slack = max(slack, float(np.max(np.minimum(np.abs(r.slack_10), np.abs(r.slack_01))[~inner])))
        for sgn, branch in ((1, "sell"), (-1, "buy")):
            inner = corr.w_explicit(t, s, z, sgn * x0, branch="interior")
            outer = corr.w_explicit(t, s, z, sgn * x0, branch=branch)
            paste = max(paste, abs(inner.w - outer.w) / vz, abs(inner.w_xi - outer.w_xi) / vz)
    dt = time.perf_counter() - t0
    ok = pde < 1e-6 and slack < 1e-10 and paste < 1e-9 and dt < 5
    record(3, ok, f"interior {pde:.2e}·a, exterior slack {slack:.2e}, pasting {paste:.2e}·v_z, {dt:.1f}s")
    assert ok


def test_4_closed_form_vs_brute_force(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        m = MarketParams(rng.uniform(0.04, 0.15), rng.uniform(0.1, 0.4), rng.uniform(0.0, 0.05), 1.0)
        costs = CostStructure.one_asset(rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0), 0.1)
        g = PayoffSpec.call(K) if rng.uniform() < 0.5 else PayoffSpec.zero()
        corr = CorrectorSolution.build(m, Preferences(rng.uniform(0.5, 3.0)), g, costs)
        t, s = rng.uniform(0.0, 0.9), K * np.exp(rng.uniform(-0.3, 0.3))
        xb, ab, _ = corr.brute_force(t, s)
        worst = max(worst, abs(xb / float(corr.xi0(t, s)) - 1), abs(ab / float(corr.a_bar(t, s)) - 1))
    dt = time.perf_counter() - t0
    ok = worst < 5e-3 and dt < 60
    record(4, ok, f"max relative gap (xi0, abar) = {worst:.2e} (< 5e-3), {dt:.1f}s")
    assert ok


def test_5_u_tilde_fd_vs_mc(record):
    t0 = time.perf_counter()
    corr = CorrectorSolution.build(M, Preferences(1.0), PayoffSpec.call(K), COSTS)
    fd = solve_u_tilde_fd(corr, GridSpec(400, 400, t0=0.0, s_center=K))
    excess = -np.inf
    for s in (80.0, 90.0, 100.0, 110.0, 125.0):
        u_fd = float(fd.at(0.0, s))
        u_mc, se = u_tilde_mc(corr, 0.0, s, 100_000, seed=5)
        excess = max(excess, abs(u_fd - u_mc) - max(3 * se, 0.01 * abs(u_fd)))
    zero = CorrectorSolution.build(M, Preferences(1.0), PayoffSpec.zero(), COSTS)
    closed = float(u_tilde_zero_closed(zero, 0.0))
    z_fd = float(solve_u_tilde_fd(zero, GridSpec(400, 400, t0=0.0, s_center=K)).at(0.0, K))
    z_mc, _ = u_tilde_mc(zero, 0.0, K, 100_000, seed=5)
    zero_gap = max(abs(z_fd / closed - 1), abs(z_mc / closed - 1))
    dt = time.perf_counter() - t0
    ok = excess <= 0 and zero_gap < 1e-3 and dt < 90
    record(5, ok, f"call: worst |FD-MC| - max(3se, 1%) = {excess:.2e} (<= 0); "
                  f"g=0 gap {zero_gap:.2e} (< 1e-3), {dt:.1f}s")
    assert ok


def test_6_price_expansion(record):
    t0 = time.perf_counter()
    eps = [0.0, 0.01, 0.05, 0.1, 0.2, 0.5]
    grid = GridSpec(100, 100, t0=0.0, s_center=K)
    zero = CorrectorSolution.build(M, Preferences(1.0), PayoffSpec.zero(), COSTS)
    rep0 = price_expansion(zero, 0.0, K, eps, grid)
    corr = CorrectorSolution.build(M, Preferences(1.0), PayoffSpec.call(K), COSTS)
    rep = price_expansion(corr, 0.0, K, eps, grid)
    V = float(BSField(PayoffSpec.call(K), M).value(0.0, K))
    p0 = max(abs(r.p_eps) for r in rep0.rows)
    ratios = np.array([(r.p_eps - r.V) / r.epsilon**2 for r in rep.rows if r.epsilon > 0])
    spread = float(np.max(np.abs(ratios - rep.h)) / abs(rep.h))
    ok = p0 == 0.0 and spread < 1e-12 and rep.rows[0].p_eps == V
    record(6, ok, f"max |p^(eps,0)| = {p0:.1e}, (p-V)/eps^2 spread {spread:.1e} (< 1e-12), "
                  f"eps=0 row {'equals' if rep.rows[0].p_eps == V else 'differs from'} V, "
                  f"{time.perf_counter() - t0:.1f}s")
    assert ok


@pytest.mark.slow
def test_7_simulator_order(record):
    t0 = time.perf_counter()
    m = MarketParams(0.1, 0.2, 0.02, 0.5)
    setup = SimSetup(m, Preferences(1.0, 0), PayoffSpec.call(1.0), CostStructure.one_asset(0.0, 0.02, 0.1),
                     t0=0.0, s0=1.0, z0=1.0)
    u = u_tilde_quadrature(setup.corrector(0.1), 0.0, 1.0)
    study = convergence_study(setup, [0.1, 0.15, 0.2, 0.3], 100_000, 2024)
    small = [r for r in study.rows if r.epsilon <= 0.15]
    close = all(abs(r.delta_over_eps2 - u) <= max(0.15 * u, 3 * r.stderr / r.epsilon**2) for r in small)
    dt = time.perf_counter() - t0
    ok = 1.7 <= study.slope <= 2.3 and close and dt < 300
    ratios = ", ".join(f"{r.delta_over_eps2 / u:.3f}" for r in small)
    record(7, ok, f"slope {study.slope:.2f} (in [1.7, 2.3]), Delta/eps^2 / u_tilde = {ratios} "
                  f"(within 15%), {dt:.0f}s")
    assert ok


def test_8_liquidation_limit(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    structures = [
        CostStructure.one_asset(1.0, 2.0, 1.0),
        CostStructure([[0, 1.0, 0.5], [2.0, 0, 1.5], [1.0, 0.7, 0]], 1.0),
    ]
    worst = 0.0
    for base in structures:
        lam_max = base.lam_max
        for eps in (1e-1, 1e-2, 1e-3):
            ce = base.with_epsilon(eps)
            for _ in range(30):
                p = Portfolio(rng.uniform(-1, 1), rng.uniform(-1, 1, base.d))
                L = liquidation_limit(p, ce)
                bound = np.sum(np.abs(p.y)) * lam_max**2 * eps**3 + 8 * np.spacing(max(abs(L), 1.0))
                worst = max(worst, abs(liquidation_gap(p, ce) / eps**3 - L) / bound)
    dt = time.perf_counter() - t0
    ok = worst <= 1.0 and dt < 1
    record(8, ok, f"max gap / bound = {worst:.3f} (<= 1), {dt:.2f}s")
    assert ok


def test_9_digital_divergence(record):
    t0 = time.perf_counter()
    verdicts = {}
    for name, g in (("digital", PayoffSpec.digital(K)), ("call", PayoffSpec.call(K)),
                    ("power_call", PayoffSpec.power_call(K, 1.5))):
        corr = CorrectorSolution.build(M, Preferences(1.0), g, COSTS)
        verdicts[name] = divergence_probe(corr, 0.0, K).verdict
    dt = time.perf_counter() - t0
    ok = verdicts == {"digital": "diverged", "call": "converged", "power_call": "converged"} and dt < 60
    record(9, ok, f"{verdicts}, {dt:.1f}s")
    assert ok


def test_10_assumption_audit(record):
    t0 = time.perf_counter()
    call = audit_assumptions(M, Preferences(1.0), PayoffSpec.call(K))
    zero = audit_assumptions(M, Preferences(1.0), PayoffSpec.zero())
    beta = call.exponents["V_ss"]
    dt = time.perf_counter() - t0
    ok = abs(beta - 0.5) <= 0.1 and all(v == 0.0 for v in zero.exponents.values()) and zero.c0 > 0 and dt < 10
    record(10, ok, f"call gamma exponent {beta:.3f} (0.5 +- 0.1), g=0 exponents "
                   f"{sorted(zero.exponents.values())}, c0 {zero.c0:.3g}, {dt:.1f}s")
    assert ok
