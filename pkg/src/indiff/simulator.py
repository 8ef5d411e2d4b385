"""Monte Carlo of the reflected no-transaction band strategy.

The risky position is kept inside ``[y^g - eps xi0, y^g + eps xi0]`` by
trading to the nearest edge whenever a step leaves the band. Every path uses
its own counter-based normal stream, so per-path results do not depend on how
paths are split into chunks, and every ``eps`` of a study sees the same
Brownian increments.

Expected utility is estimated with the control variate

    M = sum_k v_k (b_k dW_k + 1/2 (c_k + b_k^2) (dW_k^2 - dt)),

the first two Ito-Taylor terms of the frictionless value ``v(t, S, Z)`` along
the simulated wealth, with ``b = sigma gamma v1 (S V_s - Y)`` and
``c = sigma^2 gamma v1 (S V_s + S^2 V_ss - Y)``. ``E[M] = 0`` because the
coefficients are known before ``dW_k`` is drawn, so ``mean(U - M)`` is
unbiased while nearly all of the utility noise cancels.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import streams
from .blackscholes import BSField
from .corrector import CorrectorSolution
from .frictions import Portfolio, liquidation_value
from .market import CostStructure, MarketParams, ModelError, PayoffSpec, Preferences, evaluate_payoff

_STREAM = 7  # stream index reserved for the simulator


@dataclass(frozen=True)
class BandSpec:
    """No-transaction interval in currency units."""

    center: np.ndarray
    half_width: np.ndarray

    @property
    def lower(self):
        return self.center - self.half_width

    @property
    def upper(self):
        return self.center + self.half_width


def nt_band(corr: CorrectorSolution, t, s, z=0.0) -> BandSpec:
    """Band around the frictionless position ``y^g(t, s)``.

    ``z`` is accepted for the general interface; with exponential utility the
    center and the width do not depend on wealth.
    """
    corr.market.require_scalar()
    y = corr.merton.optimal_controls(t, s, z).y
    half = corr.costs.epsilon * np.abs(corr.xi0(t, s))
    y, half = np.broadcast_arrays(np.asarray(y, float), np.asarray(half, float))
    return BandSpec(y.copy(), half.copy())


def rebalance(x, y, lo, hi, costs: CostStructure):
    """Vectorised projection of ``y`` onto ``[lo, hi]`` for ``d = 1``.

    Selling ``D`` of the asset moves ``e = D / (1 + k10)`` into cash; buying
    ``D`` costs ``(1 + k01) D`` of cash. The accounting matches
    :func:`indiff.frictions.apply_transfer`. Returns ``(x, y, cost)``.
    """
    k10, k01 = costs.rate(1, 0), costs.rate(0, 1)
    sell = np.maximum(y - hi, 0.0)
    buy = np.maximum(lo - y, 0.0)
    e = sell / (1.0 + k10)
    x = x + e - (1.0 + k01) * buy
    y = np.clip(y, lo, hi)
    return x, y, k10 * e + k01 * buy


def liquidate(x, y, costs: CostStructure):
    """Vectorised ``l^eps(x, y)`` for ``d = 1``."""
    k10, k01 = costs.rate(1, 0), costs.rate(0, 1)
    return x + np.where(y >= 0, y / (1.0 + k10), y * (1.0 + k01))


def default_dt(eps: float) -> float:
    """``eps^2 / 50``, or ``1e-3`` when there is no band to resolve."""
    return eps * eps / 50.0 if eps > 0 else 1e-3


@dataclass(frozen=True)
class SimResult:
    """Outcome of one band strategy.

    ``utility`` holds the raw per-path terminal utility (plus consumption
    utility when ``kappa = 1``); ``u_hat`` is the control-variate mean.
    """

    epsilon: float
    v_g: float
    utility: np.ndarray
    u_hat: float
    stderr: float
    mean_cost: float
    mean_consumption_utility: float
    insolvent: np.ndarray
    clamped_steps: int
    max_band_excess: float
    n_steps: int

    @property
    def delta(self) -> float:
        """Relative utility loss ``(v^g - U) / (-v^g)``."""
        return (self.v_g - self.u_hat) / (-self.v_g)

    @property
    def delta_stderr(self) -> float:
        return self.stderr / abs(self.v_g)

    @property
    def insolvent_paths(self) -> int:
        return int(np.count_nonzero(self.insolvent))

    def dominance_ok(self) -> bool:
        """Frictionless dominance up to three standard errors."""
        return self.u_hat <= self.v_g + 3.0 * self.stderr


@dataclass(frozen=True)
class SimSetup:
    """Everything a band simulation needs apart from ``eps`` and the paths.

    ``costs`` fixes ``lam``; its ``epsilon`` is overridden per run. ``x0`` and
    ``y0`` default to a start at the band center with wealth ``z0``.
    """

    market: MarketParams
    prefs: Preferences
    payoff: PayoffSpec
    costs: CostStructure
    t0: float = 0.0
    s0: float = 1.0
    z0: float = 1.0
    x0: float | None = None
    y0: float | None = None
    dt_rule: Callable[[float], float] | float | None = None

    def corrector(self, eps: float) -> CorrectorSolution:
        return CorrectorSolution.build(self.market, self.prefs, self.payoff, self.costs.with_epsilon(eps))

    def start(self) -> tuple[float, float]:
        if self.x0 is not None and self.y0 is not None:
            return float(self.x0), float(self.y0)
        y = float(self.corrector(0.0).merton.optimal_controls(self.t0, self.s0, self.z0).y)
        return self.z0 - y, y

    def dt(self, eps: float) -> float:
        if self.dt_rule is None:
            return default_dt(eps)
        if callable(self.dt_rule):
            return float(self.dt_rule(eps))
        return float(self.dt_rule)


def simulate_reflected(
    market: MarketParams,
    prefs: Preferences,
    payoff: PayoffSpec,
    costs: CostStructure,
    t0: float,
    s0: float,
    x0: float,
    y0: float,
    n_paths: int,
    dt_rule=None,
    seed: int = 0,
    workers: int = 1,
    chunk: int = 16384,
) -> SimResult:
    """Simulate the band strategy for ``costs.epsilon``.

    Parameters
    ----------
    dt_rule
        Step size, or a callable of ``eps``; defaults to ``eps^2 / 50``.
    workers
        Threads over path chunks. Per-path utilities do not depend on it.
    """
    setup = SimSetup(market, prefs, payoff, costs, t0, s0, x0 + y0, x0, y0, dt_rule)
    return simulate_many(setup, [costs.epsilon], n_paths, seed, workers=workers, chunk=chunk)[0]


def simulate_many(setup: SimSetup, eps_list: Sequence[float], n_paths: int, seed: int,
                  workers: int = 1, chunk: int = 16384) -> list[SimResult]:
    """Run several ``eps`` on common random numbers and a common time grid."""
    m, p = setup.market, setup.prefs
    if m.d != 1:
        raise ModelError("band simulation is implemented for d = 1")
    if n_paths < 2:
        raise ModelError("need at least two paths")
    eps = np.asarray([float(e) for e in eps_list])
    if np.any(eps < 0):
        raise ModelError("epsilon must be nonnegative")
    x0, y0 = setup.start()
    costs = [setup.costs.with_epsilon(e) for e in eps]
    if any(liquidation_value(Portfolio(x0, [y0]), c).value < 0 for c in costs):
        raise ModelError("initial position is not solvent")
    dt = min(setup.dt(e) for e in eps)
    horizon = m.T - setup.t0
    if horizon <= 0:
        raise ModelError("t0 must be before T")
    n_steps = max(1, math.ceil(horizon / dt - 1e-9))
    engine = _Engine(setup, eps, costs, n_steps, seed, x0, y0)

    starts = list(range(0, n_paths, chunk))
    jobs = [np.arange(a, min(a + chunk, n_paths), dtype=np.uint64) for a in starts]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(engine.run, jobs))
    else:
        parts = [engine.run(j) for j in jobs]

    cat = {k: np.concatenate([q[k] for q in parts], axis=1) for k in parts[0] if k not in ("clamped", "excess")}
    clamped = sum(int(q["clamped"]) for q in parts)
    excess = max(float(q["excess"]) for q in parts)
    v_g = float(engine.merton_v(setup.t0, setup.s0, x0 + y0))
    out = []
    for i, e in enumerate(eps):
        adj = cat["utility"][i] - cat["cv"][i]
        out.append(SimResult(
            epsilon=float(e),
            v_g=v_g,
            utility=cat["utility"][i],
            u_hat=float(np.mean(adj)),
            stderr=float(np.std(adj, ddof=1) / math.sqrt(n_paths)),
            mean_cost=float(np.mean(cat["cost"][i])),
            mean_consumption_utility=float(np.mean(cat["cons_u"][i])),
            insolvent=cat["insolvent"][i],
            clamped_steps=clamped,
            max_band_excess=excess,
            n_steps=n_steps,
        ))
    return out


class _Engine:
    """Per-chunk stepping; shares nothing mutable between chunks."""

    def __init__(self, setup, eps, costs, n_steps, seed, x0, y0):
        self.setup = setup
        self.eps = eps
        self.costs = costs
        self.n_steps = n_steps
        self.seed = seed
        self.x0, self.y0 = x0, y0
        self.corr = setup.corrector(0.0)
        self.merton = self.corr.merton
        self.field = BSField(setup.payoff, setup.market)

    def merton_v(self, t, s, z):
        return self.merton.value(t, s, z)

    def _state(self, t, S):
        """Frictionless quantities at ``(t, S)`` shared by every ``eps``."""
        m, p = self.setup.market, self.setup.prefs
        v1, v2 = self.merton.discount_factors(t)
        ystar = m.merton_direction[0] / (p.gamma * v1)
        if self.setup.payoff.kind == "zero":
            V = dV = s2g = np.zeros_like(S)
        else:
            gk = self.field.greeks(t, S, warn=False)
            V, dV, s2g = gk.V, gk.dV, gk.s2_d2V
        sig = m.vol
        eta = 1.0 / (p.gamma * v1)
        al = sig * (ystar - s2g)
        xi0 = eta * np.cbrt(0.75 * al * al / (eta * eta * sig * sig) * self.corr.lam_sum)
        svs = S * dV
        return v1, v2, V, svs, s2g, svs + ystar, xi0

    def run(self, ids: np.ndarray) -> dict:
        st, m, p = self.setup, self.setup.market, self.setup.prefs
        n_e, n = self.eps.size, ids.size
        dt = (m.T - st.t0) / self.n_steps
        sq = math.sqrt(dt)
        growth = math.exp(m.r * dt)
        drift = (m.mu[0] - 0.5 * m.vol**2) * dt
        sig = m.vol
        g = p.gamma

        S = np.full(n, float(st.s0))
        X = np.full((n_e, n), self.x0)
        Y = np.full((n_e, n), self.y0)
        cost = np.zeros((n_e, n))
        cv = np.zeros((n_e, n))
        cons_u = np.zeros((n_e, n))
        insolvent = np.zeros((n_e, n), dtype=bool)
        clamped = 0
        excess = 0.0
        e_col = self.eps[:, None]

        def project(t, S, X, Y, cost):
            nonlocal excess
            v1, v2, V, svs, s2g, c, xi0 = self._state(t, S)
            half = e_col * xi0[None, :]
            for i, cs in enumerate(self.costs):
                X[i], Y[i], paid = rebalance(X[i], Y[i], c - half[i], c + half[i], cs)
                cost[i] += paid
                insolvent[i] |= liquidate(X[i], Y[i], cs) < 0
            with np.errstate(invalid="ignore", divide="ignore"):
                xi = np.abs(Y - c[None, :]) - half
            excess = max(excess, float(np.max(xi)))
            return v1, v2, V, svs, s2g

        t = st.t0
        v1, v2, V, svs, s2g = project(t, S, X, Y, cost)
        block = 256
        for k0 in range(0, self.n_steps, block):
            kk = min(block, self.n_steps - k0)
            Z = streams.normals(self.seed, ids, k0, kk, stream=_STREAM)
            for j in range(kk):
                k = k0 + j
                dW = sq * Z[:, j]
                Zw = X + Y
                vv = -np.exp(-g * v1 * (Zw - V[None, :]) + v2)
                gv = g * v1
                b = sig * gv * (svs[None, :] - Y)
                c2 = sig * sig * gv * ((svs + s2g)[None, :] - Y)
                cv += vv * (b * dW[None, :] + 0.5 * (c2 + b * b) * (dW * dW - dt)[None, :])
                if p.kappa:
                    c_raw = -(np.log(v1) + v2) / g + v1 * (Zw - V[None, :])
                    clamped += int(np.count_nonzero(c_raw < 0))
                    c = np.maximum(c_raw, 0.0)
                    cons_u += p.U1(c) * dt
                    X = X - c * dt
                S_new = S * np.exp(drift + sig * dW)
                Y = Y * (S_new / S)[None, :]
                X = X * growth
                S = S_new
                t = st.t0 + (k + 1) * dt
                if k + 1 < self.n_steps:
                    v1, v2, V, svs, s2g = project(t, S, X, Y, cost)
        gT = evaluate_payoff(st.payoff, S)
        utility = np.empty((n_e, n))
        for i, cs in enumerate(self.costs):
            ell = liquidate(X[i], Y[i], cs)
            insolvent[i] |= ell < 0
            utility[i] = p.U2(ell - gT) + cons_u[i]
        return {"utility": utility, "cv": cv, "cost": cost, "cons_u": cons_u,
                "insolvent": insolvent, "clamped": clamped, "excess": excess}


@dataclass(frozen=True)
class ConvergenceRow:
    epsilon: float
    delta: float
    delta_over_eps2: float
    stderr: float
    mean_cost: float
    insolvent_paths: int
    usable: bool


@dataclass(frozen=True)
class ConvergenceStudy:
    slope: float
    verdict: str  # "fitted" or "no signal"
    rows: list[ConvergenceRow] = field(default_factory=list)
    results: list[SimResult] = field(default_factory=list, repr=False)


def convergence_study(setup: SimSetup, eps_list: Sequence[float], n_paths: int, seed: int,
                      workers: int = 1) -> ConvergenceStudy:
    """Log-log slope of ``Delta(eps)`` on common random numbers.

    Runs whose standard error exceeds half of ``Delta`` (or with
    ``Delta <= 0``) are kept in the table but left out of the fit; without
    costs, or with fewer than two usable runs, the verdict is ``"no signal"``.
    """
    eps = [float(e) for e in eps_list]
    if len(set(eps)) < 3 or any(not (0 < e <= 0.5) for e in eps):
        raise ModelError("eps_list needs at least three distinct values in (0, 0.5]")
    results = simulate_many(setup, eps, n_paths, seed, workers=workers)
    rows = []
    for r in results:
        d, se = r.delta, r.delta_stderr
        rows.append(ConvergenceRow(r.epsilon, d, d / r.epsilon**2, se, r.mean_cost,
                                   r.insolvent_paths, bool(d > 0 and se <= 0.5 * d)))
    use = [row for row in rows if row.usable]
    if setup.costs.lam_sum == 0:
        use = []  # no band: whatever Delta shows is discretisation noise
    if len({row.epsilon for row in use}) < 2:
        return ConvergenceStudy(float("nan"), "no signal", rows, results)
    x = np.log([row.epsilon for row in use])
    y = np.log([row.delta for row in use])
    slope = float(np.polyfit(x, y, 1)[0])
    return ConvergenceStudy(slope, "fitted", rows, results)
