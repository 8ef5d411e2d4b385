"""Second corrector ``u_tilde`` and the small-cost price expansion.

``u_tilde`` solves the linear problem

    -u_t - r s u_s - 1/2 sigma^2 s^2 u_ss + kappa v1(t) u = abar(t, s),
    u(T, .) = 0,

so that ``u_tilde(t,s) = E^Q[ int_t^T exp(-kappa int_t^u v1) abar(u, S_u) du ]``.
For non-smooth payoffs ``abar`` blows up like ``(T-t)^{-2/3}`` at the money,
so every solver here works on the graded mesh ``T - t_k ∝ (k/N)^3``.

Three independent routes are provided: Crank-Nicolson finite differences,
Monte-Carlo along exact risk-neutral paths, and a deterministic quadrature of
the Feynman-Kac integral (Gaussian expectation in ``z`` for each time node).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .blackscholes import sample_q_paths
from .corrector import AuditReport, CorrectorSolution, audit_assumptions
from .market import ModelError, regularity_class


class DivergenceError(ModelError):
    """The second corrector is infinite for this payoff."""


def graded_mesh(t0: float, T: float, n: int, power: float = 3.0) -> np.ndarray:
    """Increasing times from ``t0`` to ``T`` with ``T - t_k = (T - t0)(1 - k/n)^power``."""
    k = np.arange(n + 1)
    t = T - (T - t0) * (1.0 - k / n) ** power
    t[0], t[-1] = t0, T
    return t


# -- finite differences ------------------------------------------------------------
@dataclass(frozen=True)
class GridSpec:
    """FD grid for ``u_tilde``.

    ``n_space`` and ``n_time`` count intervals; edges sit ``n_std`` standard
    deviations of ``log S_T`` either side of ``log s_center``.
    """

    n_space: int = 400
    n_time: int = 400
    n_std: float = 6.0
    grading: float = 3.0
    implicit_steps: int = 5
    s_center: float | None = None
    t0: float = 0.0
    gauss_points: int = 3
    max_subcells: int = 512

    def __post_init__(self):
        if self.n_space < 50 or self.n_time < 50:
            raise ModelError("grid too coarse: need at least 50 points per dimension")


@dataclass(frozen=True)
class UTildeField:
    times: np.ndarray
    s: np.ndarray
    values: np.ndarray  # (n_times, n_s)
    solver: str
    grading: float
    stderr: np.ndarray | None = None

    @property
    def x(self) -> np.ndarray:
        return np.log(self.s)

    def at(self, t: float, s) -> np.ndarray:
        """Spline in log-spot at the mesh time nearest ``t`` (must be a mesh node)."""
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-10 * max(1.0, abs(t)):
            raise ModelError("u_tilde field is only available on its time mesh")
        return CubicSpline(self.x, self.values[k])(np.log(np.asarray(s, float)))


def _source_cell_average(corr: CorrectorSolution, t: float, x: np.ndarray, dx: float,
                         centres: np.ndarray, max_sub: int) -> np.ndarray:
    """Cell averages of ``abar(t, .)`` over ``[x_i - dx/2, x_i + dx/2]``.

    Cells near a payoff knot's forward image are sub-sampled finely enough to
    resolve the gamma peak, whose log-spot width is ``sigma sqrt(T - t)``.
    """
    s = np.exp(x)
    f = np.asarray(corr.a_bar(t, s), float)
    if centres.size == 0:
        return f
    width = corr.market.vol * np.sqrt(max(corr.market.T - t, 1e-300))
    m = int(min(max_sub, np.ceil(4.0 * dx / width)))
    if m <= 1:
        return f
    near = np.zeros(x.size, dtype=bool)
    for c in centres:
        near |= np.abs(x - c) <= 10.0 * width + dx
    idx = np.flatnonzero(near)
    if idx.size:
        off = (np.arange(m) + 0.5) / m - 0.5
        xs = x[idx, None] + dx * off[None, :]
        f[idx] = np.asarray(corr.a_bar(t, np.exp(xs)), float).mean(axis=1)
    return f


def solve_u_tilde_fd(corr: CorrectorSolution, grid: GridSpec = GridSpec()) -> UTildeField:
    """Crank-Nicolson (Rannacher start) solve of the ``u_tilde`` problem in log-spot.

    Parameters
    ----------
    corr
        Supplies ``abar`` (evaluated lazily at quadrature nodes) and ``v1``.
    grid
        Mesh description; the first ``implicit_steps`` steps from ``T`` are
        fully implicit to damp the non-smooth start.
    """
    m = corr.market
    m.require_scalar()
    sig, r, T = m.vol, m.r, m.T
    kappa = corr.prefs.kappa
    t0 = grid.t0
    if not t0 < T:
        raise ModelError("need t0 < T")
    knots = corr.payoff.knots
    s_c = grid.s_center or (float(knots[0]) if knots.size else 100.0)
    half = grid.n_std * sig * np.sqrt(T - t0)
    x = np.linspace(np.log(s_c) - half, np.log(s_c) + half, grid.n_space + 1)
    dx = x[1] - x[0]
    n = x.size
    times = graded_mesh(t0, T, grid.n_time, grid.grading)
    taus = T - times[::-1]  # increasing from 0
    # forward images of the knots move with the drift of log S under Q
    ln_knots = np.log(knots) if knots.size else np.empty(0)

    a2, b = 0.5 * sig * sig, r - 0.5 * sig * sig
    lo = a2 / dx**2 - b / (2 * dx)
    di = -2 * a2 / dx**2
    up = a2 / dx**2 + b / (2 * dx)

    def apply_L(u, disc):
        out = np.empty_like(u)
        out[1:-1] = lo * u[:-2] + di * u[1:-1] + up * u[2:]
        # zero second derivative at the edges: one-sided first derivative only
        out[0] = b * (u[1] - u[0]) / dx
        out[-1] = b * (u[-1] - u[-2]) / dx
        return out - disc * u

    def banded(theta_dt, disc):
        ab = np.zeros((3, n))
        ab[0, 2:] = -theta_dt * up
        ab[1, 1:-1] = 1.0 - theta_dt * (di - disc)
        ab[2, :-2] = -theta_dt * lo
        ab[1, 0] = 1.0 - theta_dt * (-b / dx - disc)
        ab[0, 1] = -theta_dt * (b / dx)
        ab[1, -1] = 1.0 - theta_dt * (b / dx - disc)
        ab[2, -2] = -theta_dt * (-b / dx)
        return ab

    gx, gw = leggauss(grid.gauss_points)
    L = T - t0
    u = np.zeros(n)
    vals = [u.copy()]
    for k in range(grid.n_time):
        tau_a, tau_b = taus[k], taus[k + 1]
        dt = tau_b - tau_a
        # source integral over the step in the grading variable q = (tau/L)^(1/p)
        p = grid.grading
        qa, qb = (tau_a / L) ** (1 / p), (tau_b / L) ** (1 / p)
        theta = 1.0 if k < grid.implicit_steps else 0.5
        t_ref = T - tau_b + theta * dt
        src = np.zeros(n)
        for xq, wq in zip(gx, gw):
            q = 0.5 * (qa + qb) + 0.5 * (qb - qa) * xq
            tau = L * q**p
            jac = 0.5 * (qb - qa) * L * p * q ** (p - 1)
            tq = T - tau
            centres = ln_knots - (r - 0.5 * sig * sig) * tau
            f = _source_cell_average(corr, tq, x, dx, centres, grid.max_subcells)
            src += wq * jac * f * _discount(corr, tq, t_ref, kappa)
        d_new = kappa * float(corr.merton.v1(T - tau_b))
        d_old = kappa * float(corr.merton.v1(T - tau_a))
        rhs = u + (1 - theta) * dt * apply_L(u, d_old) + src
        u = solve_banded((1, 1), banded(theta * dt, d_new), rhs)
        vals.append(u.copy())
    values = np.array(vals[::-1])
    return UTildeField(times, np.exp(x), values, "FD", grid.grading)


def _discount(corr, tq, t_ref, kappa):
    """Discount weight ``exp(-kappa int_{t_ref}^{tq} v1)`` for a source at ``tq``.

    The implicit solve that follows applies another ``theta dt`` of discounting
    to everything in the right-hand side, so sources are carried only to
    ``t_ref = t_end + theta dt``; otherwise the discount is counted twice and
    the scheme drops to first order.
    """
    if kappa == 0:
        return 1.0
    return float(corr.merton.discount_weight(t_ref, tq))


# -- closed form for g = 0 ---------------------------------------------------------
def u_tilde_zero_closed(corr: CorrectorSolution, t) -> np.ndarray:
    """``u_tilde^0(t) = abar^0 int_t^T exp(-kappa int_t^u v1) du``; ``abar^0`` is constant."""
    m = corr.market
    if corr.payoff.kind not in ("zero", "forward"):
        raise ModelError("closed form needs a payoff with zero gamma")
    abar = float(corr.a_bar(m.T, 1.0))
    tau = m.T - np.asarray(t, float)
    if corr.prefs.kappa == 0:
        return abar * tau
    r = m.r
    E = np.exp(r * tau)
    return abar * ((E - 1.0) / r + (r - 1.0) * tau) / (E + r - 1.0)


# -- Monte Carlo ---------------------------------------------------------------------
def u_tilde_mc(corr: CorrectorSolution, t: float, s: float, n_paths: int, seed: int,
               n_time: int = 400, grading: float = 3.0, chunk: int = 8192) -> tuple[float, float]:
    """Feynman-Kac estimate ``(value, stderr)`` with antithetic pairs.

    Trapezoid in time on the graded mesh; the last interval before ``T`` uses
    the closed-form weight of ``(T-u)^{-2/3}``, i.e. ``3 (T - t_{N-1}) f_{N-1}``.
    """
    if n_paths < 100:
        raise ModelError("n_paths must be at least 100")
    m = corr.market
    if corr.lam_sum == 0:
        return 0.0, 0.0
    n_paths += n_paths % 2
    times = graded_mesh(t, m.T, n_time, grading)
    wts = corr.merton.discount_weight(t, times[:-1])
    dt = np.diff(times)
    quad = np.zeros(n_time)  # weights on f_0 .. f_{N-1}
    quad[:-1] += 0.5 * dt[:-1]
    quad[1:] += 0.5 * dt[:-1]
    quad[-1] += 3.0 * dt[-1]
    quad *= wts
    pair_vals = []
    for start in range(0, n_paths, chunk):
        ids = np.arange(start, min(start + chunk, n_paths))
        batch = sample_q_paths(m, t, s, times, ids.size, seed, antithetic=True, path_ids=ids)
        S = batch.paths[:, :-1]
        f = np.asarray(corr.a_bar(times[None, :-1], S), float)
        vals = f @ quad
        pair_vals.append(0.5 * (vals[0::2] + vals[1::2]))
    pv = np.concatenate(pair_vals)
    return float(np.sum(pv) / pv.size), float(np.std(pv, ddof=1) / np.sqrt(pv.size))


# -- deterministic Feynman-Kac quadrature -----------------------------------------------
def _expected_abar(corr: CorrectorSolution, t: float, s: float, u: float, n_gl: int = 16) -> float:
    """``E^Q[abar(u, S_u) | S_t = s]`` by composite Gauss-Legendre in the normal score."""
    m = corr.market
    sig, r = m.vol, m.r
    tau = u - t
    sd = sig * np.sqrt(tau)
    mu = np.log(s) + (r - 0.5 * sig * sig) * tau
    brk = list(np.linspace(-10.0, 10.0, 21))
    rem = sig * np.sqrt(max(m.T - u, 0.0))
    for K in corr.payoff.knots:
        # the abar peak sits near the forward image of K, width ~ sigma sqrt(T-u)
        zc = (np.log(K) - (r - 0.5 * sig * sig) * (m.T - u) - mu) / sd
        wz = max(rem / sd, 1e-12)
        brk += [zc + c * wz for c in (0, -0.5, 0.5, -1, 1, -2, 2, -4, 4, -8, 8, -16, 16)]
    brk = np.unique(np.clip(brk, -10.0, 10.0))
    gx, gw = leggauss(n_gl)
    a, b = brk[:-1, None], brk[1:, None]
    z = 0.5 * (a + b) + 0.5 * (b - a) * gx[None, :]
    w = 0.5 * (b - a) * gw[None, :]
    S = np.exp(mu + sd * z)
    f = np.asarray(corr.a_bar(u, S), float)
    return float(np.sum(w * f * np.exp(-0.5 * z * z)) / np.sqrt(2 * np.pi))


def u_tilde_quadrature(corr: CorrectorSolution, t: float, s: float, n_time: int = 100,
                       grading: float = 3.0, n_gauss: int = 4) -> float:
    """Deterministic Feynman-Kac value on a graded mesh (Gauss-Legendre per step)."""
    m = corr.market
    if corr.lam_sum == 0:
        return 0.0
    L = m.T - t
    gx, gw = leggauss(n_gauss)
    total = 0.0
    # tau = T - u = L q^p with q uniform in (0, 1]
    for k in range(n_time):
        qa, qb = k / n_time, (k + 1) / n_time
        for xq, wq in zip(gx, gw):
            q = 0.5 * (qa + qb) + 0.5 * (qb - qa) * xq
            tau = L * q**grading
            jac = 0.5 * (qb - qa) * L * grading * q ** (grading - 1)
            u = m.T - tau
            if u <= t:
                continue
            wdisc = float(corr.merton.discount_weight(t, u))
            total += wq * jac * wdisc * _expected_abar(corr, t, s, u)
    return total


@dataclass(frozen=True)
class DivergenceVerdict:
    verdict: str  # "converged", "diverged" or "inconclusive"
    estimates: tuple
    layer: tuple
    growth: float
    value: float = float("nan")


def divergence_probe(corr: CorrectorSolution, t: float, s: float, n0: int = 25,
                     levels: int = 4) -> DivergenceVerdict:
    """Mesh-refinement ladder for the finiteness of ``u_tilde``.

    At each level ``k`` the mesh has ``n0 2^k`` steps. Two sequences are
    recorded: the point value ``P_k = u_tilde(t, s)`` and the terminal-layer
    value ``L_k = u_tilde(T - tau_k, s_k)`` where ``tau_k`` is the first mesh
    step from ``T`` and ``s_k`` the forward image of the first payoff knot. The
    field is declared divergent when ``L`` grows by more than 1.5 at each of the
    last two refinements, convergent when the last two ``P`` agree within 1%.
    """
    corr.market.require_scalar()
    m = corr.market
    knots = corr.payoff.knots
    P, Lay = [], []
    for k in range(levels):
        n = n0 * 2**k
        P.append(u_tilde_quadrature(corr, t, s, n_time=n))
        tau_k = (m.T - t) / n**3
        sk = float(knots[0]) * np.exp(-m.r * tau_k) if knots.size else s
        Lay.append(u_tilde_quadrature(corr, m.T - tau_k, sk, n_time=n0))
    g1, g2 = _ratio(Lay[-2], Lay[-3]), _ratio(Lay[-1], Lay[-2])
    if g1 > 1.5 and g2 > 1.5:
        return DivergenceVerdict("diverged", tuple(P), tuple(Lay), g2)
    if abs(P[-1] - P[-2]) <= 0.01 * abs(P[-1]) or P[-1] == P[-2]:
        return DivergenceVerdict("converged", tuple(P), tuple(Lay), g2, P[-1])
    return DivergenceVerdict("inconclusive", tuple(P), tuple(Lay), g2)


def _ratio(a, b):
    if b == 0:
        return 0.0 if a == 0 else np.inf
    return a / b


# -- price expansion --------------------------------------------------------------------
@dataclass(frozen=True)
class PriceRow:
    epsilon: float
    V: float
    h: float
    p_eps: float
    u_tilde_g: float
    u_tilde_0: float
    stderr: float
    divergence_flag: bool
    h_alt: float


@dataclass(frozen=True)
class PriceReport:
    t: float
    s: float
    V: float
    u_tilde_g: float
    u_tilde_0: float
    h: float
    rows: tuple
    divergence: DivergenceVerdict | None
    audit: AuditReport | None
    provenance: dict = field(default_factory=dict)

    def correction(self, eps: float) -> float:
        return eps * eps * self.h


def h_general(u_g_at, u_0_at, v_g_z_at, p_g):
    """``h(t,s,x) = (u^g(t,s,x+p^g) - u^0(t,s,x)) / v^g_z(t,s,x+p^g)`` for general utilities."""

    def h(t, s, x):
        pg = p_g(t, s, x)
        den = v_g_z_at(t, s, x + pg)
        if np.any(den == 0):
            raise ModelError("v_z vanishes: marginal utility must be positive")
        return (u_g_at(t, s, x + pg) - u_0_at(t, s, x)) / den

    return h


def price_expansion(
    corr: CorrectorSolution,
    t: float,
    s: float,
    eps_list,
    grid: GridSpec | None = None,
    audit: AuditReport | None = None,
    probe: DivergenceVerdict | None = None,
    check_divergence: bool = True,
) -> PriceReport:
    """``p^eps = V + eps^2 (u_tilde^g - u_tilde^0) / (gamma v1)`` on an epsilon grid."""
    m = corr.market
    m.require_scalar()
    if not t < m.T:
        raise ModelError("need t < T")
    if audit is None:
        audit = audit_assumptions(m, corr.prefs, corr.payoff, form=corr.form)
    if probe is None and check_divergence and regularity_class(corr.payoff) in ("discontinuous",):
        probe = divergence_probe(corr, t, s)
    if (probe is not None and probe.verdict == "diverged") or audit.verdict == "invalid":
        raise DivergenceError(
            "u_tilde diverges for this payoff (see divergence_probe / the audit subcommand)"
        )
    grid = grid or GridSpec(t0=t, s_center=s)
    if grid.t0 != t:
        raise ModelError("grid.t0 must equal t")
    zero = CorrectorSolution.build(m, corr.prefs, corr.payoff.zero(), corr.costs, corr.form)
    if corr.payoff.kind in ("zero", "forward"):
        ug = float(u_tilde_zero_closed(corr, t))
        src = "closed form"
    else:
        ug = float(solve_u_tilde_fd(corr, grid).at(t, s))
        src = "finite differences"
    u0 = float(u_tilde_zero_closed(zero, t))
    V = float(corr.merton.bs.value(t, s)) if corr.payoff.kind != "zero" else 0.0
    g1 = corr.prefs.gamma * float(corr.merton.v1(t))
    h = (ug - u0) / g1
    # diagnostic: same pipeline with the alternate abar reading, which is
    # (gamma v1(u))^2 abar at each time u; for g = 0 this integrates in closed form
    h_alt = _h_alt(corr, zero, t, s, grid)
    rows = tuple(
        PriceRow(float(e), V, h, V + float(e) ** 2 * h, ug, u0, 0.0, False, h_alt)
        for e in eps_list
    )
    return PriceReport(t, s, V, ug, u0, h, rows, probe, audit,
                       {"u_tilde_g": src, "u_tilde_0": "closed form", "V": "closed form"})


def _h_alt(corr, zero, t, s, grid):
    class _Alt:
        # corrector stand-in exposing the alternate abar through the same interface
        def __init__(self, c):
            self.c = c
            self.market, self.prefs, self.merton, self.payoff = c.market, c.prefs, c.merton, c.payoff
            self.lam_sum = c.lam_sum

        def a_bar(self, tt, ss):
            return self.c.a_bar_display(tt, ss)

    g1 = corr.prefs.gamma * float(corr.merton.v1(t))
    u0 = u_tilde_quadrature(_Alt(zero), t, s, n_time=50)
    if corr.payoff.kind in ("zero", "forward"):
        ug = u0
    else:
        ug = float(solve_u_tilde_fd(_Alt(corr), grid).at(t, s))
    return (ug - u0) / g1
