"""Explicit one-dimensional first corrector and its verification.

In the exponential Black-Scholes case the fast variable ``xi = (y - y^g)/eps``
sees the complementarity problem

    max( 1/2 sigma^2 xi^2 v_zz - 1/2 alpha^2 w_xixi + a ,
         -lam10 v_z + w_xi , -lam01 v_z - w_xi ) = 0,

whose solution is a quartic inside ``[-xi0, xi0]`` and affine outside.

Two coefficient forms are implemented. ``"validated"`` scales the quartic by
``1/eta``; ``"transcribed"`` scales it by ``1/eta^2``. They coincide when
``eta = 1``. Only the first satisfies the equation for general ``eta``; the
choice is made by :func:`arbitrate_forms` against residuals and the
brute-force solver in :mod:`indiff.ergodic`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize_scalar

from .blackscholes import BSField
from .ergodic import ErgodicSolution, solve_ergodic
from .market import (
    CostStructure,
    MarketParams,
    ModelError,
    PayoffSpec,
    Preferences,
    UnsupportedDimensionError,
)
from .merton import MertonSolution

FORMS = ("validated", "transcribed")


class WValue(NamedTuple):
    w: np.ndarray
    w_xi: np.ndarray
    branch: np.ndarray  # "interior", "sell" (xi >= xi0) or "buy" (xi <= -xi0)


class CorrectorResidual(NamedTuple):
    pde_part: np.ndarray
    slack_10: np.ndarray  # -lam10 v_z + w_xi, active on the selling side
    slack_01: np.ndarray  # -lam01 v_z - w_xi, active on the buying side


@dataclass(frozen=True)
class CorrectorSolution:
    """First corrector of the one-asset exponential problem.

    Parameters
    ----------
    merton
        Frictionless solution supplying ``v``, ``v1`` and the claim's greeks.
    costs
        Proportional costs; only ``lam10`` (sell) and ``lam01`` (buy) matter,
        ``epsilon`` is irrelevant at this order.
    form
        Interior coefficient form, ``"validated"`` or ``"transcribed"``.
    """

    merton: MertonSolution
    costs: CostStructure
    form: str = "validated"

    def __post_init__(self):
        if self.form not in FORMS:
            raise ModelError(f"form must be one of {FORMS}")
        if self.costs.d != self.merton.market.d:
            raise ModelError("cost structure and market disagree on d")

    @classmethod
    def build(cls, market: MarketParams, prefs: Preferences, payoff: PayoffSpec,
              costs: CostStructure, form: str = "validated") -> "CorrectorSolution":
        return cls(MertonSolution(market, prefs, payoff), costs, form)

    # -- shortcuts ----------------------------------------------------------
    @property
    def market(self) -> MarketParams:
        return self.merton.market

    @property
    def prefs(self) -> Preferences:
        return self.merton.prefs

    @property
    def payoff(self) -> PayoffSpec:
        return self.merton.payoff

    @property
    def lam10(self) -> float:
        return self.costs.sell

    @property
    def lam01(self) -> float:
        return self.costs.buy

    @property
    def lam_sum(self) -> float:
        return self.lam10 + self.lam01

    def _scalar(self):
        if self.market.d != 1:
            raise UnsupportedDimensionError("explicit corrector exists for d = 1 only")
        return self.market.vol

    def _s2gamma(self, t, s):
        if self.payoff.kind in ("zero", "forward"):
            return np.zeros(np.broadcast(np.asarray(t), np.asarray(s)).shape)
        return BSField(self.payoff, self.market).greeks(t, s, warn=False).s2_d2V

    # -- normalisers ----------------------------------------------------------
    def eta(self, t):
        return self.merton.eta(t)

    def alpha(self, t, s):
        """``sigma ((mu-r)/(gamma sigma^2 v1) - s^2 V_ss)``."""
        sig = self._scalar()
        ystar = self.market.merton_direction[0] / (self.prefs.gamma * self.merton.v1(t))
        return sig * (ystar - self._s2gamma(t, s))

    def alpha_matrix(self, t):
        """General-``d`` diffusion matrix of the fast variable for ``g = 0``."""
        if self.payoff.kind != "zero":
            raise UnsupportedDimensionError("alpha matrix with a claim is implemented for d = 1 only")
        ystar = self.market.merton_direction / (self.prefs.gamma * self.merton.v1(t))
        return np.diag(ystar) @ self.market.sigma

    def normalizers(self, t, s):
        """``(eta, alpha, alpha_bar)``."""
        eta = self.eta(t)
        al = self.alpha(t, s)
        return eta, al, al / eta

    def xi0(self, t, s):
        """Half-width of the no-trade interval in the fast variable."""
        sig = self._scalar()
        eta, al, _ = self.normalizers(t, s)
        return eta * np.cbrt(0.75 * al * al / (eta * eta * sig * sig) * self.lam_sum)

    def rho0(self, t, s):
        return self.xi0(t, s) / self.eta(t)

    # -- eigenvalues ------------------------------------------------------------
    def a(self, t, s, z):
        """``a = sigma^2 v_z xi0^2 / (2 eta)``."""
        sig = self._scalar()
        _, vz, _ = self.merton.merton_value(t, s, z)
        return sig * sig * vz * self.xi0(t, s) ** 2 / (2.0 * self.eta(t))

    def a_bar(self, t, s):
        """``abar`` with ``a = -v abar``; equals ``sigma^2 rho0^2 / 2``."""
        sig = self._scalar()
        return 0.5 * sig * sig * self.rho0(t, s) ** 2

    def a_bar_display(self, t, s):
        """Alternate reading carrying an extra ``(gamma v1)^2``; diagnostic only."""
        g1 = self.prefs.gamma * self.merton.v1(t)
        return g1 * g1 * self.a_bar(t, s)

    # -- the corrector -------------------------------------------------------
    def _coefficients(self, t, s):
        sig = self._scalar()
        eta, al, _ = self.normalizers(t, s)
        x0 = self.xi0(t, s)
        scale = eta if self.form == "validated" else eta * eta
        with np.errstate(divide="ignore", invalid="ignore"):
            c4 = -sig * sig / (12.0 * scale * al * al)
            c2 = sig * sig * x0 * x0 / (2.0 * scale * al * al)
        c1 = 0.5 * (self.lam10 - self.lam01)
        return c4, c2, c1, x0

    def delta_C(self, xi):
        """Support function of ``C = [-lam01, lam10]``."""
        xi = np.asarray(xi, float)
        return self.lam10 * np.maximum(xi, 0.0) + self.lam01 * np.maximum(-xi, 0.0)

    def w_explicit(self, t, s, z, xi, branch: str | None = None) -> WValue:
        """Corrector value, first derivative and branch tag.

        ``branch`` forces one branch's formula (extended beyond its region);
        used by the finite-difference stencils so they never straddle a kink.
        """
        c4, c2, c1, x0 = self._coefficients(t, s)
        _, vz, _ = self.merton.merton_value(t, s, z)
        xi = np.asarray(xi, float)
        c4, c2, x0, vz, xi = np.broadcast_arrays(c4, c2, x0, vz, xi)
        tag = np.where(xi >= x0, "sell", np.where(xi <= -x0, "buy", "interior"))
        tag = np.where((np.abs(xi) == x0) & (x0 > 0), "interior", tag)
        use = tag if branch is None else np.full(tag.shape, branch)
        base = -3.0 / 16.0 * self.lam_sum * x0
        with np.errstate(invalid="ignore", over="ignore"):
            w_in = c4 * xi**4 + c2 * xi**2 + c1 * xi
            d_in = 4 * c4 * xi**3 + 2 * c2 * xi + c1
        w = np.select([use == "interior", use == "sell"], [w_in, base + self.lam10 * xi], base - self.lam01 * xi)
        d = np.select([use == "interior", use == "sell"], [d_in, np.full(xi.shape, self.lam10)], -self.lam01)
        if tag.ndim == 0:
            return WValue(float(vz * w), float(vz * d), str(tag))
        return WValue(vz * w, vz * d, tag)

    def w_bar(self, t, s, rho):
        """Normalised corrector ``w / (eta v_z)`` as a function of ``rho = xi / eta``."""
        eta = self.eta(t)
        z = 0.0
        _, vz, _ = self.merton.merton_value(t, s, z)
        out = self.w_explicit(t, s, z, np.asarray(rho) * eta)
        return out.w / (eta * vz), out.w_xi / vz

    def w_xixi(self, t, s, z, xi):
        """``w_xixi`` by finite differences with step ``xi0/200``.

        Inside a branch a 5-point central stencil is used (exact on the quartic);
        within two steps of ``+-xi0`` a 6-point one-sided stencil pointing into
        the same branch replaces it, since ``w`` is only piecewise smooth.
        ``xi`` may be an array; ``t, s, z`` are scalars.
        """
        x0 = float(self.xi0(t, s))
        xi = np.asarray(xi, float)
        h = x0 / 200.0 if x0 > 0 else 1e-6
        tag = np.asarray(self.w_explicit(t, s, z, xi).branch)

        def f(x):
            # each point evaluated on its own branch's formula
            out = np.empty(x.shape)
            for br in ("interior", "sell", "buy"):
                sel = np.broadcast_to(tag[..., None], x.shape) == br
                if sel.any():
                    out[sel] = self.w_explicit(t, s, z, x[sel], branch=br).w
            return out

        inside = np.abs(xi) <= x0
        dist = np.where(inside, x0 - np.abs(xi), np.abs(xi) - x0)
        k5 = np.arange(-2, 3)
        central = f(xi[..., None] + k5 * h) @ np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12 * h * h)
        # one-sided: step away from the nearer boundary, staying in the branch
        sgn = np.where(inside, -np.sign(xi), np.sign(xi))
        sgn = np.where(sgn == 0, 1.0, sgn)
        c = np.array([15 / 4, -77 / 6, 107 / 6, -13.0, 61 / 12, -5 / 6])
        one_sided = f(xi[..., None] + sgn[..., None] * np.arange(6) * h) @ c / (h * h)
        out = np.where((dist >= 2 * h) | (x0 == 0), central, one_sided)
        return float(out) if out.ndim == 0 else out

    def corrector_residual(self, t, s, z, xi) -> CorrectorResidual:
        """Components of the complementarity problem at one point or along ``xi``."""
        sig = self._scalar()
        _, vz, vzz = self.merton.merton_value(t, s, z)
        al = self.alpha(t, s)
        wv = self.w_explicit(t, s, z, xi)
        pde = 0.5 * sig * sig * np.asarray(xi) ** 2 * vzz - 0.5 * al * al * self.w_xixi(t, s, z, xi) + self.a(t, s, z)
        out = (pde, -self.lam10 * vz + wv.w_xi, -self.lam01 * vz - wv.w_xi)
        if np.ndim(xi) == 0:
            return CorrectorResidual(*(float(v) for v in out))
        return CorrectorResidual(*(np.asarray(v, float) for v in out))

    def minimizer(self, t, s, z) -> float:
        """Location of the minimum of ``w(t,s,z,.)`` by golden-section search."""
        x0 = float(self.xi0(t, s))
        if x0 == 0:
            return 0.0
        f = lambda x: float(self.w_explicit(t, s, z, x).w)  # noqa: E731
        grid = np.linspace(-2 * x0, 2 * x0, 81)
        k = int(np.argmin([f(x) for x in grid]))
        res = minimize_scalar(f, bracket=(grid[k - 1], grid[k], grid[k + 1]), method="golden", tol=1e-12)
        return float(res.x)

    # -- independent oracle ------------------------------------------------------
    def brute_force(self, t, s, n: int = 2000) -> tuple[float, float, ErgodicSolution]:
        """``(xi0, abar)`` from the policy-iteration solver."""
        sig = self._scalar()
        eta, _, ab = self.normalizers(t, s)
        sol = solve_ergodic(sig, abs(float(ab)), self.lam10, self.lam01, n=n)
        return float(eta) * sol.rho0, sol.a_bar, sol


# -- form arbitration --------------------------------------------------------------
@dataclass(frozen=True)
class FormArbitration:
    selected: str
    interior_residual: dict = field(default_factory=dict)
    pasting_jump: dict = field(default_factory=dict)
    brute_force_xi0_error: float = float("nan")
    brute_force_abar_error: float = float("nan")
    probe: str = ""

    def summary(self) -> str:
        parts = [f"selected={self.selected}"]
        for f in FORMS:
            parts.append(
                f"{f}: max|pde|/a={self.interior_residual[f]:.3e}, "
                f"pasting jump/v_z={self.pasting_jump[f]:.3e}"
            )
        parts.append(
            f"brute force: xi0 rel err={self.brute_force_xi0_error:.2e}, "
            f"abar rel err={self.brute_force_abar_error:.2e}"
        )
        return "; ".join(parts)


def arbitrate_forms(
    market: MarketParams | None = None,
    costs: CostStructure | None = None,
    gamma: float = 2.0,
    t: float = 0.25,
    s: float = 100.0,
    z: float = 0.0,
) -> FormArbitration:
    """Pick the interior coefficient form that solves the corrector equation.

    The probe uses ``gamma != 1`` so that ``eta != 1`` and the two forms differ.
    """
    market = market or MarketParams(0.1, 0.2, 0.02, 1.0)
    costs = costs or CostStructure.one_asset(1.0, 1.0, 0.1)
    prefs = Preferences(gamma, 0)
    res, jump = {}, {}
    sols = {}
    for f in FORMS:
        c = CorrectorSolution.build(market, prefs, PayoffSpec.zero(), costs, f)
        sols[f] = c
        x0 = float(c.xi0(t, s))
        a = float(c.a(t, s, z))
        _, vz, _ = c.merton.merton_value(t, s, z)
        xs = np.linspace(-0.9 * x0, 0.9 * x0, 41)
        res[f] = max(abs(c.corrector_residual(t, s, z, x).pde_part) / a for x in xs)
        h = 1e-7 * x0
        left = float(c.w_explicit(t, s, z, x0 - h).w_xi)
        jump[f] = abs(left - c.lam10 * float(vz)) / float(vz)
    score = {f: res[f] + jump[f] for f in FORMS}
    selected = min(score, key=score.get)
    sel = sols[selected]
    xb, ab, _ = sel.brute_force(t, s)
    return FormArbitration(
        selected,
        res,
        jump,
        abs(xb / float(sel.xi0(t, s)) - 1.0),
        abs(ab / float(sel.a_bar(t, s)) - 1.0),
        f"gamma={gamma}, t={t}, s={s}, z={z}, eta={float(sel.eta(t)):.4f}",
    )


# -- assumption audit ----------------------------------------------------------------
@dataclass(frozen=True)
class AuditReport:
    """Numerical audit of the sufficient conditions for the expansion (d = 1).

    ``exponents`` holds fitted ``beta`` in ``max_s |D| ~ (T-t)^{-beta}`` for
    ``D`` in ``V_s, V_ss, V_sss``. ``nu = 1 - beta_ss`` and
    ``eta_exp = 1 - max(beta_s, beta_sss)``.
    """

    c0: float
    crossings: tuple
    exponents: dict
    nu: float
    eta_exp: float
    nu_ok: bool
    eta_ok: bool
    integrable: bool
    verdict: str
    form: str = ""

    def lines(self) -> list[str]:
        return [
            f"c0_candidate,{self.c0:.6g}",
            f"zero_crossings,{len(self.crossings)}",
            *(f"exponent_{k},{v:.4f}" for k, v in self.exponents.items()),
            f"nu,{self.nu:.4f},{'pass' if self.nu_ok else 'fail'}",
            f"eta,{self.eta_exp:.4f},{'pass' if self.eta_ok else 'fail'}",
            f"gamma_integrable_beta_lt_0.75,{'pass' if self.integrable else 'fail'}",
            f"verdict,{self.verdict}",
            f"corrector_form,{self.form}",
        ]


def _fit_exponent(taus, peaks) -> float:
    peaks = np.asarray(peaks, float)
    if np.all(peaks == 0):
        return 0.0
    slope = np.polyfit(np.log(taus), np.log(peaks), 1)[0]
    return float(-slope)


def audit_assumptions(
    market: MarketParams,
    prefs: Preferences,
    payoff: PayoffSpec,
    grid: tuple | None = None,
    n_tau: int = 21,
    n_fine: int = 2001,
    form: str = "",
) -> AuditReport:
    """Check the windows on ``c0``, ``nu`` and ``eta`` numerically.

    Parameters
    ----------
    grid
        ``(times, spots)`` used for the ``c0`` scan; defaults to 50 times in
        ``[0, T - 1e-3]`` and 200 spots spanning the payoff's knots.
    """
    market.require_scalar()
    merton = MertonSolution(market, prefs, payoff)
    bs = BSField(payoff, market)
    T, sig = market.T, market.vol
    knots = payoff.knots
    centre = float(knots[0]) if knots.size else 100.0
    if grid is None:
        grid = (np.linspace(0.0, T - 1e-3, 50), np.linspace(0.25 * centre, 2.5 * centre, 200))
    times, spots = (np.asarray(g, float) for g in grid)

    # c0 candidate and sign changes along s
    ystar = market.merton_direction[0] / (prefs.gamma * merton.v1(times))
    tt, ss = np.meshgrid(times, spots, indexing="ij")
    s2g = bs.greeks(tt, ss, warn=False).s2_d2V if payoff.kind not in ("zero", "forward") else 0 * tt
    q = ystar[:, None] - s2g
    c0 = float(np.min(np.abs(q)))
    crossings = []
    for i, t in enumerate(times):
        flips = np.flatnonzero(np.sign(q[i, :-1]) * np.sign(q[i, 1:]) < 0)
        crossings += [(float(t), float(0.5 * (spots[k] + spots[k + 1]))) for k in flips]

    # singularity exponents of the greeks near maturity
    taus = np.logspace(-3, -1, n_tau)
    peaks = {"V_s": [], "V_ss": [], "V_sss": []}
    for tau in taus:
        if knots.size:
            w = 6.0 * sig * np.sqrt(tau)
            s = np.unique(np.concatenate([spots] + [k * np.exp(np.linspace(-w, w, n_fine)) for k in knots]))
        else:
            s = spots
        t = T - tau
        g = bs.greeks(t, s, warn=False)
        h = 1e-3 * sig * np.sqrt(tau) * s
        g3 = (bs.greeks(t, s + h, warn=False).d2V - bs.greeks(t, s - h, warn=False).d2V) / (2 * h)
        peaks["V_s"].append(np.max(np.abs(g.dV)))
        peaks["V_ss"].append(np.max(np.abs(g.d2V)))
        peaks["V_sss"].append(np.max(np.abs(g3)))
    if payoff.kind in ("zero", "forward"):
        # V_s is constant here; report the exact zero exponent of the constant field
        exps = {k: 0.0 for k in peaks}
    else:
        exps = {k: _fit_exponent(taus, v) for k, v in peaks.items()}
    nu = 1.0 - exps["V_ss"]
    eta_exp = 1.0 - max(exps["V_s"], exps["V_sss"])
    nu_ok = 0.25 < nu <= 1.0 + 1e-9
    eta_ok = 0.0 < eta_exp <= 1.0 + 1e-9
    integrable = exps["V_ss"] < 0.75
    if not integrable:
        verdict = "invalid"
    elif nu_ok and eta_ok and not crossings and c0 > 0:
        verdict = "valid"
    else:
        verdict = "sufficient-conditions-fail"
    return AuditReport(c0, tuple(crossings), exps, nu, eta_exp, nu_ok, eta_ok, integrable, verdict, form)
