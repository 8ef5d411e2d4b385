"""Frictionless exponential-utility Merton problem with a short European claim.

The value function is ``v(t,s,z) = -exp(-gamma v1(t) (z - V(t,s)) + v2(t))``
where ``V`` is the Black-Scholes price of the claim. ``v1`` solves
``v1' = -r v1 + kappa v1^2`` with ``v1(T) = 1`` and ``v2`` the linear ODE

    v2' = kappa v1 (log v1 - 1) + kappa v1 v2 + |theta|^2 / 2,   v2(T) = 0,

with ``|theta|^2 = (mu-r)^T (sigma sigma^T)^{-1} (mu-r)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._fd import d1 as _d1, d2 as _d2
from .blackscholes import BSField
from .market import MarketParams, ModelError, PayoffSpec, Preferences


class UnsupportedParameterError(ModelError):
    """Parameter combination outside the closed-form solution."""


class Controls(NamedTuple):
    y: np.ndarray
    c: np.ndarray
    clamped: np.ndarray


@dataclass(frozen=True)
class MertonSolution:
    market: MarketParams
    prefs: Preferences
    payoff: PayoffSpec = field(default_factory=PayoffSpec.zero)

    def __post_init__(self):
        if self.prefs.kappa == 1 and not self.market.r > 0.0:
            raise UnsupportedParameterError("kappa = 1 requires r > 0 (log r appears in v2)")
        if self.market.d > 1 and self.payoff.kind != "zero":
            raise ModelError("closed-form Merton solution with a claim needs d = 1")

    @property
    def bs(self) -> BSField:
        return BSField(self.payoff, self.market)

    # -- scalar functions of time ---------------------------------------
    def discount_factors(self, t):
        """``(v1(t), v2(t))``."""
        m, k = self.market, self.prefs.kappa
        t = np.asarray(t, dtype=float)
        if np.any(t > m.T + 1e-12):
            raise ModelError("t must not exceed T")
        tau = np.maximum(m.T - t, 0.0)
        r = m.r
        th2 = m.sharpe2
        if k == 0:
            return np.exp(r * tau), -0.5 * th2 * tau
        E = np.exp(r * tau)
        D = E + r - 1.0
        if np.any(D <= 0):
            raise UnsupportedParameterError("kappa + exp(-r(T-t))(r - kappa) must be positive")
        v1 = r * E / D
        v2 = (
            -(np.log(r) - 1.0) * (E - 1.0)
            - r * tau * E
            + D * np.log(D)
            - r * np.log(r)
            - 0.5 * th2 * ((E - 1.0) / r + (r - 1.0) * tau)
        ) / D
        return v1, v2

    def v1(self, t):
        return self.discount_factors(t)[0]

    def v1_integral(self, t, u):
        """``int_t^u v1(w) dw`` in closed form."""
        m, k = self.market, self.prefs.kappa
        a = np.maximum(m.T - np.asarray(t, float), 0.0)
        b = np.maximum(m.T - np.asarray(u, float), 0.0)
        r = m.r
        if k == 0:
            if r == 0.0:
                return a - b
            return (np.exp(r * a) - np.exp(r * b)) / r
        F = lambda x: np.log(np.exp(r * x) + r - 1.0)  # noqa: E731
        return F(a) - F(b)

    def discount_weight(self, t, u):
        """``exp(-kappa int_t^u v1)``."""
        if self.prefs.kappa == 0:
            return np.ones(np.broadcast(np.asarray(t), np.asarray(u)).shape)
        return np.exp(-self.v1_integral(t, u))

    def eta(self, t):
        """Absolute risk tolerance ``-v_z / v_zz = 1 / (gamma v1)``."""
        return 1.0 / (self.prefs.gamma * self.v1(t))

    # -- value function --------------------------------------------------
    def _V(self, t, s):
        if self.payoff.kind == "zero":
            return np.zeros(np.broadcast(np.asarray(t), np.asarray(s)).shape)
        return self.bs.greeks(t, s, warn=False).V

    def merton_value(self, t, s, z):
        """``(v, v_z, v_zz)``."""
        g = self.prefs.gamma
        v1, v2 = self.discount_factors(t)
        V = self._V(t, s)
        v = -np.exp(-g * v1 * (np.asarray(z, float) - V) + v2)
        vz = -g * v1 * v
        vzz = -g * v1 * vz
        return v, vz, vzz

    def value(self, t, s, z):
        return self.merton_value(t, s, z)[0]

    def optimal_controls(self, t, s, z) -> Controls:
        """Optimal dollar position ``y`` and consumption rate ``c`` (clamped at 0)."""
        m, p = self.market, self.prefs
        v1, v2 = self.discount_factors(t)
        if m.d == 1:
            if self.payoff.kind == "zero":
                DsV = 0.0
                V = 0.0
            else:
                gk = self.bs.greeks(t, s, warn=False)
                DsV = np.asarray(s, float) * gk.dV
                V = gk.V
            y = DsV + m.merton_direction[0] / (p.gamma * v1)
        else:
            V = 0.0
            y = np.multiply.outer(1.0 / (p.gamma * np.atleast_1d(v1)), m.merton_direction)
            if np.ndim(v1) == 0:
                y = y[0]
        if p.kappa == 0:
            c = np.zeros(np.shape(np.asarray(z, float) - V))
            clamped = np.zeros(c.shape, dtype=bool)
        else:
            c_raw = -(np.log(v1) + v2) / p.gamma + v1 * (np.asarray(z, float) - V)
            clamped = c_raw < 0
            c = np.maximum(c_raw, 0.0)
        return Controls(np.asarray(y, float), np.asarray(c, float), np.asarray(clamped))

    def consumption_admissible(self, t, s, z):
        """``kappa v_z <= gamma``."""
        _, vz, _ = self.merton_value(t, s, z)
        return self.prefs.kappa * vz <= self.prefs.gamma

    def admissibility_threshold(self, t, s) -> float:
        """Wealth below which ``kappa v_z > gamma`` (kappa = 1)."""
        v1, v2 = self.discount_factors(t)
        return self._V(t, s) + (v2 + np.log(v1)) / (self.prefs.gamma * v1)

    # -- residual oracle ---------------------------------------------------
    def hjb_bracket(self, t, s, z, y):
        """``y (mu-r) v_z + y sigma^2 s v_sz + 1/2 sigma^2 y^2 v_zz`` (d = 1)."""
        d = _fd_derivs(self, t, s, z)
        m = self.market
        sig2 = m.vol**2
        return y * (m.excess[0] * d["vz"] + sig2 * s * d["vsz"]) + 0.5 * sig2 * y * y * d["vzz"]

    def hjb_residual(self, t, s, z):
        """HJB residual at the analytic maximiser, derivatives by central differences.

        Broadcasts over ``(t, s, z)``. Divide by ``|v|`` for a relative figure.
        """
        m, p = self.market, self.prefs
        m.require_scalar()
        t, s, z = np.broadcast_arrays(*(np.asarray(a, float) for a in (t, s, z)))
        d = _fd_derivs(self, t, s, z)
        sig2 = m.vol**2
        L0 = d["vt"] + m.mu[0] * s * d["vs"] + 0.5 * sig2 * s * s * d["vss"]
        y = self.optimal_controls(t, s, z).y
        bracket = y * (m.excess[0] * d["vz"] + sig2 * s * d["vsz"]) + 0.5 * sig2 * y * y * d["vzz"]
        cons = p.kappa * p.U1_conj(d["vz"]) if p.kappa else 0.0
        return -m.r * z * d["vz"] - L0 - cons - bracket


def _fd_derivs(sol: MertonSolution, t, s, z) -> dict:
    # individual HJB terms reach ~ sigma^2 s^2 (gamma v1)^2 |v|, about 1e3 |v|,
    # so each derivative must be good to ~1e-10: sixth-order stencils with
    # steps balancing truncation against rounding in v
    T = sol.market.T
    hs = np.maximum(1e-5, 2e-4 * s)
    hz = 3e-2 * sol.eta(t)  # v varies in z on the scale 1 / (gamma v1)
    ht = np.minimum(1e-3, 0.125 * (T - t))
    f = sol.value
    v0 = f(t, s, z)
    fs = lambda k: f(t, s + k * hs, z)  # noqa: E731
    fz = lambda k: f(t, s, z + k * hz)  # noqa: E731
    return {
        "v": v0,
        "vt": _d1(lambda k: f(t + k * ht, s, z), ht),
        "vs": _d1(fs, hs),
        "vss": _d2(fs, v0, hs),
        "vz": _d1(fz, hz),
        "vzz": _d2(fz, v0, hz),
        "vsz": _d1(lambda j: _d1(lambda k: f(t, s + j * hs, z + k * hz), hz), hs),
    }
