"""Black-Scholes prices, spot derivatives and risk-neutral path sampling.

Single-asset fields have closed forms (zero, forward, call, put, digital) or
fixed-node quadrature of the log-normal integral (power call, tabulated
payoffs). Multi-asset payoffs are priced by Monte Carlo only.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray
from scipy.special import ndtr, roots_jacobi, roots_legendre

from . import streams
from ._fd import d1, d2
from .market import (
    MarketParams,
    ModelError,
    OutOfDomainError,
    PayoffSpec,
    evaluate_payoff,
    regularity_class,
)

_SQRT2PI = np.sqrt(2.0 * np.pi)
_X_LO, _X_HI = -12.0, 12.0
SINGULAR_TAU = 1e-4


class GreekSingularityWarning(UserWarning):
    """Greeks of a non-smooth payoff requested very close to maturity."""


class BSGreeks(NamedTuple):
    V: NDArray[np.float64]
    dV: NDArray[np.float64]
    d2V: NDArray[np.float64]
    s2_d2V: NDArray[np.float64]


def _npdf(x):
    return np.exp(-0.5 * x * x) / _SQRT2PI


@lru_cache(maxsize=None)
def _jacobi(n: int, beta: float):
    return roots_jacobi(n, 0.0, beta)


@lru_cache(maxsize=None)
def _legendre(n: int):
    return roots_legendre(n)


@dataclass(frozen=True)
class BSField:
    """Risk-neutral price field of ``payoff`` in ``market``."""

    payoff: PayoffSpec
    market: MarketParams
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def greeks(self, t, s, warn: bool = True) -> BSGreeks:
        return bs_price_and_greeks(self, t, s, warn=warn)

    def value(self, t, s):
        return self.greeks(t, s, warn=False).V

    def cached(self, t: float, s: float) -> BSGreeks:
        key = (float(t), float(s))
        out = self._cache.get(key)
        if out is None:
            out = self.greeks(t, s, warn=False)
            self._cache[key] = out
        return out


def bs_price_and_greeks(field: BSField, t, s, warn: bool = True) -> BSGreeks:
    """``(V, dV/ds, d2V/ds2, s^2 d2V/ds2)`` at ``(t, s)``; broadcasts over arrays."""
    m = field.market
    m.require_scalar()
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(t > m.T + 1e-14):
        raise ModelError("t must not exceed the horizon T")
    if np.any(s <= 0):
        raise ModelError("spot must be positive")
    t, s = np.broadcast_arrays(t, s)
    tau = np.maximum(m.T - t, 0.0)
    p = field.payoff
    if warn and regularity_class(p) != "smooth" and np.any(tau < SINGULAR_TAU):
        warnings.warn(
            f"greeks of a {regularity_class(p)} payoff evaluated within {SINGULAR_TAU} of maturity",
            GreekSingularityWarning,
            stacklevel=2,
        )
    kind = p.kind
    if kind == "zero":
        z = np.zeros(s.shape)
        return BSGreeks(z, z.copy(), z.copy(), z.copy())
    if kind == "forward":
        z = np.zeros(s.shape)
        return BSGreeks(s.astype(float).copy(), np.ones(s.shape), z, z.copy())
    if kind in ("call", "put", "digital") or (kind == "power_call" and p.exponent == 1.0):
        V, dV, d2V = _closed_form(kind if kind != "power_call" else "call", p.strike, m.r, m.vol, tau, s)
    elif kind == "power_call":
        V, dV, d2V = _power_call(p.strike, p.exponent, m.r, m.vol, tau, s)
    else:
        V, dV, d2V = _tabulated(p, m.r, m.vol, tau, s)
    return BSGreeks(V, dV, d2V, s * s * d2V)


def _closed_form(kind, K, r, sig, tau, s):
    V = np.empty(s.shape)
    dV = np.empty(s.shape)
    d2V = np.zeros(s.shape)
    live = tau > 0
    dead = ~live
    if np.any(dead):
        sd = s[dead]
        if kind == "call":
            V[dead] = np.maximum(sd - K, 0.0)
            dV[dead] = np.where(sd > K, 1.0, np.where(sd == K, 0.5, 0.0))
        elif kind == "put":
            V[dead] = np.maximum(K - sd, 0.0)
            dV[dead] = np.where(sd < K, -1.0, np.where(sd == K, -0.5, 0.0))
        else:
            V[dead] = (sd >= K).astype(float)
            dV[dead] = 0.0
    if np.any(live):
        sl, tl = s[live], tau[live]
        vs = sig * np.sqrt(tl)
        d1 = (np.log(sl / K) + (r + 0.5 * sig * sig) * tl) / vs
        d2 = d1 - vs
        disc = np.exp(-r * tl)
        if kind == "call":
            V[live] = sl * ndtr(d1) - K * disc * ndtr(d2)
            dV[live] = ndtr(d1)
            d2V[live] = _npdf(d1) / (sl * vs)
        elif kind == "put":
            V[live] = K * disc * ndtr(-d2) - sl * ndtr(-d1)
            dV[live] = ndtr(d1) - 1.0
            d2V[live] = _npdf(d1) / (sl * vs)
        else:
            V[live] = disc * ndtr(d2)
            dV[live] = disc * _npdf(d2) / (sl * vs)
            d2V[live] = -disc * _npdf(d2) * d1 / (sl * sl * vs * vs)
    return V, dV, d2V


def _power_call(K, p, r, sig, tau, s, n_sing: int = 64, n_tail: int = 96):
    """Gauss-Jacobi near the strike plus Gauss-Legendre on the tail.

    The integrands ``(S-K)^q phi`` with ``q = p, p-1, p-2`` carry an algebraic
    endpoint singularity at the strike, absorbed into the Jacobi weight.
    """
    V = np.empty(s.shape)
    dV = np.empty(s.shape)
    d2V = np.empty(s.shape)
    dead = tau <= 0
    if np.any(dead):
        sd = s[dead]
        ex = np.maximum(sd - K, 0.0)
        V[dead] = ex**p
        dV[dead] = p * ex ** (p - 1)
        safe = np.where(ex > 0, ex, 1.0)
        d2V[dead] = np.where(ex > 0, p * (p - 1) * safe ** (p - 2), 0.0)
    live = ~dead
    if not np.any(live):
        return V, dV, d2V
    sl, tl = s[live], tau[live]
    b = sig * np.sqrt(tl)
    mdrift = (r - 0.5 * sig * sig) * tl
    xK = (np.log(K / sl) - mdrift) / b
    x_hi = np.maximum(_X_HI, p * b + _X_HI)
    disc = np.exp(-r * tl)
    orders = (p, p - 1.0, p - 2.0)
    prefac = (1.0, p, p * (p - 1.0))
    out = [np.zeros(sl.shape) for _ in range(3)]

    # singular panel [xK, xK + w] (only where the strike is inside the range)
    w = np.minimum(2.0, np.maximum(x_hi - xK, 0.0))
    near = (xK > _X_LO) & (w > 0)
    if np.any(near):
        xk, bb, ww = xK[near], b[near], w[near]
        for k, q in enumerate(orders):
            u, wt = _jacobi(n_sing, q)
            half = 0.5 * ww[:, None]
            delta = half * (1.0 + u[None, :])
            x = xk[:, None] + delta
            ratio = K * bb[:, None] * _expm1_over(bb[:, None] * delta)
            spot_ratio = np.exp(bb[:, None] * delta) * K / sl[near][:, None]
            f = ratio**q * spot_ratio**k * _npdf(x)
            out[k][near] = prefac[k] * half[:, 0] ** (q + 1.0) * (f @ wt)
    # smooth tail [max(xK + w, X_LO), x_hi]
    a = np.where(near, xK + w, np.maximum(xK, _X_LO))
    tail = x_hi > a
    if np.any(tail):
        u, wt = _legendre(n_tail)
        aa, bb_, hi = a[tail], b[tail], x_hi[tail]
        half = 0.5 * (hi - aa)
        x = aa[:, None] + half[:, None] * (1.0 + u[None, :])
        S = sl[tail][:, None] * np.exp(mdrift[tail][:, None] + bb_[:, None] * x)
        ex = np.maximum(S - K, 0.0)
        phi = _npdf(x)
        sr = S / sl[tail][:, None]
        for k, q in enumerate(orders):
            with np.errstate(divide="ignore", invalid="ignore"):
                f = np.where(ex > 0, ex**q, 0.0) * sr**k * phi
            out[k][tail] += prefac[k] * half * (f @ wt)
    V[live] = disc * out[0]
    dV[live] = disc * out[1]
    d2V[live] = disc * out[2]
    return V, dV, d2V


def _expm1_over(x):
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + 0.5 * x, np.expm1(safe) / safe)


def _tabulated(p: PayoffSpec, r, sig, tau, s, n_gl: int = 16):
    """Pathwise derivatives of a monotone-cubic table, panels split at the knots."""
    xs = np.asarray(p.table[0])
    interp = p._interp
    d1 = interp.derivative(1)
    d2 = interp.derivative(2)
    V = np.empty(s.shape)
    dV = np.empty(s.shape)
    d2V = np.empty(s.shape)
    dead = tau <= 0
    if np.any(dead):
        V[dead] = evaluate_payoff(p, s[dead])
        dV[dead] = d1(s[dead])
        d2V[dead] = d2(s[dead])
    live = ~dead
    if not np.any(live):
        return V, dV, d2V
    sl, tl = s[live], tau[live]
    b = sig * np.sqrt(tl)
    mdrift = (r - 0.5 * sig * sig) * tl
    xk = (np.log(xs[None, :] / sl[:, None]) - mdrift[:, None]) / b[:, None]
    if np.any(xk[:, 0] > _X_LO) or np.any(xk[:, -1] < _X_HI):
        raise OutOfDomainError("custom payoff table does not cover the log-normal support")
    # knots plus a fixed unit-spaced split, so no panel is wider than two
    # standard deviations
    fixed = np.broadcast_to(np.linspace(_X_LO, _X_HI, 13), (sl.size, 13))
    edges = np.sort(np.concatenate([np.clip(xk, _X_LO, _X_HI), fixed], axis=1), axis=1)
    lo, hi = edges[:, :-1], edges[:, 1:]
    u, wt = _legendre(n_gl)
    half = 0.5 * (hi - lo)
    x = lo[..., None] + half[..., None] * (1.0 + u)
    S = sl[:, None, None] * np.exp(mdrift[:, None, None] + b[:, None, None] * x)
    S = np.clip(S, xs[0], xs[-1])
    phi = _npdf(x)
    sr = S / sl[:, None, None]
    disc = np.exp(-r * tl)
    for arr, f in ((V, interp(S)), (dV, d1(S) * sr), (d2V, d2(S) * sr * sr)):
        arr[live] = disc * np.einsum("pk,pkn,n->p", half, f * phi, wt)
    return V, dV, d2V


def _pde_terms(field: BSField, t, s):
    m = field.market
    t, s = np.broadcast_arrays(np.asarray(t, float), np.asarray(s, float))
    h = np.maximum(1e-5, 1e-4 * s)
    ht = np.minimum(1e-5, 0.125 * (m.T - t))
    V = lambda tt, ss: field.greeks(tt, ss, warn=False).V  # noqa: E731
    v0 = V(t, s)
    fs = lambda k: V(t, s + k * h)  # noqa: E731
    vt = d1(lambda k: V(t + k * ht, s), ht)
    vs = d1(fs, h)
    vss = d2(fs, v0, h)
    return -vt, -m.r * s * vs, -0.5 * m.vol**2 * s * s * vss, m.r * v0


def bs_pde_residual(field: BSField, t, s):
    """``-V_t - r s V_s - 1/2 sigma^2 s^2 V_ss + r V`` by central differences.

    Requires ``t < T``; broadcasts over ``(t, s)``.
    """
    if field.payoff.kind == "zero":
        return np.zeros(np.broadcast(np.asarray(t), np.asarray(s)).shape)
    return sum(_pde_terms(field, t, s))


def bs_pde_scale(field: BSField, t, s):
    """Sum of the magnitudes of the PDE terms, used to normalise residuals.

    Deep out of the money ``V`` underflows while the residual carries rounding
    from ``V_t`` and ``s V_s``, so dividing by ``V`` alone is meaningless there.
    """
    if field.payoff.kind == "zero":
        return np.ones(np.broadcast(np.asarray(t), np.asarray(s)).shape)
    return sum(np.abs(x) for x in _pde_terms(field, t, s))


@dataclass(frozen=True)
class QPathBatch:
    """Spot paths on ``times``; ``paths`` is ``(n_paths, n_times)`` or ``(n_paths, n_times, d)``."""

    times: NDArray[np.float64]
    paths: NDArray[np.float64]
    seed: int
    antithetic: bool
    path_ids: NDArray[np.int64]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            d = 1 if self.paths.ndim == 2 else self.paths.shape[2]
            w.writerow(["time", "path_id"] + (["spot"] if d == 1 else [f"spot_{j + 1}" for j in range(d)]))
            for i, pid in enumerate(self.path_ids):
                for k, tk in enumerate(self.times):
                    vals = [self.paths[i, k]] if d == 1 else list(self.paths[i, k])
                    w.writerow([repr(float(tk)), int(pid)] + [repr(float(v)) for v in vals])


def gbm_normals(seed: int, path_ids, n_steps: int, d: int, antithetic: bool, stream: int = 0):
    """Per-path normals ``(n, n_steps, d)``; antithetic pairs ``(2k, 2k+1)`` share a stream."""
    path_ids = np.asarray(path_ids, dtype=np.int64)
    if antithetic:
        base = path_ids // 2
        sign = np.where(path_ids % 2 == 0, 1.0, -1.0)
    else:
        base = path_ids
        sign = np.ones(path_ids.shape)
    z = streams.normals(seed, base.astype(np.uint64), 0, n_steps * d, stream)
    return (z * sign[:, None]).reshape(path_ids.size, n_steps, d)


def sample_q_paths(
    market: MarketParams,
    t0: float,
    s0,
    grid,
    n_paths: int,
    seed: int,
    antithetic: bool = False,
    path_ids=None,
    drift=None,
) -> QPathBatch:
    """Exact log-normal paths under the risk-neutral measure (drift ``r``).

    ``drift`` overrides the per-asset drift (the simulator passes ``mu``).
    ``path_ids`` selects a subset of the global path index space.
    """
    if n_paths <= 0:
        raise ModelError("n_paths must be positive")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ModelError("time grid must be strictly increasing with at least two points")
    if abs(grid[0] - t0) > 1e-12 or abs(grid[-1] - market.T) > 1e-12:
        raise ModelError("time grid must start at t0 and end at T")
    d = market.d
    s0 = np.broadcast_to(np.asarray(s0, dtype=float), (d,))
    if np.any(s0 <= 0):
        raise ModelError("initial spot must be positive")
    ids = np.arange(n_paths) if path_ids is None else np.asarray(path_ids, dtype=np.int64)
    mu = np.full(d, market.r) if drift is None else np.broadcast_to(np.asarray(drift, float), (d,))
    cov = market.cov
    dt = np.diff(grid)
    z = gbm_normals(seed, ids, dt.size, d, antithetic)
    shocks = np.einsum("ij,pkj->pki", market.sigma, z) * np.sqrt(dt)[None, :, None]
    incr = (mu - 0.5 * np.diag(cov))[None, None, :] * dt[None, :, None] + shocks
    logs = np.concatenate([np.zeros((ids.size, 1, d)), np.cumsum(incr, axis=1)], axis=1)
    paths = s0[None, None, :] * np.exp(logs)
    if d == 1:
        paths = paths[..., 0]
    return QPathBatch(grid.copy(), paths, int(seed), bool(antithetic), ids)


def mc_price(field: BSField, t: float, s, n_paths: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo risk-neutral price ``(estimate, stderr)`` for any ``d``."""
    m = field.market
    batch = sample_q_paths(m, t, s, np.array([t, m.T]), n_paths, seed, antithetic=True)
    sT = batch.paths[:, -1]
    g = np.asarray(evaluate_payoff(field.payoff, sT if m.d > 1 else sT[:, None]))
    disc = np.exp(-m.r * (m.T - t))
    pairs = 0.5 * (g[0::2] + g[1::2]) if n_paths % 2 == 0 else g
    return disc * float(np.mean(pairs)), disc * float(np.std(pairs, ddof=1) / np.sqrt(pairs.size))
