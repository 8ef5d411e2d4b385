"""Solvency, liquidation and transfer accounting under proportional costs.

Asset 0 is cash. Transferring ``l`` from ``i`` to ``j`` costs ``eps^3 lam[i,j] l``
paid out of ``i``. The dual cone is

    K* = { r >= 0 : r^j <= (1 + eps^3 lam[i,j]) r^i for every allowed (i, j) },

and the liquidation value is ``min { (x, y) . r : r in K*, r^0 = 1 }``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .market import CostStructure, ModelError


@dataclass(frozen=True)
class Portfolio:
    x: float
    y: np.ndarray

    def __init__(self, x: float, y):
        object.__setattr__(self, "x", float(x))
        y = np.atleast_1d(np.asarray(y, dtype=float)).copy()
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def wealth(self) -> float:
        """Frictionless wealth ``x + sum(y)``."""
        return self.x + float(np.sum(self.y))


class Liquidation(NamedTuple):
    value: float
    method: str  # "closed-form", "box" or "lp"


def _factors(costs: CostStructure) -> np.ndarray:
    """``c[i,j] = 1 + eps^3 lam[i,j]``, ``inf`` on forbidden pairs."""
    n = costs.d + 1
    c = np.full((n, n), np.inf)
    for i, j in costs.allowed_pairs():
        c[i, j] = 1.0 + costs.rate(i, j)
    return c


def dual_cone_vertices(costs: CostStructure) -> np.ndarray:
    """Vertices of the box ``{r^0 = 1, 1/c[i,0] <= r^i <= c[0,i]}``.

    For ``d = 1`` this box is the dual cone itself; for ``d > 1`` it is the
    relaxation that ignores asset-to-asset transfers. Rows are ``(1, r^1..r^d)``.
    """
    c = _factors(costs)
    d = costs.d
    lo = 1.0 / c[1:, 0]
    hi = c[0, 1:]
    corners = np.array(np.meshgrid(*[[lo[i], hi[i]] for i in range(d)], indexing="ij")).reshape(d, -1).T
    return np.hstack([np.ones((corners.shape[0], 1)), corners])


def liquidation_value(p: Portfolio, costs: CostStructure) -> Liquidation:
    """Cash obtained by closing every risky position optimally."""
    d = costs.d
    if p.y.size != d:
        raise ModelError("portfolio and cost structure disagree on d")
    y = p.y
    if d == 1:
        y1 = float(y[0])
        if y1 >= 0:
            return Liquidation(p.x + y1 / (1.0 + costs.rate(1, 0)), "closed-form")
        return Liquidation(p.x + y1 * (1.0 + costs.rate(0, 1)), "closed-form")
    inter = [(i, j) for i, j in costs.allowed_pairs() if i > 0 and j > 0]
    if not inter:
        v = dual_cone_vertices(costs)
        return Liquidation(float(np.min(v @ np.concatenate([[p.x], y]))), "box")
    lb, _, A, b = _lp_data(costs)
    val = _scaled_simplex(y, A, b, costs.epsilon)
    return Liquidation(p.x + float(y @ lb) + val, "lp")


def liquidation_gap(p: Portfolio, costs: CostStructure) -> float:
    """``x + sum(y) - l^eps`` evaluated without cancellation.

    The gap is ``O(eps^3)`` while ``x + sum(y)`` is ``O(1)``, so subtracting the
    liquidation value loses every digit once ``eps^3`` nears machine precision.
    """
    d = costs.d
    y = p.y
    if d == 1 or not [(i, j) for i, j in costs.allowed_pairs() if i > 0 and j > 0]:
        gap = 0.0
        for i, yi in enumerate(y, start=1):
            if yi >= 0:
                k = costs.rate(i, 0)
                gap += yi * k / (1.0 + k)
            else:
                gap -= yi * costs.rate(0, i)
        return gap
    _, one_minus_lb, A, b = _lp_data(costs)
    val = _scaled_simplex(y, A, b, costs.epsilon)
    return float(y @ one_minus_lb) - val


def _scaled_simplex(y, A, b, eps):
    # the feasible set has size O(eps^3); solve it at unit scale so the
    # simplex tolerances are relative
    scale = eps**3 if eps > 0 else 1.0
    val, _ = simplex_min(y, A, b / scale)
    return val * scale


def _lp_data(costs: CostStructure):
    """Shift ``r = lb + q`` so that ``q = 0`` is feasible; return ``(lb, A, b)``."""
    c = _factors(costs)
    n = costs.d + 1
    # tightest lower bounds: r^i >= r^j / c[i,j] chained back to r^0 = 1
    logc = np.full((n, n), np.inf)
    for i, j in costs.allowed_pairs():
        logc[i, j] = np.log1p(costs.rate(i, j))
    dist = np.full(n, np.inf)
    dist[0] = 0.0
    for _ in range(n):
        for i, j in costs.allowed_pairs():
            dist[i] = min(dist[i], dist[j] + logc[i, j])
    lb = np.exp(-dist)
    lb_gap = -np.expm1(-dist)  # 1 - lb without cancellation
    rows, rhs = [], []
    for i, j in costs.allowed_pairs():
        if j == 0:
            continue  # lower bounds, already in lb
        row = np.zeros(n)
        row[j] += 1.0
        row[i] -= c[i, j]
        rows.append(row[1:])
        # c lb_i - lb_j = k - g_i - k g_i + g_j with k = c - 1, g = 1 - lb
        k = costs.rate(i, j)
        rhs.append(k - lb_gap[i] - k * lb_gap[i] + lb_gap[j])
    return lb[1:], lb_gap[1:], np.array(rows), np.maximum(np.array(rhs), 0.0)


def simplex_min(cost, A, b, max_iter: int = 10_000):
    """``min cost . q`` subject to ``A q <= b``, ``q >= 0`` with ``b >= 0``.

    Dense tableau simplex with Bland's rule; the slack basis is feasible so no
    phase one is needed.
    """
    cost = np.asarray(cost, float)
    A = np.atleast_2d(np.asarray(A, float))
    b = np.asarray(b, float)
    m, n = A.shape
    if np.any(b < 0):
        raise ValueError("simplex_min needs b >= 0")
    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = A
    tab[:m, n:n + m] = np.eye(m)
    tab[:m, -1] = b
    tab[m, :n] = cost
    basis = list(range(n, n + m))
    tol = 1e-12
    for _ in range(max_iter):
        enter = next((k for k in range(n + m) if tab[m, k] < -tol), None)
        if enter is None:
            break
        col = tab[:m, enter]
        ratios = np.where(col > tol, tab[:m, -1] / np.where(col > tol, col, 1.0), np.inf)
        if not np.isfinite(ratios).any():
            raise ValueError("linear program is unbounded")
        best = ratios.min()
        leave = min((k for k in range(m) if ratios[k] <= best + tol), key=lambda k: basis[k])
        tab[leave] /= tab[leave, enter]
        for k in range(m + 1):
            if k != leave:
                tab[k] -= tab[k, enter] * tab[leave]
        basis[leave] = enter
    else:
        raise RuntimeError("simplex did not terminate")
    q = np.zeros(n + m)
    for k, j in enumerate(basis):
        q[j] = tab[k, -1]
    return float(-tab[m, -1]), q[:n]


def liquidation_limit(p: Portfolio, costs: CostStructure) -> float:
    """The eps -> 0 limit of ``gap / eps^3``.

    Linearising the dual cone at ``r = 1`` gives ``max y.q`` subject to
    ``q_i - q_j <= lam[i, j]`` over the allowed routes, with ``q_0 = 0``.
    Without asset-to-asset routes this is the box value
    ``sum y+ lam[i,0] + y- lam[0,i]``.
    """
    y = np.asarray(p.y, float)
    if y.size != costs.d:
        raise ModelError("portfolio and cost structure disagree on d")
    if not [(i, j) for i, j in costs.allowed_pairs() if i > 0 and j > 0]:
        return _box_limit(y, costs)
    # shift q = u - m with m_i the cheapest route cost from cash to i, so that
    # u >= 0 is implied and the slack basis is feasible
    n = costs.d + 1
    m = np.full(n, np.inf)
    m[0] = 0.0
    for _ in range(n):
        for i, j in costs.allowed_pairs():
            m[j] = min(m[j], m[i] + costs.lam[i][j])
    rows, rhs = [], []
    for i, j in costs.allowed_pairs():
        if i == 0:
            continue  # q_j >= -lam[0, j] is implied by u >= 0
        row = np.zeros(n)
        row[i] += 1.0
        row[j] -= 1.0
        rows.append(row[1:])
        rhs.append(max(costs.lam[i][j] + m[i] - m[j], 0.0))
    val, _ = simplex_min(-y, np.array(rows), np.array(rhs))
    return float(-val - y @ m[1:])


def _box_limit(y, costs: CostStructure) -> float:
    tot = 0.0
    for i, yi in enumerate(y, start=1):
        if yi > 0:
            tot += yi * costs.lam[i][0]
        elif yi < 0:
            tot -= yi * costs.lam[0][i]
    return tot


def solvency_check(p: Portfolio, costs: CostStructure) -> bool:
    """Whether the position can be moved into the nonnegative orthant."""
    return liquidation_value(p, costs).value >= 0.0


def apply_transfer(p: Portfolio, transfers, costs: CostStructure) -> Portfolio:
    """Position after the transfer matrix ``L`` (``L[i,j]`` moved from ``i`` to ``j``)."""
    L = np.asarray(transfers, dtype=float)
    n = costs.d + 1
    if L.shape != (n, n):
        raise ModelError(f"transfer matrix must be {n}x{n}")
    if np.any(L < 0):
        raise ModelError("transfers must be nonnegative")
    for i in range(n):
        for j in range(n):
            if L[i, j] != 0 and (i == j or costs.forbidden(i, j)):
                raise ModelError(f"transfer on forbidden pair ({i}, {j})")
    fac = np.ones((n, n))
    for i, j in costs.allowed_pairs():
        fac[i, j] = 1.0 + costs.rate(i, j)
    delta = L.sum(axis=0) - (fac * L).sum(axis=1)
    return Portfolio(p.x + delta[0], p.y + delta[1:])


def transfer(n: int, i: int, j: int, amount: float) -> np.ndarray:
    """Matrix with a single transfer of ``amount`` from ``i`` to ``j``."""
    L = np.zeros((n, n))
    L[i, j] = amount
    return L
