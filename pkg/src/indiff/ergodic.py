"""Brute-force solver for the normalised one-dimensional ergodic cell problem.

Find the constant ``abar`` and a convex ``w`` with

    max( abar - 1/2 sig^2 rho^2 - 1/2 alpha_bar^2 w'' ,
         -lam_sell + w' , -lam_buy - w' ) = 0,    w(0) = 0,

where ``alpha_bar`` is the fast-variable diffusion coefficient. The problem is
read as an average-cost singular control of ``d rho = alpha_bar dB + dL_up -
dL_down`` with running cost ``1/2 sig^2 rho^2`` and proportional push costs,
discretised by a Markov chain approximation and solved with Howard policy
iteration. Nothing here uses the explicit corrector formula.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import spsolve

CONTINUE, SELL, BUY = 0, 1, 2


@dataclass(frozen=True)
class ErgodicSolution:
    rho: np.ndarray
    w: np.ndarray
    a_bar: float
    band: tuple[float, float]
    policy: np.ndarray
    iterations: int

    @property
    def rho0(self) -> float:
        """Half-width of the continuation region."""
        return 0.5 * (self.band[1] - self.band[0])


def solve_ergodic(
    sigma: float,
    alpha_bar: float,
    lam_sell: float,
    lam_buy: float,
    n: int = 2000,
    half_width: float | None = None,
    max_iter: int = 500,
) -> ErgodicSolution:
    """Average-cost policy iteration on a uniform ``rho`` grid.

    Parameters
    ----------
    sigma, alpha_bar
        Running-cost volatility and fast-variable diffusion coefficient.
    lam_sell, lam_buy
        Cost per unit of pushing ``rho`` down (selling) and up (buying).
    n
        Grid points on ``[-half_width, half_width]``.
    half_width
        Defaults to ``3 (alpha_bar^2 (lam_sell + lam_buy) / sigma^2)^{1/3}``,
        the natural length scale of the problem.
    """
    lam = lam_sell + lam_buy
    if lam <= 0 or alpha_bar == 0:
        raise ValueError("the cell problem is degenerate without costs or diffusion")
    ab2 = alpha_bar * alpha_bar
    if half_width is None:
        half_width = 3.0 * (ab2 * lam / sigma**2) ** (1.0 / 3.0)
    rho = np.linspace(-half_width, half_width, n)
    h = rho[1] - rho[0]
    dt = h * h / ab2
    run = 0.5 * sigma**2 * rho**2 * dt
    i0 = int(np.argmin(np.abs(rho)))
    idx = np.arange(n)

    policy = np.full(n, CONTINUE)
    policy[rho > 0.5 * half_width] = SELL
    policy[rho < -0.5 * half_width] = BUY
    policy[0], policy[-1] = BUY, SELL

    for it in range(1, max_iter + 1):
        w, a = _evaluate(policy, run, dt, h, lam_sell, lam_buy, i0)
        # one-step costs of each action under the current (w, a)
        q = np.full((3, n), np.inf)
        q[CONTINUE, 1:-1] = 0.5 * (w[2:] + w[:-2]) + run[1:-1] - a * dt
        q[SELL, 1:] = w[:-1] + lam_sell * h
        q[BUY, :-1] = w[1:] + lam_buy * h
        best = np.argmin(q, axis=0)
        keep = q[policy, idx] <= q[best, idx] + 1e-13 * (1.0 + np.abs(w))
        new = np.where(keep, policy, best)
        if np.array_equal(new, policy):
            break
        policy = new
    else:
        raise RuntimeError("policy iteration did not converge")

    cont = np.flatnonzero(policy == CONTINUE)
    lo = 0.5 * (rho[cont[0]] + rho[cont[0] - 1])
    hi = 0.5 * (rho[cont[-1]] + rho[cont[-1] + 1])
    return ErgodicSolution(rho, w, float(a), (float(lo), float(hi)), policy, it)


def _evaluate(policy, run, dt, h, lam_sell, lam_buy, i0):
    """Solve for ``(w, a)`` under a fixed policy with ``w[i0] = 0``."""
    n = policy.size
    rows, cols, vals = [], [], []
    rhs = np.zeros(n + 1)

    def put(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for i, act in enumerate(policy):
        put(i, i, 1.0)
        if act == CONTINUE:
            put(i, i - 1, -0.5)
            put(i, i + 1, -0.5)
            put(i, n, dt)
            rhs[i] = run[i]
        elif act == SELL:
            put(i, i - 1, -1.0)
            rhs[i] = lam_sell * h
        else:
            put(i, i + 1, -1.0)
            rhs[i] = lam_buy * h
    put(n, i0, 1.0)
    A = csr_matrix((vals, (rows, cols)), shape=(n + 1, n + 1))
    sol = spsolve(A.tocsc(), rhs)
    return sol[:n], sol[n]
