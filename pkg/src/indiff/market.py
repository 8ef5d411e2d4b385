"""Market, preference, cost and payoff data shared by every other module.

All containers are frozen after construction. Monetary quantities are plain
float64; the transaction cost charged on a transfer from asset ``i`` to asset
``j`` is ``epsilon**3 * lam[i][j]`` per unit transferred.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.interpolate import PchipInterpolator


class ModelError(ValueError):
    """Invalid model parameters."""


class OutOfDomainError(ValueError):
    """A tabulated function was queried outside its abscissa range."""


class UnsupportedDimensionError(NotImplementedError):
    """Operation only defined for a single risky asset."""


class _Forbidden:
    """Marker for a transfer that is not allowed (infinite cost)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "FORBIDDEN"

    def __reduce__(self):
        return (_Forbidden, ())


FORBIDDEN = _Forbidden()


@dataclass(frozen=True)
class MarketParams:
    """Constant-coefficient Black-Scholes market with ``d`` risky assets."""

    mu: NDArray[np.float64]
    sigma: NDArray[np.float64]
    r: float
    T: float

    def __init__(self, mu: ArrayLike, sigma: ArrayLike, r: float, T: float):
        mu_arr = np.atleast_1d(np.asarray(mu, dtype=float))
        sig_arr = np.atleast_2d(np.asarray(sigma, dtype=float))
        if mu_arr.ndim != 1:
            raise ModelError("mu must be a vector")
        d = mu_arr.shape[0]
        if sig_arr.shape != (d, d):
            raise ModelError(f"sigma must be {d}x{d}, got {sig_arr.shape}")
        if not (T > 0):
            raise ModelError("T must be positive")
        cov = sig_arr @ sig_arr.T
        # cholesky accepts an exactly singular matrix, so test the spectrum
        eig = np.linalg.eigvalsh(cov)
        if not np.all(np.isfinite(eig)) or eig[0] <= 1e-14 * max(eig[-1], 0.0):
            raise ModelError("sigma sigma^T is not positive definite")
        mu_arr.setflags(write=False)
        sig_arr.setflags(write=False)
        object.__setattr__(self, "mu", mu_arr)
        object.__setattr__(self, "sigma", sig_arr)
        object.__setattr__(self, "r", float(r))
        object.__setattr__(self, "T", float(T))

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    @property
    def cov(self) -> NDArray[np.float64]:
        return self.sigma @ self.sigma.T

    @property
    def excess(self) -> NDArray[np.float64]:
        return self.mu - self.r

    @property
    def merton_direction(self) -> NDArray[np.float64]:
        """``(sigma sigma^T)^{-1} (mu - r 1)``."""
        return np.linalg.solve(self.cov, self.excess)

    @property
    def sharpe2(self) -> float:
        """Squared market price of risk ``(mu-r)^T (sigma sigma^T)^{-1} (mu-r)``."""
        return float(self.excess @ self.merton_direction)

    @property
    def vol(self) -> float:
        """Scalar volatility; d = 1 only."""
        self.require_scalar()
        return float(self.sigma[0, 0])

    def require_scalar(self) -> None:
        if self.d != 1:
            raise UnsupportedDimensionError(f"operation requires d = 1, market has d = {self.d}")

    def replace(self, **kw) -> "MarketParams":
        args = dict(mu=self.mu, sigma=self.sigma, r=self.r, T=self.T)
        args.update(kw)
        return MarketParams(**args)


@dataclass(frozen=True)
class Preferences:
    """Exponential utility ``U1 = U2 = -exp(-gamma x)`` with optional consumption."""

    gamma: float
    kappa: int = 0
    family: str = "exponential"

    def __post_init__(self):
        if not (self.gamma > 0):
            raise ModelError("gamma must be positive")
        if self.kappa not in (0, 1):
            raise ModelError("kappa must be 0 or 1")
        if self.family != "exponential":
            raise ModelError(f"unsupported utility family {self.family!r}")

    def U1(self, c):
        return -np.exp(-self.gamma * np.asarray(c, dtype=float))

    U2 = U1

    def U1_prime(self, c):
        return self.gamma * np.exp(-self.gamma * np.asarray(c, dtype=float))

    def U1_prime_inv(self, ct):
        """Consumption level at which the marginal utility equals ``ct``."""
        return -np.log(np.asarray(ct, dtype=float) / self.gamma) / self.gamma

    def U1_conj(self, ct):
        """Legendre conjugate ``sup_c {U1(c) - c ct}`` for ``ct > 0``."""
        ct = np.asarray(ct, dtype=float)
        q = ct / self.gamma
        return q * (np.log(q) - 1.0)


def _as_cost_entry(x) -> float | _Forbidden:
    if x is FORBIDDEN:
        return FORBIDDEN
    if isinstance(x, str) and x.strip().lower() in ("inf", "+inf", "infinity", "forbidden"):
        return FORBIDDEN
    x = float(x)
    if math.isinf(x) and x > 0:
        return FORBIDDEN
    if not (x >= 0) or math.isnan(x):
        raise ModelError(f"transaction cost entries must be nonnegative, got {x}")
    return x


@dataclass(frozen=True)
class CostStructure:
    """Proportional costs ``lam[i][j]`` (index 0 is cash) at scale ``epsilon``."""

    lam: tuple
    epsilon: float

    def __init__(self, lam: Sequence[Sequence], epsilon: float):
        rows = tuple(tuple(_as_cost_entry(x) for x in row) for row in lam)
        n = len(rows)
        if n < 2 or any(len(row) != n for row in rows):
            raise ModelError("lambda must be a square (d+1)x(d+1) matrix with d >= 1")
        for i in range(n):
            if rows[i][i] is FORBIDDEN or rows[i][i] != 0.0:
                raise ModelError("lambda diagonal must be zero")
        for i in range(1, n):
            if rows[i][0] is FORBIDDEN or rows[0][i] is FORBIDDEN:
                raise ModelError(f"transfers between cash and asset {i} must have finite cost")
        if not (epsilon >= 0) or math.isinf(epsilon):
            raise ModelError("epsilon must be finite and nonnegative")
        object.__setattr__(self, "lam", rows)
        object.__setattr__(self, "epsilon", float(epsilon))

    @classmethod
    def one_asset(cls, sell: float, buy: float, epsilon: float) -> "CostStructure":
        """d = 1 costs: ``sell`` = lam^{1,0} (asset to cash), ``buy`` = lam^{0,1}."""
        return cls([[0.0, buy], [sell, 0.0]], epsilon)

    @property
    def d(self) -> int:
        return len(self.lam) - 1

    def forbidden(self, i: int, j: int) -> bool:
        return self.lam[i][j] is FORBIDDEN

    def allowed_pairs(self) -> list[tuple[int, int]]:
        n = self.d + 1
        return [(i, j) for i in range(n) for j in range(n) if i != j and not self.forbidden(i, j)]

    def rate(self, i: int, j: int) -> float:
        """Effective proportional cost ``eps^3 lam^{i,j}`` on an allowed transfer."""
        if self.forbidden(i, j):
            raise ModelError(f"transfer {i}->{j} is forbidden")
        return self.epsilon**3 * self.lam[i][j]

    def transfer_cost(self, i: int, j: int, amount: float) -> float:
        return self.rate(i, j) * amount

    @property
    def sell(self) -> float:
        return float(self.lam[1][0])

    @property
    def buy(self) -> float:
        return float(self.lam[0][1])

    @property
    def lam_sum(self) -> float:
        """``lam^{1,0} + lam^{0,1}`` for d = 1."""
        if self.d != 1:
            raise UnsupportedDimensionError("lam_sum is defined for d = 1")
        return self.sell + self.buy

    @property
    def lam_max(self) -> float:
        return max(self.lam[i][j] for i, j in self.allowed_pairs()) if self.allowed_pairs() else 0.0

    def with_epsilon(self, epsilon: float) -> "CostStructure":
        return CostStructure(self.lam, epsilon)


PAYOFF_KINDS = ("zero", "call", "put", "power_call", "digital", "forward", "custom")


@dataclass(frozen=True)
class PayoffSpec:
    """European payoff ``g(s)``; multi-asset payoffs act on ``s @ weights``."""

    kind: str
    strike: float = 0.0
    exponent: float = 1.0
    table: tuple | None = None
    weights: tuple | None = None
    _interp: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise ModelError(f"unknown payoff kind {self.kind!r}")
        if self.kind in ("call", "put", "power_call", "digital") and not (self.strike > 0):
            raise ModelError(f"{self.kind} payoff needs a positive strike")
        if self.kind == "power_call" and not (self.exponent >= 1):
            raise ModelError("power_call exponent must be >= 1")
        if self.kind == "custom":
            if self.table is None:
                raise ModelError("custom payoff needs a table")
            xs = np.asarray(self.table[0], dtype=float)
            ys = np.asarray(self.table[1], dtype=float)
            if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
                raise ModelError("custom table must be two equal-length 1-D sequences")
            if np.any(np.diff(xs) <= 0) or xs[0] <= 0:
                raise ModelError("custom table abscissae must be positive and strictly increasing")
            if np.any(ys < 0) or not np.all(np.isfinite(ys)):
                raise ModelError("custom table values must be finite and nonnegative")
            object.__setattr__(self, "table", (tuple(xs), tuple(ys)))
            object.__setattr__(self, "_interp", PchipInterpolator(xs, ys, extrapolate=False))

    @classmethod
    def zero(cls) -> "PayoffSpec":
        return cls("zero")

    @classmethod
    def call(cls, K: float) -> "PayoffSpec":
        return cls("call", strike=K)

    @classmethod
    def put(cls, K: float) -> "PayoffSpec":
        return cls("put", strike=K)

    @classmethod
    def power_call(cls, K: float, p: float) -> "PayoffSpec":
        return cls("power_call", strike=K, exponent=p)

    @classmethod
    def digital(cls, K: float) -> "PayoffSpec":
        return cls("digital", strike=K)

    @classmethod
    def forward(cls) -> "PayoffSpec":
        return cls("forward")

    @classmethod
    def custom(cls, xs: Sequence[float], ys: Sequence[float]) -> "PayoffSpec":
        return cls("custom", table=(tuple(xs), tuple(ys)))

    @property
    def knots(self) -> NDArray[np.float64]:
        """Spot levels where the payoff is not smooth."""
        if self.kind in ("call", "put", "power_call", "digital"):
            return np.array([self.strike])
        if self.kind == "custom":
            return np.asarray(self.table[0])
        return np.empty(0)


def _basket(payoff: PayoffSpec, s) -> NDArray[np.float64]:
    s = np.asarray(s, dtype=float)
    if s.ndim == 0:
        return s
    if payoff.weights is None and s.shape[-1] == 1:
        return s[..., 0]
    if payoff.weights is None:
        return s
    return s @ np.asarray(payoff.weights, dtype=float)


def evaluate_payoff(payoff: PayoffSpec, s) -> NDArray[np.float64] | float:
    """Payoff ``g(s)`` for spot ``s > 0`` (scalar or array)."""
    x = _basket(payoff, s)
    if np.any(x <= 0):
        raise ModelError("spot must be positive")
    kind = payoff.kind
    K = payoff.strike
    if kind == "zero":
        out = np.zeros_like(x)
    elif kind == "call":
        out = np.maximum(x - K, 0.0)
    elif kind == "put":
        out = np.maximum(K - x, 0.0)
    elif kind == "power_call":
        out = np.maximum(x - K, 0.0) ** payoff.exponent
    elif kind == "digital":
        out = (x >= K).astype(float)
    elif kind == "forward":
        out = np.array(x, dtype=float, copy=True)
    else:
        xs = payoff.table[0]
        if np.any(x < xs[0]) or np.any(x > xs[-1]):
            raise OutOfDomainError(f"custom payoff defined on [{xs[0]}, {xs[-1]}]")
        out = payoff._interp(x)
    return float(out) if np.ndim(out) == 0 else out


def regularity_class(payoff: PayoffSpec) -> str:
    """One of ``smooth``, ``C1``, ``C0``, ``discontinuous``."""
    kind = payoff.kind
    if kind in ("zero", "forward"):
        return "smooth"
    if kind == "digital":
        return "discontinuous"
    if kind == "power_call":
        return "C1" if payoff.exponent > 1 else "C0"
    if kind == "custom":
        return "C1"
    return "C0"
