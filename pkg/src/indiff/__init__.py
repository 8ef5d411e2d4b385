"""Utility indifference prices under small proportional transaction costs.

The frictionless exponential-utility problem is solved in closed form; the
first corrector, the second-order value-loss field and the resulting price
expansion ``p^eps = V + eps^2 h`` are computed on top of it, and a band-strategy
simulator checks the order of the expansion.
"""

__version__ = "0.1.0"

from .blackscholes import BSField, bs_pde_residual, bs_price_and_greeks, mc_price, sample_q_paths
from .corrector import AuditReport, CorrectorSolution, arbitrate_forms, audit_assumptions
from .ergodic import solve_ergodic
from .expansion import (
    DivergenceError,
    GridSpec,
    divergence_probe,
    price_expansion,
    solve_u_tilde_fd,
    u_tilde_mc,
    u_tilde_quadrature,
    u_tilde_zero_closed,
)
from .frictions import (
    Portfolio,
    apply_transfer,
    liquidation_gap,
    liquidation_limit,
    liquidation_value,
    solvency_check,
)
from .market import (
    FORBIDDEN,
    CostStructure,
    MarketParams,
    ModelError,
    OutOfDomainError,
    PayoffSpec,
    Preferences,
    UnsupportedDimensionError,
    evaluate_payoff,
)
from .merton import MertonSolution
from .simulator import SimSetup, convergence_study, nt_band, simulate_many, simulate_reflected

__all__ = [
    "AuditReport", "BSField", "CorrectorSolution", "CostStructure", "DivergenceError", "FORBIDDEN",
    "GridSpec", "MarketParams", "MertonSolution", "ModelError", "OutOfDomainError", "PayoffSpec",
    "Portfolio", "Preferences", "SimSetup", "UnsupportedDimensionError", "apply_transfer",
    "arbitrate_forms", "audit_assumptions", "bs_pde_residual", "bs_price_and_greeks",
    "convergence_study", "divergence_probe", "evaluate_payoff", "liquidation_gap", "liquidation_limit",
    "liquidation_value", "mc_price", "nt_band", "price_expansion", "sample_q_paths", "simulate_many",
    "simulate_reflected", "solve_ergodic", "solve_u_tilde_fd", "solvency_check", "u_tilde_mc",
    "u_tilde_quadrature", "u_tilde_zero_closed",
]
