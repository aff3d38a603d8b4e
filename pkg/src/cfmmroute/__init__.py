"""Optimal routing through networks of constant function market makers."""

from cfmmroute.certify import (
    ArbWitness,
    Certificate,
    NoTradeVerdict,
    OptimalityCertificate,
    detect_arbitrage,
    no_arb_certificate,
    no_trade_check,
    optimality_certificate,
)
from cfmmroute.core import (
    ArbTotal,
    BasketPurchase,
    Linear,
    Liquidate,
    Network,
    Pool,
    TradeSet,
    Utility,
    apply_trades,
    net_trade,
    utility_value,
)
from cfmmroute.dualsolver import (
    InfeasibleUtility,
    OutsideDomain,
    RouteResult,
    SolverConfig,
    dual_value,
    solve_route,
    utility_conjugate,
)
from cfmmroute.fixedcost import (
    FixedCostSpec,
    solve_bruteforce,
    solve_fixed_eta,
    solve_randomized,
    solve_relaxation,
    solve_threshold,
)
from cfmmroute.subproblem import PoolArbResult, arb_pool, dual_contribution
from cfmmroute.tradefn import phi, price, validate_trade

__all__ = [
    "ArbTotal",
    "ArbWitness",
    "BasketPurchase",
    "Certificate",
    "FixedCostSpec",
    "InfeasibleUtility",
    "Linear",
    "Liquidate",
    "Network",
    "NoTradeVerdict",
    "OptimalityCertificate",
    "OutsideDomain",
    "Pool",
    "PoolArbResult",
    "RouteResult",
    "SolverConfig",
    "TradeSet",
    "Utility",
    "apply_trades",
    "arb_pool",
    "detect_arbitrage",
    "dual_contribution",
    "dual_value",
    "net_trade",
    "no_arb_certificate",
    "no_trade_check",
    "optimality_certificate",
    "phi",
    "price",
    "solve_bruteforce",
    "solve_fixed_eta",
    "solve_randomized",
    "solve_relaxation",
    "solve_route",
    "solve_threshold",
    "utility_conjugate",
    "utility_value",
    "validate_trade",
]
