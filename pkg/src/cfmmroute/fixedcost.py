"""Routing with a fixed cost per pool used.

Activating pool ``i`` costs ``q_i`` and allows tendering at most
``delta_max_i``; inactive pools take no part in the trade. The exact
method enumerates activation patterns; the heuristics round the
continuous relaxation, either at thresholds or randomly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from cfmmroute.core import BasketPurchase, Liquidate, Network, TradeSet, Utility
from cfmmroute.dualsolver import RouteResult, SolverConfig, solve_route

DEFAULT_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class FixedCostSpec:
    """Per-pool fixed costs ``q`` and tender caps ``delta_max``.

    ``delta_max`` defaults to ``100 * R_i / fee_i``; sum-pool tokens with
    zero reserve fall back to the pool's largest reserve.
    """

    q: np.ndarray
    delta_max: tuple[np.ndarray, ...] | None = None
    eta: np.ndarray | None = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 1 or np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ValueError("q must be a nonnegative vector")
        object.__setattr__(self, "q", q)
        if self.delta_max is not None:
            caps = tuple(np.asarray(c, dtype=float) for c in self.delta_max)
            if len(caps) != q.size or any(np.any(c <= 0) for c in caps):
                raise ValueError("delta_max needs one positive vector per pool")
            object.__setattr__(self, "delta_max", caps)
        if self.eta is not None:
            object.__setattr__(self, "eta", _check_eta(self.eta, q.size))

    def caps(self, network: Network) -> tuple[np.ndarray, ...]:
        if self.q.size != network.m:
            raise ValueError(f"q has {self.q.size} entries, network has {network.m} pools")
        if self.delta_max is not None:
            for i, (c, p) in enumerate(zip(self.delta_max, network.pools)):
                if c.shape != (p.size,):
                    raise ValueError(f"delta_max for pool {i} must have {p.size} entries")
            return self.delta_max
        caps = []
        for p in network.pools:
            r = np.where(p.reserves > 0, p.reserves, p.reserves.max())
            caps.append(100.0 * r / p.fee)
        return tuple(caps)


@dataclass(frozen=True)
class Relaxation:
    """Continuous relaxation: its routing, per-pool activations and an upper bound."""

    result: RouteResult
    eta: np.ndarray
    bound: float


def _check_eta(eta, m: int) -> np.ndarray:
    eta = np.asarray(eta)
    if eta.shape != (m,) or not np.all((eta == 0) | (eta == 1)):
        raise ValueError(f"eta must be a 0/1 vector of length {m}")
    return eta.astype(int)


def solve_fixed_eta(
    network: Network, u: Utility, spec: FixedCostSpec, eta, config: SolverConfig | None = None
) -> RouteResult:
    """Route over the active pools only, with tender caps; objective is ``U - q @ eta``."""
    eta = _check_eta(eta, network.m)
    caps = spec.caps(network)
    keep = eta.astype(bool)
    sub = network.subnetwork(keep)
    sub_caps = [c for c, k in zip(caps, keep) if k]
    res = solve_route(sub, u, config, caps=sub_caps if sub.m else None)

    deltas, lambdas, residuals = [], [], []
    it = iter(zip(res.trades.deltas, res.trades.lambdas, res.residuals))
    for pool, k in zip(network.pools, keep):
        if k:
            d, l, r = next(it)
        else:
            d, l, r = np.zeros(pool.size), np.zeros(pool.size), 0.0
        deltas.append(d)
        lambdas.append(l)
        residuals.append(r)
    fixed = float(spec.q @ eta)
    return replace(
        res,
        trades=TradeSet(deltas, lambdas),
        objective=res.objective - fixed,
        dual_value=res.dual_value - fixed,
        primal_value=res.primal_value - fixed,
        residuals=np.array(residuals),
        eta=eta.astype(float),
    )


class _PatternCache:
    def __init__(self, network, u, spec, config):
        self.args = (network, u, spec)
        self.config = config
        self.results: dict[tuple[int, ...], RouteResult] = {}

    def __call__(self, eta) -> RouteResult:
        key = tuple(int(e) for e in eta)
        if key not in self.results:
            self.results[key] = solve_fixed_eta(*self.args, np.array(key), self.config)
        return self.results[key]


def _better(cand: RouteResult, eta, best: RouteResult | None, best_eta, tol: float = 1e-9) -> bool:
    if best is None:
        return True
    margin = tol * (1.0 + abs(best.objective))
    if cand.objective > best.objective + margin:
        return True
    # near ties go to the pattern with fewer active pools
    return cand.objective >= best.objective - margin and int(np.sum(eta)) < int(np.sum(best_eta))


def solve_bruteforce(
    network: Network,
    u: Utility,
    spec: FixedCostSpec,
    m_max: int = 12,
    config: SolverConfig | None = None,
) -> tuple[RouteResult, np.ndarray]:
    """Exact optimum over all ``2^m`` activation patterns."""
    if network.m > m_max:
        raise ValueError(f"brute force over {network.m} pools exceeds m_max={m_max}")
    solve = _PatternCache(network, u, spec, config)
    best, best_eta = None, None
    for eta in itertools.product((0, 1), repeat=network.m):
        res = solve(eta)
        if _better(res, eta, best, best_eta):
            best, best_eta = res, np.array(eta)
    return best, best_eta


def solve_relaxation(
    network: Network, u: Utility, spec: FixedCostSpec, config: SolverConfig | None = None
) -> Relaxation:
    """Relax ``eta`` to [0, 1]; the cost becomes ``q_i * max_j delta_ij / delta_max_ij``.

    The bound adds ``eps * sum(holdings)`` to the dual value to undo the
    tie-break term, which is at least ``-eps * sum(holdings)`` on the domain.
    """
    cfg = config or SolverConfig()
    res = solve_route(network, u, cfg, caps=spec.caps(network), penalties=spec.q)
    slack = 0.0
    if isinstance(u, (Liquidate, BasketPurchase)):
        slack = cfg.eps_tiebreak * float(np.sum(u.holdings))
    eta = res.eta if res.eta is not None else np.zeros(network.m)
    return Relaxation(res, eta, res.dual_value + slack)


def solve_threshold(
    network: Network,
    u: Utility,
    spec: FixedCostSpec,
    thresholds=DEFAULT_THRESHOLDS,
    config: SolverConfig | None = None,
    relaxation: Relaxation | None = None,
) -> tuple[RouteResult, np.ndarray]:
    """Round the relaxed activations at each threshold and keep the best pattern."""
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds or any(not 0.0 < t < 1.0 for t in thresholds):
        raise ValueError("thresholds must be a nonempty subset of (0, 1)")
    relax = relaxation or solve_relaxation(network, u, spec, config)
    solve = _PatternCache(network, u, spec, config)
    best, best_eta = None, None
    for t in thresholds:
        eta = (relax.eta >= t).astype(int)
        res = solve(eta)
        if _better(res, eta, best, best_eta):
            best, best_eta = res, eta
    return best, best_eta


def solve_randomized(
    network: Network,
    u: Utility,
    spec: FixedCostSpec,
    samples: int = 64,
    seed: int | None = None,
    config: SolverConfig | None = None,
    relaxation: Relaxation | None = None,
) -> tuple[RouteResult, np.ndarray]:
    """Sample patterns with ``P(eta_i = 1) = eta_rel_i`` and keep the best.

    Each sample draws from its own child of ``SeedSequence(seed)``, so the
    outcome for a fixed seed does not depend on evaluation order.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    relax = relaxation or solve_relaxation(network, u, spec, config)
    p = np.clip(relax.eta, 0.0, 1.0)
    solve = _PatternCache(network, u, spec, config)
    best, best_eta = None, None
    for child in np.random.SeedSequence(seed).spawn(samples):
        eta = (np.random.default_rng(child).random(network.m) < p).astype(int)
        res = solve(eta)
        if _better(res, eta, best, best_eta):
            best, best_eta = res, eta
    return best, best_eta
