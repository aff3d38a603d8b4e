"""Network routing by dual decomposition.

The dual of the routing problem over the netting-constraint prices ``nu`` is

    g(nu) = U*(nu) + sum_i f_i(A_i^T nu),

where ``U*`` is the concave conjugate term ``sup_psi U(psi) - nu @ psi``
and ``f_i`` is pool ``i``'s optimal profit at linear prices. ``g`` is
convex and every evaluation of ``f_i`` yields a valid trade, so the solver
runs a cutting-plane method with a box trust region on ``g`` (one cut per
pool per evaluation) and recovers primal trades from the restricted master
LP over all trades generated so far. The master LP optimum is a feasible
routing, which gives a certified lower bound; ``min g`` gives the upper
bound; the solve stops when the two meet.

Linear utilities are separable and are solved pool by pool without any
dual iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from cfmmroute import tradefn
from cfmmroute.core import (
    ArbTotal,
    BasketPurchase,
    Linear,
    Liquidate,
    Network,
    TradeSet,
    Utility,
    net_trade,
    scatter,
    utility_dim,
    utility_value,
)
from cfmmroute.subproblem import arb_pool, arb_pool_penalized, bracket_violation

log = logging.getLogger(__name__)

_LP_OPTIONS = {
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


def _linprog(c, **kwargs):
    """HiGHS with tight tolerances, falling back to its defaults on numerical trouble."""
    res = linprog(c, method="highs", options=_LP_OPTIONS, **kwargs)
    if res.status == 0:
        return res
    for method, options in (
        ("highs", dict(_LP_OPTIONS, presolve=False)),
        ("highs", {}),
        ("highs-ipm", {}),
    ):
        retry = linprog(c, method=method, options=options, **kwargs)
        if retry.status == 0:
            return retry
    return res


class OutsideDomain(ValueError):
    """The conjugate of the utility is +inf at the requested prices."""


class InfeasibleUtility(ValueError):
    """The utility is -inf on every feasible routing."""


@dataclass
class SolverConfig:
    tol_gap: float = 1e-11
    tol_constraint: float = 1e-8
    max_iter: int = 10_000
    eps_tiebreak: float = 1e-6
    nu_floor: float = 1e-10
    trust_radius: float = 1.0


@dataclass
class DualState:
    nu: np.ndarray
    best_dual: float
    best_primal: float
    iterations: int = 0
    history: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class RouteResult:
    trades: TradeSet
    psi: np.ndarray
    objective: float
    nu: np.ndarray
    gap: float
    residuals: np.ndarray
    converged: bool
    iterations: int = 0
    dual_value: float = math.nan
    primal_value: float = math.nan
    eta: np.ndarray | None = None
    disconnected: bool = False
    state: DualState | None = None

    def active_pools(self, tol: float = 0.0) -> list[int]:
        return [
            i
            for i, (d, l) in enumerate(zip(self.trades.deltas, self.trades.lambdas))
            if max(d.max(initial=0.0), l.max(initial=0.0)) > tol
        ]


@dataclass(frozen=True)
class Conjugate:
    value: float
    maximizer: np.ndarray


# --- conjugate of the utility -------------------------------------------------


def utility_conjugate(u: Utility, nu, eps: float = 0.0, tol: float = 1e-12) -> Conjugate:
    """``sup_psi U(psi) + eps*sum(psi) - nu @ psi`` with an attaining ``psi``.

    Raises :class:`OutsideDomain` when the supremum is ``+inf``.
    """
    nu = np.asarray(nu, dtype=float)
    if not np.all(np.isfinite(nu)):
        raise ValueError("nu must be finite")
    if isinstance(u, Linear):
        if nu.shape != u.prices.shape or not np.allclose(nu, u.prices + eps, rtol=1e-12, atol=tol):
            raise OutsideDomain("linear utility conjugate is finite only at nu = prices")
        return Conjugate(0.0, np.zeros_like(nu))
    shifted = nu - eps
    if isinstance(u, Liquidate):
        lower = np.zeros_like(nu)
        lower[u.target] = 1.0
        if np.any(shifted < lower - tol):
            raise OutsideDomain("liquidation conjugate needs nu >= 0 and nu_target >= 1")
        return Conjugate(float(shifted @ u.holdings - u.holdings[u.target]), -u.holdings.copy())
    if isinstance(u, ArbTotal):
        if np.any(shifted < 1.0 - tol):
            raise OutsideDomain("arbitrage conjugate needs nu >= 1")
        return Conjugate(0.0, np.zeros_like(nu))
    if isinstance(u, BasketPurchase):
        k = list(u.support)
        if np.any(shifted < -tol) or shifted[k] @ u.desired[k] < 1.0 - tol:
            raise OutsideDomain("basket conjugate needs nu >= 0 and desired @ nu >= 1")
        return Conjugate(float(shifted @ u.holdings), -u.holdings.copy())
    raise TypeError(f"unsupported utility {type(u).__name__}")


def dual_value(network: Network, u: Utility, nu, eps: float = 0.0) -> tuple[float, np.ndarray]:
    """Dual function value at ``nu`` and a subgradient (the dual is minimized)."""
    nu = np.asarray(nu, dtype=float)
    conj = utility_conjugate(u, nu, eps)
    value = conj.value
    flows = []
    for pool in network.pools:
        res = arb_pool(pool, nu[list(pool.global_ids)])
        value += res.profit
        flows.append(res.flow)
    return value, scatter(network, flows) - conj.maximizer


# --- helpers --------------------------------------------------------------------


@dataclass
class _Column:
    flow: np.ndarray  # lambda - delta, local
    delta: np.ndarray
    lam: np.ndarray
    eta: float
    cost: float


class _PoolOracle:
    """Evaluates one pool's (possibly capped or penalized) profit and stores columns."""

    def __init__(self, pool, cap=None, penalty=None):
        self.pool = pool
        self.ids = list(pool.global_ids)
        self.cap = None if cap is None else np.asarray(cap, dtype=float)
        self.penalty = penalty
        z = np.zeros(pool.size)
        self.columns = [_Column(z, z, z, 0.0, 0.0)]
        self._seen = {z.tobytes()}

    def evaluate(self, nu: np.ndarray) -> float:
        pi = nu[self.ids]
        if self.penalty is not None:
            res, eta = arb_pool_penalized(self.pool, pi, self.cap, self.penalty)
            cost = self.penalty * eta
        else:
            res = arb_pool(self.pool, pi, self.cap)
            eta, cost = (0.0 if res.is_zero else 1.0), 0.0
        key = np.concatenate([res.delta, res.lambda_out]).tobytes()
        if key not in self._seen:
            self._seen.add(key)
            self.columns.append(_Column(res.flow, res.delta, res.lambda_out, eta, cost))
        return res.profit - cost


@dataclass
class _UtilityModel:
    """Linear description of U* on its (polyhedral) domain plus the primal LP data."""

    coef: np.ndarray  # U*(nu) = coef @ nu + const on the domain
    const: float
    lower: np.ndarray  # domain: nu >= lower
    row: np.ndarray | None  # optional row @ nu >= row_rhs
    row_rhs: float
    objective: np.ndarray  # primal: maximize objective @ psi (+ alpha for baskets)
    floor: np.ndarray  # primal: psi >= -floor
    basket: BasketPurchase | None


def _utility_model(u: Utility, n: int, eps: float, nu_floor: float) -> _UtilityModel:
    ones = np.ones(n)
    if isinstance(u, Liquidate):
        lower = np.full(n, eps)
        lower[u.target] += 1.0
        obj = eps * ones
        obj[u.target] += 1.0
        h = u.holdings
        return _UtilityModel(
            h.copy(), -h[u.target] - eps * h.sum(), np.maximum(lower, nu_floor), None, 0.0, obj, h.copy(), None
        )
    if isinstance(u, ArbTotal):
        return _UtilityModel(
            np.zeros(n), 0.0, np.maximum(ones * (1.0 + eps), nu_floor), None, 0.0, ones * (1.0 + eps), np.zeros(n), None
        )
    if isinstance(u, BasketPurchase):
        h, d = u.holdings, u.desired
        return _UtilityModel(
            h.copy(),
            -eps * h.sum(),
            np.maximum(np.full(n, eps), nu_floor),
            d.copy(),
            1.0 + eps * d.sum(),
            eps * ones,
            h.copy(),
            u,
        )
    raise TypeError(f"no dual model for {type(u).__name__}")


def _project_domain(nu: np.ndarray, model: _UtilityModel) -> np.ndarray:
    nu = np.maximum(nu, model.lower)
    if model.row is not None:
        s = model.row @ nu
        if s < model.row_rhs:
            nu = nu * (model.row_rhs / s)
    return nu


def initial_prices(network: Network, ref: int) -> np.ndarray:
    """Token prices implied by pool marginal rates, relative to token ``ref``.

    Each pass assigns to every unpriced token the geometric mean of the
    estimates from pools that already price one of their tokens. Tokens
    that no pool connects to ``ref`` get price 1.
    """
    n = network.n
    log_p = np.full(n, np.nan)
    log_p[ref] = 0.0
    pool_logs = [np.log(tradefn.price(p, np.maximum(p.reserves, 1e-12))) for p in network.pools]
    for _ in range(n):
        est: dict[int, list[float]] = {}
        for pool, lp in zip(network.pools, pool_logs):
            ids = list(pool.global_ids)
            known = [k for k, j in enumerate(ids) if not np.isnan(log_p[j])]
            if not known:
                continue
            # pool-implied scale: average offset between known global prices and local prices
            offset = np.mean([log_p[ids[k]] - lp[k] for k in known])
            for k, j in enumerate(ids):
                if np.isnan(log_p[j]):
                    est.setdefault(j, []).append(lp[k] + offset)
        if not est:
            break
        for j, vals in est.items():
            log_p[j] = float(np.mean(vals))
    log_p[np.isnan(log_p)] = 0.0
    return np.exp(log_p)


def _reachable(network: Network, sources: set[int]) -> set[int]:
    seen = set(sources)
    frontier = list(sources)
    while frontier:
        tok = frontier.pop()
        for pool in network.pools:
            if tok in pool.global_ids:
                for j in pool.global_ids:
                    if j not in seen:
                        seen.add(j)
                        frontier.append(j)
    return seen


def _tighten(pool, delta: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Net out opposite flows and remove trading-function slack.

    Both steps only increase the trader's net flow, so any utility that is
    nondecreasing stays at least as large.
    """
    g = pool.fee
    d = g * delta - lam
    delta = np.where(d > 0, d / g, 0.0)
    lam = np.where(d < 0, -d, 0.0)
    if not (np.any(delta) or np.any(lam)):
        return delta, lam
    base = tradefn.phi(pool, pool.reserves)
    R = pool.reserves
    if pool.kind == "sum":
        slack = g * delta.sum() - lam.sum()
        if slack > 0 and delta.sum() > 0:
            delta = delta * (lam.sum() / (g * delta.sum()))
        return delta, lam

    def excess(s):
        return tradefn.log_phi(pool, R + g * delta - s * lam) - math.log(base)

    if not np.any(lam):
        return np.zeros_like(delta), lam
    if excess(1.0) <= 0:
        return delta, lam
    # largest s with phi(R + g*delta - s*lam) >= phi(R); s_max keeps reserves positive
    pos = lam > 0
    s_max = float(np.min((R + g * delta)[pos] / lam[pos]))
    lo, hi = 1.0, s_max
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if excess(mid) >= 0:
            lo = mid
        else:
            hi = mid
    return delta, lam * lo


def _residuals(network: Network, trades: TradeSet) -> np.ndarray:
    return np.array(
        [
            tradefn.validate_trade(p, d, l).residual
            for p, d, l in zip(network.pools, trades.deltas, trades.lambdas)
        ]
    )


# --- solver -------------------------------------------------------------------


def _solve_linear(network, u: Linear, caps, penalties) -> RouteResult:
    deltas, lambdas, etas = [], [], []
    for i, pool in enumerate(network.pools):
        pi = u.prices[list(pool.global_ids)]
        cap = None if caps is None else caps[i]
        if penalties is not None:
            res, eta = arb_pool_penalized(pool, pi, cap, penalties[i])
        else:
            res = arb_pool(pool, pi, cap)
            eta = 0.0 if res.is_zero else 1.0
        deltas.append(res.delta)
        lambdas.append(res.lambda_out)
        etas.append(eta)
    trades = TradeSet(deltas, lambdas)
    psi = net_trade(network, trades)
    obj = float(u.prices @ psi)
    fixed = 0.0 if penalties is None else float(np.dot(penalties, etas))
    return RouteResult(
        trades=trades,
        psi=psi,
        objective=obj,
        nu=u.prices.copy(),
        gap=0.0,
        residuals=_residuals(network, trades),
        converged=True,
        dual_value=obj - fixed,
        primal_value=obj - fixed,
        eta=np.array(etas) if penalties is not None else None,
    )


class _Masters:
    """Restricted primal master and trust-region dual master LPs."""

    def __init__(self, network: Network, oracles: list[_PoolOracle], model: _UtilityModel):
        self.network = network
        self.oracles = oracles
        self.model = model
        self._last = None

    def _global_flows(self):
        n = self.network.n
        blocks = []
        for orc in self.oracles:
            X = np.zeros((n, len(orc.columns)))
            for k, col in enumerate(orc.columns):
                np.add.at(X[:, k], orc.ids, col.flow)
            blocks.append(X)
        return blocks

    def primal(self):
        """max objective @ psi (+alpha) - costs over convex combinations of columns."""
        model, n = self.model, self.network.n
        blocks = self._global_flows()
        sizes = [b.shape[1] for b in blocks]
        X = np.hstack(blocks)
        costs = np.concatenate([[c.cost for c in o.columns] for o in self.oracles])
        nvar = X.shape[1]
        basket = model.basket is not None
        c = -(model.objective @ X) + costs
        A_ub = -X
        b_ub = model.floor.copy()
        if basket:
            k = list(model.basket.support)
            c = np.append(c, -1.0)
            A_ub = np.hstack([A_ub, np.zeros((n, 1))])
            rows = np.hstack([-X[k], model.basket.desired[k][:, None]])
            A_ub = np.vstack([A_ub, rows])
            b_ub = np.concatenate([b_ub, model.basket.holdings[k]])
        A_eq = np.zeros((len(blocks), c.size))
        start = 0
        for i, s in enumerate(sizes):
            A_eq[i, start : start + s] = 1.0
            start += s
        bounds = [(0, None)] * nvar + ([(None, None)] if basket else [])
        res = _linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=np.ones(len(blocks)), bounds=bounds)
        if res.status != 0:
            if self._last is None:
                raise RuntimeError(f"restricted master LP failed: {res.message}")
            # new columns never cut off the previous combination, so it stays optimal-or-worse
            log.debug("restricted master LP failed (%s); keeping previous solution", res.message)
            lb, prev = self._last
            return lb, [np.pad(w, (0, s - w.size)) for w, s in zip(prev, sizes)]
        theta = np.clip(res.x[:nvar], 0.0, None)
        out, start = [], 0
        for s in sizes:
            w = theta[start : start + s]
            out.append(w / w.sum() if w.sum() > 0 else np.eye(1, s).ravel())
            start += s
        self._last = (-res.fun, out)
        return -res.fun, out

    def dual(self, center: np.ndarray, radius: float):
        """Minimize the cutting-plane model of g over the trust box around ``center``."""
        model, n = self.model, self.network.n
        m = len(self.oracles)
        c = np.concatenate([model.coef, np.ones(m)])
        rows, rhs = [], []
        for i, orc in enumerate(self.oracles):
            for col in orc.columns:
                row = np.zeros(n + m)
                np.add.at(row, orc.ids, col.flow)
                row[n + i] = -1.0
                rows.append(row)
                rhs.append(col.cost)
        if model.row is not None:
            row = np.concatenate([-model.row, np.zeros(m)])
            rows.append(row)
            rhs.append(-model.row_rhs)
        lo = np.maximum(model.lower, center * math.exp(-radius))
        hi = np.maximum(center * math.exp(radius), lo)
        bounds = [(a, b) for a, b in zip(lo, hi)] + [(None, None)] * m
        res = _linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds)
        if res.status != 0:
            log.debug("dual master LP failed: %s", res.message)
            return None
        nu = res.x[:n]
        on_edge = bool(np.any((nu <= lo * (1 + 1e-9)) & (lo > model.lower * (1 + 1e-9)))
                       or np.any(nu >= hi * (1 - 1e-9)))
        return nu, res.fun + model.const, on_edge


def solve_route(
    network: Network,
    u: Utility,
    config: SolverConfig | None = None,
    *,
    caps=None,
    penalties=None,
) -> RouteResult:
    """Maximize ``U(psi)`` over valid trades on ``network``.

    ``caps`` (per-pool tendered-basket bounds) and ``penalties`` (per-pool
    cost charged on the activation ``max_j delta_j / cap_j``) support the
    fixed-cost routines; plain routing leaves both ``None``.
    """
    cfg = config or SolverConfig()
    dim = utility_dim(u)
    if dim is not None and dim != network.n:
        raise ValueError(f"utility covers {dim} tokens, network has {network.n}")
    if penalties is not None and caps is None:
        raise ValueError("penalties require caps")
    if isinstance(u, Linear):
        return _solve_linear(network, u, caps, penalties)

    eps = 0.0 if isinstance(u, ArbTotal) else cfg.eps_tiebreak
    n = network.n
    zero = TradeSet.zeros(network)

    if isinstance(u, Liquidate):
        held = {int(j) for j in np.flatnonzero(u.holdings > 0)}
        in_pool = any(u.target in p.global_ids for p in network.pools)
        disconnected = not in_pool or (bool(held) and u.target not in _reachable(network, held))
        if not in_pool or network.m == 0:
            psi = np.zeros(n)
            val = utility_value(u, psi)
            return RouteResult(zero, psi, val, np.zeros(n), 0.0, np.zeros(network.m), True,
                               dual_value=val, primal_value=val, disconnected=True)
        ref = u.target
    else:
        disconnected = False
        ref = u.support[0] if isinstance(u, BasketPurchase) else 0

    if network.m == 0:
        psi = np.zeros(n)
        val = utility_value(u, psi)
        return RouteResult(zero, psi, val, np.ones(n), 0.0, np.zeros(0), True,
                           dual_value=val, primal_value=val)

    model = _utility_model(u, n, eps, cfg.nu_floor)
    oracles = [
        _PoolOracle(p, None if caps is None else caps[i], None if penalties is None else penalties[i])
        for i, p in enumerate(network.pools)
    ]
    masters = _Masters(network, oracles, model)

    def evaluate(nu):
        return model.coef @ nu + model.const + sum(o.evaluate(nu) for o in oracles)

    center = initial_prices(network, ref)
    if isinstance(u, ArbTotal):
        center = center / center.min() * model.lower.max()
    center = _project_domain(center, model)
    ub = evaluate(center)
    radius = cfg.trust_radius
    state = DualState(center.copy(), ub, -math.inf)
    converged = False
    lb, theta = masters.primal()
    for it in range(1, cfg.max_iter + 1):
        state.iterations = it
        state.history.append((ub, lb))
        if ub - lb <= cfg.tol_gap * (1.0 + abs(lb)):
            converged = True
            break
        step = masters.dual(center, radius)
        while step is None and radius > 1e-9:
            # degenerate LPs usually clear up on a smaller box
            radius *= 0.5
            step = masters.dual(center, radius)
        if step is None:
            break
        cand, model_val, on_edge = step
        val = evaluate(cand)
        predicted = ub - model_val
        if val <= ub - 0.1 * predicted:
            center, ub = cand, val
            if on_edge:
                radius = min(2.0 * radius, 50.0)
        else:
            radius = max(0.5 * radius, 1e-12)
        lb, theta = masters.primal()
        if predicted <= 0 and ub - lb > cfg.tol_gap * (1.0 + abs(lb)) and radius <= 1e-12:
            log.warning("dual model stalled with gap %.3g", ub - lb)
            break
    state.nu, state.best_dual, state.best_primal = center, ub, lb
    if not converged:
        log.warning("routing did not converge in %d iterations (gap %.3g)", state.iterations, ub - lb)

    deltas, lambdas, etas, fixed = [], [], [], 0.0
    for orc, w in zip(oracles, theta):
        d = sum(wk * col.delta for wk, col in zip(w, orc.columns))
        l = sum(wk * col.lam for wk, col in zip(w, orc.columns))
        eta = float(sum(wk * col.eta for wk, col in zip(w, orc.columns)))
        fixed += float(sum(wk * col.cost for wk, col in zip(w, orc.columns)))
        d, l = _tighten(orc.pool, np.maximum(d, 0.0), np.maximum(l, 0.0))
        deltas.append(d)
        lambdas.append(l)
        etas.append(eta if (np.any(d) or np.any(l)) else 0.0)
    trades = TradeSet(deltas, lambdas)
    psi = net_trade(network, trades)
    obj = utility_value(u, psi, tol=cfg.tol_constraint)
    if obj == -math.inf:
        raise InfeasibleUtility("recovered routing violates the utility domain")
    perturbed = obj + eps * float(psi.sum()) - fixed
    primal = max(perturbed, lb)
    return RouteResult(
        trades=trades,
        psi=psi,
        objective=obj,
        nu=center.copy(),
        gap=ub - primal,
        residuals=_residuals(network, trades),
        converged=converged,
        iterations=state.iterations,
        dual_value=ub,
        primal_value=primal,
        eta=np.array(etas) if penalties is not None else None,
        disconnected=disconnected,
        state=state,
    )


def kkt_violations(network: Network, result: RouteResult, active_tol: float = 1e-9) -> np.ndarray:
    """Per-pool relative bracket violation at ``result.nu``; zero for idle pools."""
    out = np.zeros(network.m)
    for i, (pool, d, l) in enumerate(zip(network.pools, result.trades.deltas, result.trades.lambdas)):
        if max(d.max(), l.max()) <= active_tol:
            continue
        out[i] = bracket_violation(pool, result.nu[list(pool.global_ids)], d, l)
    return out
