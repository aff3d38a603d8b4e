"""Brute-force reference solutions for tiny networks.

Deliberately independent of the routing solver. Each two-asset pool is
parametrized by a signed tender amount ``a`` (``a > 0`` tenders local
token 0, ``a < 0`` tenders local token 1) and the received amount is found
by bisection on the trading function.

For at most two pools the search runs per sign quadrant. Inside a quadrant
every net-trade component is concave in the amounts and the utility is
concave and nondecreasing, so the objective is concave on a convex domain
that contains the zero trade. Nested golden-section searches over domain
intervals (found by bisection) are therefore exact up to tolerance. A
coarse grid over all amounts provides an independent floor.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from cfmmroute.core import ArbTotal, BasketPurchase, Linear, Liquidate, Network, Pool, Utility

GRID = 200
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def _invariant(pool: Pool, x: float, y: float) -> float:
    if pool.kind == "sum":
        return x + y
    if x <= 0 or y <= 0:
        return 0.0
    w0, w1 = pool.weights
    return math.exp(w0 * math.log(x) + w1 * math.log(y))


def _bisect(pred, lo: float, hi: float, iters: int = 200) -> float:
    """Largest point in [lo, hi] where the monotone predicate still holds (pred(lo) true)."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _received(pool: Pool, src: int, amount: float) -> float:
    """Output of the other token for tendering ``amount`` of local token ``src``; nan if it drains."""
    R, g = pool.reserves, pool.fee
    k = _invariant(pool, R[0], R[1])
    r_in, r_out = R[src], R[1 - src]

    def ok(lam):
        post_in, post_out = r_in + g * amount, r_out - lam
        x, y = (post_in, post_out) if src == 0 else (post_out, post_in)
        return _invariant(pool, x, y) >= k

    if pool.kind == "sum" and g * amount > r_out * (1.0 + 1e-12):
        # the invariant would ask for more than the pool holds
        return math.nan
    return _bisect(ok, 0.0, r_out)


def oracle_pool_trade(pool: Pool, signed_amount: float) -> tuple[np.ndarray, np.ndarray]:
    """``(delta, lambda)`` for tendering ``|signed_amount|`` of one token of a two-asset pool."""
    if pool.size != 2:
        raise ValueError("the oracle handles two-asset pools only")
    a = float(signed_amount)
    delta, lam = np.zeros(2), np.zeros(2)
    if a == 0.0:
        return delta, lam
    src = 0 if a > 0 else 1
    got = _received(pool, src, abs(a))
    if math.isnan(got):
        raise ValueError(f"tendering {abs(a)} would drain the sum pool's other reserve")
    delta[src] = abs(a)
    lam[1 - src] = got
    return delta, lam


def _floor(u: Utility, n: int) -> np.ndarray:
    """Componentwise lower bound on psi defining the utility's domain."""
    if isinstance(u, (Liquidate, BasketPurchase)):
        return -u.holdings
    if isinstance(u, ArbTotal):
        return np.zeros(n)
    if isinstance(u, Linear):
        return np.full(n, -np.inf)
    raise TypeError(f"unsupported utility {type(u).__name__}")


def _utility(u: Utility, psi: np.ndarray) -> float:
    if np.any(np.isnan(psi)) or np.any(psi < _floor(u, psi.size)):
        return -math.inf
    if isinstance(u, Linear):
        return float(u.prices @ psi)
    if isinstance(u, Liquidate):
        return float(psi[u.target])
    if isinstance(u, ArbTotal):
        return float(psi.sum())
    k = list(u.support)
    return float(np.min((psi[k] + u.holdings[k]) / u.desired[k]))


def _golden(f, lo: float, hi: float, tol: float = 1e-12) -> tuple[float, float]:
    """Maximize a unimodal ``f`` on [lo, hi]; endpoints are always candidates."""
    cands = [(lo, f(lo)), (hi, f(hi))]
    if hi > lo:
        a, b = lo, hi
        c = b - _INV_PHI * (b - a)
        d = a + _INV_PHI * (b - a)
        fc, fd = f(c), f(d)
        while b - a > tol * (1.0 + abs(a) + abs(b)):
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - _INV_PHI * (b - a)
                fc = f(c)
            else:
                a, c, fc = c, d, fd
                d = a + _INV_PHI * (b - a)
                fd = f(d)
        cands += [(c, fc), (d, fd)]
    return max(cands, key=lambda p: p[1])


class _Leg:
    """One pool traded in one direction: tender ``amount`` of ``src``, receive ``dst``."""

    def __init__(self, pool: Pool, src: int, cap: float):
        self.pool = pool
        self.src = src
        self.tok_in = pool.global_ids[src]
        self.tok_out = pool.global_ids[1 - src]
        self.cap = cap

    def flow(self, amount: float, n: int) -> np.ndarray:
        psi = np.zeros(n)
        if amount > 0:
            psi[self.tok_in] -= amount
            psi[self.tok_out] += _received(self.pool, self.src, amount)
        return psi

    def domain(self, base: np.ndarray, floor: np.ndarray) -> tuple[float, float] | None:
        """Interval of amounts keeping ``base + flow`` above ``floor``; None when empty."""
        n = base.size
        others = [j for j in range(n) if j not in (self.tok_in, self.tok_out)]
        if any(base[j] < floor[j] for j in others):
            return None
        hi = min(self.cap, base[self.tok_in] - floor[self.tok_in])
        if hi < 0:
            return None
        need = floor[self.tok_out] - base[self.tok_out]
        if need <= 0:
            return 0.0, hi

        def short(x):
            got = _received(self.pool, self.src, x)
            return math.isnan(got) or got < need

        if short(hi):
            return None
        return _bisect(short, 0.0, hi) if short(0.0) else 0.0, hi


def _caps(pool: Pool, network: Network, u: Utility) -> tuple[float, float]:
    held = getattr(u, "holdings", np.zeros(network.n))
    caps = []
    for j in (0, 1):
        if pool.kind == "sum":
            caps.append(pool.reserves[1 - j] / pool.fee)
            continue
        t = pool.global_ids[j]
        supply = held[t] + sum(p.reserves[p.global_ids.index(t)] for p in network.pools if t in p.global_ids)
        caps.append(100.0 * max(supply, pool.reserves[j]) / pool.fee)
    return caps[0], caps[1]


def _quadrant(u: Utility, legs: list[_Leg], n: int) -> float:
    floor = _floor(u, n)
    zero = np.zeros(n)
    if len(legs) == 1:
        dom = legs[0].domain(zero, floor)
        if dom is None:
            return -math.inf
        return _golden(lambda x: _utility(u, legs[0].flow(x, n)), *dom)[1]
    first, second = legs

    def inner(a: float) -> float:
        base = first.flow(a, n)
        dom = second.domain(base, floor)
        if dom is None:
            return -math.inf
        return _golden(lambda b: _utility(u, base + second.flow(b, n)), *dom)[1]

    # the feasible set is convex and contains the zero trade, so feasible a form [0, a_max]
    if inner(0.0) == -math.inf:
        return -math.inf
    a_max = first.cap if inner(first.cap) > -math.inf else _bisect(lambda a: inner(a) > -math.inf, 0.0, first.cap)
    return _golden(inner, 0.0, a_max)[1]


def _grid_floor(u: Utility, network: Network, legs_per_pool) -> float:
    """Best value over a coarse grid of signed amounts (independent cross-check)."""
    n = network.n
    axes = []
    for legs in legs_per_pool:
        pts = [np.zeros(n)]
        for leg in legs:
            for s in np.linspace(0.0, 1.0, GRID // 2 + 1)[1:] ** 2:
                pts.append(leg.flow(s * leg.cap, n))
        axes.append(np.array(pts))
    best = -math.inf
    for combo in itertools.product(*[range(len(a)) for a in axes]):
        psi = sum(axes[p][i] for p, i in enumerate(combo))
        best = max(best, _utility(u, psi))
    return best


def oracle_route(network: Network, u: Utility, grid: bool = True) -> float:
    """Optimal utility over networks of at most two two-asset pools."""
    if network.m > 2 or any(p.size != 2 for p in network.pools):
        raise ValueError("oracle_route supports at most two two-asset pools")
    n = network.n
    best = _utility(u, np.zeros(n))
    legs_per_pool = []
    for pool in network.pools:
        caps = _caps(pool, network, u)
        legs_per_pool.append([_Leg(pool, 0, caps[0]), _Leg(pool, 1, caps[1])])
    for r in range(1, network.m + 1):
        for subset in itertools.combinations(range(network.m), r):
            for legs in itertools.product(*[legs_per_pool[i] for i in subset]):
                best = max(best, _quadrant(u, list(legs), n))
    if grid:
        best = max(best, _grid_floor(u, network, legs_per_pool))
    return best
