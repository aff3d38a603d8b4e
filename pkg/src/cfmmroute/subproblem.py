"""Optimal single-pool trade against fixed linear prices.

Every routing solve reduces to many calls of :func:`arb_pool`: given
positive token prices ``pi`` (local indexing) find the valid trade that
maximizes ``pi @ (lambda - delta)``. The optimal value is convex in
``pi`` with subgradient ``lambda - delta``.

Optional ``cap`` bounds the tendered basket componentwise, which the
fixed-cost routines use for their activation constraints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cfmmroute.core import Pool
from cfmmroute.tradefn import post_trade_reserves, price

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class PoolArbResult:
    delta: np.ndarray
    lambda_out: np.ndarray
    profit: float

    @property
    def flow(self) -> np.ndarray:
        return self.lambda_out - self.delta

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.delta) or np.any(self.lambda_out))


def _zero(n: int) -> PoolArbResult:
    return PoolArbResult(np.zeros(n), np.zeros(n), 0.0)


def _finish(pi: np.ndarray, delta: np.ndarray, lam: np.ndarray) -> PoolArbResult:
    profit = float(pi @ (lam - delta))
    if profit <= 0.0:
        # zero trade is always feasible; nonpositive means rounding noise
        return _zero(pi.size)
    return PoolArbResult(delta, lam, profit)


def _check_prices(pool: Pool, prices) -> np.ndarray:
    pi = np.asarray(prices, dtype=float)
    if pi.shape != (pool.size,):
        raise ValueError(f"pool trades {pool.size} tokens, got {pi.size} prices")
    if not np.all(pi > 0) or not np.all(np.isfinite(pi)):
        raise ValueError("prices must be positive and finite")
    return pi


def _check_cap(pool: Pool, cap) -> np.ndarray | None:
    if cap is None:
        return None
    cap = np.asarray(cap, dtype=float)
    if cap.shape != (pool.size,) or np.any(cap < 0):
        raise ValueError("cap must be a nonnegative vector, one entry per pool token")
    return cap


def arb_product_pair(pool: Pool, pi: np.ndarray, cap: np.ndarray | None = None) -> PoolArbResult:
    """Closed form for a two-token product pool.

    Tendering ``d`` of token a for token b yields
    ``R_b * g*d / (R_a + g*d)``; the profit is concave in ``d`` and
    stationary at ``d = (sqrt(g * pi_b/pi_a * R_a*R_b) - R_a) / g``.
    """
    R, g = pool.reserves, pool.fee
    best = _zero(2)
    for a, b in ((0, 1), (1, 0)):
        d = (math.sqrt(g * pi[b] / pi[a] * R[a] * R[b]) - R[a]) / g
        if cap is not None:
            d = min(d, cap[a])
        if d <= 0:
            continue
        recv = R[b] * g * d / (R[a] + g * d)
        delta = np.zeros(2)
        lam = np.zeros(2)
        delta[a] = d
        lam[b] = recv
        cand = _finish(pi, delta, lam)
        if cand.profit > best.profit:
            best = cand
    return best


def arb_geomean(pool: Pool, pi: np.ndarray, cap: np.ndarray | None = None) -> PoolArbResult:
    """Exact solution for (weighted) geometric-mean pools of any width.

    Works in post-trade reserves ``z = R + g*delta - lambda``. For a
    multiplier ``mu`` on the log trading-function constraint each
    coordinate maximizes independently, giving
    ``z_j = median(g*mu*w_j/pi_j, R_j, mu*w_j/pi_j)`` (then capped). The
    constraint residual ``sum_j w_j log z_j - log phi(R)`` is piecewise
    linear and nondecreasing in ``log mu``, so its root is located exactly
    by scanning breakpoints.
    """
    R, w, g = pool.reserves, pool.weights, pool.fee
    log_r = np.log(R)
    a_hi = np.log(w / pi)
    a_lo = np.log(g * w / pi)
    log_cap = np.log(R + g * cap) if cap is not None else np.full(R.size, np.inf)

    def resid(s):
        lz = np.minimum(np.maximum(s + a_lo, np.minimum(log_r, s + a_hi)), log_cap)
        return float(w @ (lz - log_r))

    breaks = np.concatenate([log_r - a_hi, log_r - a_lo, (log_cap - a_lo)[np.isfinite(log_cap)]])
    breaks = np.unique(breaks)
    vals = np.array([resid(s) for s in breaks])

    idx = int(np.searchsorted(vals, 0.0, side="left"))
    if idx == 0:
        # below every breakpoint each coordinate follows mu*w/pi, slope sum(w) = 1
        s_star = breaks[0] - vals[0]
    elif idx == breaks.size:
        s_last = breaks[-1]
        slope = resid(s_last + 1.0) - vals[-1]
        if slope <= 0:
            return _zero(R.size)
        s_star = s_last - vals[-1] / slope
    else:
        s0, s1 = breaks[idx - 1], breaks[idx]
        f0, f1 = vals[idx - 1], vals[idx]
        s_star = s0 + (0.0 - f0) * (s1 - s0) / (f1 - f0)

    hi = np.exp(s_star + a_hi)
    lo = np.exp(s_star + a_lo)
    z = R.copy()
    z = np.where(hi < R, hi, z)
    z = np.where(lo > R, lo, z)
    if cap is not None:
        z = np.minimum(z, R + g * cap)
    z = np.where(np.abs(z - R) <= 4 * np.finfo(float).eps * R, R, z)
    delta = np.maximum(z - R, 0.0) / g
    lam = np.maximum(R - z, 0.0)
    if cap is not None:
        delta = np.minimum(delta, cap)
    return _finish(pi, delta, lam)


def arb_sum(pool: Pool, pi: np.ndarray, cap: np.ndarray | None = None) -> PoolArbResult:
    """Greedy solution of the linear program posed by a sum pool.

    Each unit tendered of token j buys ``g`` units of any token k, so the
    pair (j, k) earns ``g*pi_k - pi_j`` per unit. Pair the dearest
    receivable tokens with the cheapest tender tokens until no pair is
    strictly profitable; received amounts are bounded by reserves.
    """
    R, g = pool.reserves, pool.fee
    n = R.size
    recv_order = np.argsort(-pi, kind="stable")
    tender_order = np.argsort(pi, kind="stable")
    room = R.astype(float).copy()
    budget = cap.astype(float).copy() if cap is not None else np.full(n, np.inf)
    delta = np.zeros(n)
    lam = np.zeros(n)
    ir = it = 0
    while ir < n and it < n:
        k, j = recv_order[ir], tender_order[it]
        if g * pi[k] <= pi[j]:
            break
        if room[k] <= 0:
            ir += 1
            continue
        if budget[j] <= 0:
            it += 1
            continue
        if room[k] <= g * budget[j]:
            amt = room[k]
            delta[j] += amt / g
            budget[j] -= amt / g
            room[k] = 0.0
            ir += 1
        else:
            amt = g * budget[j]
            delta[j] += budget[j]
            budget[j] = 0.0
            room[k] -= amt
            it += 1
        lam[k] += amt
    return _finish(pi, delta, lam)


def arb_pool(pool: Pool, prices, cap=None) -> PoolArbResult:
    """Profit-maximizing valid trade with ``pool`` at linear ``prices``."""
    pi = _check_prices(pool, prices)
    cap = _check_cap(pool, cap)
    if pool.kind == "sum":
        return arb_sum(pool, pi, cap)
    if pool.kind == "product" and pool.size == 2:
        return arb_product_pair(pool, pi, cap)
    return arb_geomean(pool, pi, cap)


def dual_contribution(pool: Pool, prices, cap=None) -> tuple[float, np.ndarray]:
    """Optimal profit at ``prices`` and its subgradient ``lambda - delta``."""
    res = arb_pool(pool, prices, cap)
    return res.profit, res.flow


def arb_pool_penalized(pool: Pool, prices, cap, penalty: float, tol: float = 1e-12):
    """Maximize ``profit - penalty*eta`` with tendered basket ``<= eta*cap``, ``eta`` in [0, 1].

    The capped profit is concave in ``eta``, so a golden-section search
    over [0, 1] is exact up to ``tol``. Returns ``(result, eta)`` where
    ``eta = max_j delta_j / cap_j`` is the smallest activation covering the
    trade.
    """
    pi = _check_prices(pool, prices)
    cap = _check_cap(pool, cap)
    if cap is None:
        raise ValueError("penalized subproblem needs a cap")

    def solve(eta):
        return arb_pool(pool, pi, eta * cap)

    def score(eta):
        return solve(eta).profit - penalty * eta

    if penalty <= 0:
        best_eta = 1.0
    else:
        a, b = 0.0, 1.0
        c = b - _INV_PHI * (b - a)
        d = a + _INV_PHI * (b - a)
        fc, fd = score(c), score(d)
        while b - a > tol:
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - _INV_PHI * (b - a)
                fc = score(c)
            else:
                a, c, fc = c, d, fd
                d = a + _INV_PHI * (b - a)
                fd = score(d)
        cands = [0.0, 1.0, 0.5 * (a + b)]
        best_eta = max(cands, key=score)
    res = solve(best_eta)
    if res.is_zero:
        return res, 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(cap > 0, res.delta / np.where(cap > 0, cap, 1.0), 0.0)
    eta = float(min(1.0, ratios.max()))
    if res.profit - penalty * eta <= 0.0:
        return _zero(pool.size), 0.0
    return res, eta


def bracket_violation(pool: Pool, prices, delta, lam, drained_tol: float = 1e-9) -> float:
    """Relative violation of ``g*mult*P <= prices <= mult*P`` at post-trade prices.

    ``P`` is the pool price at post-trade reserves and ``mult`` the
    smallest multiplier meeting the upper inequality. Sum-pool tokens
    drained to zero are excluded from the upper inequality since their
    reserve bound carries its own multiplier.
    """
    pi = np.asarray(prices, dtype=float)
    post = post_trade_reserves(pool, delta, lam)
    if pool.kind == "sum":
        P = np.ones(pool.size)
        live = post > drained_tol * (1.0 + pool.reserves.max())
        if not np.any(live):
            live = np.ones(pool.size, dtype=bool)
    else:
        P = price(pool, post)
        live = np.ones(pool.size, dtype=bool)
    ratio = pi / P
    mult = ratio[live].max()
    return float(max(0.0, np.max(pool.fee * mult - ratio) / mult))
