"""No-trade checks, no-arbitrage certificates and optimality certificates.

Both certificate problems are systems of two-sided bounds between a token
price and a pool multiplier. In log coordinates (``x_t = log g_t``,
``y_i = log lambda_i``) each pool token gives

    y_i + log(fee_i * P_ij) <= x_t <= y_i + log(P_ij),

a set of difference constraints. Feasibility is decided by Bellman-Ford on
the bipartite token/pool graph; a negative cycle is an arbitrage loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from cfmmroute import tradefn
from cfmmroute.core import ArbTotal, Linear, Liquidate, Network, TradeSet, Utility, apply_trades
from cfmmroute.dualsolver import RouteResult, SolverConfig, solve_route


@dataclass(frozen=True)
class Certificate:
    """Token prices ``g`` and pool multipliers under which no listed pool would trade.

    ``slack_lo[i] = A_i^T g - fee_i*lambda_i*P_i`` and
    ``slack_hi[i] = lambda_i*P_i - A_i^T g``; both are >= 0 for a valid certificate.
    A sum pool drained of a token cannot sell it, so that entry of
    ``slack_hi`` is ``inf``.
    """

    g: np.ndarray
    lambdas: np.ndarray
    slack_lo: tuple[np.ndarray, ...]
    slack_hi: tuple[np.ndarray, ...]

    def min_slack(self) -> float:
        return float(min(min(s.min() for s in self.slack_lo), min(s.min() for s in self.slack_hi)))


@dataclass(frozen=True)
class ArbWitness:
    """A negative cycle alternating between tokens and pools.

    ``cycle`` lists ``("token", t)`` and ``("pool", i)`` nodes in traversal
    order; ``log_gain`` is minus the cycle weight, i.e. the log of the
    round-trip rate net of fees.
    """

    cycle: tuple[tuple[str, int], ...]
    log_gain: float


@dataclass(frozen=True)
class NoTradeVerdict:
    holds: bool
    lambda_interval: tuple[float, float] | None = None
    token: int | None = None
    margin: float = 0.0


def _build_certificate(network: Network, g: np.ndarray, lam: np.ndarray, prices) -> Certificate:
    lo, hi = [], []
    for pool, P, li in zip(network.pools, prices, lam):
        gi = g[list(pool.global_ids)]
        lo.append(gi - pool.fee * li * P)
        # drained tokens have no upper bound; report them as unconstrained
        hi.append(np.where(_can_sell(pool), li * P - gi, np.inf))
    return Certificate(g, lam, tuple(lo), tuple(hi))


def no_trade_check(network: Network, g, tol: float = 1e-9) -> list[NoTradeVerdict]:
    """Per pool, whether some ``lambda >= 0`` makes zero trade optimal at prices ``g``.

    With ``r_j = g_j / P_j`` the bracket holds iff ``max r <= min r / fee``;
    the admissible multipliers are ``[max r, min r / fee]``.
    """
    g = np.asarray(g, dtype=float)
    if g.shape != (network.n,) or np.any(g <= 0):
        raise ValueError("g must be a positive vector with one entry per token")
    out = []
    for pool in network.pools:
        r = g[list(pool.global_ids)] / tradefn.price(pool, pool.reserves)
        sells = _can_sell(pool)
        lo, hi = float(r[sells].max(initial=0.0)), float(r.min() / pool.fee)
        if lo <= hi * (1.0 + tol):
            out.append(NoTradeVerdict(True, (lo, max(lo, hi))))
        else:
            j = int(np.argmax(np.where(sells, r, -np.inf)))
            out.append(NoTradeVerdict(False, None, pool.global_ids[j], lo / hi - 1.0))
    return out


def _can_sell(pool, drained_tol: float = 1e-12) -> np.ndarray:
    """Tokens the pool can pay out; a sum pool drained of a token cannot."""
    if pool.kind != "sum":
        return np.ones(pool.size, dtype=bool)
    return pool.reserves > drained_tol * (1.0 + pool.reserves.max())


def _edges(network: Network, shift: float = 0.0):
    n = network.n
    edges = []
    prices = []
    for i, pool in enumerate(network.pools):
        P = tradefn.price(pool, pool.reserves)
        prices.append(P)
        sells = _can_sell(pool)
        for j, t in enumerate(pool.global_ids):
            if sells[j]:
                edges.append((n + i, t, math.log(P[j]) + shift))
            edges.append((t, n + i, -math.log(pool.fee * P[j]) + shift))
    return edges, prices


def _bellman_ford(num_nodes: int, edges):
    """Shortest distances from a virtual source joined to every node with weight 0.

    Returns ``(dist, None)`` when no negative cycle exists, else
    ``(None, cycle_nodes)``.
    """
    dist = [0.0] * num_nodes
    pred = [-1] * num_nodes
    last = -1
    for _ in range(num_nodes + 1):
        last = -1
        for u, v, w in edges:
            if dist[u] + w < dist[v]:
                dist[v] = dist[u] + w
                pred[v] = u
                last = v
        if last < 0:
            return dist, None
    v = last
    for _ in range(num_nodes):
        v = pred[v]
    cycle = [v]
    u = pred[v]
    while u != v:
        cycle.append(u)
        u = pred[u]
    cycle.reverse()
    return None, cycle


def _cycle_weight(cycle, weights) -> float:
    return sum(weights[(cycle[k], cycle[(k + 1) % len(cycle)])] for k in range(len(cycle)))


def no_arb_certificate(network: Network, tol: float = 1e-9) -> Certificate | ArbWitness:
    """Decide whether positive token prices exist at which no pool trades.

    Cycles whose log weight lies in ``[-tol, 0)`` are treated as
    rounding noise and absorbed into the certificate.
    """
    n, m = network.n, network.m
    edges, prices = _edges(network)
    weights = {(u, v): w for u, v, w in edges}
    dist, cycle = _bellman_ford(n + m, edges)
    if dist is None:
        w = _cycle_weight(cycle, weights)
        if w < -tol:
            return _witness(network, cycle, w)
        # every cycle has at least two edges, so a tol/2 shift lifts near-zero cycles
        shifted, _ = _edges(network, tol / 2.0)
        dist, cycle = _bellman_ford(n + m, shifted)
        if dist is None:
            return _witness(network, cycle, _cycle_weight(cycle, weights))
    x = np.array(dist[:n])
    y = np.array(dist[n:])
    base = x.min()
    g = np.exp(x - base)
    lam = np.exp(y - base)
    return _build_certificate(network, g, lam, prices)


def _witness(network: Network, cycle, weight: float) -> ArbWitness:
    n = network.n
    nodes = tuple(("token", v) if v < n else ("pool", v - n) for v in cycle)
    # start the loop at a token for readability
    k = next(i for i, node in enumerate(nodes) if node[0] == "token")
    return ArbWitness(nodes[k:] + nodes[:k], -weight)


def detect_arbitrage(network: Network, config: SolverConfig | None = None) -> RouteResult:
    """Route with the total-tokens utility on ``psi >= 0``; arbitrage iff the objective is positive."""
    return solve_route(network, ArbTotal(), config)


@dataclass(frozen=True)
class OptimalityCertificate:
    nu: np.ndarray
    lambdas: np.ndarray
    violation: np.ndarray  # per pool bracket violation, relative
    complementarity: float  # largest relative violation including complementary slackness

    @property
    def max_violation(self) -> float:
        return float(self.violation.max(initial=0.0))

    @property
    def max_kkt_violation(self) -> float:
        return max(self.max_violation, self.complementarity)


def optimality_certificate(
    network: Network,
    u: Utility,
    result: RouteResult,
    eps: float | None = None,
    rel_tol: float = 1e-7,
    drained_tol: float = 1e-9,
) -> OptimalityCertificate:
    """Best KKT multipliers for the routed trades in ``result``.

    Chooses marginal prices ``nu`` in the supergradient set of the
    (tie-broken) utility at ``result.psi`` and pool multipliers minimizing
    the largest relative violation of

    * the bracket ``fee*lambda*P <= A^T nu <= lambda*P`` at post-trade prices,
    * complementary slackness: tendered coordinates sit on the lower side,
      received coordinates on the upper side,

    over all pools. A coordinate counts as traded, and a holdings bound as
    slack, when it exceeds ``rel_tol`` times the token's traded volume.
    Utilities other than liquidation, arbitrage and linear keep the
    solver's ``nu`` fixed and only fit the multipliers.
    """
    n, m = network.n, network.m
    if isinstance(u, Liquidate) and not any(u.target in p.global_ids for p in network.pools):
        # no pool touches the target: zero trade is optimal with nu = e_target, all multipliers zero
        nu = np.zeros(n)
        nu[u.target] = 1.0
        return OptimalityCertificate(nu, np.zeros(m), np.zeros(m), 0.0)
    if eps is None:
        eps = 0.0 if isinstance(u, ArbTotal) else SolverConfig().eps_tiebreak
    psi = result.psi
    volume = np.ones(n)
    for pool, d, l in zip(network.pools, result.trades.deltas, result.trades.lambdas):
        np.add.at(volume, list(pool.global_ids), d + l)

    # variables: x (n log prices), y (m log multipliers), s (max log violation)
    nvar = n + m + 1
    rows, rhs = [], []

    def side(t, i, sign, bound):
        # sign * (x_t - y_i) - s <= bound
        row = np.zeros(nvar)
        row[t], row[n + i], row[-1] = sign, -sign, -1.0
        rows.append(row)
        rhs.append(bound)

    prices, live = [], []
    for i, (pool, d, l) in enumerate(zip(network.pools, result.trades.deltas, result.trades.lambdas)):
        post = tradefn.post_trade_reserves(pool, d, l)
        if pool.kind == "sum":
            P = np.ones(pool.size)
            ok = post > drained_tol * (1.0 + pool.reserves.max())
        else:
            P = tradefn.price(pool, post)
            ok = np.ones(pool.size, dtype=bool)
        prices.append(P)
        live.append(ok)
        for j, t in enumerate(pool.global_ids):
            hi, lo = math.log(P[j]), math.log(pool.fee * P[j])
            if ok[j]:
                side(t, i, 1.0, hi)
            side(t, i, -1.0, -lo)
            if d[j] > rel_tol * volume[t]:
                side(t, i, 1.0, lo)
            if l[j] > rel_tol * volume[t] and ok[j]:
                side(t, i, -1.0, -hi)

    bounds = [(None, None)] * (n + m) + [(0.0, None)]
    if isinstance(u, Linear):
        for t in range(n):
            bounds[t] = (math.log(u.prices[t]),) * 2
    elif isinstance(u, Liquidate):
        slack = u.holdings + psi
        for t in range(n):
            if t == u.target:
                bounds[t] = (math.log(1.0 + eps),) * 2
            elif slack[t] > rel_tol * (volume[t] + u.holdings[t]) and eps > 0:
                bounds[t] = (math.log(eps),) * 2
            else:
                bounds[t] = (math.log(eps) if eps > 0 else None, None)
    elif isinstance(u, ArbTotal):
        for t in range(n):
            if psi[t] > rel_tol * volume[t]:
                bounds[t] = (math.log(1.0 + eps),) * 2
            else:
                bounds[t] = (math.log(1.0 + eps), None)
    else:
        for t in range(n):
            bounds[t] = (math.log(max(result.nu[t], 1e-300)),) * 2
    c = np.zeros(nvar)
    c[-1] = 1.0
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"certificate LP failed: {res.message}")
    x, y = res.x[:n], res.x[n : n + m]
    nu, lam = np.exp(x), np.exp(y)
    viol = np.zeros(m)
    for i, (pool, P, ok) in enumerate(zip(network.pools, prices, live)):
        gi = nu[list(pool.global_ids)]
        scale = lam[i] * P
        lo = (pool.fee * scale - gi) / scale
        hi = np.where(ok, (gi - scale) / scale, 0.0)
        viol[i] = max(0.0, lo.max(), hi.max())
    return OptimalityCertificate(nu, lam, viol, float(math.expm1(res.x[-1])))


# --- cycle canceling ------------------------------------------------------------


def _swap(pool, a: int, b: int, amount: float) -> tuple[float, float]:
    """Output of token ``b`` for ``amount`` of token ``a`` (local indices) and its derivative.

    Only coordinates ``a`` and ``b`` move. Written with log1p/expm1 so
    tiny trades keep full relative precision.
    """
    R, g = pool.reserves, pool.fee
    if pool.kind == "sum":
        if g * amount >= R[b]:
            return float(R[b]), 0.0
        return g * amount, g
    ratio = pool.weights[a] / pool.weights[b]
    s = math.log1p(g * amount / R[a])
    out = -R[b] * math.expm1(-ratio * s)
    deriv = R[b] * ratio * g / (R[a] + g * amount) * math.exp(-ratio * s)
    return out, deriv


@dataclass(frozen=True)
class CycleCancel:
    """Outcome of :func:`cancel_cycles`: final network, the trades made and whether it certified."""

    network: Network
    trades: TradeSet
    rounds: int
    certified: bool


def _legs(network: Network, witness: ArbWitness):
    nodes = witness.cycle
    legs = []
    for k in range(0, len(nodes), 2):
        t_in = nodes[k][1]
        i = nodes[k + 1][1]
        t_out = nodes[(k + 2) % len(nodes)][1]
        pool = network.pools[i]
        legs.append((i, pool.global_ids.index(t_in), pool.global_ids.index(t_out)))
    return legs


def _run_cycle(network: Network, legs, x: float):
    amounts, log_rate = [x], 0.0
    for i, a, b in legs:
        out, deriv = _swap(network.pools[i], a, b, amounts[-1])
        amounts.append(out)
        log_rate += math.log(deriv) if deriv > 0 else -math.inf
    return amounts, log_rate


def cancel_cycles(network: Network, tol: float = 1e-9, max_rounds: int = 200) -> CycleCancel:
    """Trade around negative cycles until the network admits a no-arbitrage certificate.

    Each round sizes the cycle trade so the marginal round-trip rate is one,
    found by bisection on the (decreasing) log marginal rate. Every round is
    profitable, so this only ever adds to an arbitrage.
    """
    total = TradeSet.zeros(network)
    for rounds in range(max_rounds + 1):
        cert = no_arb_certificate(network, tol)
        if isinstance(cert, Certificate):
            return CycleCancel(network, total, rounds, True)
        if rounds == max_rounds:
            break
        legs = _legs(network, cert)
        first = network.pools[legs[0][0]]
        lo, hi = 0.0, 1e-12 * max(first.reserves[legs[0][1]], 1.0)
        while _run_cycle(network, legs, hi)[1] > 0 and hi < 1e300:
            lo, hi = hi, 2.0 * hi
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if _run_cycle(network, legs, mid)[1] > 0:
                lo = mid
            else:
                hi = mid
        amounts, _ = _run_cycle(network, legs, lo)
        if lo == 0.0 or amounts[-1] <= amounts[0]:
            break
        deltas = [np.zeros(p.size) for p in network.pools]
        lambdas = [np.zeros(p.size) for p in network.pools]
        for (i, a, b), amt_in, amt_out in zip(legs, amounts, amounts[1:]):
            deltas[i][a] += amt_in
            lambdas[i][b] += amt_out
        step = TradeSet(deltas, lambdas)
        network = apply_trades(network, step)
        total = total + step
    return CycleCancel(network, total, rounds, False)
