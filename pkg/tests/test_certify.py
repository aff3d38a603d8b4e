import math

import numpy as np
import pytest
from scipy.optimize import linprog

from cfmmroute.certify import (
    ArbWitness,
    Certificate,
    cancel_cycles,
    detect_arbitrage,
    no_arb_certificate,
    no_trade_check,
    optimality_certificate,
)
from cfmmroute.core import Liquidate, Network, Pool, apply_trades, net_trade
from cfmmroute.dualsolver import solve_route
from cfmmroute.subproblem import arb_pool
from cfmmroute.tradefn import price

from conftest import consistent_network, random_network


def lp_feasible(network):
    """Feasibility of the log-domain bracket system, decided by a generic LP solver."""
    n, m = network.n, network.m
    rows, rhs = [], []
    for i, pool in enumerate(network.pools):
        P = price(pool, pool.reserves)
        for j, t in enumerate(pool.global_ids):
            if pool.kind == "sum" and pool.reserves[j] <= 1e-12 * (1 + pool.reserves.max()):
                hi_ok = False
            else:
                hi_ok = True
            up, dn = np.zeros(n + m), np.zeros(n + m)
            # x_t - y_i <= log P   and   y_i - x_t <= -log(fee P)
            up[t], up[n + i] = 1.0, -1.0
            dn[t], dn[n + i] = -1.0, 1.0
            if hi_ok:
                rows.append(up)
                rhs.append(math.log(P[j]))
            rows.append(dn)
            rhs.append(-math.log(pool.fee * P[j]))
    res = linprog(np.zeros(n + m), A_ub=np.array(rows), b_ub=rhs, bounds=[(None, None)] * (n + m), method="highs")
    return res.status == 0


def networkx_has_negative_cycle(network, shift=0.0):
    nx = pytest.importorskip("networkx")
    graph = nx.DiGraph()
    for i, pool in enumerate(network.pools):
        P = price(pool, pool.reserves)
        for j, t in enumerate(pool.global_ids):
            graph.add_edge(("p", i), ("t", t), weight=math.log(P[j]) + shift)
            graph.add_edge(("t", t), ("p", i), weight=-math.log(pool.fee * P[j]) + shift)
    return nx.negative_edge_cycle(graph)


def mismatched_pair(fee1=0.97, fee2=0.98):
    return Network(2, [Pool("product", [0, 1], [10, 1], fee1), Pool("product", [0, 1], [1, 10], fee2)])


class TestNoTradeCheck:
    def test_aligned_prices(self):
        (v,) = no_trade_check(Network(2, [Pool("product", [0, 1], [1, 1], 1.0)]), [1, 1])
        assert v.holds and v.lambda_interval[0] == pytest.approx(v.lambda_interval[1])

    def test_spread_exceeds_fee_band(self):
        pool = Pool("product", [0, 1], [1, 4], 0.9)
        (v,) = no_trade_check(Network(2, [pool]), [1, 1])
        assert not v.holds
        # r = g / P = (2, 0.5): spread 4 > 1 / 0.9
        assert v.margin == pytest.approx(4 * 0.9 - 1)
        assert arb_pool(pool, [1, 1]).profit > 0

    def test_verdict_matches_pool_profit(self, rng):
        for _ in range(200):
            net = random_network(rng, 3, 1)
            g = rng.uniform(0.2, 5, 3)
            (v,) = no_trade_check(net, g)
            profit = arb_pool(net.pools[0], g[list(net.pools[0].global_ids)]).profit
            if v.holds:
                assert profit <= 1e-9
            else:
                assert profit > 0

    def test_scale_invariant(self, rng):
        for _ in range(100):
            net = random_network(rng)
            g = rng.uniform(0.2, 5, 3)
            c = rng.uniform(0.01, 100)
            a = [v.holds for v in no_trade_check(net, g)]
            b = [v.holds for v in no_trade_check(net, c * g)]
            assert a == b

    def test_table1_optimum_prices(self, table1):
        res = solve_route(table1, Liquidate([0, 0, 0], 2))
        post = apply_trades(table1, res.trades)
        assert all(v.holds for v in no_trade_check(post, res.nu, tol=1e-5))

    def test_rejects_nonpositive(self, table1):
        with pytest.raises(ValueError):
            no_trade_check(table1, [1, 0, 1])


class TestNoArbCertificate:
    def test_single_pool(self, rng):
        for _ in range(30):
            net = random_network(rng, 3, 1)
            cert = no_arb_certificate(net)
            assert isinstance(cert, Certificate) and cert.min_slack() >= -1e-9

    def test_mismatched_pair(self):
        net = mismatched_pair()
        wit = no_arb_certificate(net)
        assert isinstance(wit, ArbWitness) and wit.log_gain > 0
        assert {node for node in wit.cycle if node[0] == "pool"} == {("pool", 0), ("pool", 1)}
        assert detect_arbitrage(net).objective > 0

    def test_table1_has_arbitrage(self, table1):
        wit = no_arb_certificate(table1)
        assert isinstance(wit, ArbWitness)
        # the cycle alternates tokens and pools
        kinds = [k for k, _ in wit.cycle]
        assert kinds == ["token", "pool"] * (len(kinds) // 2)

    def test_witness_gain_is_round_trip_rate(self, table1):
        wit = no_arb_certificate(table1)
        nodes = wit.cycle
        log_rate = 0.0
        for k in range(0, len(nodes), 2):
            t_in, i, t_out = nodes[k][1], nodes[k + 1][1], nodes[(k + 2) % len(nodes)][1]
            pool = table1.pools[i]
            P = price(pool, pool.reserves)
            a, b = pool.global_ids.index(t_in), pool.global_ids.index(t_out)
            log_rate += math.log(pool.fee * P[a] / P[b])
        assert log_rate == pytest.approx(wit.log_gain, rel=1e-9)

    def test_soundness(self, rng):
        for _ in range(50):
            net = consistent_network(rng)
            cert = no_arb_certificate(net)
            assert isinstance(cert, Certificate)
            assert np.all(cert.g > 0) and np.all(cert.lambdas > 0)
            for pool, lam, lo, hi in zip(net.pools, cert.lambdas, cert.slack_lo, cert.slack_hi):
                gi = cert.g[list(pool.global_ids)]
                P = price(pool, pool.reserves)
                np.testing.assert_allclose(lo, gi - pool.fee * lam * P)
                np.testing.assert_allclose(hi, lam * P - gi)
            assert cert.min_slack() >= -1e-9

    def test_matches_lp_and_networkx(self, rng):
        for _ in range(100):
            net = random_network(rng) if rng.random() < 0.7 else consistent_network(rng)
            cert = no_arb_certificate(net)
            feasible = lp_feasible(net)
            assert isinstance(cert, Certificate) == feasible
            if not any(p.kind == "sum" for p in net.pools):
                assert networkx_has_negative_cycle(net) == (not feasible)

    def test_drained_sum_pool_cannot_sell(self):
        # the only profitable cycle would need the sum pool to pay out token 1
        net = Network(2, [Pool("sum", [0, 1], [20.0, 0.0], 0.99), Pool("product", [0, 1], [10, 1], 0.99)])
        assert isinstance(no_arb_certificate(net), Certificate)
        assert detect_arbitrage(net).objective <= 1e-9


class TestAgreement:
    def test_certificate_iff_no_arbitrage(self, rng):
        for _ in range(30):
            net = random_network(rng)
            cert = no_arb_certificate(net)
            res = detect_arbitrage(net)
            assert isinstance(cert, Certificate) == (res.objective <= 1e-6)

    def test_arbitrage_extinguished(self, rng):
        seen = 0
        while seen < 10:
            net = random_network(rng)
            res = detect_arbitrage(net)
            if res.objective <= 1e-6:
                continue
            seen += 1
            assert np.all(res.psi >= -1e-9)
            assert detect_arbitrage(apply_trades(net, res.trades)).objective <= 1e-6

    def test_table1_extinguished(self, table1):
        res = detect_arbitrage(table1)
        assert res.objective > 1
        assert detect_arbitrage(apply_trades(table1, res.trades)).objective <= 1e-6


class TestCancelCycles:
    def test_certifies_and_profits(self, rng):
        for _ in range(10):
            net = random_network(rng)
            res = detect_arbitrage(net)
            after = apply_trades(net, res.trades)
            out = cancel_cycles(after)
            assert out.certified
            assert isinstance(no_arb_certificate(out.network), Certificate)
            assert np.all(net_trade(after, out.trades) >= -1e-12)

    def test_noop_when_certified(self, rng):
        net = consistent_network(rng)
        out = cancel_cycles(net)
        assert out.certified and out.rounds == 0 and out.network == net


class TestOptimalityCertificate:
    def test_table1_sweep_points(self, table1):
        for t in (0.0, 5.0, 11.0, 30.0):
            u = Liquidate([t, 0, 0], 2)
            res = solve_route(table1, u)
            cert = optimality_certificate(table1, u, res)
            assert cert.max_kkt_violation <= 1e-5
            assert cert.nu[2] == pytest.approx(1 + 1e-6)

    def test_detects_suboptimal_trade(self, table1):
        u = Liquidate([10, 0, 0], 2)
        res = solve_route(table1, u)
        # halve every trade: still valid but clearly not optimal
        from dataclasses import replace

        from cfmmroute.core import TradeSet

        half = TradeSet([0.5 * d for d in res.trades.deltas], [0.5 * l for l in res.trades.lambdas])
        bad = replace(res, trades=half, psi=net_trade(table1, half))
        assert optimality_certificate(table1, u, bad).max_kkt_violation > 1e-3

    def test_target_outside_every_pool(self):
        net = Network(3, [Pool("product", [0, 1], [1, 1], 0.99), Pool("product", [0, 1], [1, 2], 0.99)])
        u = Liquidate([5, 0, 0], 2)
        cert = optimality_certificate(net, u, solve_route(net, u))
        assert cert.max_kkt_violation == 0 and cert.nu[2] == 1
