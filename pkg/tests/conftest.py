import numpy as np
import pytest

from cfmmroute.cli import load_network, table1_path
from cfmmroute.core import Network, Pool

KINDS = ("product", "weighted_geomean", "sum")

# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


def random_pool(rng, n: int, kind: str | None = None, size: int | None = None) -> Pool:
    kind = kind or str(rng.choice(KINDS))
    if size is None:
        size = 3 if kind == "weighted_geomean" and n >= 3 and rng.random() < 0.5 else 2
    ids = rng.choice(n, size=size, replace=False)
    weights = rng.uniform(0.5, 3.0, size) if kind == "weighted_geomean" else None
    return Pool(kind, ids, rng.uniform(0.5, 20.0, size), rng.uniform(0.9, 1.0), weights)


def random_network(rng, n: int = 3, m: int = 4) -> Network:
    """Mixed-kind network; every pool draws its own token subset."""
    return Network(n, [random_pool(rng, n) for _ in range(m)])


def random_pair_network(rng, m: int) -> Network:
    """Two tokens, ``m`` two-asset pools, reserves in [0.1, 100], fee in [0.9, 1]."""
    pools = []
    for _ in range(m):
        kind = str(rng.choice(KINDS))
        ids = [0, 1] if rng.random() < 0.5 else [1, 0]
        weights = rng.uniform(0.5, 3.0, 2) if kind == "weighted_geomean" else None
        pools.append(Pool(kind, ids, rng.uniform(0.1, 100.0, 2), rng.uniform(0.9, 1.0), weights))
    return Network(2, pools)


def consistent_network(rng, n: int = 3, m: int = 4) -> Network:
    """Network whose pools all quote the same hidden token prices, hence arbitrage-free."""
    g = rng.uniform(0.5, 2.0, n)
    pools = []
    for _ in range(m):
        kind = str(rng.choice(("product", "weighted_geomean")))
        size = 3 if kind == "weighted_geomean" and rng.random() < 0.5 else 2
        ids = rng.choice(n, size=size, replace=False)
        w = rng.uniform(0.5, 3.0, size) if kind == "weighted_geomean" else np.ones(size)
        w = w / w.sum()
        # price_j = w_j phi / R_j is proportional to g_j when R_j = c * w_j / g_j
        reserves = rng.uniform(1.0, 20.0) * w / g[ids]
        pools.append(Pool(kind, ids, reserves, rng.uniform(0.9, 1.0), w if kind == "weighted_geomean" else None))
    return Network(n, pools)


@pytest.fixture(scope="session")
def table1():
    return load_network(table1_path())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def cvx_route(network: Network, u) -> float:
    """Optimal utility from an independent conic formulation (needs cvxpy)."""
    import cvxpy as cp

    from cfmmroute.core import ArbTotal, BasketPurchase, Linear, Liquidate

    psi = 0
    cons = []
    for pool in network.pools:
        d, l = cp.Variable(pool.size, nonneg=True), cp.Variable(pool.size, nonneg=True)
        post = pool.reserves + pool.fee * d - l
        if pool.kind == "sum":
            cons += [cp.sum(post) >= pool.reserves.sum(), post >= 0]
        else:
            cons.append(pool.weights @ cp.log(post) >= float(pool.weights @ np.log(pool.reserves)))
        a = np.zeros((network.n, pool.size))
        a[list(pool.global_ids), range(pool.size)] = 1.0
        psi = psi + a @ (l - d)
    if isinstance(u, Linear):
        obj = u.prices @ psi
    elif isinstance(u, Liquidate):
        cons.append(u.holdings + psi >= 0)
        obj = psi[u.target]
    elif isinstance(u, ArbTotal):
        cons.append(psi >= 0)
        obj = cp.sum(psi)
    elif isinstance(u, BasketPurchase):
        k = list(u.support)
        cons.append(u.holdings + psi >= 0)
        obj = cp.min(cp.multiply(u.holdings[k] + psi[k], 1.0 / u.desired[k]))
    prob = cp.Problem(cp.Maximize(obj), cons)
    prob.solve(solver="CLARABEL")
    return float(prob.value)
