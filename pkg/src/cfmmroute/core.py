"""Domain model: pools, networks, trade sets and trader utilities.

Token indices are 0-based everywhere in the library. A pool's
``global_ids`` list plays the role of the local-to-global index matrix:
local token ``k`` of the pool is global token ``global_ids[k]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from cfmmroute import tradefn

POOL_KINDS = ("weighted_geomean", "product", "sum")


def _frozen_array(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Pool:
    """A single CFMM.

    Weights are only accepted for ``weighted_geomean`` pools and are
    normalized to sum to one, so ``w=(3, 2, 1)`` is stored as
    ``(1/2, 1/3, 1/6)``. Product pools carry uniform weights internally.
    """

    kind: str
    global_ids: tuple[int, ...]
    reserves: np.ndarray
    fee: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in POOL_KINDS:
            raise ValueError(f"unknown pool kind {self.kind!r}; expected one of {POOL_KINDS}")
        ids = tuple(int(j) for j in self.global_ids)
        object.__setattr__(self, "global_ids", ids)
        if len(ids) < 2:
            raise ValueError("a pool must trade at least 2 tokens")
        if len(set(ids)) != len(ids):
            raise ValueError(f"pool token indices must be distinct, got {ids}")
        reserves = _frozen_array(self.reserves, "reserves")
        if reserves.shape != (len(ids),):
            raise ValueError(f"pool has {len(ids)} tokens but {reserves.size} reserves")
        if self.kind == "sum":
            if np.any(reserves < 0):
                raise ValueError("sum pool reserves must be nonnegative")
        elif np.any(reserves <= 0):
            raise ValueError(f"{self.kind} pool reserves must be strictly positive")
        object.__setattr__(self, "reserves", reserves)
        fee = float(self.fee)
        if not 0.0 < fee <= 1.0:
            raise ValueError(f"fee parameter must lie in (0, 1], got {fee}")
        object.__setattr__(self, "fee", fee)

        if self.kind == "weighted_geomean":
            if self.weights is None:
                raise ValueError("weighted_geomean pool requires weights")
            w = np.array(self.weights, dtype=float)
            if w.shape != (len(ids),) or np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be positive, one per token")
            total = w.sum()
            # already-normalized weights are kept bit-for-bit so files round-trip
            if abs(total - 1.0) > 4 * np.finfo(float).eps:
                w = w / total
            w = _frozen_array(w, "weights")
        elif self.weights is not None:
            raise ValueError(f"weights are only allowed for weighted_geomean pools, not {self.kind}")
        elif self.kind == "product":
            w = _frozen_array(np.full(len(ids), 1.0 / len(ids)), "weights")
        else:
            w = None
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return len(self.global_ids)

    def with_reserves(self, reserves) -> Pool:
        weights = self.weights if self.kind == "weighted_geomean" else None
        return Pool(self.kind, self.global_ids, reserves, self.fee, weights)

    def __eq__(self, other):
        if not isinstance(other, Pool):
            return NotImplemented
        same_w = (self.weights is None and other.weights is None) or (
            self.weights is not None
            and other.weights is not None
            and np.array_equal(self.weights, other.weights)
        )
        return (
            self.kind == other.kind
            and self.global_ids == other.global_ids
            and np.array_equal(self.reserves, other.reserves)
            and self.fee == other.fee
            and same_w
        )

    __hash__ = None


@dataclass(frozen=True)
class Network:
    n: int
    pools: tuple[Pool, ...]
    token_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "pools", tuple(self.pools))
        if self.n < 2:
            raise ValueError("a network needs at least 2 tokens")
        for i, pool in enumerate(self.pools):
            if any(j < 0 or j >= self.n for j in pool.global_ids):
                raise ValueError(f"pool {i} references a token outside [0, {self.n})")
            if pool.size > self.n:
                raise ValueError(f"pool {i} trades more tokens than the network has")
        if self.token_labels is not None:
            labels = tuple(str(s) for s in self.token_labels)
            if len(labels) != self.n:
                raise ValueError("token_labels must have one entry per token")
            object.__setattr__(self, "token_labels", labels)

    @property
    def m(self) -> int:
        return len(self.pools)

    def label(self, j: int) -> str:
        return self.token_labels[j] if self.token_labels else str(j + 1)

    def subnetwork(self, keep: Sequence[bool]) -> Network:
        return Network(self.n, [p for p, k in zip(self.pools, keep) if k], self.token_labels)


@dataclass(frozen=True)
class TradeSet:
    """Tendered (``deltas``) and received (``lambdas``) baskets per pool, in local indexing."""

    deltas: tuple[np.ndarray, ...]
    lambdas: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.deltas) != len(self.lambdas):
            raise ValueError("deltas and lambdas must have one entry per pool")
        ds, ls = [], []
        for d, l in zip(self.deltas, self.lambdas):
            d = _frozen_array(d, "delta")
            l = _frozen_array(l, "lambda")
            if d.shape != l.shape:
                raise ValueError("delta and lambda of a pool must have the same length")
            if np.any(d < 0) or np.any(l < 0):
                raise ValueError("tendered and received baskets must be nonnegative")
            ds.append(d)
            ls.append(l)
        object.__setattr__(self, "deltas", tuple(ds))
        object.__setattr__(self, "lambdas", tuple(ls))

    @classmethod
    def zeros(cls, network: Network) -> TradeSet:
        z = [np.zeros(p.size) for p in network.pools]
        return cls(z, [a.copy() for a in z])

    def flows(self) -> list[np.ndarray]:
        """Per-pool net flow to the trader, ``lambda - delta``."""
        return [l - d for d, l in zip(self.deltas, self.lambdas)]

    def __add__(self, other: TradeSet) -> TradeSet:
        return TradeSet(
            [a + b for a, b in zip(self.deltas, other.deltas)],
            [a + b for a, b in zip(self.lambdas, other.lambdas)],
        )


def _check_shapes(network: Network, trades: TradeSet) -> None:
    if len(trades.deltas) != network.m:
        raise ValueError(f"trade set covers {len(trades.deltas)} pools, network has {network.m}")
    for i, (pool, d) in enumerate(zip(network.pools, trades.deltas)):
        if d.shape != (pool.size,):
            raise ValueError(f"pool {i} trades {pool.size} tokens, trade has length {d.size}")


def scatter(network: Network, local: Sequence[np.ndarray]) -> np.ndarray:
    """Sum per-pool local vectors into global token coordinates."""
    out = np.zeros(network.n)
    for pool, v in zip(network.pools, local):
        np.add.at(out, list(pool.global_ids), v)
    return out


def net_trade(network: Network, trades: TradeSet) -> np.ndarray:
    _check_shapes(network, trades)
    return scatter(network, trades.flows())


def apply_trades(network: Network, trades: TradeSet, tol: float = 1e-8) -> Network:
    """Return the network with every pool's reserves moved to ``R + fee*delta - lambda``.

    Post-trade reserves within ``tol`` below zero are clipped to zero.
    """
    _check_shapes(network, trades)
    pools = []
    for i, (pool, d, l) in enumerate(zip(network.pools, trades.deltas, trades.lambdas)):
        check = tradefn.validate_trade(pool, d, l, tol)
        if not check.valid:
            raise ValueError(
                f"trade on pool {i} is not valid (residual {check.residual:.3g}, "
                f"min reserve {check.min_reserve:.3g})"
            )
        post = np.maximum(tradefn.post_trade_reserves(pool, d, l), 0.0)
        pools.append(pool.with_reserves(post))
    return Network(network.n, pools, network.token_labels)


# --- utilities ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Linear:
    prices: np.ndarray

    def __post_init__(self):
        p = _frozen_array(self.prices, "prices")
        if np.any(p <= 0):
            raise ValueError("linear utility prices must be positive")
        object.__setattr__(self, "prices", p)


@dataclass(frozen=True, eq=False)
class Liquidate:
    """Convert ``holdings`` into as much of ``target`` as possible."""

    holdings: np.ndarray
    target: int

    def __post_init__(self):
        h = _frozen_array(self.holdings, "holdings")
        if np.any(h < 0):
            raise ValueError("holdings must be nonnegative")
        if not 0 <= int(self.target) < h.size:
            raise ValueError(f"target token {self.target} outside [0, {h.size})")
        object.__setattr__(self, "holdings", h)
        object.__setattr__(self, "target", int(self.target))


@dataclass(frozen=True, eq=False)
class BasketPurchase:
    """End with the largest multiple of ``desired`` on top of ``holdings``."""

    holdings: np.ndarray
    desired: np.ndarray
    support: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        h = _frozen_array(self.holdings, "holdings")
        d = _frozen_array(self.desired, "desired basket")
        if h.shape != d.shape:
            raise ValueError("holdings and desired basket must have the same length")
        if np.any(h < 0) or np.any(d < 0):
            raise ValueError("holdings and desired basket must be nonnegative")
        support = tuple(int(j) for j in np.flatnonzero(d > 0))
        if not support:
            raise ValueError("desired basket must have a nonempty support")
        object.__setattr__(self, "holdings", h)
        object.__setattr__(self, "desired", d)
        object.__setattr__(self, "support", support)


@dataclass(frozen=True)
class ArbTotal:
    """Total tokens received, restricted to trades that tender nothing net."""


Utility = Union[Linear, Liquidate, BasketPurchase, ArbTotal]


def utility_dim(u: Utility) -> int | None:
    if isinstance(u, Linear):
        return u.prices.size
    if isinstance(u, (Liquidate, BasketPurchase)):
        return u.holdings.size
    return None


def utility_value(u: Utility, psi, tol: float = 0.0) -> float:
    """U(psi); domain violations beyond ``tol`` give ``-inf``."""
    psi = np.asarray(psi, dtype=float)
    dim = utility_dim(u)
    if dim is not None and psi.shape != (dim,):
        raise ValueError(f"utility expects {dim} tokens, got {psi.shape}")
    if isinstance(u, Linear):
        return float(u.prices @ psi)
    if isinstance(u, Liquidate):
        if np.any(u.holdings + psi < -tol):
            return -math.inf
        return float(psi[u.target])
    if isinstance(u, BasketPurchase):
        post = u.holdings + psi
        if np.any(post < -tol):
            return -math.inf
        k = list(u.support)
        return float(np.min(np.maximum(post[k], 0.0) / u.desired[k]))
    if isinstance(u, ArbTotal):
        if np.any(psi < -tol):
            return -math.inf
        return float(psi.sum())
    raise TypeError(f"unsupported utility {type(u).__name__}")
