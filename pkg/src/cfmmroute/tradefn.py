"""Trading functions, unscaled prices and trade validity for CFMM pools.

Three families are supported: ``sum``, ``product`` (geometric mean) and
``weighted_geomean``. All three are concave, increasing and 1-homogeneous,
so prices are 0-homogeneous in the reserves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from cfmmroute.core import Pool

GEOMETRIC_KINDS = ("weighted_geomean", "product")


@dataclass(frozen=True)
class TradeCheck:
    """Outcome of :func:`validate_trade`.

    ``residual`` is the relative trading-function slack
    ``(phi(post) - phi(R)) / (1 + |phi(R)|)``; negative means the pool
    loses value. ``min_reserve`` is the smallest post-trade reserve.
    """

    valid: bool
    residual: float
    min_reserve: float


def _check_reserves(pool: Pool, reserves: np.ndarray) -> np.ndarray:
    r = np.asarray(reserves, dtype=float)
    if r.shape != (len(pool.global_ids),):
        raise ValueError(f"expected {len(pool.global_ids)} reserves, got shape {r.shape}")
    if pool.kind == "sum":
        if np.any(r < 0):
            raise ValueError("sum pool reserves must be nonnegative")
    elif np.any(r <= 0):
        raise ValueError(f"{pool.kind} pool reserves must be strictly positive")
    return r


def log_phi(pool: Pool, reserves: np.ndarray) -> float:
    """Logarithm of the trading function for geometric-family pools."""
    r = _check_reserves(pool, reserves)
    if pool.kind == "sum":
        return float(np.log(r.sum()))
    return float(pool.weights @ np.log(r))


def phi(pool: Pool, reserves: np.ndarray) -> float:
    """Evaluate the pool's trading function at ``reserves``.

    Geometric means are computed in log space to stay finite for reserves
    spanning many orders of magnitude.
    """
    r = _check_reserves(pool, reserves)
    if pool.kind == "sum":
        return float(r.sum())
    return float(np.exp(pool.weights @ np.log(r)))


def price(pool: Pool, reserves: np.ndarray) -> np.ndarray:
    """Gradient of the trading function (the pool's unscaled prices)."""
    r = _check_reserves(pool, reserves)
    if pool.kind == "sum":
        return np.ones_like(r)
    return pool.weights * np.exp(pool.weights @ np.log(r)) / r


def post_trade_reserves(pool: Pool, delta, lam) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    lam = np.asarray(lam, dtype=float)
    n_i = len(pool.global_ids)
    if delta.shape != (n_i,) or lam.shape != (n_i,):
        raise ValueError(
            f"trade shape mismatch: pool has {n_i} tokens, got {delta.shape} and {lam.shape}"
        )
    return pool.reserves + pool.fee * delta - lam


def validate_trade(pool: Pool, delta, lam, tol: float = 1e-8) -> TradeCheck:
    """Check that ``(delta, lam)`` is accepted by ``pool``.

    A trade is valid when ``phi(R + fee*delta - lam) >= phi(R) - tol*(1+|phi(R)|)``
    and no post-trade reserve is below ``-tol``.
    """
    post = post_trade_reserves(pool, delta, lam)
    base = phi(pool, pool.reserves)
    scale = 1.0 + abs(base)
    min_res = float(post.min())
    if pool.kind == "sum":
        residual = (float(post.sum()) - base) / scale
    elif min_res <= 0:
        return TradeCheck(False, -np.inf, min_res)
    else:
        residual = (phi(pool, post) - base) / scale
    return TradeCheck(residual >= -tol and min_res >= -tol, residual, min_res)
