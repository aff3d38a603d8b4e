"""Command-line interface and JSON file formats.

Network files::

    {"tokens": ["A", "B"],
     "cfmms": [{"type": "product", "tokens": [0, 1], "reserves": [10, 1], "fee": 0.99}]}

Token indices inside files are 0-based. Weighted geometric-mean pools add
``"weights"``, stored as given and normalized on load.

Utility files carry ``"type"`` (linear, liquidate, basket or arb) plus
``prices``, ``holdings``, ``target_token`` or ``desired_basket`` as needed.
``target_token`` may be an index or a token name.

Exit codes: 0 success, 1 input error, 2 solver did not converge, 3 no
arbitrage (``arb``) or arbitrage witness (``certify``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import numpy as np

from cfmmroute.certify import ArbWitness, cancel_cycles, detect_arbitrage, no_arb_certificate
from cfmmroute.core import (
    ArbTotal,
    BasketPurchase,
    Linear,
    Liquidate,
    Network,
    Pool,
    Utility,
    apply_trades,
    net_trade,
)
from cfmmroute.dualsolver import RouteResult, SolverConfig, solve_route
from cfmmroute.fixedcost import (
    FixedCostSpec,
    solve_bruteforce,
    solve_randomized,
    solve_relaxation,
    solve_threshold,
)

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_NEGATIVE = 0, 1, 2, 3
ARB_TOL = 1e-6


class InputError(ValueError):
    pass


# --- file formats -----------------------------------------------------------------


def _field(doc: dict, key: str, where: str):
    if key not in doc:
        raise InputError(f"{where}: missing field {key!r}")
    return doc[key]


def _numbers(value, where: str) -> list[float]:
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise InputError(f"{where} must be a list of numbers")
    return [float(v) for v in value]


def parse_network(doc: dict) -> Network:
    if not isinstance(doc, dict):
        raise InputError("network file must hold an object")
    tokens = _field(doc, "tokens", "network")
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise InputError("network.tokens must be a list of names")
    cfmms = _field(doc, "cfmms", "network")
    if not isinstance(cfmms, list):
        raise InputError("network.cfmms must be a list")
    if not cfmms:
        raise InputError("network has no pools")
    pools = []
    for i, c in enumerate(cfmms):
        where = f"cfmms[{i}]"
        if not isinstance(c, dict):
            raise InputError(f"{where} must be an object")
        kind = _field(c, "type", where)
        ids = _field(c, "tokens", where)
        if not isinstance(ids, list) or not all(isinstance(j, int) and not isinstance(j, bool) for j in ids):
            raise InputError(f"{where}.tokens must be a list of token indices")
        if any(j < 0 or j >= len(tokens) for j in ids):
            raise InputError(f"{where}.tokens references a token outside [0, {len(tokens)})")
        reserves = _numbers(_field(c, "reserves", where), f"{where}.reserves")
        fee = _field(c, "fee", where)
        if not isinstance(fee, (int, float)) or isinstance(fee, bool):
            raise InputError(f"{where}.fee must be a number")
        weights = c.get("weights")
        if (weights is not None) != (kind == "weighted_geomean"):
            raise InputError(f"{where}.weights must be given exactly for weighted_geomean pools")
        if weights is not None:
            weights = _numbers(weights, f"{where}.weights")
        try:
            pools.append(Pool(kind, ids, reserves, fee, weights))
        except ValueError as exc:
            raise InputError(f"{where}: {exc}") from exc
    try:
        return Network(len(tokens), pools, tokens)
    except ValueError as exc:
        raise InputError(f"network: {exc}") from exc


def network_to_dict(network: Network) -> dict:
    labels = list(network.token_labels or [network.label(j) for j in range(network.n)])
    cfmms = []
    for p in network.pools:
        entry = {"type": p.kind, "tokens": list(p.global_ids), "reserves": p.reserves.tolist(), "fee": p.fee}
        if p.kind == "weighted_geomean":
            entry["weights"] = p.weights.tolist()
        cfmms.append(entry)
    return {"tokens": labels, "cfmms": cfmms}


def _token_index(value, network: Network, where: str) -> int:
    labels = network.token_labels or ()
    if isinstance(value, str):
        if value not in labels:
            raise InputError(f"{where}: unknown token {value!r}")
        return labels.index(value)
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value < network.n:
        raise InputError(f"{where}: token index must lie in [0, {network.n})")
    return value


def _vector(doc: dict, key: str, n: int) -> np.ndarray:
    v = _numbers(_field(doc, key, "utility"), f"utility.{key}")
    if len(v) != n:
        raise InputError(f"utility.{key} has {len(v)} entries, network has {n} tokens")
    return np.array(v)


def parse_utility(doc: dict, network: Network) -> Utility:
    if not isinstance(doc, dict):
        raise InputError("utility file must hold an object")
    kind = _field(doc, "type", "utility")
    n = network.n
    try:
        if kind == "linear":
            return Linear(_vector(doc, "prices", n))
        if kind == "liquidate":
            target = _token_index(_field(doc, "target_token", "utility"), network, "utility.target_token")
            return Liquidate(_vector(doc, "holdings", n), target)
        if kind == "basket":
            return BasketPurchase(_vector(doc, "holdings", n), _vector(doc, "desired_basket", n))
        if kind == "arb":
            return ArbTotal()
    except InputError:
        raise
    except ValueError as exc:
        raise InputError(f"utility: {exc}") from exc
    raise InputError(f"utility.type must be linear, liquidate, basket or arb, not {kind!r}")


def parse_costs(doc: dict, network: Network) -> FixedCostSpec:
    if not isinstance(doc, dict):
        raise InputError("costs file must hold an object")
    q = _numbers(_field(doc, "q", "costs"), "costs.q")
    if len(q) != network.m:
        raise InputError(f"costs.q has {len(q)} entries, network has {network.m} pools")
    caps = doc.get("delta_max")
    if caps is not None:
        if not isinstance(caps, list) or len(caps) != network.m:
            raise InputError("costs.delta_max must hold one list per pool")
        caps = [np.array(_numbers(c, f"costs.delta_max[{i}]")) for i, c in enumerate(caps)]
    try:
        spec = FixedCostSpec(np.array(q), caps)
        spec.caps(network)
    except ValueError as exc:
        raise InputError(f"costs: {exc}") from exc
    return spec


def _load_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc


def load_network(path: str) -> Network:
    return parse_network(_load_json(path))


def table1_path() -> str:
    """Path of the bundled example network."""
    return str(resources.files("cfmmroute") / "data" / "table1.json")


# --- output -------------------------------------------------------------------


def result_to_dict(result: RouteResult) -> dict:
    return {
        "objective": result.objective,
        "converged": result.converged,
        "gap": result.gap,
        "iterations": result.iterations,
        "disconnected": result.disconnected,
        "psi": result.psi.tolist(),
        "nu": result.nu.tolist(),
        "cfmms": [
            {"delta": d.tolist(), "lambda": l.tolist()}
            for d, l in zip(result.trades.deltas, result.trades.lambdas)
        ],
    }


def _emit(doc: dict, path: str | None) -> None:
    text = json.dumps(doc, indent=2) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _config(args) -> SolverConfig:
    cfg = SolverConfig()
    if getattr(args, "tol", None) is not None:
        cfg.tol_gap = args.tol
    if getattr(args, "max_iter", None) is not None:
        cfg.max_iter = args.max_iter
    return cfg


# --- commands -------------------------------------------------------------------


def cmd_route(args) -> int:
    network = load_network(args.network)
    u = parse_utility(_load_json(args.utility), network)
    result = solve_route(network, u, _config(args))
    _emit(result_to_dict(result), args.out)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _cli_token(value: str, network: Network) -> int:
    """Sweep token flags are 1-based indices or token names."""
    labels = network.token_labels or ()
    if value in labels:
        return labels.index(value)
    try:
        k = int(value)
    except ValueError:
        raise InputError(f"unknown token {value!r}") from None
    if not 1 <= k <= network.n:
        raise InputError(f"token number {k} outside [1, {network.n}]")
    return k - 1


def _sweep_point(job):
    network, j, k, t, cfg = job
    h = np.zeros(network.n)
    h[j] = t
    return solve_route(network, Liquidate(h, k), cfg)


def cmd_sweep(args) -> int:
    network = load_network(args.network)
    j = _cli_token(args.token_in, network)
    k = _cli_token(args.token_out, network)
    if args.steps < 0 or args.t_max < 0:
        raise InputError("--steps and --t-max must be nonnegative")
    ts = np.linspace(0.0, args.t_max, args.steps + 1) if args.steps else np.array([0.0])
    cfg = _config(args)
    jobs = [(network, j, k, float(t), cfg) for t in ts]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(job) for job in jobs]

    header = ["t", "u", "converged"]
    for i, p in enumerate(network.pools):
        header += [f"cfmm{i + 1}_{network.label(g)}" for g in p.global_ids]
    out = open(args.csv, "w", newline="", encoding="utf-8") if args.csv else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        for t, r in zip(ts, results):
            row = [_fmt(t), _fmt(r.objective), "1" if r.converged else "0"]
            for flow in r.trades.flows():
                row += [_fmt(x) for x in flow]
            writer.writerow(row)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK if all(r.converged for r in results) else EXIT_NOT_CONVERGED


def cmd_arb(args) -> int:
    network = load_network(args.network)
    result = detect_arbitrage(network, _config(args))
    found = result.objective > ARB_TOL
    doc = result_to_dict(result)
    doc["arbitrage"] = found
    if args.apply:
        after = apply_trades(network, result.trades) if found else network
        # close the residual first-order price gaps left by the finite solver tolerance
        polish = cancel_cycles(after)
        doc["polish_rounds"] = polish.rounds
        doc["polish_psi"] = net_trade(after, polish.trades).tolist()
        _emit(network_to_dict(polish.network), args.apply)
    _emit(doc, None)
    if not result.converged:
        return EXIT_NOT_CONVERGED
    return EXIT_OK if found else EXIT_NEGATIVE


def cmd_certify(args) -> int:
    network = load_network(args.network)
    cert = no_arb_certificate(network, args.tol)
    if isinstance(cert, ArbWitness):
        names = [network.label(i) if kind == "token" else f"cfmm{i + 1}" for kind, i in cert.cycle]
        _emit({"certificate": False, "cycle": names, "log_gain": cert.log_gain}, None)
        return EXIT_NEGATIVE
    _emit(
        {
            "certificate": True,
            "g": cert.g.tolist(),
            "lambdas": cert.lambdas.tolist(),
            "min_slack": cert.min_slack(),
        },
        None,
    )
    return EXIT_OK


def cmd_micp(args) -> int:
    network = load_network(args.network)
    u = parse_utility(_load_json(args.utility), network)
    spec = parse_costs(_load_json(args.costs), network)
    cfg = _config(args)
    doc: dict = {"method": args.method}
    if args.method == "brute":
        if network.m > args.m_max:
            raise InputError(
                f"brute force over {network.m} pools exceeds --m-max {args.m_max}; "
                "use --method threshold or random"
            )
        result, eta = solve_bruteforce(network, u, spec, args.m_max, cfg)
    else:
        relax = solve_relaxation(network, u, spec, cfg)
        if args.method == "threshold":
            result, eta = solve_threshold(network, u, spec, config=cfg, relaxation=relax)
        else:
            result, eta = solve_randomized(network, u, spec, args.samples, args.seed, cfg, relax)
        doc["relaxation_bound"] = relax.bound
        doc["relaxed_eta"] = relax.eta.tolist()
    doc["eta"] = [int(e) for e in eta]
    doc["objective"] = result.objective
    doc["route"] = result_to_dict(result)
    _emit(doc, args.out)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfmmroute", description="Optimal routing across CFMM networks.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def solver_flags(p):
        p.add_argument("--tol", type=float, help="relative duality-gap tolerance")
        p.add_argument("--max-iter", type=int, help="dual iteration cap")

    p = sub.add_parser("route", help="solve one routing problem")
    p.add_argument("--network", required=True)
    p.add_argument("--utility", required=True)
    p.add_argument("--out", help="write the result here instead of stdout")
    solver_flags(p)
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("sweep", help="liquidate t units of one token into another for a range of t")
    p.add_argument("--network", required=True)
    p.add_argument("--token-in", required=True, help="1-based token number or name")
    p.add_argument("--token-out", required=True, help="1-based token number or name")
    p.add_argument("--t-max", type=float, default=50.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--csv", help="write CSV here instead of stdout")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    solver_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("arb", help="find the best arbitrage")
    p.add_argument("--network", required=True)
    p.add_argument("--apply", metavar="PATH", help="write the post-arbitrage network here")
    solver_flags(p)
    p.set_defaults(func=cmd_arb)

    p = sub.add_parser("certify", help="prove no arbitrage or show a cycle")
    p.add_argument("--network", required=True)
    p.add_argument("--tol", type=float, default=1e-9, help="log-domain cycle tolerance")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("micp", help="route with fixed per-pool costs")
    p.add_argument("--network", required=True)
    p.add_argument("--utility", required=True)
    p.add_argument("--costs", required=True)
    p.add_argument("--method", choices=("brute", "threshold", "random"), default="brute")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--m-max", type=int, default=12)
    p.add_argument("--out")
    solver_flags(p)
    p.set_defaults(func=cmd_micp)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
