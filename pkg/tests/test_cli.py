import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cfmmroute.cli import (
    InputError,
    load_network,
    main,
    network_to_dict,
    parse_costs,
    parse_network,
    parse_utility,
    table1_path,
)
from cfmmroute.core import ArbTotal, BasketPurchase, Liquidate
from cfmmroute.dualsolver import solve_route

from conftest import random_network

TABLE1 = table1_path()


def write(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def liquidate0(tmp_path):
    return write(tmp_path, "u.json", {"type": "liquidate", "holdings": [0, 0, 0], "target_token": 2})


class TestFormats:
    def test_table1_fixture(self, table1):
        assert table1.n == 3 and table1.m == 5
        assert table1.token_labels == ("token1", "token2", "token3")
        np.testing.assert_allclose(table1.pools[0].weights, [1 / 2, 1 / 3, 1 / 6])
        assert [p.kind for p in table1.pools] == ["weighted_geomean", "product", "product", "product", "sum"]
        raw = json.loads(open(TABLE1).read())
        assert raw["cfmms"][0]["weights"] == [3, 2, 1]

    def test_round_trip(self, table1, rng):
        assert parse_network(network_to_dict(table1)) == table1
        for _ in range(200):
            net = random_network(rng)
            once = parse_network(json.loads(json.dumps(network_to_dict(net))))
            twice = parse_network(json.loads(json.dumps(network_to_dict(once))))
            assert once == twice

    @pytest.mark.parametrize(
        "doc, msg",
        [
            ({"tokens": ["a", "b"], "cfmms": []}, "no pools"),
            ({"tokens": ["a", "b"]}, "cfmms"),
            ({"tokens": ["a", "b"], "cfmms": [{"type": "product", "tokens": [0, 1], "reserves": [1, 1]}]}, "fee"),
            ({"tokens": ["a", "b"], "cfmms": [{"type": "product", "tokens": [0, 5], "reserves": [1, 1], "fee": 1}]}, "outside"),
            ({"tokens": ["a", "b"], "cfmms": [{"type": "weighted_geomean", "tokens": [0, 1], "reserves": [1, 1], "fee": 1}]}, "weights"),
            ({"tokens": ["a", "b"], "cfmms": [{"type": "product", "tokens": [0, 1], "reserves": [1, "x"], "fee": 1}]}, "reserves"),
        ],
    )
    def test_bad_network(self, doc, msg):
        with pytest.raises(InputError, match=msg):
            parse_network(doc)

    def test_utilities(self, table1):
        u = parse_utility({"type": "liquidate", "holdings": [1, 0, 0], "target_token": "token3"}, table1)
        assert isinstance(u, Liquidate) and u.target == 2
        u = parse_utility({"type": "basket", "holdings": [1, 0, 0], "desired_basket": [0, 1, 1]}, table1)
        assert isinstance(u, BasketPurchase) and u.support == (1, 2)
        assert isinstance(parse_utility({"type": "arb"}, table1), ArbTotal)
        with pytest.raises(InputError, match="target_token"):
            parse_utility({"type": "liquidate", "holdings": [1, 0, 0], "target_token": 3}, table1)
        with pytest.raises(InputError, match="holdings"):
            parse_utility({"type": "liquidate", "holdings": [1, 0], "target_token": 0}, table1)
        with pytest.raises(InputError, match="type"):
            parse_utility({"type": "quadratic"}, table1)

    def test_costs(self, table1):
        spec = parse_costs({"q": [0.1] * 5}, table1)
        assert spec.q.tolist() == [0.1] * 5
        with pytest.raises(InputError, match="costs.q"):
            parse_costs({"q": [0.1] * 4}, table1)
        with pytest.raises(InputError, match="delta_max"):
            parse_costs({"q": [0.1] * 5, "delta_max": [[1, 1]]}, table1)


class TestRoute:
    def test_table1(self, capsys, liquidate0):
        code, out, _ = run(capsys, "route", "--network", TABLE1, "--utility", liquidate0)
        doc = json.loads(out)
        assert code == 0 and doc["converged"]
        assert doc["objective"] == pytest.approx(solve_route(load_network(TABLE1), Liquidate([0, 0, 0], 2)).objective)
        assert len(doc["cfmms"]) == 5 and {"delta", "lambda"} <= set(doc["cfmms"][0])
        assert {"psi", "nu", "gap"} <= set(doc)

    def test_out_file(self, capsys, tmp_path, liquidate0):
        out = tmp_path / "r.json"
        code, stdout, _ = run(capsys, "route", "--network", TABLE1, "--utility", liquidate0, "--out", out)
        assert code == 0 and stdout == "" and "objective" in json.loads(out.read_text())

    def test_no_pools(self, capsys, tmp_path, liquidate0):
        net = write(tmp_path, "n.json", {"tokens": ["a", "b", "c"], "cfmms": []})
        code, _, err = run(capsys, "route", "--network", net, "--utility", liquidate0)
        assert code == 1 and "no pools" in err

    def test_bad_token(self, capsys, tmp_path):
        u = write(tmp_path, "u.json", {"type": "liquidate", "holdings": [0, 0, 0], "target_token": 3})
        code, _, err = run(capsys, "route", "--network", TABLE1, "--utility", u)
        assert code == 1 and "target_token" in err

    def test_missing_file(self, capsys, liquidate0):
        code, _, err = run(capsys, "route", "--network", "/nonexistent.json", "--utility", liquidate0)
        assert code == 1 and "cannot read" in err

    def test_not_converged(self, capsys, tmp_path):
        u = write(tmp_path, "u.json", {"type": "liquidate", "holdings": [10, 0, 0], "target_token": 2})
        code, _, _ = run(capsys, "route", "--network", TABLE1, "--utility", u, "--max-iter", 1)
        assert code == 2


class TestSweep:
    def test_schema(self, capsys, tmp_path):
        path = tmp_path / "s.csv"
        code, _, _ = run(capsys, "sweep", "--network", TABLE1, "--token-in", 1, "--token-out", 3,
                         "--t-max", 10, "--steps", 4, "--csv", path)
        rows = list(csv.reader(path.open()))
        assert code == 0
        assert rows[0][:3] == ["t", "u", "converged"]
        assert rows[0][3:6] == ["cfmm1_token1", "cfmm1_token2", "cfmm1_token3"]
        assert rows[0][-2:] == ["cfmm5_token1", "cfmm5_token3"]
        assert len(rows[0]) == 3 + 3 + 2 + 2 + 2 + 2
        assert [float(r[0]) for r in rows[1:]] == [0, 2.5, 5, 7.5, 10]
        assert all(r[2] == "1" for r in rows[1:])

    def test_matches_library(self, capsys, table1):
        code, out, _ = run(capsys, "sweep", "--network", TABLE1, "--token-in", "token1", "--token-out", "token3",
                           "--t-max", 20, "--steps", 2)
        rows = list(csv.reader(out.splitlines()))
        res = solve_route(table1, Liquidate([10, 0, 0], 2))
        assert float(rows[2][1]) == res.objective
        assert [float(x) for x in rows[2][3:6]] == res.trades.flows()[0].tolist()

    def test_single_row(self, capsys):
        code, out, _ = run(capsys, "sweep", "--network", TABLE1, "--token-in", 1, "--token-out", 3, "--steps", 0)
        assert code == 0 and len(out.splitlines()) == 2

    def test_parallel_same_bytes(self, capsys):
        args = ["sweep", "--network", TABLE1, "--token-in", 1, "--token-out", 3, "--t-max", 30, "--steps", 3]
        _, serial, _ = run(capsys, *args)
        _, parallel, _ = run(capsys, *args, "--jobs", 2)
        assert serial == parallel

    def test_bad_token(self, capsys):
        code, _, err = run(capsys, "sweep", "--network", TABLE1, "--token-in", 0, "--token-out", 3)
        assert code == 1 and "outside" in err


class TestArbCertify:
    def test_table1(self, capsys):
        code, out, _ = run(capsys, "arb", "--network", TABLE1)
        assert code == 0 and json.loads(out)["objective"] > 0
        code, out, _ = run(capsys, "certify", "--network", TABLE1)
        doc = json.loads(out)
        assert code == 3 and not doc["certificate"] and doc["cycle"]

    def test_single_pool(self, capsys, tmp_path):
        net = write(tmp_path, "n.json", {"tokens": ["a", "b"], "cfmms": [{"type": "product", "tokens": [0, 1], "reserves": [3, 7], "fee": 0.99}]})
        assert run(capsys, "arb", "--network", net)[0] == 3
        code, out, _ = run(capsys, "certify", "--network", net)
        assert code == 0 and json.loads(out)["certificate"]

    def test_apply_extinguishes(self, capsys, tmp_path):
        after = tmp_path / "after.json"
        code, out, _ = run(capsys, "arb", "--network", TABLE1, "--apply", after)
        assert code == 0 and min(json.loads(out)["polish_psi"]) >= 0
        assert run(capsys, "arb", "--network", after)[0] == 3
        assert run(capsys, "certify", "--network", after)[0] == 0

    def test_agree_on_random_files(self, capsys, tmp_path, rng):
        for k in range(10):
            net = write(tmp_path, f"n{k}.json", network_to_dict(random_network(rng)))
            arb = run(capsys, "arb", "--network", net)[0]
            cert = run(capsys, "certify", "--network", net)[0]
            assert (arb == 0) == (cert == 3)


class TestMicp:
    def test_zero_cost_matches_route(self, capsys, tmp_path, table1):
        u = write(tmp_path, "u.json", {"type": "liquidate", "holdings": [10, 0, 0], "target_token": 2})
        costs = write(tmp_path, "c.json", {"q": [0] * 5})
        code, out, _ = run(capsys, "micp", "--network", TABLE1, "--utility", u, "--costs", costs)
        doc = json.loads(out)
        assert code == 0
        assert doc["objective"] == pytest.approx(solve_route(table1, Liquidate([10, 0, 0], 2)).objective, rel=1e-9)

    def test_heuristics_below_brute(self, capsys, tmp_path):
        u = write(tmp_path, "u.json", {"type": "liquidate", "holdings": [10, 0, 0], "target_token": 2})
        costs = write(tmp_path, "c.json", {"q": [0.1] * 5})
        base = ["micp", "--network", TABLE1, "--utility", u, "--costs", costs]
        brute = json.loads(run(capsys, *base)[1])
        assert sum(brute["eta"]) <= 5
        for method in ("threshold", "random"):
            doc = json.loads(run(capsys, *base, "--method", method)[1])
            assert doc["objective"] <= brute["objective"] + 1e-9
            assert doc["relaxation_bound"] >= brute["objective"] - 1e-9

    def test_brute_cap(self, capsys, tmp_path):
        u = write(tmp_path, "u.json", {"type": "arb"})
        costs = write(tmp_path, "c.json", {"q": [0.1] * 5})
        code, _, err = run(capsys, "micp", "--network", TABLE1, "--utility", u, "--costs", costs, "--m-max", 3)
        assert code == 1 and "--method" in err


def test_module_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "cfmmroute", "certify", "--network", TABLE1],
        capture_output=True, text=True, check=False,
    )
    assert out.returncode == 3 and json.loads(out.stdout)["cycle"]
