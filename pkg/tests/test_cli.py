from __future__ import annotations

import csv
import io
import json

from polyexpand.cli import main
from polyexpand.models import example_model


def run(capsys, *args):
    code = main(list(args))
    out = capsys.readouterr()
    return code, out.out, out.err


def table_rows(text):
    body = [l for l in text.splitlines() if not l.startswith("#")]
    return list(csv.reader(io.StringIO("\n".join(body))))


def test_version(capsys):
    code, out, _ = run(capsys, "--version")
    assert code == 0 and "polyexpand" in out


class TestPrice:
    def test_header_and_rows(self, capsys):
        code, out, _ = run(capsys, "price", "--preset", "heston", "-N", "8", "-K", "5")
        assert code == 0
        assert out.startswith("# polyexpand 0.1.0 schema=1 command=price")
        rows = table_rows(out)
        assert rows[0] == ["N", "term", "partial_sum", "implied_vol", "l2_divergence"]
        assert len(rows) == 10
        assert 0.15 < float(rows[-1][3]) < 0.25

    def test_order_zero(self, capsys):
        code, out, _ = run(capsys, "price", "--preset", "jacobi", "-N", "0")
        rows = table_rows(out)
        assert code == 0 and len(rows) == 2
        assert float(rows[1][1]) == float(rows[1][2])

    def test_missing_model_file(self, capsys, tmp_path):
        missing = tmp_path / "nope.json"
        code, _, err = run(capsys, "price", "--model", str(missing))
        assert code == 1 and str(missing) in err

    def test_bad_override(self, capsys):
        code, _, err = run(capsys, "price", "--preset", "heston", "--set", "kappa")
        assert code == 1

    def test_invalid_parameter_is_config_error(self, capsys):
        code, _, _ = run(capsys, "price", "--preset", "heston", "--set", "rho=2")
        assert code == 1

    def test_not_retrievable_exit(self, capsys):
        # a single Gaussian auxiliary for the Jacobi model diverges at high order
        code, out, _ = run(capsys, "price", "--preset", "jacobi", "-K", "1", "-N", "60", "--strike", "0.1")
        assert code == 2
        assert table_rows(out)[-1][3] == "--"

    def test_model_and_payoff_files(self, capsys, tmp_path):
        mpath = tmp_path / "m.json"
        mpath.write_text(json.dumps(example_model("stein_stein").to_dict()))
        ppath = tmp_path / "p.json"
        ppath.write_text(json.dumps({"kind": "put", "strike": 0.0}))
        code, out, _ = run(capsys, "price", "--model", str(mpath), "--payoff", str(ppath), "-N", "6", "-K", "3")
        assert code == 0 and "payoff=put" in out

    def test_json_and_atomic_output(self, capsys, tmp_path):
        target = tmp_path / "sub" / "out.json"
        code, out, _ = run(capsys, "price", "--preset", "garch_variance", "--strike", "0.2", "-N", "5",
                           "--format", "json", "--out", str(target))
        assert code == 0 and out == ""
        payload = json.loads(target.read_text())
        assert payload["schema"] == 1 and payload["command"] == "price"
        assert len(payload["rows"]) == 6
        assert [p.name for p in target.parent.iterdir()] == ["out.json"]

    def test_deterministic(self, capsys):
        args = ("price", "--preset", "hull_white", "-K", "4", "--steps", "3", "--seed", "9", "-N", "10")
        assert run(capsys, *args)[1] == run(capsys, *args)[1]


class TestTables:
    def test_table1_layout(self, capsys):
        code, out, _ = run(capsys, "table", "1")
        rows = table_rows(out)
        assert code == 0
        assert len(rows[0]) == 7 and rows[0][1] == "k=-0.1 K=1" and rows[0][2] == "k=-0.1 K=2"
        assert [r[0] for r in rows[1:]] == ["2", "10", "20", "50"]
        assert rows[3][4] == "0.01"      # k = 0, N = 20, K = 2

    def test_table3_markers(self, capsys):
        code, out, _ = run(capsys, "table", "3", "--n-max", "16")
        rows = table_rows(out)
        assert code == 0 and len(rows) == 17
        col = rows[0].index("K=3 GM")
        assert rows[15][col] == "--"

    def test_unknown_table(self, capsys):
        assert run(capsys, "table", "7")[0] == 1


class TestOtherCommands:
    def test_quantize_one(self, capsys):
        code, out, _ = run(capsys, "quantize", "1")
        assert code == 0 and table_rows(out)[1] == ["0", "1"]

    def test_quantize_zero_rejected(self, capsys):
        assert run(capsys, "quantize", "0")[0] == 1

    def test_greeks_has_fourier_columns(self, capsys):
        code, out, _ = run(capsys, "greeks", "--preset", "heston", "-K", "11", "--match-moment", "20",
                           "--moneyness", "0.95,1.05,3")
        rows = table_rows(out)
        assert code == 0 and rows[0][-1] == "fourier_gamma" and len(rows) == 4
        for r in rows[1:]:
            assert abs(float(r[2]) - float(r[5])) < 5e-3

    def test_density(self, capsys):
        code, out, _ = run(capsys, "density", "--preset", "jacobi", "-N", "10", "--grid", "-0.2,0.2,5")
        assert code == 0 and len(table_rows(out)) == 6

    def test_calibrate_fixed_point(self, capsys, tmp_path):
        from polyexpand.auxdensity import default_auxiliary
        from polyexpand.pricing import ExpansionPricer
        m = example_model("heston")
        P = ExpansionPricer(m, default_auxiliary(m, 5), 10)
        quotes = tmp_path / "q.csv"
        quotes.write_text("".join(f"{k},{P.series(k).value!r}\n" for k in (-0.05, 0.0, 0.05)))
        code, out, _ = run(capsys, "calibrate", "--preset", "heston", "-K", "5", "-N", "10",
                           "--quotes", str(quotes), "--set", "theta=0.05", "--params", "theta")
        assert code == 0
        final = float([l for l in out.splitlines() if l.startswith("# final_loss=")][0].split("=")[1])
        assert final < 1e-10

    def test_calibrate_missing_quotes(self, capsys, tmp_path):
        code, _, _ = run(capsys, "calibrate", "--preset", "heston", "--quotes", str(tmp_path / "q.csv"))
        assert code == 1
