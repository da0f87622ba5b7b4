import json

import pytest

from pemorl import reporting


def test_schema_ships_and_lists_every_output():
    files = reporting.load_schema()["files"]
    for name in ("metrics.csv", "ablation.csv", "ablation_runs.csv", "lower_bound.csv", "model_compare.csv",
                 "curves.csv", "eval_report.json"):
        assert reporting.columns(name)[0] == "config_hash" or name == "curves.csv"
        assert all(c.get("description") for c in files[name].get("columns", files[name].get("fields", [])))


def test_csv_follows_schema_order(tmp_path):
    p = tmp_path / "a.csv"
    reporting.write_csv(p, "ablation.csv", [{"lam": 3.0, "n_seeds": 5, "R_over_Rstar": 0.1 + 0.2}], "abc")
    rows = reporting.read_csv(p)
    assert list(rows[0]) == reporting.columns("ablation.csv")
    assert rows[0]["config_hash"] == "abc" and rows[0]["R_over_Rstar"] == repr(0.1 + 0.2)
    assert rows[0]["GMV"] == ""


def test_csv_rejects_unknown_columns_and_non_finite(tmp_path):
    with pytest.raises(KeyError):
        reporting.write_csv(tmp_path / "a.csv", "ablation.csv", [{"lam": 1.0, "bogus": 2}], "h")
    with pytest.raises(ValueError):
        reporting.write_csv(tmp_path / "a.csv", "ablation.csv", [{"lam": float("nan")}], "h")


def test_json_requires_schema_fields(tmp_path):
    with pytest.raises(KeyError):
        reporting.write_json(tmp_path / "e.json", "eval_report.json", {"GMV": 1.0}, "h")
    payload = {f: 0 for f in reporting.columns("eval_report.json") if f != "config_hash"}
    reporting.write_json(tmp_path / "e.json", "eval_report.json", payload, "h")
    assert json.loads((tmp_path / "e.json").read_text())["config_hash"] == "h"


def test_report_curves_and_script(tmp_path):
    rows = []
    for seed in (0, 1):
        for lam in (0.0, 3.0):
            for it in range(3):
                rows.append({"seed": seed, "variant": "pemorl", "lam": lam, "iteration": it, "model_return": float(seed + it + lam)})
    rows.append({"seed": 0, "variant": "no_imaginary", "lam": 3.0, "iteration": 0, "model_return": 99.0})
    reporting.write_csv(tmp_path / "metrics.csv", "metrics.csv", rows, "h")
    reporting.write_report(tmp_path, "h")
    curves = reporting.read_csv(tmp_path / "curves.csv")
    assert [r["iteration"] for r in curves] == ["0", "1", "2"]
    assert float(curves[1]["lam_0"]) == 1.5 and float(curves[0]["lam_3"]) == 3.5
    gp = (tmp_path / "report.gp").read_text()
    assert "curves.csv" in gp and "ablation.csv" not in gp
    first = (tmp_path / "curves.csv").read_bytes()
    reporting.write_report(tmp_path, "h")
    assert (tmp_path / "curves.csv").read_bytes() == first


def test_report_needs_metrics(tmp_path):
    with pytest.raises(FileNotFoundError):
        reporting.write_report(tmp_path, "h")
