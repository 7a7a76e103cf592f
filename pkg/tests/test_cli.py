import csv
import json

import numpy as np
import pytest

from pdmp_reversal.cli import main


def _run(tmp_path, cfg, *args, command="validate", name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return main([command, "--config", str(path), *args])


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


FAST = {"seed": 5, "checks": ["stationary", "reversal", "duality", "corollary"]}


def test_zoo_list(capsys):
    assert main(["zoo", "list"]) == 0
    out = capsys.readouterr().out
    for name in ("tcp", "renewal_age", "reflected_mg1", "indep_jumps", "saturating"):
        assert name in out


def test_stationary_writes_density(tmp_path):
    out = tmp_path / "o"
    assert _run(tmp_path, {"model": "reflected_mg1", "seed": 1}, "--out-dir", str(out), command="stationary") == 0
    rows = list(csv.DictReader((out / "density.csv").open()))
    assert list(rows[0]) == ["x", "nu_prime"]
    meta = json.loads((out / "density.json").read_text())
    assert meta["atoms"][0]["x"] == 0.0
    assert meta["atoms"][0]["mass"] == pytest.approx(0.5, abs=1e-6)
    assert meta["sigma_gamma"] == pytest.approx(1.0 * meta["atoms"][0]["mass"], rel=1e-12)


def test_reverse_writes_parameters(tmp_path):
    out = tmp_path / "o"
    cfg = {"model": "renewal_age", "seed": 1, "checks": ["duality"]}
    assert _run(tmp_path, cfg, "--out-dir", str(out), command="reverse") == 0
    sig = json.loads((out / "sigma_star.json").read_text())
    assert sig[0]["x"] == 0.0 and sig[0]["mass"] == pytest.approx(1.0, abs=1e-6)
    rev = np.genfromtxt(out / "reversed.csv", delimiter=",", names=True)
    assert np.nanmax(np.abs(rev["lambda_star"])) < 1e-6
    assert (out / "kernel_star.csv").exists() and (out / "reports.json").exists()


def test_simulate_is_reproducible(tmp_path):
    cfg = {"model": "saturating", "seed": 99, "n_paths": 4, "horizon": 20}
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(tmp_path, cfg, "--out-dir", str(a), command="simulate") == 0
    assert _run(tmp_path, cfg, "--out-dir", str(b), "--threads", "3", command="simulate") == 0
    assert _tree(a) == _tree(b)
    summary = json.loads((a / "summary.json").read_text())
    assert summary["n_paths"] == 4 and len(summary["path_seeds"]) == 4
    assert (a / "paths" / "path_0003.csv").exists()


def test_seed_flag_overrides_config(tmp_path):
    cfg = {"model": "tcp", "seed": 1, "n_paths": 2, "horizon": 5, "write_paths": False}
    a, b = tmp_path / "a", tmp_path / "b"
    _run(tmp_path, cfg, "--out-dir", str(a), command="simulate")
    _run(tmp_path, cfg, "--out-dir", str(b), "--seed", "2", command="simulate")
    assert json.loads((a / "summary.json").read_text())["seed"] == 1
    assert json.loads((b / "summary.json").read_text())["seed"] == 2


def test_validate_is_byte_identical(tmp_path):
    cfg = {**FAST, "experiments": [{"model": "tcp"}, {"model": "reflected_mg1"}, {"model": "tcp"}]}
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(tmp_path, cfg, "--out-dir", str(a)) == 0
    assert _run(tmp_path, cfg, "--out-dir", str(b)) == 0
    assert _tree(a) == _tree(b)
    report = json.loads((a / "validate_report.json").read_text())
    assert [e["name"] for e in report["experiments"]] == ["tcp", "reflected_mg1", "tcp_1"]
    assert report["pass"] is True


def test_inflated_intensity_fails_validation(tmp_path):
    cfg = {"model": "tcp", "seed": 3, "n_nodes": 512, "n_paths": 40, "horizon": 200,
           "checks": ["simulate_compare"], "lambda_scale": 1.2}
    assert _run(tmp_path, cfg, "--out-dir", str(tmp_path / "o")) == 1
    report = json.loads((tmp_path / "o" / "validate_report.json").read_text())
    sc = report["experiments"][0]["checks"]["simulate_compare"]
    assert not next(r for r in sc["details"] if r["target"] == "lambda_star")["pass"]


@pytest.mark.parametrize("cfg", [
    {"model": "tcp", "seed": 1, "colour": "red"},
    {"model": "tcp"},
    {"model": "tcp", "seed": -4},
    {"model": "tcp", "seed": 1, "checks": ["vibes"]},
    {"model": "tcp", "seed": 1, "solver": "magic"},
    {"model": "nope", "seed": 1},
    {"model": {"zoo": "tcp", "params": {"alpha": 3}}, "seed": 1},
    {"model": {"custom": {"lower": 0, "drift": "1", "intensity": "1",
                          "kernel": {"family": "to_point", "point": 0}}}, "seed": 1, "solver": "closed"},
])
def test_bad_configs_exit_2(tmp_path, cfg):
    assert _run(tmp_path, cfg, "--out-dir", str(tmp_path / "o"), command="stationary") == 2


def test_missing_and_malformed_config_exit_2(tmp_path):
    assert main(["stationary", "--config", str(tmp_path / "absent.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["stationary", "--config", str(bad)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["transmogrify"])
    assert exc.value.code == 2


def test_model_without_stationary_law_exits_3(tmp_path):
    cfg = {"model": {"custom": {"lower": 0, "drift": "1", "intensity": "0", "window": [0, 5],
                                "kernel": {"family": "to_point", "point": 0}}}, "seed": 1, "n_nodes": 128}
    assert _run(tmp_path, cfg, "--out-dir", str(tmp_path / "o"), command="stationary") == 3


def test_custom_model_matches_its_zoo_twin(tmp_path):
    out = tmp_path / "o"
    cfg = {"model": {"custom": {"lower": 0, "drift": "1", "intensity": "x",
                                "kernel": {"family": "uniform_scale", "g": 1}}}, "seed": 7}
    assert _run(tmp_path, cfg, "--out-dir", str(out), command="stationary") == 0
    rows = list(csv.DictReader((out / "density.csv").open()))
    x = np.array([float(r["x"]) for r in rows])
    p = np.array([float(r["nu_prime"]) for r in rows])
    assert np.max(np.abs(p - x * np.exp(-x**2 / 2))) < 1e-4
