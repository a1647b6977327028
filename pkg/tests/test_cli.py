import json
import subprocess
import sys
from pathlib import Path

import pytest

from pxfb import __version__
from pxfb.cli import EXIT_CERTIFICATION, EXIT_CONFIG, EXIT_OK, main
from pxfb.errors import ConfigError
from pxfb.experiments import (
    CSV_SCHEMA,
    KINDS,
    config_hash,
    load_config,
    parse_config,
    run_experiment,
    verify_run,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# -- configuration ----------------------------------------------------------------


def test_minimal_toml_fills_defaults(tmp_path):
    p = write(tmp_path, "d.toml", 'kind = "dirichlet_benchmark"\n[grid]\nh = 0.0625\n')
    cfg = load_config(p)
    assert cfg.params["delta"] == 1e-8
    assert cfg.params["tol"] == 1e-9
    assert cfg.grid["h"] == 0.0625
    assert cfg.seed == 0


def test_p_min_bound_cited(tmp_path):
    p = write(tmp_path, "b.json", json.dumps({"kind": "barrier_certification", "params": {"p_min": 0.9}}))
    with pytest.raises(ConfigError, match="1 < p_min"):
        load_config(p)


def test_json_parse_error_has_position(tmp_path):
    p = write(tmp_path, "x.json", '{\n  "kind": "norm_suite",\n  "params": {,}\n}')
    with pytest.raises(ConfigError, match=r"line 3, column"):
        load_config(p)


def test_toml_parse_error(tmp_path):
    p = write(tmp_path, "x.toml", 'kind = "norm_suite"\n[grid\n')
    with pytest.raises(ConfigError):
        load_config(p)


@pytest.mark.parametrize(
    "data,pattern",
    [
        ({}, "missing required"),
        ({"kind": "nope"}, "unknown kind"),
        ({"kind": "norm_suite", "colour": 1}, "unknown top-level"),
        ({"kind": "norm_suite", "params": {"sampels": 3}}, "unknown params"),
        ({"kind": "norm_suite", "grid": {"h": -1}}, "grid.h"),
        ({"kind": "flatness_iteration", "params": {"rbar": 2}}, "rbar"),
        ({"kind": "norm_suite", "seed": -3}, "seed"),
    ],
)
def test_validation_errors(data, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(data)


def test_unsupported_extension(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "c.yaml", "kind: norm_suite"))


def test_every_kind_has_schema_and_example():
    assert set(CSV_SCHEMA) == set(KINDS)
    shipped = {load_config(p).kind for p in CONFIGS.glob("*.toml")}
    assert shipped == set(KINDS)


def test_hash_ignores_output_location():
    a = parse_config({"kind": "norm_suite", "out": "x"})
    b = parse_config({"kind": "norm_suite", "out": "y"})
    c = parse_config({"kind": "norm_suite", "seed": 2})
    assert config_hash(a) == config_hash(b) != config_hash(c)


# -- runs ----------------------------------------------------------------------------


def test_flatness_config_round_trip(tmp_path):
    cfg = load_config(CONFIGS / "flatness.toml")
    cfg.grid["h"] = 1 / 64
    cfg.params["K"] = 3
    rec = run_experiment(cfg, out=tmp_path, plots=False)
    stored = json.loads((Path(rec.directory) / "record.json").read_text())
    assert stored["config"] == cfg.to_dict()
    assert stored["version"] == __version__
    assert "wall_time" not in stored
    echoed = json.loads((Path(rec.directory) / "config.json").read_text())
    assert parse_config(echoed).identity() == cfg.identity()


def test_cone_trace_is_exact(tmp_path):
    cfg = parse_config({"kind": "flatness_iteration", "params": {"K": 3}, "grid": {"h": 1 / 64}})
    rec = run_experiment(cfg, out=tmp_path, plots=False)
    assert rec.summary["eps"] == [0.0] * 4
    ok, msgs = verify_run(rec.directory)
    assert ok, msgs


def test_barrier_run_passes(tmp_path):
    cfg = parse_config({"kind": "barrier_certification", "params": {"samples": 32, "eps_count": 3}})
    rec = run_experiment(cfg, out=tmp_path, plots=False)
    assert rec.summary["passed"] is True
    assert rec.summary["w_margin"] >= rec.summary["c_bar"] - 1e-12
    assert rec.summary["c_bar"] == 0.5


def test_norm_suite_all_pass(tmp_path):
    cfg = parse_config({"kind": "norm_suite", "params": {"samples": 1000}})
    rec = run_experiment(cfg, out=tmp_path, plots=False)
    assert rec.summary["bracket_passes"] == 1000


def test_artifacts_exist_and_table_matches_schema(tmp_path):
    cfg = parse_config({"kind": "neumann_check", "grid": {"h": 1 / 32}})
    rec = run_experiment(cfg, out=tmp_path, plots=True)
    d = Path(rec.directory)
    for a in rec.artifacts:
        assert (d / a).exists()
    header = (d / "table.csv").read_text().splitlines()[0].split(",")
    schema = json.loads((d / "schema.json").read_text())["neumann_check"]
    assert sorted(header) == sorted(schema)
    assert any(a.endswith(".svg") for a in rec.artifacts)
    assert "wall_time" in (d / "run.log").read_text()


def test_rerun_is_byte_identical(tmp_path):
    cfg = parse_config({"kind": "energy_benchmark", "grid": {"h": 1 / 64}})
    d1 = Path(run_experiment(cfg, out=tmp_path / "a").directory)
    d2 = Path(run_experiment(cfg, out=tmp_path / "b").directory)
    names = sorted(p.name for p in d1.iterdir() if p.name != "run.log")
    assert names == sorted(p.name for p in d2.iterdir() if p.name != "run.log")
    for name in names:
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name


def test_verify_detects_tampering(tmp_path):
    cfg = parse_config({"kind": "neumann_check", "grid": {"h": 1 / 32}})
    d = Path(run_experiment(cfg, out=tmp_path, plots=False).directory)
    summary = json.loads((d / "summary.json").read_text())
    summary["poly_error"]["2.0"] = 1.0
    (d / "summary.json").write_text(json.dumps(summary))
    ok, msgs = verify_run(d)
    assert not ok and "differs" in msgs[0]


# -- command line ------------------------------------------------------------------------


def test_cli_run_verify_plot(tmp_path, capsys):
    cfg = write(tmp_path, "n.json", json.dumps({"kind": "norm_suite", "params": {"samples": 20}}))
    assert main(["--out", str(tmp_path / "runs"), "--seed", "3", "run", str(cfg)]) == EXIT_OK
    out = capsys.readouterr().out
    run_dir = out.splitlines()[0].split(": ", 1)[1]
    assert json.loads((Path(run_dir) / "config.json").read_text())["seed"] == 3
    assert main(["verify", run_dir]) == EXIT_OK
    assert main(["plot", run_dir]) == EXIT_OK
    assert "table.svg" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, "bad.json", json.dumps({"kind": "barrier_certification", "params": {"p_min": 0.9}}))
    assert main(["run", str(bad)]) == EXIT_CONFIG
    assert "1 < p_min" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    # with r1 = 1e-6 the gradient pinch needs eps < 2e-12, below the whole eps grid
    fail = write(
        tmp_path,
        "fail.json",
        json.dumps({"kind": "barrier_certification", "params": {"r1": 1e-6, "samples": 16, "eps_count": 2}}),
    )
    assert main(["--out", str(tmp_path), "run", "--no-plots", str(fail)]) == EXIT_CERTIFICATION
    assert '"passed": false' in capsys.readouterr().out


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "pxfb.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "run" in res.stdout and "verify" in res.stdout
