import json
import math

import numpy as np
import pytest

from krflab import cli
from krflab.errors import ConfigError
from krflab.fieldio import (
    CSV_COLUMNS,
    config_hash,
    read_field,
    read_trajectory_csv,
    write_field,
    write_trajectory_csv,
)
from krflab.grid import ScalarField, TorusGrid

TINY_INI = """
[model]
n = 2
kappa = 1
points = 16, 16
a0_11 = 1 + 0.12*cos(y1)
a0_22 = 1/pi
achi_11 = (1 + 0.2*cos(y1))/(2*pi)
f_mu = (1 + 0.25*cos(y1))/(4*pi*pi)
phi0 = 0.2*cos(y1) + 0.1*cos(y2)
divisor_profile = exp(-0.15*(1 - cos(y1)))

[flow]
t_end = 1.0
snapshot_every = 0.25

[verify]
rate_window = 0.2, 0.9
stress_pairs = 2
stress_t_end = 0.2

[barriers]
epsilon = 0.2, 0.1
"""


# ---------------------------------------------------------------- field files

def test_field_roundtrip_bitwise(tmp_path):
    grid = TorusGrid(n_dims=2, points=(8, 6), base_dims=1)
    rng = np.random.default_rng(3)
    field = ScalarField(grid, rng.standard_normal(grid.shape))
    path = write_field(tmp_path / "a.field", field, meta={"t": 1.5})
    back, meta = read_field(path)
    assert back.grid == grid
    assert back.values.tobytes() == field.values.tobytes()
    assert meta["t"] == 1.5
    assert meta["points"] == [8, 6] and meta["kappa"] == 1


def test_field_rejects_corrupt_files(tmp_path):
    path = tmp_path / "bad.field"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ConfigError, match="not a KRF1"):
        read_field(path)
    grid = TorusGrid(n_dims=2, points=(4, 4), base_dims=1)
    good = write_field(tmp_path / "t.field", ScalarField(grid, np.ones(grid.shape)))
    raw = good.read_bytes()
    good.write_bytes(raw[:-8])
    with pytest.raises(ConfigError, match="payload"):
        read_field(good)


def test_trajectory_csv_roundtrip(tmp_path):
    rows = [
        {"t": 0.0, "sup_phi": 0.3, "inf_phi": -0.3, "I_t": 1.0},
        {"t": 0.5, "sup_phi": 0.25, "inf_phi": -0.25, "I_t": 0.9,
         "dist_static": 1e-3, "max_residual": 2e-7, "dt": 0.05,
         "excess_IplusIprime": -1e-5},
    ]
    path = write_trajectory_csv(tmp_path / "traj.csv", rows)
    header = path.read_text().splitlines()[0]
    assert header == ",".join(CSV_COLUMNS)
    data = read_trajectory_csv(path)
    assert data["t"].tolist() == [0.0, 0.5]
    assert data["sup_phi"][1] == 0.25
    # unspecified columns are nan so the layout never shifts
    assert math.isnan(data["dt"][0])
    assert data["excess_IplusIprime"][1] == -1e-5


def test_config_hash_is_stable():
    assert config_hash("abc") == config_hash("abc")
    assert len(config_hash("abc")) == 16
    assert config_hash("abc") != config_hash("abd")


# ------------------------------------------------------------------ CLI paths

@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """One run-flow invocation on the tiny model, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.ini"
    config.write_text(TINY_INI, encoding="utf-8")
    out = root / "out"
    code = cli.main(["run-flow", "--config", str(config), "--out", str(out)])
    assert code == 0
    (art,) = [p for p in out.iterdir() if p.is_dir()]
    return config, out, art


def test_run_flow_artifacts(cli_run):
    config, _out, art = cli_run
    for name in ("params.json", "trajectory.csv", "phi_inf.field",
                 "phi_final.field", "flow.json"):
        assert (art / name).exists(), name
    params = json.loads((art / "params.json").read_text())
    assert params["command"] == "run-flow"
    assert params["digest"] == art.name
    snaps = sorted(art.glob("snap_*.field"))
    assert len(snaps) >= 4
    last, meta = read_field(snaps[-1])
    assert meta["t"] == pytest.approx(1.0)
    final, _ = read_field(art / "phi_final.field")
    assert last.values.tobytes() == final.values.tobytes()
    flow_meta = json.loads((art / "flow.json").read_text())
    assert flow_meta["t_end"] == pytest.approx(1.0)


def test_run_flow_is_byte_deterministic(cli_run, tmp_path):
    config, _out, art = cli_run
    code = cli.main(["run-flow", "--config", str(config),
                     "--out", str(tmp_path / "again")])
    assert code == 0
    other = tmp_path / "again" / art.name / "trajectory.csv"
    assert other.read_bytes() == (art / "trajectory.csv").read_bytes()


def test_solve_static_and_semiflat_and_barriers(cli_run, capsys):
    config, out, art = cli_run
    assert cli.main(["solve-static", "--config", str(config),
                     "--out", str(out)]) == 0
    assert (art / "psi_base.field").exists()
    static = json.loads((art / "static.json").read_text())
    assert static["residual_history"][-1][1] <= 1e-8
    assert static["iterations"] >= 1

    assert cli.main(["semiflat", "--config", str(config),
                     "--out", str(out)]) == 0
    semiflat = json.loads((art / "semiflat.json").read_text())
    assert semiflat["residual_sup"] <= 1e-8
    assert (art / "rho.field").exists()

    assert cli.main(["barriers", "--config", str(config),
                     "--out", str(out)]) == 0
    table = json.loads((art / "barriers.json").read_text())
    labels = {row["label"] for row in table["barriers"]}
    assert {"plain-sub", "plain-super",
            "penalized-sub", "penalized-super"} <= labels
    eps = sorted(row["epsilon"] for row in table["barriers"]
                 if "epsilon" in row and row["kind"] == "sub")
    assert eps == [0.1, 0.2]
    printed = capsys.readouterr().out
    assert "sub" in printed and "super" in printed


def test_verify_and_report(cli_run, capsys):
    config, out, art = cli_run
    code = cli.main(["verify", "--config", str(config), "--out", str(out),
                     "--seed", "7"])
    # rate/excess may honestly fail at this resolution and horizon
    assert code in (0, 1)
    printed = capsys.readouterr().out
    payload = json.loads((art / "verify.json").read_text())
    checks = payload["checks"]
    for name in ("rate", "sandwich", "classify_sub", "classify_super",
                 "integral_excess", "comparison_stress", "regularity_trend"):
        assert name in checks
        assert (("PASS" if checks[name]["passed"] else "FAIL")
                + f"  {name}") in printed
    assert checks["sandwich"]["passed"]
    assert checks["classify_sub"]["passed"]
    assert checks["classify_super"]["passed"]
    assert checks["comparison_stress"]["passed"]
    assert checks["regularity_trend"]["passed"]
    assert payload["stress_seed"] == 7
    assert (code == 0) == all(c["passed"] for c in checks.values())

    assert cli.main(["report", "--config", str(config),
                     "--out", str(out)]) == 0
    for name in ("flow_series.png", "time_stepping.png", "sandwich.png",
                 "regularity_trend.png", "summary.txt"):
        assert (art / name).exists(), name
    summary = (art / "summary.txt").read_text()
    assert "sup" in summary


def test_verify_without_artifacts_exits_2(tmp_path, capsys):
    config = tmp_path / "tiny.ini"
    config.write_text(TINY_INI, encoding="utf-8")
    code = cli.main(["verify", "--config", str(config),
                     "--out", str(tmp_path / "empty")])
    assert code == 2
    assert "trajectory.csv" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path, capsys):
    config = tmp_path / "bad.ini"
    config.write_text(TINY_INI.replace("[flow]", "[flow]\nwarp = 9"),
                      encoding="utf-8")
    code = cli.main(["run-flow", "--config", str(config),
                     "--out", str(tmp_path / "out")])
    assert code == 2
    assert "warp" in capsys.readouterr().err


def test_inadmissible_initial_data_exits_3(tmp_path, capsys):
    config = tmp_path / "steep.ini"
    config.write_text(
        TINY_INI.replace("phi0 = 0.2*cos(y1) + 0.1*cos(y2)",
                         "phi0 = 5*cos(y1)"),
        encoding="utf-8")
    code = cli.main(["run-flow", "--config", str(config),
                     "--out", str(tmp_path / "out")])
    assert code == 3
    err = capsys.readouterr().err
    assert "not positive semidefinite" in err
    assert "np.int64" not in err


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as err:
        cli.main([])
    assert err.value.code == 2
