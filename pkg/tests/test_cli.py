import json
import os
import re

import numpy as np
import pytest

import cli
from orchestrator import __version__
from storage.result_store import read_table

SMOKE = {
    "beams": {"detunings_Gamma": [-10.0], "depths_Er": [1000.0]},
    "simulation": {"n_atoms": 60, "chunk_size": 20, "t_equil_per_Gamma_prime": 1.0, "t_average_per_Gamma_prime": 1.0},
    "thermometry": {"tau_ms": [12.0, 35.0], "bins": 31},
    "scan": {"resolution": 64},
    "seed": 7,
}


@pytest.fixture(scope="module")
def smoke_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "smoke.json"
    path.write_text(json.dumps(SMOKE))
    return str(path)


@pytest.fixture(scope="module")
def smoke_runs(smoke_config, tmp_path_factory):
    outs = {}
    for workers in (1, 3):
        out = str(tmp_path_factory.mktemp(f"w{workers}"))
        code = cli.main(["run", "--config", smoke_config, "--workers", str(workers), "--out", out])
        outs[workers] = (code, out)
    return outs


def test_version(capsys):
    assert cli.main(["version"]) == cli.EXIT_OK
    assert __version__ in capsys.readouterr().out


def test_bad_config_exit_code(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"simulation": {"n_atoms": -1}}))
    assert cli.main(["run", "--config", str(path), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--config", str(tmp_path / "absent.json")]) == cli.EXIT_CONFIG


def test_field_scan_writes_table(smoke_config, tmp_path, capsys):
    code = cli.main(["field-scan", "--config", smoke_config, "--out", str(tmp_path), "--resolution", "8"])
    assert code == cli.EXIT_OK
    meta, rows = read_table(str(tmp_path / "scan_xz.csv"))
    assert rows[0][:3] == ["x_over_lambda", "y_over_lambda", "z_over_lambda"]
    assert len(rows) - 1 == 17 * 17
    assert all(float(row[3]) <= 0 for row in rows[1:])
    assert meta["resolution"] == "8"


def _interior_minima(values):
    inner = (values[1:-1] < values[:-2]) & (values[1:-1] < values[2:])
    return list(np.flatnonzero(inner) + 1)


def test_field_scan_minima_repeat_every_lattice_constant(smoke_config, tmp_path):
    assert cli.main(["field-scan", "--config", smoke_config, "--out", str(tmp_path), "--resolution", "64"]) == cli.EXIT_OK
    _, rows = read_table(str(tmp_path / "scan_xz.csv"))
    lowest = np.array([float(row[3]) for row in rows[1:]]).reshape(129, 129)    # [x, z]
    along_z, along_x = lowest[0, :], lowest[:, 0]
    # sigma+ and sigma- wells alternate a_z apart along z and a_xy apart along x
    assert _interior_minima(along_z) == [64]
    assert _interior_minima(along_x) == [64]
    for line in (along_z, along_x):
        np.testing.assert_allclose(line[[64, 128]], line[0], rtol=1e-9)
        assert line.max() > line[0]


def test_run_writes_bundle(smoke_runs):
    code, out = smoke_runs[1]
    assert code in (cli.EXIT_OK, cli.EXIT_FLAGGED)
    for name in ("records.csv", "diagnostics.csv", "config.json", "run.log"):
        assert os.path.exists(os.path.join(out, name))
    assert os.path.exists(os.path.join(out, "snapshots", "snapshot_D-10_U1000.csv"))
    _, rows = read_table(os.path.join(out, "records.csv"))
    assert {row[5] for row in rows[1:]} == {"direct_mc", "tof_two_time"}
    with open(os.path.join(out, "run.log"), encoding="utf-8") as handle:
        assert "measured line" in handle.read()


def test_run_bytes_do_not_depend_on_workers(smoke_runs):
    (code_a, out_a), (code_b, out_b) = smoke_runs[1], smoke_runs[3]
    assert code_a == code_b
    for name in ("records.csv", "diagnostics.csv", os.path.join("snapshots", "snapshot_D-10_U1000.csv")):
        with open(os.path.join(out_a, name), "rb") as a, open(os.path.join(out_b, name), "rb") as b:
            assert a.read() == b.read()


def test_analyze_stored_snapshots(smoke_config, smoke_runs):
    _, out = smoke_runs[1]
    assert cli.main(["analyze", "--config", smoke_config, "--out", out, "--tau", "12", "35"]) == cli.EXIT_OK
    _, rows = read_table(os.path.join(out, "tof_records.csv"))
    assert len(rows) - 1 == 3


GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


@pytest.mark.parametrize("name", ["tof_records", "thermometry", "diagnostics"])
def test_output_layout_matches_golden(smoke_config, smoke_runs, name):
    _, out = smoke_runs[1]
    if name != "diagnostics":
        assert cli.main(["analyze", "--config", smoke_config, "--out", out, "--tau", "12", "35"]) == cli.EXIT_OK
    with open(os.path.join(out, f"{name}.csv"), encoding="utf-8") as handle:
        provenance, columns = handle.readline(), handle.readline()
    with open(os.path.join(GOLDEN, f"{name}.columns"), encoding="utf-8") as handle:
        assert columns == handle.read()
    assert re.fullmatch(r"# config_hash=[0-9a-f]{16}, seed=7\n", provenance)


def test_analyze_needs_two_delays(smoke_config, smoke_runs):
    _, out = smoke_runs[1]
    assert cli.main(["analyze", "--config", smoke_config, "--out", out, "--tau", "12"]) == cli.EXIT_ERROR
