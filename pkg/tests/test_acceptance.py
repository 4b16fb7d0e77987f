"""Full-physics checks against the published lattice behaviour.

Deselected by default; run with ``pytest -m slow``.
"""
import math
import os

import numpy as np
import pytest

from analysis.thermometry import anisotropy, measure_snapshot
from core.langevin import SimParams, run_ensemble, sweep
from core.lattice_field import irradiance_for_depth
from core.settings import RunConfig
from orchestrator import Orchestrator

pytestmark = pytest.mark.slow

WORKERS = os.cpu_count() or 1


@pytest.fixture(scope="module")
def reduced_sweep(cesium, cesium_dipoles):
    params = SimParams(n_atoms=100, depths=(500.0, 1000.0, 2000.0, 3000.0), master_seed=2024)
    return sweep(params, cesium, workers=WORKERS, dipoles=cesium_dipoles)


def test_anisotropy_ratio(reduced_sweep):
    ratio, _ = anisotropy(reduced_sweep.fits, "x", "z")
    assert ratio == pytest.approx(2.7, abs=0.7)


def test_slopes_near_reference(reduced_sweep):
    fits = reduced_sweep.fits
    assert fits["x"].slope == pytest.approx(35.0, rel=0.3)
    assert fits["z"].slope == pytest.approx(13.0, rel=0.3)


def test_transverse_symmetry(reduced_sweep):
    for record in reduced_sweep.records:
        tx, ty = record.temperature[:2]
        ex, ey = record.temperature_err[:2]
        assert abs(tx - ty) < 2 * math.hypot(ex, ey)


def test_atoms_localized(reduced_sweep):
    for record in reduced_sweep.records:
        # per-axis kinetic energy <P_i^2> against the diabatic depth
        assert 1 / 20 <= record.kinetic_per_axis_over_depth <= 1 / 5


def test_time_of_flight_matches_direct(reduced_sweep):
    for run in reduced_sweep.runs:
        for result in measure_snapshot(run.snapshot, (12e-3, 35e-3)):
            joint = math.hypot(result.error, result.direct_err)
            assert abs(result.temperature - result.direct) < 3 * joint


def test_steady_state_forgets_initial_temperature(cesium, cesium_dipoles):
    beam = irradiance_for_depth(cesium, -10.0, 1000.0, dipoles=cesium_dipoles)
    temps = []
    for t_init in (1.0, 10.0):
        params = SimParams(n_atoms=100, t_init_uK=t_init, master_seed=11)
        run = run_ensemble(params, beam, workers=WORKERS, dipoles=cesium_dipoles)
        temps.append((run.record.temperature, run.record.temperature_err))
    (a, ea), (b, eb) = temps
    assert np.all(np.abs(a - b) < 3 * np.hypot(ea, eb))


def test_scan_barrier_matches_well(tmp_path):
    config = RunConfig.from_dict({"beams": {"depths_Er": [1000.0]}, "out_dir": str(tmp_path)})
    orch = Orchestrator(config)
    scan = orch.field_scan("xz", 64)
    well = orch.characterize()
    assert scan.barrier_ratio == pytest.approx(well.barrier_ratio, rel=0.01)
    assert well.barrier_ratio == pytest.approx(1.65, rel=0.02)
