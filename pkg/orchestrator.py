import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from analysis.thermometry import EXPERIMENT_LINES_uK, anisotropy, experiment_line, measure_snapshot, reference_deviation
from core.adiabatic import well_characterization
from core.atomic_structure import build_dipole_components
from core.errors import (
    DegenerateInputError,
    EmptyFieldOfViewError,
    InvalidInputError,
    InvalidMeasurementError,
    RankDeficientError,
)
from core.langevin import run_ensemble, sweep
from core.lattice_field import LatticeField, irradiance_for_depth, light_shift_operator
from storage.result_store import ResultStore, list_snapshots, read_snapshot

__version__ = "1.0.0"

logger = logging.getLogger("nrol.orch")

_PLANE_AXES = {"xz": (0, 2), "xy": (0, 1), "yz": (1, 2)}


@dataclass
class FieldScan:
    plane: str
    resolution: int
    points: np.ndarray
    potentials: np.ndarray
    barrier_x: float
    barrier_z: float
    path: str = ""

    @property
    def points_over_lambda(self):
        return self.points / (2 * math.pi)

    @property
    def barrier_ratio(self):
        if not self.barrier_z or math.isnan(self.barrier_z):
            return float("nan")
        return self.barrier_x / self.barrier_z


@dataclass
class ResultBundle:
    config_hash: str
    version: str
    out_dir: str
    records: list
    files: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)

    @property
    def flagged(self):
        return [r for r in self.records if r.flagged]


def scan_potentials(field_, points, all_levels=False):
    """Adiabatic potentials from the light-shift operator alone (no derivatives)."""
    sample = field_.sample(points)
    A = light_shift_operator(field_.config, sample, field_.dipoles)
    values = np.linalg.eigvalsh(field_.config.light_shift_scale * A)
    return values if all_levels else values[..., :1]


def _line_barrier(points, lowest, site, axis, length, tol):
    """Scan-based barrier along one axis starting at the site."""
    others = [i for i in range(3) if i != axis]
    on_line = np.all(np.abs(points[:, others] - site[others]) < tol, axis=1)
    offset = points[:, axis] - site[axis]
    segment = on_line & (offset > -tol) & (offset < length + tol)
    if np.count_nonzero(segment) < 3:
        return float("nan")
    values = lowest[segment]
    start = lowest[segment][np.argmin(np.abs(offset[segment]))]
    return float(values.max() - start)


class Orchestrator:
    def __init__(self, config):
        self.config = config
        self.transition = config.build_transition()
        self.dipoles = build_dipole_components(self.transition)
        self.config_hash = config.config_hash()
        self.store = ResultStore(config.out_dir, self.config_hash, config.seed)
        self._log_handler = None
        logger.info(f"NROL-MC {__version__} initialized (config {self.config_hash}, seed {config.seed})")

    def attach_log(self):
        """Mirror every log record of this run into <out>/run.log."""
        if self._log_handler is None:
            self._log_handler = logging.FileHandler(self.store.path("run.log"), mode="w", encoding="utf-8")
            self._log_handler.setFormatter(logging.Formatter("%(asctime)s - %(levelname)s - %(name)s - %(message)s"))
            logging.getLogger().addHandler(self._log_handler)
        return self.store.path("run.log")

    def detach_log(self):
        if self._log_handler is not None:
            logging.getLogger().removeHandler(self._log_handler)
            self._log_handler.close()
            self._log_handler = None

    def field_scan(self, plane=None, resolution=None, all_levels=None):
        """Lowest (or every) adiabatic potential over two lattice constants
        per axis of a plane through a sigma+ site."""
        scan_cfg = self.config.scan
        plane = plane or scan_cfg.plane
        resolution = resolution or scan_cfg.resolution
        all_levels = scan_cfg.all_levels if all_levels is None else all_levels
        if plane not in _PLANE_AXES:
            raise InvalidInputError(f"unknown plane {plane!r}")
        if resolution < 64:
            logger.warning(f"Scan resolution {resolution} below 64 points per lattice constant")

        field_ = LatticeField(self.config.scan_beam(self.transition, self.dipoles), self.dipoles)
        a_z, a_xy = field_.constants
        spacing = np.array([a_xy, a_xy, a_z])
        site = field_.sigma_plus_site
        u, v = _PLANE_AXES[plane]
        su = np.arange(2 * resolution + 1) * spacing[u] / resolution
        sv = np.arange(2 * resolution + 1) * spacing[v] / resolution
        grid_u, grid_v = np.meshgrid(su, sv, indexing="ij")
        points = np.tile(site, (grid_u.size, 1))
        points[:, u] += grid_u.ravel()
        points[:, v] += grid_v.ravel()

        start = time.time()
        potentials = scan_potentials(field_, points, all_levels)
        tol = 1e-9 * float(spacing.max())
        barrier_x = _line_barrier(points, potentials[:, 0], site, 0, a_xy, tol) if 0 in (u, v) else float("nan")
        barrier_z = _line_barrier(points, potentials[:, 0], site, 2, a_z, tol) if 2 in (u, v) else float("nan")
        scan = FieldScan(
            plane=plane, resolution=resolution, points=points, potentials=potentials,
            barrier_x=barrier_x, barrier_z=barrier_z,
        )
        scan.path = self.store.write_scan(scan)
        logger.info(
            f"Scanned {len(points)} points in {time.time() - start:.1f}s; "
            f"min {potentials[:, 0].min():.2f} E_R, barrier ratio {scan.barrier_ratio:.4f}"
        )
        return scan

    def characterize(self):
        field_ = LatticeField(self.config.scan_beam(self.transition, self.dipoles), self.dipoles)
        return well_characterization(field_, self.config.scan.resolution)

    def _measure(self, snapshot):
        taus = self.config.thermometry.taus
        try:
            return measure_snapshot(snapshot, taus, self.config.thermometry.bins, self.config.thermometry.gravity_m_per_s2)
        except (DegenerateInputError, InvalidMeasurementError, EmptyFieldOfViewError) as e:
            logger.warning(f"Skipping time-of-flight analysis at U0={snapshot.depth:.0f}: {e}")
            return None

    def run(self):
        """Simulate every (detuning, depth) point and write the result bundle."""
        params = self.config.sim_params()
        theta = self.config.beams.theta
        measurements = []

        def on_run(run):
            if self.config.thermometry.write_snapshots:
                self.store.write_snapshot(run.snapshot)
            results = self._measure(run.snapshot)
            if results:
                measurements.append((run.snapshot, results))

        start = time.time()
        if len(set(params.depths)) >= 3:
            result = sweep(
                params, self.transition, theta, self.config.workers, self.dipoles,
                self.config_hash, on_run=on_run,
            )
            runs, records, table = result.runs, result.records, result.table
            fits = result.fits
        else:
            logger.info("Fewer than 3 depths: running points without scaling fits")
            runs = []
            for detuning in params.detunings:
                for depth in params.depths:
                    beam = irradiance_for_depth(self.transition, detuning, depth, theta, self.dipoles)
                    run = run_ensemble(params, beam, self.config.workers, self.dipoles, self.config_hash)
                    on_run(run)
                    runs.append(run)
            records, table, fits = [r.record for r in runs], [], {}

        bundle = ResultBundle(
            config_hash=self.config_hash, version=__version__, out_dir=self.config.out_dir,
            records=records, fits=fits,
        )
        bundle.files["records"] = self.store.write_records(records, measurements)
        bundle.files["diagnostics"] = self.store.write_diagnostics(runs)
        if measurements:
            bundle.files["thermometry"] = self.store.write_thermometry(measurements)
        if table:
            bundle.files["scaling"] = self.store.write_scaling(table, self._anisotropies(table))
            self._log_reference(fits)
        self._log_measured_lines(records)
        self.config.to_file(self.store.path("config.json"))
        bundle.files["config"] = self.store.path("config.json")

        logger.info(
            f"Run finished in {time.time() - start:.1f}s: {len(records)} records, "
            f"{len(bundle.flagged)} flagged"
        )
        return bundle

    def _anisotropies(self, table):
        rows = []
        for label in dict.fromkeys(f.label for f in table):
            fits = {f.axis: f for f in table if f.label == label}
            for axis in ("x", "y"):
                try:
                    ratio, err = anisotropy(fits, axis, "z")
                except RankDeficientError as e:
                    logger.warning(f"{label}: {e}")
                    continue
                rows.append((label, f"{axis}/z", ratio, err))
                logger.info(f"{label}: xi_{axis}/xi_z = {ratio:.2f} +/- {err:.2f}")
        return rows

    def _log_reference(self, fits):
        for axis, dev in reference_deviation(fits).items():
            f = fits[axis]
            logger.info(f"xi_{axis} = {f.slope:.1f} +/- {f.slope_err:.1f} nK/E_R ({dev:+.0%} from reference)")

    def _log_measured_lines(self, records):
        for r in records:
            for axis in EXPERIMENT_LINES_uK:
                i = "xyz".index(axis)
                logger.info(
                    f"U0={r.depth:.0f} E_R: T_{axis} = {r.temperature_uK[i]:.2f} uK, "
                    f"measured line {experiment_line(axis, r.depth):.2f} uK"
                )

    def analyze(self, snapshot_dir=None, taus=None):
        """Time-of-flight analysis of every snapshot in a directory."""
        snapshot_dir = snapshot_dir or self.store.path("snapshots")
        th = self.config.thermometry
        taus = tuple(t * 1e-3 for t in taus) if taus is not None else th.taus
        measurements = []
        for path in list_snapshots(snapshot_dir):
            snapshot = read_snapshot(path)
            logger.info(f"Analyzing {os.path.basename(path)} ({snapshot.n_atoms} atoms)")
            measurements.append((snapshot, measure_snapshot(snapshot, taus, th.bins, th.gravity_m_per_s2)))
        files = {
            "tof_records": self.store.write_records([], measurements, name="tof_records.csv"),
            "thermometry": self.store.write_thermometry(measurements),
        }
        return measurements, files
