import csv
import logging
import os
import re

import numpy as np

from core.errors import SnapshotError
from core.langevin import PhaseSpaceSnapshot

logger = logging.getLogger("nrol.store")

RECORD_COLUMNS = ["detuning_Gamma", "U0_Er", "axis", "T_uK", "T_err_uK", "method"]
SNAPSHOT_COLUMNS = ["atom_index", "x", "y", "z", "px", "py", "pz", "m"]
SCALING_COLUMNS = ["label", "axis", "T0_uK", "T0_err_uK", "xi_nK_per_Er", "xi_err_nK_per_Er", "n_points"]
DIAGNOSTIC_COLUMNS = [
    "detuning_Gamma", "U0_Er", "n_atoms", "dt", "EK_over_U0", "EK_axis_over_U0", "EP_over_U0",
    "jumps_per_atom", "drift_z", "barrier_x_Er", "barrier_z_Er", "barrier_ratio",
    "omega_x", "omega_y", "omega_z", "reduced_omega_x", "reduced_omega_y", "reduced_omega_z",
    "fallbacks", "clip_alarms", "flags",
]
_HEADER = re.compile(r"^#\s*(.*)$")


def fmt(value):
    """Shortest exact text for a float, so reruns produce identical bytes."""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _parse_header(lines):
    meta = {}
    for line in lines:
        match = _HEADER.match(line)
        if not match:
            continue
        for item in match.group(1).split(","):
            if "=" in item:
                key, value = item.split("=", 1)
                meta[key.strip()] = value.strip()
    return meta


class ResultStore:
    """CSV writer for one result directory; every file starts with the
    config hash and seed."""

    def __init__(self, out_dir, config_hash, seed):
        self.out_dir = out_dir
        self.config_hash = config_hash
        self.seed = seed
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as e:
            raise SnapshotError(f"cannot create output directory {out_dir}: {e}") from e

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)

    def _open(self, name, extra=None):
        path = self.path(name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        handle = open(path, "w", newline="", encoding="utf-8")
        handle.write(f"# config_hash={self.config_hash}, seed={self.seed}\n")
        for line in extra or ():
            handle.write(f"# {line}\n")
        return handle

    def _write_rows(self, name, columns, rows, extra=None):
        with self._open(name, extra) as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(columns)
            writer.writerows(rows)
        logger.info(f"Wrote {self.path(name)}")
        return self.path(name)

    def write_records(self, records, measurements=None, name="records.csv"):
        """Direct Monte-Carlo temperatures and, when given, TOF results."""
        rows = []
        for r in records:
            for i, axis in enumerate(("x", "y", "z")):
                rows.append([fmt(r.detuning), fmt(r.depth), axis,
                             fmt(r.temperature_uK[i]), fmt(r.temperature_err_uK[i]), "direct_mc"])
        for snapshot, results in measurements or ():
            for m in results:
                rows.append([fmt(snapshot.detuning), fmt(snapshot.depth), m.axis,
                             fmt(m.temperature * 1e6), fmt(m.error * 1e6), m.method])
        return self._write_rows(name, RECORD_COLUMNS, rows)

    def write_diagnostics(self, runs, name="diagnostics.csv"):
        rows = []
        for run in runs:
            r, w = run.record, run.well
            rows.append([
                fmt(r.detuning), fmt(r.depth), fmt(r.n_atoms), fmt(r.dt),
                fmt(r.kinetic_over_depth), fmt(r.kinetic_per_axis_over_depth), fmt(r.potential_over_depth),
                fmt(r.jumps_per_atom), fmt(r.drift_z),
                fmt(w.barrier_x), fmt(w.barrier_z), fmt(w.barrier_ratio),
                *(fmt(v) for v in w.omega), *(fmt(v) for v in w.reduced_omega),
                fmt(run.counters.get("fallbacks", 0)), fmt(run.counters.get("clip_alarms", 0)),
                ";".join(r.flags),
            ])
        return self._write_rows(name, DIAGNOSTIC_COLUMNS, rows)

    def write_scaling(self, table, anisotropies=(), name="scaling.csv"):
        rows = [
            [f.label, f.axis, fmt(f.intercept), fmt(f.intercept_err), fmt(f.slope), fmt(f.slope_err), fmt(f.n_points)]
            for f in table
        ]
        for label, axis, ratio, err in anisotropies:
            rows.append([label, axis, "", "", fmt(ratio), fmt(err), ""])
        return self._write_rows(name, SCALING_COLUMNS, rows)

    def write_thermometry(self, measurements, name="thermometry.csv"):
        columns = ["detuning_Gamma", "U0_Er", "axis", "tau_ms", "sigma_um", "sigma_err_um",
                   "reduced_chi2", "converged", "T_tof_uK", "T_tof_err_uK", "T_direct_uK", "T_direct_err_uK"]
        rows = []
        for snapshot, results in measurements:
            for m in results:
                for tau, fit in zip(m.taus, m.fits):
                    rows.append([
                        fmt(snapshot.detuning), fmt(snapshot.depth), m.axis, fmt(tau * 1e3),
                        fmt(fit.sigma * 1e6), fmt(fit.sigma_err * 1e6), fmt(fit.reduced_chi2),
                        str(fit.converged).lower(), fmt(m.temperature * 1e6), fmt(m.error * 1e6),
                        fmt(m.direct * 1e6), fmt(m.direct_err * 1e6),
                    ])
        return self._write_rows(name, columns, rows)

    def write_scan(self, scan, name=None):
        name = name or f"scan_{scan.plane}.csv"
        levels = scan.potentials.shape[-1]
        columns = ["x_over_lambda", "y_over_lambda", "z_over_lambda"] + [f"U{m}_over_Er" for m in range(levels)]
        rows = []
        for point, values in zip(scan.points_over_lambda, scan.potentials):
            rows.append([fmt(c) for c in point] + [fmt(v) for v in values])
        extra = [f"plane={scan.plane}, resolution={scan.resolution}, barrier_ratio={fmt(scan.barrier_ratio)}"]
        return self._write_rows(name, columns, rows, extra)

    def snapshot_name(self, snapshot):
        return os.path.join("snapshots", f"snapshot_D{snapshot.detuning:g}_U{snapshot.depth:.0f}.csv")

    def write_snapshot(self, snapshot):
        extra = [
            f"wavenumber_per_m={fmt(snapshot.wavenumber)}, mass_kg={fmt(snapshot.mass)}",
            f"length_unit_m={fmt(snapshot.length_unit)}, velocity_unit_m_per_s={fmt(snapshot.velocity_unit)}",
            f"detuning_Gamma={fmt(snapshot.detuning)}, U0_Er={fmt(snapshot.depth)}",
        ]
        rows = [
            [str(int(a))] + [fmt(c) for c in r] + [fmt(c) for c in p] + [str(int(m))]
            for a, r, p, m in zip(snapshot.atom_index, snapshot.R, snapshot.P, snapshot.m)
        ]
        return self._write_rows(self.snapshot_name(snapshot), SNAPSHOT_COLUMNS, rows, extra)


def read_snapshot(path):
    """Load a snapshot CSV written by ResultStore.write_snapshot."""
    try:
        with open(path, encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    except OSError as e:
        raise SnapshotError(f"cannot read snapshot {path}: {e}") from e

    header = [line for line in lines if line.startswith("#")]
    body = [line for line in lines if line and not line.startswith("#")]
    meta = _parse_header(header)
    try:
        rows = list(csv.reader(body))
        if rows[0] != SNAPSHOT_COLUMNS:
            raise SnapshotError(f"{path}: unexpected columns {rows[0]}")
        data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float)
        if data.ndim != 2 or data.shape[1] != len(SNAPSHOT_COLUMNS):
            raise SnapshotError(f"{path}: malformed rows")
        return PhaseSpaceSnapshot(
            atom_index=data[:, 0].astype(int),
            R=data[:, 1:4],
            P=data[:, 4:7],
            m=data[:, 7].astype(int),
            wavenumber=float(meta["wavenumber_per_m"]),
            mass=float(meta["mass_kg"]),
            seed=int(meta["seed"]),
            detuning=float(meta["detuning_Gamma"]),
            depth=float(meta["U0_Er"]),
            config_hash=meta.get("config_hash", ""),
        )
    except SnapshotError:
        raise
    except (IndexError, KeyError, ValueError) as e:
        raise SnapshotError(f"corrupt snapshot {path}: {e}") from e


def list_snapshots(directory):
    if not os.path.isdir(directory):
        raise SnapshotError(f"snapshot directory {directory} does not exist")
    names = sorted(n for n in os.listdir(directory) if n.startswith("snapshot_") and n.endswith(".csv"))
    if not names:
        raise SnapshotError(f"no snapshots in {directory}")
    return [os.path.join(directory, n) for n in names]


def read_table(path):
    """Header metadata and body rows of any CSV written by ResultStore."""
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    meta = _parse_header(line for line in lines if line.startswith("#"))
    rows = list(csv.reader(line for line in lines if line and not line.startswith("#")))
    return meta, rows
