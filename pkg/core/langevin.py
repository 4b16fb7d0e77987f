"""
Semi-classical Monte-Carlo propagation of independent atoms in the lattice.

Each atom carries a classical position R, momentum P and an adiabatic
state index m. A step moves it on U_m with a velocity-Verlet kick-drift-kick
and then applies either one optical-pumping jump m -> n (probability
gamma_{m,n} dt) with its momentum kick, or the continuous Langevin force of
state m. Units as in core.adiabatic: hbar = k = 1, M = 1/2.
"""
import logging
import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.constants import hbar

from analysis.thermometry import linear_scaling_fit, scaling_table
from core.adiabatic import coefficient_table, diagonalize, follow_state, well_characterization
from core.equilibration import EquilibrationMonitor, kinetic_drift
from core.errors import InvalidInputError, TimeStepRefinement, TrajectoryError
from core.lattice_field import LatticeField, irradiance_for_depth
from core.trajectory_worker import TrajectoryPool

logger = logging.getLogger("nrol.langevin")

MULTI_JUMP_LIMIT = 0.005
JUMP_PROBABILITY_LIMIT = 0.1
MAX_REFINEMENTS = 8
RANDOM_BLOCK = 512
ABORT_CHECK_EVERY = 200


@dataclass(frozen=True)
class SimParams:
    """Ensemble and sweep parameters.

    Times ``t_equil`` and ``t_average`` are in units of 1/Gamma'; ``dt`` is
    in hbar/E_R and chosen per run when None.
    """
    n_atoms: int = 300
    dt: float | None = None
    t_equil: float = 4000.0
    t_average: float = 2000.0
    t_init_uK: float = 3.0
    master_seed: int = 0
    detunings: tuple = (-10.0,)
    depths: tuple = (500.0, 1000.0, 1500.0, 2000.0, 2500.0, 3000.0)
    chunk_size: int = 25
    hamiltonian_only: bool = False

    def __post_init__(self):
        if self.n_atoms < 1:
            raise InvalidInputError("n_atoms must be positive")
        if self.dt is not None and self.dt <= 0:
            raise InvalidInputError("dt must be positive")
        if self.t_equil < 0 or self.t_average <= 0:
            raise InvalidInputError("equilibration time must be >= 0 and averaging time > 0")
        if self.t_init_uK < 0:
            raise InvalidInputError("initial temperature must be non-negative")
        if self.chunk_size < 1:
            raise InvalidInputError("chunk_size must be positive")


class AtomStreams:
    """Counter-based random streams, one per atom, keyed by (seed, atom index).

    Draws are taken in fixed blocks per atom so the sequence an atom sees
    does not depend on which other atoms share its chunk.
    """

    def __init__(self, master_seed, atom_index, block=RANDOM_BLOCK):
        self.generators = [
            np.random.Generator(np.random.Philox(np.random.SeedSequence([int(master_seed), int(i)])))
            for i in atom_index
        ]
        self.block = block
        self._cursor = block
        self._uniform = None
        self._normal = None

    def initial(self):
        """Uniform cell fractions (N, 3) and unit normals (N, 3) for the start state."""
        uniform = np.stack([g.random(3) for g in self.generators])
        normal = np.stack([g.standard_normal(3) for g in self.generators])
        return uniform, normal

    def _refill(self):
        self._uniform = np.stack([g.random(self.block) for g in self.generators])
        self._normal = np.stack([g.standard_normal((self.block, 3)) for g in self.generators])
        self._cursor = 0

    def next(self):
        if self._cursor == self.block:
            self._refill()
        k = self._cursor
        self._cursor += 1
        return self._uniform[:, k], self._normal[:, k]


@dataclass
class Ensemble:
    """Batched AtomState for a set of atoms."""
    atom_index: np.ndarray
    R: np.ndarray
    P: np.ndarray
    m: np.ndarray
    vectors: np.ndarray
    grad: np.ndarray
    potential: np.ndarray
    streams: AtomStreams

    def __len__(self):
        return len(self.atom_index)

    def kinetic(self):
        return np.sum(self.P ** 2, axis=-1)

    def energy(self):
        """P^2 / 2M + U_m(R) per atom."""
        return self.kinetic() + self.potential


@dataclass(frozen=True)
class JumpOutcome:
    P: np.ndarray
    m: np.ndarray
    jumped: np.ndarray


@dataclass
class StepStats:
    jumps: np.ndarray
    fallbacks: int = 0
    clip_alarms: int = 0


@dataclass(frozen=True)
class PhaseSpaceSnapshot:
    """Instantaneous ensemble state at lattice release.

    Positions in 1/k, momenta in hbar k. ``wavenumber`` (1/m) and ``mass``
    (kg) convert to SI.
    """
    atom_index: np.ndarray
    R: np.ndarray
    P: np.ndarray
    m: np.ndarray
    wavenumber: float
    mass: float
    seed: int
    detuning: float
    depth: float
    config_hash: str = ""

    @property
    def n_atoms(self):
        return len(self.atom_index)

    @property
    def length_unit(self):
        return 1.0 / self.wavenumber

    @property
    def velocity_unit(self):
        return hbar * self.wavenumber / self.mass

    def positions_si(self):
        return self.R * self.length_unit

    def velocities_si(self):
        return self.P * self.velocity_unit

    def wrapped_positions(self, constants):
        """Positions folded into one cell; for diagnostics only."""
        a_z, a_xy = constants
        cell = np.array([a_xy, a_xy, 2 * a_z])
        return np.mod(self.R, cell)


@dataclass(frozen=True)
class TemperatureRecord:
    """Steady-state kinetic temperatures of one (detuning, depth) point.

    ``temperature`` and ``temperature_err`` are per axis in kelvin.
    """
    detuning: float
    depth: float
    temperature: np.ndarray
    temperature_err: np.ndarray
    mean_kinetic: float
    jumps_per_atom: float
    n_atoms: int
    dt: float
    seed: int
    drift_z: float = 0.0
    flags: tuple = ()
    mean_potential: float = float("nan")

    @property
    def temperature_uK(self):
        return self.temperature * 1e6

    @property
    def temperature_err_uK(self):
        return self.temperature_err * 1e6

    @property
    def kinetic_over_depth(self):
        return self.mean_kinetic / self.depth if self.depth else float("nan")

    @property
    def kinetic_per_axis_over_depth(self):
        """<P_i^2> averaged over the three axes, in units of U0."""
        return self.kinetic_over_depth / 3

    @property
    def potential_over_depth(self):
        """Mean potential energy above the well bottom, in units of U0."""
        return self.mean_potential / self.depth if self.depth else float("nan")

    @property
    def flagged(self):
        return bool(self.flags)


@dataclass
class EnsembleRun:
    record: TemperatureRecord
    snapshot: PhaseSpaceSnapshot
    well: object
    counters: dict = dc_field(default_factory=dict)


@dataclass
class SweepResult:
    records: list
    runs: list
    fits: dict
    table: list

    @property
    def flagged(self):
        return [r for r in self.records if r.flagged]


def unit_cell(field):
    a_z, a_xy = field.constants
    return np.array([a_xy, a_xy, 2 * a_z])


def initialize_ensemble(params, field, atom_index=None):
    """Uniform positions over one unit cell, Gaussian momenta at T_init,
    every atom in its locally lowest adiabatic state."""
    if atom_index is None:
        atom_index = np.arange(params.n_atoms)
    atom_index = np.asarray(atom_index, dtype=int)
    streams = AtomStreams(params.master_seed, atom_index)
    uniform, normal = streams.initial()

    R = uniform * unit_cell(field)
    transition = field.config.transition
    p2_mean = params.t_init_uK * 1e-6 / transition.temperature_per_p2()
    P = math.sqrt(p2_mean) * normal
    return place_atoms(field, R, P, streams=streams, atom_index=atom_index)


def place_atoms(field, R, P, master_seed=0, streams=None, atom_index=None):
    """Ensemble at given phase-space points, each atom in its lowest local state."""
    R = np.array(R, dtype=float, ndmin=2)
    P = np.array(P, dtype=float, ndmin=2)
    if atom_index is None:
        atom_index = np.arange(len(R))
    if streams is None:
        streams = AtomStreams(master_seed, atom_index)
    frame = diagonalize(field, R, order=1)
    rows = np.arange(len(R))
    return Ensemble(
        atom_index=np.asarray(atom_index, dtype=int), R=R, P=P,
        m=np.zeros(len(R), dtype=int),
        vectors=frame.states[rows, :, 0].copy(),
        grad=frame.grad_potentials[rows, 0].copy(),
        potential=frame.potentials[rows, 0].copy(),
        streams=streams,
    )


def apply_quantum_jumps(P, m, gamma, F, D, dt, uniform, normal):
    """Stochastic part of one step for atoms in states ``m``.

    ``gamma`` (N, n) are the rates out of m, ``F`` (N, n, 3) and
    ``D`` (N, n, 3, 3) the matching force and diffusion rows. At most one
    jump per atom is drawn; the kick of a jump m -> n has variance
    2 D_{m,n} / gamma_{m,n}, the continuous force variance is 2 D_{m,m} dt.
    Both are sampled in the eigenbasis of the 3x3 block.
    """
    n_atoms, n_levels = gamma.shape
    rows = np.arange(n_atoms)
    rates = gamma.copy()
    rates[rows, m] = 0.0
    probs = rates * dt
    total = probs.sum(axis=-1)

    worst_total = float(total.max(initial=0.0))
    multiple = -np.expm1(-total) - total * np.exp(-total)
    worst_multiple = float(multiple.max(initial=0.0))
    if worst_multiple > MULTI_JUMP_LIMIT or worst_total >= JUMP_PROBABILITY_LIMIT:
        raise TimeStepRefinement(max(worst_multiple, worst_total), dt)

    jumped = uniform < total
    cumulative = np.cumsum(probs, axis=-1)
    first_above = np.argmax(cumulative > uniform[:, None], axis=-1)
    target = np.where(jumped, first_above, m)

    block = D[rows, target]
    w, Q = np.linalg.eigh(block)
    w = np.clip(w, 0.0, None)
    rate = rates[rows, target]
    per_jump = np.divide(2 * w, rate[:, None], out=np.zeros_like(w), where=rate[:, None] > 0)
    variance = np.where(jumped[:, None], per_jump, 2 * w * dt)
    kick = (Q @ (np.sqrt(variance) * normal)[..., None])[..., 0]

    P_new = P + kick + F[rows, target] * dt
    return JumpOutcome(P=P_new, m=target, jumped=jumped)


def _check_finite(ensemble):
    bad = ~np.all(np.isfinite(ensemble.P), axis=-1) | ~np.all(np.isfinite(ensemble.R), axis=-1)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise TrajectoryError(
            int(ensemble.atom_index[k]), f"non-finite state after step (R={ensemble.R[k]}, P={ensemble.P[k]})"
        )


def step(ensemble, field, dt, stochastic=True):
    """Advance every atom of the ensemble by dt in place."""
    ensemble.P -= 0.5 * dt * ensemble.grad
    ensemble.R += 2.0 * dt * ensemble.P
    _check_finite(ensemble)

    frame = diagonalize(field, ensemble.R, order=2 if stochastic else 1)
    m, vectors, fallbacks = follow_state(ensemble.vectors, frame, ensemble.m)
    rows = np.arange(len(ensemble))
    grad = frame.grad_potentials[rows, m]
    ensemble.P -= 0.5 * dt * grad

    stats = StepStats(jumps=np.zeros(len(ensemble), dtype=bool), fallbacks=fallbacks)
    if stochastic:
        coeffs = coefficient_table(frame, field.config, origin=m)
        uniform, normal = ensemble.streams.next()
        outcome = apply_quantum_jumps(
            ensemble.P, m, coeffs.gamma[:, 0], coeffs.F[:, 0], coeffs.D[:, 0], dt, uniform, normal,
        )
        ensemble.P = outcome.P
        stats.jumps = outcome.jumped
        stats.clip_alarms = coeffs.clip_alarms
        if np.any(outcome.jumped):
            m = outcome.m
            vectors = frame.states[rows, :, m]
            grad = frame.grad_potentials[rows, m]

    ensemble.m = m
    ensemble.vectors = vectors
    ensemble.grad = grad
    ensemble.potential = frame.potentials[rows, m]
    _check_finite(ensemble)
    return stats


def max_departure_rate(field, seed, samples=100):
    """Largest total pumping rate out of any state over random cell positions."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed)])))
    positions = rng.random((samples, 3)) * unit_cell(field)
    frame = diagonalize(field, positions)
    gamma = coefficient_table(frame, field.config).gamma
    departure = gamma.sum(axis=-1) - np.diagonal(gamma, axis1=-2, axis2=-1)
    return float(departure.max())


def time_step_bound(field, well, seed=0, samples=100):
    """Largest stable step, min(0.05 / gamma_max, T_vib / 40), with gamma_max and omega_max."""
    candidates = []
    gamma_max = max_departure_rate(field, seed, samples)
    if gamma_max > 0:
        candidates.append(0.05 / gamma_max)
    omega = float(np.max(well.omega))
    if omega > 0:
        candidates.append(2 * math.pi / omega / 40)
    if not candidates:
        raise InvalidInputError("no time scale: field carries neither pumping nor oscillation")
    return min(candidates), gamma_max, omega


def choose_time_step(field, well, seed=0, samples=100, requested=None):
    """The stability bound, or ``requested`` halved until it lies within it."""
    bound, gamma_max, omega = time_step_bound(field, well, seed, samples)
    if requested is None:
        dt = bound
    else:
        dt = float(requested)
        while dt > bound:
            dt /= 2
        if dt != requested:
            logger.warning(
                f"Requested time step {requested:.3e} exceeds the stability bound {bound:.3e}; using {dt:.3e}"
            )
    logger.info(f"Time step {dt:.3e} hbar/E_R (gamma_max={gamma_max:.3f}, omega_max={omega:.3f})")
    return dt


@dataclass
class ChunkResult:
    atom_index: np.ndarray
    p2_mean: np.ndarray
    kinetic_first: np.ndarray
    kinetic_second: np.ndarray
    jumps: np.ndarray
    R: np.ndarray
    P: np.ndarray
    m: np.ndarray
    counters: dict


class ChunkPropagator:
    """Worker task: propagate one chunk through equilibration and averaging."""

    def __init__(self, params, field, dt, n_equil, n_average):
        self.params = params
        self.field = field
        self.dt = dt
        self.n_equil = n_equil
        self.n_average = n_average
        self.stochastic = not params.hamiltonian_only

    def __call__(self, chunk_id, indices, ledger):
        ens = initialize_ensemble(self.params, self.field, indices)
        monitor = EquilibrationMonitor(self.field.depth)
        fallbacks = alarms = 0
        total_steps = self.n_equil + self.n_average
        log_every = max(total_steps // 10, 1)
        half = self.n_average // 2

        p2_sum = np.zeros_like(ens.P)
        ke_first = np.zeros(len(ens))
        ke_second = np.zeros(len(ens))
        jumps = np.zeros(len(ens), dtype=np.int64)

        for s in range(total_steps):
            if s % ABORT_CHECK_EVERY == 0 and ledger.abort.is_set():
                return None
            stats = step(ens, self.field, self.dt, self.stochastic)
            fallbacks += stats.fallbacks
            alarms += stats.clip_alarms
            if s >= self.n_equil:
                jumps += stats.jumps
                p2 = ens.P ** 2
                p2_sum += p2
                if s - self.n_equil < half:
                    ke_first += p2.sum(axis=-1)
                else:
                    ke_second += p2.sum(axis=-1)
            if (s + 1) % log_every == 0:
                smoothed = monitor.update(ens.kinetic().mean())
                ledger.add_steps(log_every)
                logger.debug(
                    f"chunk {chunk_id}: step {s + 1}/{total_steps}, <E_K>={smoothed:.2f} E_R "
                    f"({monitor.fraction_of_depth:.3f} U0)"
                )

        if alarms:
            logger.warning(f"chunk {chunk_id}: {alarms} diffusion clip alarms")
        if fallbacks:
            logger.info(f"chunk {chunk_id}: {fallbacks} steps turned a state past the continuity threshold")
        return ChunkResult(
            atom_index=ens.atom_index,
            p2_mean=p2_sum / self.n_average,
            kinetic_first=ke_first / max(half, 1),
            kinetic_second=ke_second / max(self.n_average - half, 1),
            jumps=jumps,
            R=ens.R.copy(), P=ens.P.copy(), m=ens.m.copy(),
            counters={"fallbacks": fallbacks, "clip_alarms": alarms},
        )


def mean_potential_energy(field, snapshot, floor):
    """Mean U_m(R) of the snapshot atoms above ``floor`` (E_R).

    Evaluated at positions folded into one cell, where the adiabatic
    spectrum repeats.
    """
    frame = diagonalize(field, snapshot.wrapped_positions(field.constants), order=1)
    potential = frame.potentials[np.arange(snapshot.n_atoms), snapshot.m]
    return float(potential.mean() - floor)


def run_ensemble(params, beam, workers=1, dipoles=None, config_hash=""):
    """Equilibrate, average <P_i^2> and return the record and final snapshot.

    A time step that allows more than one jump per step with probability
    above 0.5% restarts the whole run at dt/2.
    """
    field = LatticeField(beam, dipoles)
    transition = beam.transition
    well = well_characterization(field)
    dt = choose_time_step(field, well, params.master_seed, requested=params.dt)
    gamma_prime = beam.scattering_rate
    if gamma_prime <= 0:
        raise InvalidInputError("scattering rate is zero; no cooling dynamics to equilibrate")

    pool = TrajectoryPool(workers)
    start = time.time()
    for attempt in range(MAX_REFINEMENTS + 1):
        n_equil = int(math.ceil(params.t_equil / gamma_prime / dt))
        n_average = max(int(math.ceil(params.t_average / gamma_prime / dt)), 2)
        task = ChunkPropagator(params, field, dt, n_equil, n_average)
        logger.info(
            f"Run detuning={beam.detuning:g} Gamma, U0={field.depth:.1f} E_R: "
            f"{n_equil} + {n_average} steps of {dt:.3e}"
        )
        try:
            ledger = pool.run(params.n_atoms, params.chunk_size, task)
            break
        except TimeStepRefinement as e:
            if attempt == MAX_REFINEMENTS:
                raise
            logger.warning(f"{e}; restarting run with dt={dt / 2:.3e}")
            dt /= 2

    p2 = ledger.assemble("p2_mean")
    per_atom_ke = p2.sum(axis=-1)
    scale = transition.temperature_per_p2()
    n = params.n_atoms
    temperature = scale * p2.mean(axis=0)
    err = scale * (p2.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(3))

    drift = kinetic_drift(ledger.assemble("kinetic_first"), ledger.assemble("kinetic_second"))
    flags = []
    if drift.drifted:
        logger.warning(
            f"Non-equilibration at detuning={beam.detuning:g}, U0={field.depth:.1f}: "
            f"kinetic drift z={drift.z_score:.2f}"
        )
        flags.append("non_equilibrated")

    snapshot = PhaseSpaceSnapshot(
        atom_index=np.arange(n),
        R=ledger.assemble("R"),
        P=ledger.assemble("P"),
        m=ledger.assemble("m"),
        wavenumber=transition.wavenumber,
        mass=transition.mass,
        seed=params.master_seed,
        detuning=beam.detuning,
        depth=field.depth,
        config_hash=config_hash,
    )
    record = TemperatureRecord(
        detuning=beam.detuning,
        depth=field.depth,
        temperature=temperature,
        temperature_err=err,
        mean_kinetic=float(per_atom_ke.mean()),
        jumps_per_atom=float(ledger.assemble("jumps").mean()),
        n_atoms=n,
        dt=dt,
        seed=params.master_seed,
        drift_z=drift.z_score,
        flags=tuple(flags),
        mean_potential=mean_potential_energy(field, snapshot, well.depth),
    )
    uK = record.temperature_uK
    logger.info(
        f"T = ({uK[0]:.3f}, {uK[1]:.3f}, {uK[2]:.3f}) uK, <E_K>/U0 = {record.kinetic_over_depth:.3f} "
        f"({record.kinetic_per_axis_over_depth:.3f} per axis), <U>/U0 = {record.potential_over_depth:.3f} "
        f"[{time.time() - start:.1f}s]"
    )
    return EnsembleRun(record=record, snapshot=snapshot, well=well, counters=dict(ledger.counters))


def sweep(params, transition, theta=math.pi / 4, workers=1, dipoles=None, config_hash="", on_run=None):
    """run_ensemble over every (detuning, depth) pair, then T = T0 + xi U0 fits."""
    if len(set(params.depths)) < 3:
        raise InvalidInputError("a sweep needs at least 3 distinct depths per detuning")
    records, runs = [], []
    for detuning in params.detunings:
        for depth in params.depths:
            beam = irradiance_for_depth(transition, detuning, depth, theta, dipoles)
            run = run_ensemble(params, beam, workers, dipoles, config_hash)
            records.append(run.record)
            runs.append(run)
            if on_run is not None:
                on_run(run)

    flagged = [r for r in records if r.flagged]
    if flagged:
        logger.warning(f"{len(flagged)} of {len(records)} records flagged")
    fits = linear_scaling_fit(records)
    return SweepResult(records=records, runs=runs, fits=fits, table=scaling_table(records))
