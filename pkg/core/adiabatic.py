"""
Adiabatic potentials and states of the light-shift operator, the optical
pumping / radiation pressure / momentum diffusion coefficients projected
on them, and characterization of the potential wells.

Units: hbar = k = 1, M = 1/2; energies in E_R, rates in E_R / hbar.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize, minimize_scalar

from core.errors import ScanResolutionError

logger = logging.getLogger("nrol.adiabatic")

DEGENERACY_TOLERANCE = 1e-8
CONTINUITY_THRESHOLD = 0.5
# share of an origin row's diffusion (trace over every target block) lost by clipping
CLIP_ALARM = 1e-3
BLOCK_TOLERANCE = 1e-9


@dataclass(frozen=True)
class AdiabaticFrame:
    """Eigen-decomposition of hbar (Delta s0 / 2) A at a stack of positions.

    ``states[..., :, m]`` is |Phi_m>, potentials are ascending and
    ``grad_potentials[..., m, i]`` is d_i U_m. ``near_degenerate[..., m]``
    marks the pair (m, m+1).
    """
    position: np.ndarray
    potentials: np.ndarray
    states: np.ndarray
    grad_potentials: np.ndarray
    near_degenerate: np.ndarray
    operators: object
    scale: float

    @property
    def n_levels(self):
        return self.potentials.shape[-1]


@dataclass(frozen=True)
class CoefficientTable:
    """gamma[..., n, m] (rate n -> m), F[..., n, m, i], D[..., n, m, i, j].

    With ``origin`` set, the first level axis has length one and holds the
    rows of the listed origin states only.
    """
    gamma: np.ndarray
    F: np.ndarray
    D: np.ndarray
    clip_alarms: int = 0


@dataclass(frozen=True)
class ContinuityMap:
    permutation: np.ndarray
    phases: np.ndarray
    fallback: bool


@dataclass(frozen=True)
class WellProperties:
    minimum: np.ndarray
    depth: float
    barrier_x: float
    barrier_z: float
    hessian: np.ndarray
    omega: np.ndarray
    reduced_omega: np.ndarray

    @property
    def barrier_ratio(self):
        return self.barrier_x / self.barrier_z


def _dagger(x):
    return np.conj(np.swapaxes(x, -1, -2))


def diagonalize(field, r, order=2):
    """Adiabatic frame at position(s) r for a LatticeField.

    ``order=1`` skips the second derivatives and the pumping operators;
    such a frame carries potentials and gradients but no coefficients.
    """
    r = np.asarray(r, dtype=float)
    ops = field.operators(r, max(order, 1))
    scale = field.config.light_shift_scale
    potentials, states = np.linalg.eigh(scale * ops.A)

    Vh = _dagger(states)
    projected = Vh[..., None, :, :] @ ops.dA @ states[..., None, :, :]
    grad = scale * np.real(np.diagonal(projected, axis1=-2, axis2=-1))   # (..., 3, n)
    grad = np.swapaxes(grad, -1, -2)

    spread = potentials[..., -1:] - potentials[..., :1]
    gaps = np.diff(potentials, axis=-1)
    near = gaps <= DEGENERACY_TOLERANCE * spread
    if np.any(near) and logger.isEnabledFor(logging.DEBUG):
        logger.debug(f"{int(np.count_nonzero(near))} near-degenerate adiabatic pairs")
    return AdiabaticFrame(
        position=r, potentials=potentials, states=states, grad_potentials=grad,
        near_degenerate=near, operators=ops, scale=scale,
    )


def _left(frame, origin):
    """Bra vectors <Phi_m| for the requested origins, shape (..., r, n)."""
    Vh = _dagger(frame.states)
    if origin is None:
        return Vh
    origin = np.asarray(origin)
    vecs = np.take_along_axis(frame.states, origin[..., None, None], axis=-1)[..., 0]
    return np.conj(vecs)[..., None, :]


def _project(left, op, states, extra_axes):
    expand = (Ellipsis,) + (None,) * extra_axes + (slice(None), slice(None))
    return left[expand] @ op @ states[expand]


def _matrix_elements(frame, origin):
    ops = frame.operators
    left, V = _left(frame, origin), frame.states
    T = _project(left, ops.B, V, 1)             # (..., 3q, r, n)
    dT = _project(left, ops.dB, V, 2)           # (..., 3q, 3i, r, n)
    return T, dT


def pumping_rates(frame, config, origin=None):
    """gamma_{n,m} = Gamma' sum_q |<Phi_n|B_q|Phi_m>|^2 (diagonal retained)."""
    T = _project(_left(frame, origin), frame.operators.B, frame.states, 1)
    return config.scattering_rate * np.sum(np.abs(T) ** 2, axis=-3)


def radiation_pressure(frame, config, origin=None):
    """F^i_{n,m} = -hbar Gamma' Im sum_q <Phi_m|d_i B_q^+|Phi_n><Phi_n|B_q|Phi_m>."""
    T, dT = _matrix_elements(frame, origin)
    product = np.conj(dT) * T[..., :, None, :, :]
    F = -config.scattering_rate * np.imag(np.sum(product, axis=-4))    # (..., 3i, r, n)
    return np.moveaxis(F, -3, -1)


def clipped_fraction(D):
    """Negative eigenvalue mass over positive mass per origin row of (..., r, n, 3, 3).

    A jump to m kicks with variance 2 D_nm / gamma_nm at rate gamma_nm, so
    every block already enters the heating rate weighted by its rate.
    """
    w = np.linalg.eigvalsh(D)
    lost = np.sum(np.clip(-w, 0.0, None), axis=(-2, -1))
    kept = np.sum(np.clip(w, 0.0, None), axis=(-2, -1))
    return lost / np.maximum(kept, np.finfo(float).tiny)


def _clip_psd(D):
    w, Q = np.linalg.eigh(D)
    alarms = int(np.count_nonzero(clipped_fraction(D) > CLIP_ALARM))
    w = np.clip(w, 0.0, None)
    return (Q * w[..., None, :]) @ np.swapaxes(Q, -1, -2), alarms


def _recoil_term(left, ops, V):
    """sum_{u != i} |<Phi_n|B_u|Phi_m>|^2 on the diagonal i = j, photons
    emitted only along x, y and z. Shape (..., 3, 3, r, n)."""
    emitted = np.abs(_project(left, ops.B_cart, V, 1)) ** 2      # (..., 3u, r, n)
    total = np.sum(emitted, axis=-3)
    recoil = np.zeros(emitted.shape[:-3] + (3, 3) + emitted.shape[-2:])
    for i in range(3):
        recoil[..., i, i, :, :] = total - emitted[..., i, :, :]
    return recoil


def recoil_diffusion(frame, config, origin=None):
    """Spontaneous-emission part of D alone, (..., r, n, 3, 3)."""
    recoil = config.scattering_rate / 4 * _recoil_term(_left(frame, origin), frame.operators, frame.states)
    return np.moveaxis(recoil, (-4, -3), (-2, -1))


def raw_diffusion(frame, config, origin=None):
    """Symmetrized D^{ij}_{n,m} before clipping; blocks of upper states may be indefinite."""
    ops = frame.operators
    left, V = _left(frame, origin), frame.states
    gp = config.scattering_rate
    T, dT = _matrix_elements(frame, origin)
    d2T = _project(left, ops.d2B, V, 3)          # (..., 3q, 3i, 3j, r, n)

    # dipole-force fluctuations: <Phi_n| d_ij A |Phi_m> delta_nm
    d2A = _project(left, ops.d2A, V, 2)          # (..., 3i, 3j, r, n)
    if origin is None:
        diag = np.eye(frame.n_levels, dtype=bool)
    else:
        diag = np.arange(frame.n_levels) == np.asarray(origin)[..., None, None]
    first = np.where(diag[..., None, None, :, :], np.real(d2A), 0.0)

    recoil = _recoil_term(left, ops, V)

    third = (
        np.sum(np.conj(d2T) * T[..., :, None, None, :, :], axis=-5)
        - np.sum(np.conj(dT)[..., :, :, None, :, :] * dT[..., :, None, :, :, :], axis=-5)
    )
    D = gp / 8 * first + gp / 4 * recoil - gp / 4 * np.real(third)
    D = np.moveaxis(D, (-4, -3), (-2, -1))       # (..., r, n, 3, 3)
    return 0.5 * (D + np.swapaxes(D, -1, -2))


def diffusion_matrix(frame, config, origin=None):
    """Momentum diffusion D^{ij}_{n,m}, symmetrized and clipped to PSD."""
    raw = raw_diffusion(frame, config, origin)
    w = np.linalg.eigvalsh(raw)
    indefinite = int(np.count_nonzero(w[..., 0] < -BLOCK_TOLERANCE * np.abs(w).max(axis=-1)))
    if indefinite:
        logger.debug(f"{indefinite} diffusion blocks below -{BLOCK_TOLERANCE:g} of their norm before clipping")
    D, alarms = _clip_psd(raw)
    if alarms:
        logger.warning(f"Diffusion clip alarm: {alarms} origin rows lose more than {CLIP_ALARM:g} of their diffusion")
    return D


def coefficient_table(frame, config, origin=None):
    """All three coefficient tables at once; origin restricts to rows."""
    gamma = pumping_rates(frame, config, origin)
    F = radiation_pressure(frame, config, origin)
    D, alarms = _clip_psd(raw_diffusion(frame, config, origin))
    return CoefficientTable(gamma=gamma, F=F, D=D, clip_alarms=alarms)


def align_continuity(previous, current):
    """Match adiabatic states of two nearby single-position frames.

    Returns the permutation sigma maximizing |<Phi_m(old)|Phi_sigma(m)(new)>|
    and the phase factors that make those overlaps real positive. Falls back
    to eigenvalue order when some best overlap is below 0.5.
    """
    overlap = _dagger(previous.states) @ current.states
    magnitude = np.abs(overlap)
    rows, cols = linear_sum_assignment(-magnitude)
    permutation = cols[np.argsort(rows)]
    n = magnitude.shape[-1]
    fallback = bool(np.min(magnitude[np.arange(n), permutation]) < CONTINUITY_THRESHOLD)
    if fallback:
        logger.info("Continuity fallback: overlaps below threshold, keeping eigenvalue order")
        permutation = np.arange(n)
    matched = overlap[np.arange(n), permutation]
    phases = np.where(np.abs(matched) > 0, np.conj(matched) / np.maximum(np.abs(matched), 1e-300), 1.0)
    return ContinuityMap(permutation=permutation, phases=phases, fallback=fallback)


def follow_state(previous_vectors, frame, index):
    """Per-atom continuity: new index of the state each atom occupied.

    Atoms stay on their energy-ordered level, so narrow avoided crossings are
    passed adiabatically whatever the step. Inside a cluster of
    near-degenerate levels the order is undefined and the level with the
    largest overlap with ``previous_vectors`` (N, n) is taken. Returns the new
    index, the new state vectors and the number of atoms whose state turned
    by more than the continuity threshold in one step.
    """
    rows = np.arange(len(index))
    overlaps = np.abs(np.einsum("ak,akb->ab", np.conj(previous_vectors), frame.states))
    near = frame.near_degenerate.reshape(len(index), -1)
    cluster = np.concatenate([np.zeros((len(index), 1), dtype=int), np.cumsum(~near, axis=-1)], axis=-1)
    same = cluster == cluster[rows, index][:, None]
    new_index = np.argmax(np.where(same, overlaps, -1.0), axis=-1)
    turned = overlaps[rows, new_index] < CONTINUITY_THRESHOLD
    vectors = np.take_along_axis(frame.states, new_index[:, None, None], axis=-1)[..., 0]
    return new_index, vectors, int(np.count_nonzero(turned))


def potential_hessian(frame, level=0):
    """d_i d_j U_m from second-order perturbation theory at a single position."""
    ops = frame.operators
    V, U = frame.states, frame.potentials
    scale = frame.scale
    first = scale * (_dagger(V) @ ops.dA @ V)             # (3, n, n)
    second = scale * (_dagger(V) @ ops.d2A @ V)           # (3, 3, n, n)
    H = np.real(second[:, :, level, level]).copy()
    for k in range(frame.n_levels):
        gap = U[level] - U[k]
        if k == level or abs(gap) < 1e-14:
            continue
        coupling = first[:, level, k][:, None] * first[:, k, level][None, :]
        H += 2 * np.real(coupling) / gap
    return 0.5 * (H + H.T)


def _lowest(field, r):
    return float(diagonalize(field, r, order=1).potentials[0])


def _barrier_along(field, start, direction, samples):
    s = np.linspace(0.0, 1.0, samples)
    path = start[None, :] + s[:, None] * direction[None, :]
    values = diagonalize(field, path, order=1).potentials[:, 0]
    k = int(np.argmax(values))
    lo, hi = s[max(k - 1, 0)], s[min(k + 1, samples - 1)]
    refined = minimize_scalar(
        lambda t: -_lowest(field, start + t * direction),
        bounds=(lo, hi), method="bounded", options={"xatol": 1e-10},
    )
    return max(values[k], -refined.fun)


def well_characterization(field, points_per_constant=64):
    """Locate a well of the lowest potential and measure its barriers and
    harmonic frequencies.

    Barriers are the maxima of U_lowest along the straight paths to the
    neighboring minimum along x (distance a_xy) and along z (distance a_z).
    """
    a_z, a_xy = field.constants
    if points_per_constant < 20:
        raise ScanResolutionError(f"{points_per_constant} points per lattice constant cannot resolve a_z/20")

    def objective(r):
        frame = diagonalize(field, r, order=1)
        return float(frame.potentials[0]), frame.grad_potentials[0]

    result = minimize(objective, field.sigma_plus_site, jac=True, method="BFGS", options={"gtol": 1e-10})
    minimum = result.x
    frame = diagonalize(field, minimum)
    depth = float(frame.potentials[0])

    barrier_x = _barrier_along(field, minimum, np.array([a_xy, 0.0, 0.0]), points_per_constant + 1) - depth
    barrier_z = _barrier_along(field, minimum, np.array([0.0, 0.0, a_z]), points_per_constant + 1) - depth

    hessian = potential_hessian(frame, 0)
    curvature = np.linalg.eigvalsh(hessian)
    if curvature[0] <= 0:
        logger.warning(f"Hessian at the located minimum is not positive definite: {curvature}")
    # U = M omega^2 x^2 / 2 with M = 1/2
    omega = np.sqrt(np.clip(2 * np.diag(hessian), 0.0, None))
    spacing = np.array([a_xy, a_xy, a_z])
    reduced = omega * spacing / (2 * math.pi)
    logger.info(
        f"Well at {np.round(minimum, 4)}: depth {depth:.2f} E_R, "
        f"barriers x={barrier_x:.2f} z={barrier_z:.2f} (ratio {barrier_x / barrier_z:.3f})"
    )
    return WellProperties(
        minimum=minimum, depth=depth, barrier_x=float(barrier_x), barrier_z=float(barrier_z),
        hessian=hessian, omega=omega, reduced_omega=reduced,
    )
