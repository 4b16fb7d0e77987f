"""
Four-beam 3D lin-perp-lin field and the light-shift / pumping operators.

All positions are in units of 1/k and all energies in E_R. The operators
are evaluated for any stack of positions at once: a position array of
shape (..., 3) yields operator arrays with the same leading shape.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from core.atomic_structure import SPHERICAL_LABELS, build_dipole_components
from core.errors import InvalidInputError

logger = logging.getLogger("nrol.field")

CARTESIAN_LABELS = ("x", "y", "z")
_Q_ALIASES = {"-": -1, "0": 0, "+": 1, -1: -1, 0: 0, 1: 1}

# Each beam carries amplitude 1/sqrt(8) so that |eps|^2 = 1 at the sigma sites,
# where the irradiance is 8 * I_beam.
BEAM_AMPLITUDE = 1 / math.sqrt(8)


@dataclass(frozen=True)
class BeamConfig:
    """Lattice geometry and light parameters.

    theta in radians, detuning in units of Gamma, beam irradiance in W/m^2.
    """
    transition: object
    detuning: float
    beam_irradiance: float
    theta: float = math.pi / 4

    def __post_init__(self):
        if not 0 < self.theta < math.pi / 2:
            raise InvalidInputError(f"theta={self.theta} outside (0, pi/2)")
        if self.beam_irradiance < 0:
            raise InvalidInputError("beam irradiance must be non-negative")
        if self.detuning >= 0:
            logger.warning(f"Detuning {self.detuning} Gamma is not red; no Sisyphus cooling expected")

    @property
    def total_irradiance(self):
        return 8 * self.beam_irradiance

    @property
    def rabi_squared(self):
        """Omega^2 in units of Gamma^2, Omega^2 = (Gamma^2 / 2)(I / I0)."""
        return 0.5 * self.total_irradiance / self.transition.saturation_irradiance

    @property
    def saturation(self):
        """s0 = (Omega^2 / 2) / (Delta^2 + Gamma^2 / 4)."""
        return 0.5 * self.rabi_squared / (self.detuning ** 2 + 0.25)

    @property
    def detuning_internal(self):
        return self.detuning * self.transition.gamma_internal

    @property
    def scattering_rate(self):
        """Gamma' = Gamma s0 / 2 in units of E_R / hbar."""
        return 0.5 * self.transition.gamma_internal * self.saturation

    @property
    def light_shift_scale(self):
        """hbar Delta s0 / 2 in E_R; the adiabatic potentials are this times eig(A)."""
        return 0.5 * self.detuning_internal * self.saturation

    def with_irradiance(self, beam_irradiance):
        return BeamConfig(self.transition, self.detuning, beam_irradiance, self.theta)


@dataclass(frozen=True)
class FieldSample:
    """eps(r) with its analytic derivatives.

    ``depsilon[..., i, c]`` is d_i eps_c and ``d2epsilon[..., i, j, c]`` is
    d_i d_j eps_c.
    """
    position: np.ndarray
    epsilon: np.ndarray
    depsilon: np.ndarray
    d2epsilon: np.ndarray


@dataclass(frozen=True)
class LatticeOperators:
    """A, B_q and their derivatives at a stack of positions.

    Shapes (leading position dims omitted, n = 2jg + 1):
      A (n, n), dA (3, n, n), d2A (3, 3, n, n),
      B (3, n, n) for q = -1, 0, +1, dB (3, 3, n, n) as [q, i],
      d2B (3, 3, 3, n, n) as [q, i, j], B_cart (3, n, n) for x, y, z.
    """
    A: np.ndarray
    dA: np.ndarray
    d2A: np.ndarray
    B: np.ndarray
    dB: np.ndarray
    d2B: np.ndarray
    B_cart: np.ndarray


def _beam_geometry(theta):
    s, c = math.sin(theta), math.cos(theta)
    wavevectors = np.array([
        [s, 0.0, c],
        [-s, 0.0, c],
        [0.0, s, -c],
        [0.0, -s, -c],
    ])
    polarizations = BEAM_AMPLITUDE * np.array([
        [0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
    ], dtype=np.complex128)
    return wavevectors, polarizations


def field_polarization(config, r):
    """Evaluate eps(r) = sum of the four plane waves and its derivatives."""
    r = np.asarray(r, dtype=float)
    K, pol = _beam_geometry(config.theta)
    waves = np.exp(1j * (r @ K.T))                                  # (..., 4)
    epsilon = waves @ pol
    first = waves[..., None, :] * (1j * K.T)                        # (..., 3, 4)
    depsilon = first @ pol
    second = waves[..., None, None, :] * (-K.T[:, None, :] * K.T[None, :, :])
    d2epsilon = second @ pol
    return FieldSample(position=r, epsilon=epsilon, depsilon=depsilon, d2epsilon=d2epsilon)


def lattice_constants(theta, wavelength):
    """(a_z, a_xy) for the 45 degree lattice."""
    if not math.isclose(theta, math.pi / 4, rel_tol=0, abs_tol=1e-12):
        raise InvalidInputError("lattice constants are only defined for theta = pi/4")
    return wavelength / (2 * math.sqrt(2)), wavelength / math.sqrt(2)


def _contract(vector, cartesian):
    """d+ . v for a stack of complex 3-vectors -> (..., ne, ng)."""
    return np.tensordot(vector, cartesian, axes=([-1], [0]))


def _dagger(x):
    return np.conj(np.swapaxes(x, -1, -2))


def build_operators(sample, dipoles, order=2):
    """Operators up to ``order``: 0 gives A, 1 adds dA, 2 adds d2A and every B."""
    G = _contract(sample.epsilon, dipoles.cartesian)                # d+ . eps
    Gh = _dagger(G)
    A = Gh @ G
    if order == 0:
        return LatticeOperators(A=A, dA=None, d2A=None, B=None, dB=None, d2B=None, B_cart=None)

    dG = _contract(sample.depsilon, dipoles.cartesian)              # (..., 3, ne, ng)
    dGh = _dagger(dG)
    dA = dGh @ G[..., None, :, :] + Gh[..., None, :, :] @ dG
    if order == 1:
        return LatticeOperators(A=A, dA=dA, d2A=None, B=None, dB=None, d2B=None, B_cart=None)

    d2G = _contract(sample.d2epsilon, dipoles.cartesian)            # (..., 3, 3, ne, ng)
    d2Gh = _dagger(d2G)
    cross = dGh[..., :, None, :, :] @ dG[..., None, :, :, :]
    d2A = (
        d2Gh @ G[..., None, None, :, :]
        + cross + np.swapaxes(cross, -3, -4)
        + Gh[..., None, None, :, :] @ d2G
    )

    E = dipoles.spherical
    B = Gh[..., None, :, :] @ E                                     # (..., 3q, n, n)
    dB = dGh[..., None, :, :, :] @ E[:, None, :, :]                 # (..., 3q, 3i, n, n)
    d2B = d2Gh[..., None, :, :, :, :] @ E[:, None, None, :, :]
    B_cart = Gh[..., None, :, :] @ dipoles.cartesian
    return LatticeOperators(A=A, dA=dA, d2A=d2A, B=B, dB=dB, d2B=d2B, B_cart=B_cart)


def light_shift_operator(config, sample, dipoles):
    """A(r) = (d- . eps*)(d+ . eps); Hermitian and positive semidefinite."""
    G = _contract(sample.epsilon, dipoles.cartesian)
    return _dagger(G) @ G


def b_operator(config, sample, dipoles, q):
    """B_q(r) = (d- . eps*)(d+ . e_q) with its first and second derivatives.

    q is one of -1, 0, +1 ('-', '0', '+') or 'x', 'y', 'z'.
    """
    if q in CARTESIAN_LABELS:
        E = dipoles.cartesian[CARTESIAN_LABELS.index(q)]
    elif q in _Q_ALIASES:
        E = dipoles.spherical[SPHERICAL_LABELS.index(_Q_ALIASES[q])]
    else:
        raise InvalidInputError(f"unknown polarization label {q!r}")
    Gh = _dagger(_contract(sample.epsilon, dipoles.cartesian))
    dGh = _dagger(_contract(sample.depsilon, dipoles.cartesian))
    d2Gh = _dagger(_contract(sample.d2epsilon, dipoles.cartesian))
    return Gh @ E, dGh @ E, d2Gh @ E


def diabatic_depth(config, dipoles=None):
    """Modulation depth U0 of the diabatic potential, in E_R.

    U0 = (hbar |Delta| / 2) ln[1 + c Omega^2 / (2 Delta^2)] with
    c = 1 - |<je jg-1 | jg jg; 1 -1>|^2 (44/45 for jg = 4).
    """
    if config.detuning == 0:
        raise InvalidInputError("diabatic depth undefined at zero detuning")
    dipoles = dipoles or build_dipole_components(config.transition)
    contrast = 1.0 - dipoles.stretched_leak
    x = contrast * config.rabi_squared / (2 * config.detuning ** 2)
    return 0.5 * abs(config.detuning_internal) * math.log1p(x)


def irradiance_for_depth(transition, detuning, depth, theta=math.pi / 4, dipoles=None):
    """Beam configuration whose diabatic depth equals ``depth`` (E_R)."""
    if depth < 0:
        raise InvalidInputError("depth must be non-negative")
    dipoles = dipoles or build_dipole_components(transition)
    contrast = 1.0 - dipoles.stretched_leak
    half_delta = 0.5 * abs(detuning * transition.gamma_internal)
    rabi_squared = math.expm1(depth / half_delta) * 2 * detuning ** 2 / contrast
    total = 2 * rabi_squared * transition.saturation_irradiance
    return BeamConfig(transition, detuning, total / 8, theta)


class LatticeField:
    """Field, dipole tables and operators for one beam configuration."""

    def __init__(self, config, dipoles=None):
        self.config = config
        self.dipoles = dipoles or build_dipole_components(config.transition)

    @property
    def n_levels(self):
        return self.config.transition.n_ground

    @cached_property
    def constants(self):
        """(a_z, a_xy) in units of 1/k."""
        return lattice_constants(self.config.theta, 2 * math.pi)

    @cached_property
    def sigma_plus_site(self):
        """A site of pure sigma+ light (the relative beam phases vanish at the origin)."""
        return np.array([0.0, 0.0, math.pi / (4 * math.cos(self.config.theta))])

    @cached_property
    def depth(self):
        return diabatic_depth(self.config, self.dipoles)

    def sample(self, r):
        return field_polarization(self.config, r)

    def operators(self, r, order=2):
        return build_operators(self.sample(r), self.dipoles, order)
