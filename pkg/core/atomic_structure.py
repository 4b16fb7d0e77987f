"""
Angular-momentum algebra for a Jg -> Je = Jg + 1 dipole transition.

Clebsch-Gordan coefficients are evaluated with the Racah sum in exact
rational arithmetic and only converted to float at the end; the dipole
tables built from them are computed once per transition and shared
read-only by every worker.
"""
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import constants

from core.errors import InvalidInputError

SPHERICAL_LABELS = (-1, 0, 1)


def _as_half_integer(value, name):
    try:
        frac = Fraction(value)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"{name}={value!r} is not a number") from exc
    if frac.denominator not in (1, 2):
        raise InvalidInputError(f"{name}={value!r} is not a half-integer")
    return frac


def _check_projection(j, m, jname, mname):
    if j < 0:
        raise InvalidInputError(f"{jname}={j} must be non-negative")
    if abs(m) > j:
        raise InvalidInputError(f"|{mname}|={abs(m)} exceeds {jname}={j}")
    if (j - m).denominator != 1:
        raise InvalidInputError(f"{jname}-{mname} must be an integer")


@lru_cache(maxsize=None)
def _racah_squared(j1, m1, j2, m2, J, M):
    """Signed square of the coefficient, exact. Arguments are Fractions."""
    if M != m1 + m2:
        return Fraction(0)
    if J < abs(j1 - j2) or J > j1 + j2 or (j1 + j2 + J).denominator != 1:
        return Fraction(0)
    if abs(M) > J:
        return Fraction(0)

    f = lambda x: math.factorial(int(x))  # noqa: E731
    pre = Fraction(
        (2 * J + 1) * f(J + j1 - j2) * f(J - j1 + j2) * f(j1 + j2 - J),
        f(j1 + j2 + J + 1),
    )
    pre *= f(J + M) * f(J - M) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2)

    kmin = int(max(0, j2 - J - m1, j1 - J + m2))
    kmax = int(min(j1 + j2 - J, j1 - m1, j2 + m2))
    total = Fraction(0)
    for k in range(kmin, kmax + 1):
        denom = (
            f(k) * f(j1 + j2 - J - k) * f(j1 - m1 - k) * f(j2 + m2 - k)
            * f(J - j2 + m1 + k) * f(J - j1 - m2 + k)
        )
        total += Fraction((-1) ** k, denom)

    value = pre * total * total
    return value if total >= 0 else -value


def clebsch_gordan(j1, m1, j2, m2, J, M):
    """<j1 m1; j2 m2 | J M> in the Condon-Shortley convention.

    Returns 0.0 whenever a selection rule fails (M != m1 + m2 or J outside
    the triangle). Non-half-integer input or |m| > j is rejected.
    """
    j1, m1 = _as_half_integer(j1, "j1"), _as_half_integer(m1, "m1")
    j2, m2 = _as_half_integer(j2, "j2"), _as_half_integer(m2, "m2")
    J, M = _as_half_integer(J, "J"), _as_half_integer(M, "M")
    _check_projection(j1, m1, "j1", "m1")
    _check_projection(j2, m2, "j2", "m2")
    _check_projection(J, M, "J", "M")

    signed = _racah_squared(j1, m1, j2, m2, J, M)
    if signed == 0:
        return 0.0
    return math.copysign(math.sqrt(abs(signed)), signed)


def projections(j):
    """Magnetic quantum numbers -j..+j in index order."""
    j = Fraction(j)
    return [-j + i for i in range(int(2 * j) + 1)]


@dataclass(frozen=True)
class Transition:
    """Atomic constants of the cooling line.

    jg/je are angular momenta, wavelength in m, linewidth Gamma in rad/s,
    saturation irradiance in W/m^2 and mass in kg.
    """
    jg: Fraction
    wavelength: float
    linewidth: float
    saturation_irradiance: float
    mass: float
    je: Fraction = field(default=None)

    def __post_init__(self):
        jg = _as_half_integer(self.jg, "jg")
        if jg < 0:
            raise InvalidInputError("jg must be non-negative")
        je = jg + 1 if self.je is None else _as_half_integer(self.je, "je")
        if je != jg + 1:
            raise InvalidInputError(f"je={je} must equal jg+1={jg + 1}")
        object.__setattr__(self, "jg", jg)
        object.__setattr__(self, "je", je)
        for name in ("wavelength", "linewidth", "saturation_irradiance", "mass"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be strictly positive")

    @classmethod
    def cesium_d2(cls):
        """133Cs 6S1/2 F=4 -> 6P3/2 F'=5."""
        return cls(
            jg=Fraction(4),
            wavelength=852.347e-9,
            linewidth=2 * math.pi * 5.2e6,
            saturation_irradiance=11.0,  # 1.1 mW/cm^2
            mass=132.905451933 * constants.atomic_mass,
        )

    @property
    def n_ground(self):
        return int(2 * self.jg + 1)

    @property
    def n_excited(self):
        return int(2 * self.je + 1)

    @property
    def wavenumber(self):
        return 2 * math.pi / self.wavelength

    @property
    def recoil_energy(self):
        """E_R = (hbar k)^2 / 2M in joules."""
        return (constants.hbar * self.wavenumber) ** 2 / (2 * self.mass)

    @property
    def recoil_rate(self):
        """E_R / hbar in 1/s; the inverse of the internal time unit."""
        return self.recoil_energy / constants.hbar

    @property
    def gamma_internal(self):
        """Linewidth in units of E_R / hbar."""
        return self.linewidth / self.recoil_rate

    def temperature_per_p2(self):
        """Kelvin per unit <P_i^2> (P in hbar k): T_i = 2 E_R <P_i^2> / k_B."""
        return 2 * self.recoil_energy / constants.k


@dataclass(frozen=True)
class DipoleComponents:
    """Raising components d+ . e_q as (2je+1) x (2jg+1) matrices.

    ``spherical`` is stacked in the order q = -1, 0, +1; ``cartesian`` holds
    d+ . e_x, d+ . e_y, d+ . e_z. Row index is me + je, column mg + jg.
    """
    transition: Transition
    spherical: np.ndarray
    cartesian: np.ndarray

    def d_plus(self, q):
        return self.spherical[SPHERICAL_LABELS.index(q)]

    def d_minus(self, q):
        return self.d_plus(q).conj().T

    @property
    def stretched_leak(self):
        """Squared coupling of the stretched ground state to the opposite
        circular polarization, |<je jg-1 | jg jg; 1 -1>|^2."""
        jg = self.transition.jg
        n = self.transition.n_ground
        if n == 1:
            return 0.0
        return abs(self.d_plus(-1)[int(jg - 1 + self.transition.je), n - 1]) ** 2


def build_dipole_components(transition):
    jg, je = transition.jg, transition.je
    ground, excited = projections(jg), projections(je)
    spherical = np.zeros((3, len(excited), len(ground)), dtype=np.complex128)
    for qi, q in enumerate(SPHERICAL_LABELS):
        for gi, mg in enumerate(ground):
            me = mg + q
            if abs(me) > je:
                continue
            spherical[qi, int(me + je), gi] = clebsch_gordan(jg, mg, 1, q, je, me)

    d_minus_1, d_0, d_plus_1 = spherical
    cartesian = np.stack([
        (-d_plus_1 + d_minus_1) / math.sqrt(2),
        1j * (d_plus_1 + d_minus_1) / math.sqrt(2),
        d_0,
    ])
    spherical.setflags(write=False)
    cartesian.setflags(write=False)
    return DipoleComponents(transition=transition, spherical=spherical, cartesian=cartesian)
