import hashlib
import json
import math
from fractions import Fraction
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, EnvSettingsSource, SettingsConfigDict
from scipy import constants

from core.atomic_structure import Transition
from core.errors import ConfigError
from core.langevin import SimParams
from core.lattice_field import BeamConfig, irradiance_for_depth

# Fields that change where or how fast a run executes but not what it computes.
_UNHASHED = {"workers", "out_dir", "seed"}


def _merge(base, top):
    """Nested dict merge; values of ``top`` win."""
    merged = dict(base)
    for key, value in top.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TransitionSettings(_Section):
    jg: float = 4.0
    wavelength_nm: float = Field(852.347, gt=0)
    linewidth_MHz: float = Field(5.2, gt=0)
    saturation_mW_per_cm2: float = Field(1.1, gt=0)
    mass_amu: float = Field(132.905451933, gt=0)

    @field_validator("jg")
    @classmethod
    def _half_integer(cls, value):
        if value < 0 or (2 * value) != int(2 * value):
            raise ValueError(f"jg={value} is not a non-negative half-integer")
        return value

    def build(self):
        return Transition(
            jg=Fraction(self.jg).limit_denominator(2),
            wavelength=self.wavelength_nm * 1e-9,
            linewidth=2 * math.pi * self.linewidth_MHz * 1e6,
            saturation_irradiance=self.saturation_mW_per_cm2 * 10.0,
            mass=self.mass_amu * constants.atomic_mass,
        )


class BeamSettings(_Section):
    theta_deg: float = Field(45.0, gt=0, lt=90)
    detunings_Gamma: list[float] = [-10.0]
    depths_Er: list[float] = [500.0, 1000.0, 1500.0, 2000.0, 2500.0, 3000.0]
    beam_irradiance_mW_per_cm2: Optional[float] = Field(None, ge=0)

    @field_validator("detunings_Gamma")
    @classmethod
    def _nonzero(cls, values):
        if not values or any(v == 0 for v in values):
            raise ValueError("detunings must be non-empty and non-zero")
        return values

    @field_validator("depths_Er")
    @classmethod
    def _positive(cls, values):
        if not values or any(v <= 0 for v in values):
            raise ValueError("depths must be non-empty and positive")
        return values

    @property
    def theta(self):
        return math.radians(self.theta_deg)


class SimulationSettings(_Section):
    n_atoms: int = Field(300, ge=1)
    dt_hbar_per_Er: Optional[float] = Field(None, gt=0)
    t_equil_per_Gamma_prime: float = Field(4000.0, ge=0)
    t_average_per_Gamma_prime: float = Field(2000.0, gt=0)
    t_init_uK: float = Field(3.0, ge=0)
    chunk_size: int = Field(25, ge=1)
    hamiltonian_only: bool = False


class ThermometrySettings(_Section):
    tau_ms: list[float] = [12.0, 35.0]
    bins: int = Field(61, ge=8)
    gravity_m_per_s2: float = 0.0
    write_snapshots: bool = True

    @field_validator("tau_ms")
    @classmethod
    def _non_negative(cls, values):
        if any(t < 0 for t in values):
            raise ValueError("time-of-flight delays must be non-negative")
        return values

    @property
    def taus(self):
        return tuple(t * 1e-3 for t in self.tau_ms)


class ScanSettings(_Section):
    plane: Literal["xz", "xy", "yz"] = "xz"
    resolution: int = Field(64, ge=2)
    all_levels: bool = False


class RunConfig(BaseSettings):
    """Complete run configuration; file values < NROL_* environment < CLI flags."""

    model_config = SettingsConfigDict(env_prefix="NROL_", env_nested_delimiter="__", extra="forbid")

    transition: TransitionSettings = TransitionSettings()
    beams: BeamSettings = BeamSettings()
    simulation: SimulationSettings = SimulationSettings()
    thermometry: ThermometrySettings = ThermometrySettings()
    scan: ScanSettings = ScanSettings()
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    out_dir: str = "results"

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings, dotenv_settings, file_secret_settings):
        # keyword arguments win; from_dict folds the environment over file values itself
        return init_settings, env_settings

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**_merge(data, EnvSettingsSource(cls)()))
        except ValidationError as e:
            raise ConfigError(f"invalid configuration:\n{e}") from e

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self):
        return self.model_dump(mode="json")

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    def with_overrides(self, **overrides):
        """Apply CLI flags; None values leave the field as it is."""
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return type(self)(**data)
        except ValidationError as e:
            raise ConfigError(f"invalid configuration:\n{e}") from e

    def config_hash(self):
        physics = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(physics, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def build_transition(self):
        try:
            return self.transition.build()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def sim_params(self):
        s = self.simulation
        return SimParams(
            n_atoms=s.n_atoms,
            dt=s.dt_hbar_per_Er,
            t_equil=s.t_equil_per_Gamma_prime,
            t_average=s.t_average_per_Gamma_prime,
            t_init_uK=s.t_init_uK,
            master_seed=self.seed,
            detunings=tuple(self.beams.detunings_Gamma),
            depths=tuple(self.beams.depths_Er),
            chunk_size=s.chunk_size,
            hamiltonian_only=s.hamiltonian_only,
        )

    def scan_beam(self, transition, dipoles=None):
        """Beam for field scans: explicit irradiance if set, else the first depth."""
        detuning = self.beams.detunings_Gamma[0]
        if self.beams.beam_irradiance_mW_per_cm2 is not None:
            return BeamConfig(transition, detuning, self.beams.beam_irradiance_mW_per_cm2 * 10.0, self.beams.theta)
        return irradiance_for_depth(transition, detuning, self.beams.depths_Er[0], self.beams.theta, dipoles)
