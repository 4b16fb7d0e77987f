"""
Time-of-flight thermometry on simulated ensembles.

The chain mirrors an absorption-imaging analysis: release the snapshot,
let it fly for tau, integrate the cloud onto one axis, fit a Gaussian to the
profile and turn the widths at two delays into a kinetic temperature
T_i = (M / k_B) (sigma_i^2(tau2) - sigma_i^2(tau1)) / (tau2^2 - tau1^2).
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.constants import k as k_B
from scipy.optimize import curve_fit, least_squares

from core.errors import (
    DegenerateInputError,
    EmptyFieldOfViewError,
    InvalidInputError,
    InvalidMeasurementError,
    RankDeficientError,
)

logger = logging.getLogger("nrol.thermometry")

AXES = ("x", "y", "z")
DEFAULT_BINS = 61
FIT_WINDOW = 4.0
MIN_ATOMS = 50
RESIDUAL_TOLERANCE = 1e-8
CHI2_ALARM = 3.0
MAX_REWEIGHTS = 50
REWEIGHT_TOLERANCE = 1e-6
MODEL_FLOOR = 1e-3  # counts per bin

# Simulated slopes (nK/E_R) and measured lines T = T0 [uK] + slope [uK/E_R] * U0
REFERENCE_SLOPES_nK = {"x": 35.0, "y": 35.0, "z": 13.0}
EXPERIMENT_LINES_uK = {"x": (0.55, 0.022), "z": (0.62, 0.012)}


@dataclass(frozen=True)
class DensityProfile:
    axis: str
    centers: np.ndarray
    counts: np.ndarray
    bin_width: float
    n_atoms: int
    clipped: int = 0


@dataclass(frozen=True)
class GaussianFit:
    center: float
    sigma: float
    amplitude: float
    offset: float
    residual_norm: float
    converged: bool
    sigma_err: float = 0.0
    reduced_chi2: float = 0.0

    @property
    def acceptable(self):
        return self.converged and self.reduced_chi2 <= CHI2_ALARM


@dataclass(frozen=True)
class TofTemperature:
    temperature: float
    error: float


@dataclass(frozen=True)
class AxisMeasurement:
    axis: str
    taus: tuple
    fits: tuple
    temperature: float
    error: float
    direct: float
    direct_err: float
    method: str

    @property
    def acceptable(self):
        return all(f.acceptable for f in self.fits)


@dataclass(frozen=True)
class ScalingFit:
    """T_i = T0 + xi U0 with T0 in uK and xi in nK/E_R."""
    axis: str
    label: str
    intercept: float
    slope: float
    intercept_err: float
    slope_err: float
    n_points: int


def _axis_index(axis):
    if axis in AXES:
        return AXES.index(axis)
    if axis in (0, 1, 2):
        return int(axis)
    raise InvalidInputError(f"unknown axis {axis!r}")


def ballistic_expand(snapshot, tau, gravity=0.0):
    """SI positions after a free flight of tau seconds from sudden release.

    Gravity accelerates along -z and shifts the cloud center only.
    """
    if tau < 0:
        raise InvalidInputError("tau must be non-negative")
    positions = snapshot.positions_si() + snapshot.velocities_si() * tau
    if gravity:
        positions = positions.copy()
        positions[:, 2] -= 0.5 * gravity * tau ** 2
    return positions


def project_profile(positions, axis, bins=DEFAULT_BINS, window=FIT_WINDOW):
    """Column-integrated density along one axis.

    The field of view spans +/- window standard deviations around the
    sample mean; atoms outside it are counted in ``clipped``.
    """
    positions = np.asarray(positions, dtype=float)
    if positions.ndim != 2 or len(positions) == 0:
        raise EmptyFieldOfViewError("no atoms to image")
    coords = positions[:, _axis_index(axis)]
    if len(coords) < MIN_ATOMS:
        logger.warning(f"Only {len(coords)} atoms in the profile; Gaussian fit will be noisy")

    center, spread = float(np.mean(coords)), float(np.std(coords))
    if spread == 0:
        spread = max(abs(center), 1.0) * 1e-9
    edges = np.linspace(center - window * spread, center + window * spread, bins + 1)
    counts, edges = np.histogram(coords, bins=edges)
    total = int(counts.sum())
    if total == 0:
        raise EmptyFieldOfViewError(f"field of view on {axis} holds no atoms")
    clipped = len(coords) - total
    if clipped:
        logger.debug(f"{clipped} atoms outside the {axis} field of view")
    return DensityProfile(
        axis=AXES[_axis_index(axis)],
        centers=0.5 * (edges[1:] + edges[:-1]),
        counts=counts.astype(float),
        bin_width=float(edges[1] - edges[0]),
        n_atoms=len(coords),
        clipped=clipped,
    )


def gaussian(x, amplitude, center, sigma, offset):
    return amplitude * np.exp(-(x - center) ** 2 / (2 * sigma ** 2)) + offset


def gaussian_fit(profile):
    """Poisson maximum-likelihood Gaussian plus offset, started from the profile moments.

    Least squares is repeated with every bin weighted by the current model
    count until the parameters settle, which solves the Poisson likelihood
    equations; weighting by the observed counts would bias sparse profiles
    narrow. A fit that fails to converge keeps its last iterate with
    ``converged`` False; a converged fit with Pearson reduced chi^2 above the
    alarm level is logged.
    """
    x, y = profile.centers, profile.counts
    weight = y.sum()
    if weight <= 0:
        raise EmptyFieldOfViewError("empty profile")
    scale = profile.bin_width
    c0 = float(np.sum(x * y) / weight)
    s0 = float(math.sqrt(max(np.sum((x - c0) ** 2 * y) / weight, scale ** 2)))
    p = np.array([y.max(), (c0 - x[0]) / scale, s0 / scale, 0.0])
    u = (x - x[0]) / scale
    noise = np.sqrt(np.maximum(y, 1.0))

    settled = False
    for _ in range(MAX_REWEIGHTS):
        result = least_squares(
            lambda q: (gaussian(u, *q) - y) / noise, p, method="lm",
            ftol=RESIDUAL_TOLERANCE, xtol=RESIDUAL_TOLERANCE, gtol=RESIDUAL_TOLERANCE,
        )
        change = float(np.max(np.abs(result.x - p) / (np.abs(p) + 1.0)))
        p = result.x
        noise = np.sqrt(np.maximum(gaussian(u, *p), MODEL_FLOOR))
        if change < REWEIGHT_TOLERANCE:
            settled = True
            break
    if not settled:
        logger.debug(f"{profile.axis} fit weights still moving after {MAX_REWEIGHTS} passes")

    amplitude, center, sigma, offset = p
    dof = max(len(x) - 4, 1)
    pearson = (gaussian(u, *p) - y) / noise
    chi2 = float(np.sum(pearson ** 2))
    sigma_err = float("nan")
    try:
        # inverse Fisher information of the Poisson likelihood
        cov = np.linalg.inv(result.jac.T @ result.jac)
        sigma_err = float(math.sqrt(max(cov[2, 2], 0.0)) * scale)
    except np.linalg.LinAlgError:
        logger.warning(f"Singular Jacobian in {profile.axis} Gaussian fit")

    fit = GaussianFit(
        center=float(x[0] + center * scale),
        sigma=float(abs(sigma) * scale),
        amplitude=float(amplitude),
        offset=float(offset),
        residual_norm=float(np.linalg.norm(pearson)),
        converged=bool(result.success) and settled and sigma != 0 and amplitude > 0,
        sigma_err=sigma_err,
        reduced_chi2=chi2 / dof,
    )
    if not fit.converged:
        logger.warning(f"Gaussian fit on {profile.axis} did not converge: {result.message}")
    elif fit.reduced_chi2 > CHI2_ALARM:
        logger.warning(f"Gaussian fit on {profile.axis}: reduced chi2 {fit.reduced_chi2:.2f}, profile is not Gaussian")
    return fit


def two_time_temperature(sigma1, sigma2, tau1, tau2, mass, sigma1_err=0.0, sigma2_err=0.0):
    """Kinetic temperature (K) from rms widths (m) at delays tau1 < tau2 (s)."""
    if tau1 == tau2:
        raise DegenerateInputError("two distinct time-of-flight delays are required")
    if tau1 < 0 or tau2 < tau1:
        raise InvalidInputError(f"delays must satisfy 0 <= tau1 < tau2, got {tau1}, {tau2}")
    if sigma2 < sigma1:
        raise InvalidMeasurementError(f"cloud shrank from {sigma1:.3e} m to {sigma2:.3e} m")
    span = tau2 ** 2 - tau1 ** 2
    temperature = mass / k_B * (sigma2 ** 2 - sigma1 ** 2) / span
    error = mass / k_B * math.hypot(2 * sigma2 * sigma2_err, 2 * sigma1 * sigma1_err) / span
    return TofTemperature(temperature=temperature, error=error)


def multi_time_temperature(sigmas, taus, mass, sigma_errs=None):
    """Slope of sigma^2 against tau^2 over more than two delays."""
    sigmas = np.asarray(sigmas, dtype=float)
    taus = np.asarray(taus, dtype=float)
    if len(np.unique(taus)) < 2:
        raise DegenerateInputError("two distinct time-of-flight delays are required")
    errs = None
    if sigma_errs is not None and np.all(np.asarray(sigma_errs) > 0):
        errs = 2 * sigmas * np.asarray(sigma_errs)
    popt, pcov = curve_fit(
        lambda t2, s0, v2: s0 + v2 * t2, taus ** 2, sigmas ** 2,
        sigma=errs, absolute_sigma=errs is not None,
    )
    slope_err = float(math.sqrt(pcov[1, 1])) if np.isfinite(pcov[1, 1]) else 0.0
    return TofTemperature(temperature=mass / k_B * popt[1], error=mass / k_B * slope_err)


def direct_temperature(snapshot):
    """M <v_i^2> / k_B per axis with the inter-atom standard error."""
    v2 = snapshot.velocities_si() ** 2
    n = len(v2)
    temperature = snapshot.mass * v2.mean(axis=0) / k_B
    error = snapshot.mass * v2.std(axis=0, ddof=1) / math.sqrt(n) / k_B if n > 1 else np.zeros(3)
    return temperature, error


def measure_snapshot(snapshot, taus, bins=DEFAULT_BINS, gravity=0.0, axes=AXES):
    """Expand, image and fit a snapshot at every delay; one result per axis."""
    taus = tuple(sorted(float(t) for t in taus))
    if len(set(taus)) < 2:
        raise DegenerateInputError(f"need two distinct delays, got {taus}")
    direct, direct_err = direct_temperature(snapshot)
    clouds = [ballistic_expand(snapshot, tau, gravity) for tau in taus]

    results = []
    for axis in axes:
        i = _axis_index(axis)
        fits = tuple(gaussian_fit(project_profile(cloud, axis, bins)) for cloud in clouds)
        if len(taus) == 2:
            t = two_time_temperature(
                fits[0].sigma, fits[1].sigma, taus[0], taus[1], snapshot.mass,
                fits[0].sigma_err, fits[1].sigma_err,
            )
            method = "tof_two_time"
        else:
            t = multi_time_temperature(
                [f.sigma for f in fits], taus, snapshot.mass, [f.sigma_err for f in fits],
            )
            method = "tof_multi_time"
        results.append(AxisMeasurement(
            axis=AXES[i], taus=taus, fits=fits,
            temperature=t.temperature, error=t.error,
            direct=float(direct[i]), direct_err=float(direct_err[i]),
            method=method,
        ))
        logger.info(
            f"{AXES[i]}: TOF {t.temperature * 1e6:.3f}({t.error * 1e6:.3f}) uK, "
            f"direct {direct[i] * 1e6:.3f}({direct_err[i] * 1e6:.3f}) uK"
        )
    return results


def _fit_line(depths, temps, errs):
    depths = np.asarray(depths, dtype=float)
    temps = np.asarray(temps, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if len(depths) < 3:
        raise InvalidInputError(f"scaling fit needs at least 3 points, got {len(depths)}")
    if len(np.unique(depths)) < 2:
        raise RankDeficientError("all records share one depth; slope undetermined")
    weighted = bool(np.all(errs > 0))
    popt, pcov = curve_fit(
        lambda u, t0, xi: t0 + xi * u, depths, temps,
        p0=(float(temps.mean()), 0.0),
        sigma=errs if weighted else None, absolute_sigma=weighted,
    )
    if not np.all(np.isfinite(pcov)):
        raise RankDeficientError("singular covariance in scaling fit")
    return popt, np.sqrt(np.diag(pcov))


def linear_scaling_fit(records, label="pooled"):
    """Inverse-variance weighted line T_i(U0) per axis; dict axis -> ScalingFit."""
    records = list(records)
    depths = [r.depth for r in records]
    fits = {}
    for i, axis in enumerate(AXES):
        temps = [r.temperature_uK[i] for r in records]
        errs = [r.temperature_err_uK[i] for r in records]
        (t0, xi), (t0_err, xi_err) = _fit_line(depths, temps, errs)
        fits[axis] = ScalingFit(
            axis=axis, label=label,
            intercept=float(t0), slope=float(xi * 1e3),
            intercept_err=float(t0_err), slope_err=float(xi_err * 1e3),
            n_points=len(records),
        )
    return fits


def scaling_table(records):
    """Per-detuning fits plus the fit pooled over all detunings."""
    records = list(records)
    table = []
    detunings = sorted({r.detuning for r in records}, reverse=True)
    for detuning in detunings:
        group = [r for r in records if r.detuning == detuning]
        if len({r.depth for r in group}) < 3:
            logger.info(f"Detuning {detuning:g}: fewer than 3 depths, no per-detuning fit")
            continue
        table.extend(linear_scaling_fit(group, label=f"{detuning:g}").values())
    if len(detunings) > 1:
        table.extend(linear_scaling_fit(records, label="pooled").values())
    return table


def anisotropy(fits, axis="x", reference="z"):
    """xi_axis / xi_reference with propagated error."""
    a, b = fits[axis], fits[reference]
    if b.slope == 0:
        raise RankDeficientError(f"zero {reference} slope")
    ratio = a.slope / b.slope
    err = abs(ratio) * math.hypot(
        a.slope_err / a.slope if a.slope else 0.0,
        b.slope_err / b.slope,
    )
    return ratio, err


def reference_deviation(fits):
    """Relative deviation of each fitted slope from the simulated reference slopes."""
    deviation = {}
    for axis, fit in fits.items():
        ref = REFERENCE_SLOPES_nK[axis]
        deviation[axis] = (fit.slope - ref) / ref
    return deviation


def experiment_line(axis, depth):
    """Measured temperature line (uK) at depth U0 (E_R), for x and z."""
    t0, slope = EXPERIMENT_LINES_uK[axis]
    return t0 + slope * np.asarray(depth, dtype=float)
