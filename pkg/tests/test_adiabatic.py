import dataclasses
import math

import numpy as np
import pytest

from core.adiabatic import (
    align_continuity,
    clipped_fraction,
    coefficient_table,
    diagonalize,
    diffusion_matrix,
    follow_state,
    pumping_rates,
    raw_diffusion,
    radiation_pressure,
    recoil_diffusion,
    well_characterization,
)
from core.errors import ScanResolutionError
from core.lattice_field import LatticeField, irradiance_for_depth


def cell_positions(field, rng, n):
    a_z, a_xy = field.constants
    return rng.random((n, 3)) * np.array([a_xy, a_xy, 2 * a_z])


def test_eigen_residual_and_orthonormality(lattice, rng):
    r = cell_positions(lattice, rng, 50)
    frame = diagonalize(lattice, r)
    H = lattice.config.light_shift_scale * frame.operators.A
    residual = H @ frame.states - frame.states * frame.potentials[:, None, :]
    norm = np.linalg.norm(H, axis=(-2, -1))
    assert np.max(np.linalg.norm(residual, axis=(-2, -1)) / norm) < 1e-10
    gram = np.conj(np.swapaxes(frame.states, -1, -2)) @ frame.states
    np.testing.assert_allclose(gram, np.broadcast_to(np.eye(9), gram.shape), atol=1e-12)


def test_red_detuned_potentials_are_non_positive(lattice, rng):
    frame = diagonalize(lattice, cell_positions(lattice, rng, 200), order=1)
    assert frame.potentials.max() <= 1e-9
    assert np.all(np.diff(frame.potentials, axis=-1) >= 0)


def test_lowest_state_at_sigma_plus_site(lattice):
    frame = diagonalize(lattice, lattice.sigma_plus_site)
    assert frame.potentials[0] == pytest.approx(lattice.config.light_shift_scale, rel=1e-12)
    assert abs(frame.states[8, 0]) == pytest.approx(1.0, abs=1e-12)
    # adiabatic depth exceeds the diabatic modulation by 45/44 up to saturation corrections
    assert -frame.potentials[0] == pytest.approx(lattice.depth * 45 / 44, rel=0.05)


def test_zero_field(cesium, cesium_dipoles):
    field = LatticeField(irradiance_for_depth(cesium, -10.0, 0.0), cesium_dipoles)
    frame = diagonalize(field, np.array([0.3, 0.2, 0.1]))
    assert np.all(frame.potentials == 0)
    coeffs = coefficient_table(frame, field.config)
    assert np.all(coeffs.gamma == 0) and np.all(coeffs.F == 0) and np.all(coeffs.D == 0)


def test_gradient_matches_finite_differences(lattice, rng):
    h = 1e-6
    for r in cell_positions(lattice, rng, 10):
        frame = diagonalize(lattice, r, order=1)
        if np.any(frame.near_degenerate) or np.min(np.diff(frame.potentials)) < 1e-2:
            continue
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (diagonalize(lattice, r + e, order=1).potentials - diagonalize(lattice, r - e, order=1).potentials) / (2 * h)
            scale = max(np.abs(fd).max(), 1.0)
            np.testing.assert_allclose(frame.grad_potentials[:, i], fd, rtol=1e-6, atol=1e-6 * scale)


def test_pumping_sum_rule(lattice, rng):
    frame = diagonalize(lattice, cell_positions(lattice, rng, 100))
    gamma = pumping_rates(frame, lattice.config)
    assert np.all(gamma >= 0)
    expected = lattice.config.scattering_rate * np.real(
        np.einsum("...kn,...kl,...ln->...n", np.conj(frame.states), frame.operators.A, frame.states)
    )
    np.testing.assert_allclose(gamma.sum(axis=-1), expected, rtol=1e-10, atol=1e-12 * lattice.config.scattering_rate)


def test_stretched_state_departs_least(lattice):
    frame = diagonalize(lattice, lattice.sigma_plus_site)
    gamma = pumping_rates(frame, lattice.config)
    departure = gamma.sum(axis=-1) - np.diag(gamma)
    assert np.argmin(departure) == 0


def test_origin_rows_match_full_table(lattice, rng):
    frame = diagonalize(lattice, cell_positions(lattice, rng, 7))
    origin = np.array([0, 3, 8, 1, 1, 2, 5])
    full = coefficient_table(frame, lattice.config)
    rows = coefficient_table(frame, lattice.config, origin=origin)
    idx = np.arange(7)
    np.testing.assert_allclose(rows.gamma[:, 0], full.gamma[idx, origin], atol=1e-12)
    np.testing.assert_allclose(rows.F[:, 0], full.F[idx, origin], atol=1e-10)
    np.testing.assert_allclose(rows.D[:, 0], full.D[idx, origin], atol=1e-8)


def test_coefficients_are_phase_invariant(lattice, rng):
    frame = diagonalize(lattice, cell_positions(lattice, rng, 1)[0])
    phases = np.exp(1j * rng.uniform(0, 2 * np.pi, 9))
    rotated = dataclasses.replace(frame, states=frame.states * phases[None, :])
    a = coefficient_table(frame, lattice.config)
    b = coefficient_table(rotated, lattice.config)
    np.testing.assert_allclose(b.gamma, a.gamma, atol=1e-13 * np.abs(a.gamma).max())
    np.testing.assert_allclose(b.F, a.F, atol=1e-13 * np.abs(a.F).max())
    np.testing.assert_allclose(b.D, a.D, atol=1e-12 * np.abs(a.D).max())


def test_transverse_radiation_pressure_averages_out(lattice):
    # eps is even in x and y, so F_x and F_y of a given level are odd
    a_z, a_xy = lattice.constants
    n = 8
    axes = [np.arange(n) / n * L for L in (a_xy, a_xy, 2 * a_z)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    frame = diagonalize(lattice, grid)
    F = radiation_pressure(frame, lattice.config, origin=np.zeros(len(grid), dtype=int))[:, 0, 0]
    assert np.all(np.isfinite(F))
    assert np.abs(F[:, :2].mean(axis=0)).max() < 1e-6 * np.abs(F).max()


def test_recoil_term_at_sigma_plus_site(lattice):
    frame = diagonalize(lattice, lattice.sigma_plus_site)
    recoil = recoil_diffusion(frame, lattice.config, origin=np.array(0))[0, 0]
    assert np.allclose(recoil, np.diag(np.diag(recoil)), atol=1e-14)
    assert np.all(np.diag(recoil) >= 0)


def test_diffusion_psd_and_symmetric(lattice, rng):
    frame = diagonalize(lattice, cell_positions(lattice, rng, 100))
    D = diffusion_matrix(frame, lattice.config)
    scale = np.abs(D).max()
    np.testing.assert_allclose(D, np.swapaxes(D, -1, -2), atol=1e-12 * scale)
    w = np.linalg.eigvalsh(D)
    assert w.min() >= -1e-12 * scale


def test_lowest_state_diffusion_is_psd_before_clipping(lattice, rng):
    frame = diagonalize(lattice, cell_positions(lattice, rng, 200))
    D = raw_diffusion(frame, lattice.config, origin=np.zeros(200, dtype=int))[:, 0, 0]
    w = np.linalg.eigvalsh(D)
    assert np.all(w >= -1e-9 * np.abs(w).max(axis=-1, keepdims=True))


def test_clipped_fraction_counts_lost_diffusion():
    row = np.zeros((1, 2, 3, 3))
    row[0, 0] = np.diag([1.0, 1.0, 1.0])
    row[0, 1] = np.diag([0.5, 0.5, -0.2])
    np.testing.assert_allclose(clipped_fraction(row), [0.2 / 4.0])
    np.testing.assert_allclose(clipped_fraction(row[:, :1]), [0.0])


def test_continuity_identity(lattice, rng):
    r = cell_positions(lattice, rng, 1)[0]
    frame = diagonalize(lattice, r, order=1)
    cmap = align_continuity(frame, frame)
    np.testing.assert_array_equal(cmap.permutation, np.arange(9))
    np.testing.assert_allclose(cmap.phases, 1.0, atol=1e-12)
    assert not cmap.fallback


def test_continuity_small_step(lattice):
    start = lattice.sigma_plus_site + np.array([0.3, 0.1, 0.0])
    step = 1e-4 * 2 * math.pi
    previous = diagonalize(lattice, start, order=1)
    for k in range(1, 20):
        current = diagonalize(lattice, start + np.array([0, 0, k * step]), order=1)
        cmap = align_continuity(previous, current)
        np.testing.assert_array_equal(cmap.permutation, np.arange(9))
        previous = current


def test_continuity_detects_swap(lattice, rng):
    frame = diagonalize(lattice, cell_positions(lattice, rng, 1)[0], order=1)
    order = np.arange(9)
    order[[2, 5]] = [5, 2]
    swapped = dataclasses.replace(
        frame, states=frame.states[:, order] * 1j, potentials=frame.potentials[order],
    )
    cmap = align_continuity(frame, swapped)
    np.testing.assert_array_equal(cmap.permutation, order)
    np.testing.assert_allclose(cmap.phases, -1j, atol=1e-12)


def test_follow_state_keeps_identity(lattice, rng):
    r = cell_positions(lattice, rng, 5)
    frame = diagonalize(lattice, r, order=1)
    index = np.array([0, 1, 2, 3, 4])
    vectors = frame.states[np.arange(5), :, index]
    moved = diagonalize(lattice, r + 1e-5, order=1)
    new_index, new_vectors, fallbacks = follow_state(vectors, moved, index)
    np.testing.assert_array_equal(new_index, index)
    assert fallbacks == 0
    assert new_vectors.shape == (5, 9)


def _swapped_frame(lattice, rng, pair, degenerate):
    r = cell_positions(lattice, rng, 1)
    frame = diagonalize(lattice, r, order=1)
    order = np.arange(9)
    order[list(pair)] = order[list(pair[::-1])]
    near = np.zeros_like(frame.near_degenerate)
    if degenerate:
        near[:, min(pair)] = True
    # the state characters exchange while the energy order stays put
    return frame, dataclasses.replace(frame, states=frame.states[:, :, order], near_degenerate=near)


def test_follow_state_stays_on_level_through_crossing(lattice, rng):
    frame, crossed = _swapped_frame(lattice, rng, (0, 1), degenerate=False)
    index = np.array([0])
    new_index, new_vectors, turned = follow_state(frame.states[:, :, 0], crossed, index)
    np.testing.assert_array_equal(new_index, [0])
    np.testing.assert_allclose(new_vectors, crossed.states[:, :, 0])
    assert turned == 1


def test_follow_state_matches_inside_degenerate_pair(lattice, rng):
    frame, crossed = _swapped_frame(lattice, rng, (2, 3), degenerate=True)
    new_index, _, turned = follow_state(frame.states[:, :, 2], crossed, np.array([2]))
    np.testing.assert_array_equal(new_index, [3])
    assert turned == 0


@pytest.fixture(scope="module")
def well(lattice):
    return well_characterization(lattice)


def test_barrier_anisotropy(well):
    assert well.barrier_ratio == pytest.approx(1.65, rel=0.02)
    assert well.barrier_x > well.barrier_z > 0


def test_hessian_positive_definite(well):
    assert np.all(np.linalg.eigvalsh(well.hessian) > 0)
    assert np.all(well.omega > 0)
    assert np.all(well.reduced_omega > 0)


def test_minimum_at_sigma_plus_site(lattice, well):
    np.testing.assert_allclose(well.minimum, lattice.sigma_plus_site, atol=1e-6)


def test_coarse_scan_rejected(lattice):
    with pytest.raises(ScanResolutionError):
        well_characterization(lattice, points_per_constant=10)


def test_frequencies_scale_with_depth(cesium, cesium_dipoles):
    shallow = LatticeField(irradiance_for_depth(cesium, -10.0, 500.0), cesium_dipoles)
    deep = LatticeField(irradiance_for_depth(cesium, -10.0, 2000.0), cesium_dipoles)
    w_shallow = well_characterization(shallow, 32).omega
    w_deep = well_characterization(deep, 32).omega
    exact = math.sqrt(deep.config.light_shift_scale / shallow.config.light_shift_scale)
    np.testing.assert_allclose(w_deep / w_shallow, exact, rtol=1e-5)
    np.testing.assert_allclose(w_deep / w_shallow, 2.0, rtol=0.05)
