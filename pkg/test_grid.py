import numpy as np
import pytest

from conftest import random_field
from errors import ConfigurationError
from grid import (
    Field,
    Grid,
    centroid,
    convolve,
    fourier_transform,
    gradient_apply,
    inverse_transform,
    laplacian_apply,
    laplacian_matrix,
    naive_dft,
    reflect,
    translate,
)


def gaussian(grid, width, center=None, normalized=False):
    r = grid.periodic_distance(np.zeros(grid.d) if center is None else center)
    values = np.exp(-r ** 2 / (2 * width ** 2))
    if normalized:
        values /= np.sqrt(2 * np.pi) * width
    return Field(grid, values)


@pytest.mark.parametrize("n, L", [(6, 1.0), (4, 1.0), (12, 1.0), (16, 0.0), (16, -2.0)])
def test_invalid_grids(n, L):
    with pytest.raises(ConfigurationError):
        Grid(n, L)


def test_grid_geometry():
    grid = Grid(16, 8.0)
    assert grid.spacing == 0.5
    assert grid.size == 16
    np.testing.assert_allclose(grid.axis_wavenumbers[:3], [0.0, 2 * np.pi / 8, 4 * np.pi / 8])
    assert grid.axis_wavenumbers[8] == pytest.approx(-np.pi * 16 / 8)
    assert grid.mode_weight == pytest.approx(2 * np.pi / 8)


def test_field_size_mismatch():
    with pytest.raises(ConfigurationError):
        Field(Grid(16, 8.0), np.zeros(15))


def test_constant_field_is_pure_dc():
    grid = Grid(32, 10.0)
    fhat = fourier_transform(Field(grid, np.full(grid.size, 2.5)))
    assert abs(fhat.values[0]) == pytest.approx(2.5 * grid.L / np.sqrt(2 * np.pi))
    assert np.abs(fhat.values[1:]).max() <= 1e-12 * abs(fhat.values[0])


def test_plane_wave_is_single_mode():
    grid = Grid(32, 10.0)
    f = Field.from_function(grid, lambda x: np.exp(2j * np.pi * x[:, 0] / grid.L))
    fhat = fourier_transform(f)
    peak = int(np.argmax(np.abs(fhat.values)))
    assert peak == 1
    others = np.delete(np.abs(fhat.values), 1)
    assert others.max() <= 1e-12 * abs(fhat.values[1])


def test_parseval_and_inverse(rng):
    grid = Grid(64, 12.0)
    for _ in range(5):
        f = random_field(grid, rng)
        fhat = fourier_transform(f)
        assert abs(f.norm() ** 2 - fhat.norm() ** 2) <= 1e-12 * f.norm() ** 2
        np.testing.assert_allclose(inverse_transform(fhat).values, f.values, atol=1e-12)


def test_matches_naive_dft(rng):
    grid = Grid(16, 5.0)
    f = random_field(grid, rng)
    np.testing.assert_allclose(fourier_transform(f).values, naive_dft(f).values, atol=1e-12)


def test_laplacian_of_constant_and_plane_wave():
    grid = Grid(32, 10.0)
    assert np.abs(laplacian_apply(Field(grid, np.ones(grid.size))).values).max() <= 1e-12
    k = 3 * 2 * np.pi / grid.L
    wave = Field.from_function(grid, lambda x: np.exp(1j * k * x[:, 0]))
    np.testing.assert_allclose(laplacian_apply(wave).values, k ** 2 * wave.values, atol=1e-10)


def test_laplacian_matches_finite_differences():
    grid = Grid(256, 32.0)
    f = gaussian(grid, 1.0, grid.center)
    h = grid.spacing
    stencil = -(np.roll(f.values, -1) - 2 * f.values + np.roll(f.values, 1)) / h ** 2
    assert np.abs(laplacian_apply(f).values - stencil).max() <= h ** 2


def test_laplacian_keeps_even_real_fields_real():
    grid = Grid(64, 16.0)
    result = laplacian_apply(gaussian(grid, 1.5))
    assert result.is_real(1e-12)


def test_laplacian_is_positive(rng):
    grid = Grid(64, 16.0)
    for _ in range(5):
        f = random_field(grid, rng)
        assert f.inner(laplacian_apply(f)).real >= -1e-12 * f.mass()


def test_laplacian_matrix_agrees_with_apply(rng):
    grid = Grid(32, 8.0)
    f = random_field(grid, rng, real=True)
    np.testing.assert_allclose(laplacian_matrix(grid) @ f.values.real, laplacian_apply(f).values.real, atol=1e-9)


def test_gradient_of_plane_wave():
    grid = Grid(32, 10.0)
    k = 2 * 2 * np.pi / grid.L
    wave = Field.from_function(grid, lambda x: np.sin(k * x[:, 0]))
    expected = k * np.cos(k * grid.axis)
    np.testing.assert_allclose(gradient_apply(wave).values.real, expected, atol=1e-10)


def test_convolve_with_delta_column():
    grid = Grid(64, 16.0)
    f = gaussian(grid, 1.0, grid.center)
    delta = np.zeros(grid.size)
    delta[0] = 1.0 / grid.spacing
    np.testing.assert_allclose(convolve(f, Field(grid, delta)).values, f.values, atol=1e-12)


def test_convolve_gaussians():
    grid = Grid(256, 32.0)
    s1, s2 = 1.0, 1.5
    result = convolve(gaussian(grid, s1, normalized=True), gaussian(grid, s2, normalized=True))
    expected = gaussian(grid, np.hypot(s1, s2), normalized=True)
    error = np.abs(result.values - expected.values).max() / np.abs(expected.values).max()
    assert error <= 1e-6


def test_convolve_is_symmetric(rng):
    grid = Grid(64, 16.0)
    f, g = random_field(grid, rng), random_field(grid, rng)
    assert (convolve(f, g) - convolve(g, f)).norm() <= 1e-12 * f.norm() * g.norm()


def test_convolve_rejects_other_grid():
    with pytest.raises(ConfigurationError):
        convolve(Field.zeros(Grid(16, 4.0)), Field.zeros(Grid(16, 5.0)))


def test_autocorrelation_spectrum_is_nonnegative():
    grid = Grid(128, 20.0)
    v = gaussian(grid, 1.0)
    packet = Field(grid, np.cos(2.0 * grid.periodic_distance(np.zeros(1))) * v.values.real)
    for kernel in (v, packet):
        spectrum = fourier_transform(convolve(kernel, kernel)).values
        assert spectrum.real.min() >= -1e-12 * np.abs(spectrum).max()


def test_reflect_and_translate():
    grid = Grid(32, 8.0)
    f = gaussian(grid, 0.7, [3.0])
    np.testing.assert_allclose(reflect(reflect(f)).values, f.values)
    np.testing.assert_allclose(reflect(gaussian(grid, 0.7)).values, gaussian(grid, 0.7).values, atol=1e-14)
    np.testing.assert_allclose(translate(f, [grid.spacing]).values, np.roll(f.values, 1), atol=1e-12)


def test_centroid_of_shifted_bump():
    grid = Grid(128, 16.0)
    f = gaussian(grid, 1.0, [5.0])
    assert centroid(f.density(), grid)[0] == pytest.approx(5.0, abs=1e-8)
    assert centroid(np.ones(grid.size), grid) is None
