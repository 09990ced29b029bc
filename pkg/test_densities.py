from math import factorial

import numpy as np
import pytest

from conftest import random_state_vector
from errors import UnsupportedRangeError, ValidationError
from fock import CompositeState, FockBasis, coherent_from_amplitudes, coherent_state, restrict_interaction
from densities import (
    DensityOperator,
    HusimiQuadrature,
    MomentRequest,
    convergence_report,
    default_probes,
    field_particle_matrix,
    husimi_marginal,
    mode_marginal,
    moment,
    monotone_verdict,
    pekar_prediction,
    reduce,
    reduce_density,
    sigma_summability,
    trace_distance,
)
from pekar import gaussian_well, minimize


def vacuum(basis):
    e = np.zeros(basis.dimension, dtype=np.complex128)
    e[0] = 1.0
    return e


@pytest.fixture
def bump(small_grid):
    return gaussian_well(small_grid, 1.0, 1.0).normalized()


@pytest.fixture
def pekar_result(small_problem, small_modes):
    return minimize(restrict_interaction(small_problem, small_modes))


def coherent_product(result, modes, alpha, cutoff=16):
    basis = FockBasis(modes.size, cutoff)
    coherent = coherent_state(result.u_psi, modes, basis, alpha)
    return CompositeState.product(result.psi, coherent.vector, basis, alpha)


def test_product_with_vacuum_reduces_to_pure_state(bump):
    state = CompositeState.product(bump, vacuum(FockBasis(3, 2)), FockBasis(3, 2), 1.0)
    reduced = reduce(state)
    assert trace_distance(reduced.gamma, bump) <= 1e-12
    assert np.abs(reduced.field11).max() <= 1e-15
    assert np.abs(reduced.field10).max() <= 1e-15
    assert sigma_summability(reduced, bump.grid) == (0.0, 1.0)


def test_coherent_product_field_marginals(bump):
    basis = FockBasis(3, 16)
    alpha = 1.5
    beta = np.array([0.2, -0.1j, 0.15 + 0.05j])
    state = CompositeState.product(bump, coherent_from_amplitudes(beta, basis, alpha).vector, basis, alpha)
    reduced = reduce(state)
    np.testing.assert_allclose(reduced.field10, beta, atol=1e-10)
    np.testing.assert_allclose(reduced.field11_scaled, np.outer(beta, beta.conj()), atol=1e-10)
    assert reduced.field_number == pytest.approx(np.sum(np.abs(beta) ** 2), abs=1e-10)

    f = np.array([1.0, 0.5j, 0.0])
    sigma = DensityOperator.from_state(state).field_particle(f)
    expected = reduced.gamma * 2 * np.vdot(f, beta).real
    np.testing.assert_allclose(sigma, expected, atol=1e-10)


def test_moments_of_product_coherent_state_match_prediction(pekar_result, small_modes):
    state = coherent_product(pekar_result, small_modes, 2.0)
    probes = default_probes(state.grid, small_modes, 2.0)
    for name, req in probes.items():
        assert moment(state, req) == pytest.approx(pekar_prediction(pekar_result, req, small_modes), abs=1e-10), name


def test_moment_order_and_alpha_checks(bump):
    identity = np.eye(bump.grid.size)
    e0 = np.array([1.0, 0.0, 0.0])
    with pytest.raises(UnsupportedRangeError):
        MomentRequest(identity, annihilate=(e0, e0), create=(e0,))
    req = MomentRequest(identity, annihilate=(e0, e0), create=(e0,), allow_higher=True)
    assert req.k == 2 and req.l == 1
    state = CompositeState.product(bump, vacuum(FockBasis(3, 2)), FockBasis(3, 2), 1.0)
    with pytest.raises(ValidationError):
        moment(state, MomentRequest(identity), alpha=2.0)
    with pytest.raises(ValidationError):
        moment(state, MomentRequest(np.eye(4)))


def test_moments_of_number_state(bump):
    basis = FockBasis(1, 3)
    two = np.zeros(basis.dimension, dtype=np.complex128)
    two[basis.index_of((2,))] = 1.0
    alpha = 1.0
    state = CompositeState.product(bump, two, basis, alpha)
    e = np.array([1.0])
    req = MomentRequest(np.eye(bump.grid.size), create=(e, e))
    assert moment(state, req) == pytest.approx(0.0)
    down = MomentRequest(np.eye(bump.grid.size), annihilate=(e, e))
    assert moment(state, down) == pytest.approx(0.0)
    number = MomentRequest(np.eye(bump.grid.size), annihilate=(e,), create=(e,))
    assert moment(state, number) == pytest.approx(2.0)


def test_mixture_trace_and_spectrum(bump):
    basis = FockBasis(2, 2)
    first = CompositeState.product(bump, vacuum(basis), basis, 1.0)
    excited = np.zeros(basis.dimension, dtype=np.complex128)
    excited[1] = 1.0
    second = CompositeState.product(bump, excited, basis, 1.0)
    mixture = DensityOperator.from_mixture([first, second], [0.3, 0.7])
    assert mixture.trace() == pytest.approx(1.0)
    assert mixture.min_eigenvalue() == 0.0
    reduced = reduce_density(mixture)
    assert reduced.field_number == pytest.approx(0.7)
    with pytest.raises(ValidationError):
        reduce_density(DensityOperator.from_mixture([first], [0.5]))
    with pytest.raises(ValidationError):
        DensityOperator.from_mixture([first, second], [-0.1, 1.1])


def test_mode_marginal_of_coherent_state_is_poissonian(bump):
    basis = FockBasis(2, 20)
    alpha = 2.0
    beta = np.array([0.5, 0.25j])
    state = CompositeState.product(bump, coherent_from_amplitudes(beta, basis, alpha).vector, basis, alpha)
    rho = mode_marginal(state, 0)
    z = alpha * beta[0]
    levels = np.arange(basis.cutoff + 1)
    amplitudes = np.exp(-abs(z) ** 2 / 2) * z ** levels / np.sqrt([factorial(n) for n in levels])
    np.testing.assert_allclose(rho, np.outer(amplitudes, amplitudes.conj()), atol=1e-10)
    with pytest.raises(ValidationError):
        mode_marginal(state, 2)


def test_husimi_of_vacuum(bump):
    basis = FockBasis(2, 4)
    alpha = 1.5
    state = CompositeState.product(bump, vacuum(basis), basis, alpha)
    report = husimi_marginal(state, 0, HusimiQuadrature(0.0, 2.0, 81), predicted=0.0)
    beta = report.real_axis[None, :] + 1j * report.imag_axis[:, None]
    expected = alpha ** 2 / np.pi * np.exp(-alpha ** 2 * np.abs(beta) ** 2)
    np.testing.assert_allclose(report.density, expected, atol=1e-12)
    assert not report.coarse
    assert report.total_mass == pytest.approx(1.0, abs=1e-3)
    assert report.mass_near_prediction == pytest.approx(1.0, abs=1e-3)


def test_husimi_of_coherent_state_is_centered_gaussian(bump):
    basis = FockBasis(1, 30)
    alpha = 2.0
    beta0 = 0.6 - 0.3j
    state = CompositeState.product(bump, coherent_from_amplitudes(np.array([beta0]), basis, alpha).vector,
                                   basis, alpha)
    report = husimi_marginal(state, 0, HusimiQuadrature(beta0, 1.5, 61), predicted=beta0)
    beta = report.real_axis[None, :] + 1j * report.imag_axis[:, None]
    expected = alpha ** 2 / np.pi * np.exp(-alpha ** 2 * np.abs(beta - beta0) ** 2)
    np.testing.assert_allclose(report.density, expected, atol=1e-6)
    assert report.radius == pytest.approx(1.5)
    assert report.mass_near_prediction >= 0.99


def test_husimi_flags_coarse_quadrature(bump):
    basis = FockBasis(1, 4)
    state = CompositeState.product(bump, vacuum(basis), basis, 2.0)
    report = husimi_marginal(state, 0, HusimiQuadrature(0.0, 2.0, 5))
    assert report.coarse
    assert report.notes == ["coarse quadrature"]
    assert np.isnan(report.mass_near_prediction)
    with pytest.raises(ValidationError):
        husimi_marginal(state, 0, HusimiQuadrature(), alpha=1.0)


def test_monotone_verdicts():
    assert monotone_verdict([3.0, 2.0, 1.0]) == "true"
    assert monotone_verdict([3.0, 3.0, 1.0]) == "false"
    assert monotone_verdict([1.0, 1.0, 2.0], decreasing=False, strict=False) == "true"
    assert monotone_verdict([1.0, 0.5], decreasing=False, strict=False) == "false"
    assert monotone_verdict([1.0]) == "skipped"
    assert monotone_verdict([1.0, np.nan]) == "skipped"


def test_convergence_report_columns(pekar_result, small_modes):
    sweep = [(alpha, coherent_product(pekar_result, small_modes, alpha)) for alpha in (1.0, 2.0)]
    probes = default_probes(pekar_result.psi.grid, small_modes, 2.0)
    window = np.ones(pekar_result.psi.grid.size)
    report = convergence_report(sweep, pekar_result, small_modes, probes, window)
    assert list(report["alpha"]) == [1.0, 2.0]
    assert report["trace_distance"].max() <= 1e-10
    assert report["mass_in_window"].to_numpy() == pytest.approx([1.0, 1.0])
    assert {f"moment_err_{name}" for name in probes} <= set(report.columns)

    skipped = convergence_report(sweep, pekar_result, small_modes, probes, window, unique=False)
    assert skipped["trace_distance"].isna().all()
    with pytest.raises(ValidationError):
        convergence_report(sweep[::-1], pekar_result, small_modes, probes, window)


def test_sigma_kernel_is_diagonal_of_field_particle_matrix(rng, small_grid):
    basis = FockBasis(2, 3)
    vector = random_state_vector(small_grid.size * basis.dimension, rng)
    state = CompositeState.from_vector(small_grid, basis, 1.5, vector)
    reduced = reduce(state)
    for j in range(basis.modes):
        f = np.zeros(basis.modes)
        f[j] = 1.0
        sigma = field_particle_matrix(state, f)
        np.testing.assert_allclose(sigma, sigma.conj().T, atol=1e-12)
        np.testing.assert_allclose(np.diag(sigma), small_grid.cell_volume * reduced.sigma_kernel[:, j], atol=1e-12)
    lhs, rhs = sigma_summability(reduced, small_grid)
    assert lhs <= 4 * rhs


def dense_lowering(basis, j):
    """c_j as a dense matrix built straight from the occupation table."""
    matrix = np.zeros((basis.dimension, basis.dimension))
    for column, occupation in enumerate(basis.states):
        if occupation[j] > 0:
            lowered = occupation.copy()
            lowered[j] -= 1
            matrix[basis.index_of(lowered), column] = np.sqrt(occupation[j])
    return matrix


@pytest.mark.parametrize("k,l", [(1, 0), (0, 1), (1, 1), (2, 1)])
def test_moments_match_dense_oracle(rng, small_grid, k, l):
    basis = FockBasis(3, 4)
    alpha = 1.7
    state = CompositeState.from_vector(small_grid, basis, alpha,
                                       random_state_vector(small_grid.size * basis.dimension, rng))
    A = rng.standard_normal((small_grid.size, small_grid.size))
    A = A + A.T
    fs = [rng.standard_normal(3) + 1j * rng.standard_normal(3) for _ in range(k)]
    gs = [rng.standard_normal(3) + 1j * rng.standard_normal(3) for _ in range(l)]

    fock = np.eye(basis.dimension, dtype=np.complex128)
    for g in gs:
        fock = fock @ sum(g[j] * dense_lowering(basis, j).T for j in range(3)) / alpha
    for f in fs:
        fock = fock @ sum(np.conj(f[j]) * dense_lowering(basis, j) for j in range(3)) / alpha
    vector = state.vector()
    expected = np.vdot(vector, np.kron(A, fock) @ vector)
    expected *= np.sqrt(factorial(len(fs)) * factorial(len(gs)))

    value = moment(state, MomentRequest(A, annihilate=tuple(fs), create=tuple(gs), allow_higher=True))
    assert abs(value - expected) <= 1e-12 * max(1.0, abs(expected))


@pytest.mark.parametrize("theta", [np.pi / 7, 1.0, 2.5])
def test_diagnostics_ignore_global_phase(rng, small_grid, small_modes, pekar_result, theta):
    basis = FockBasis(3, 3)
    state = CompositeState.from_vector(small_grid, basis, 1.5,
                                       random_state_vector(small_grid.size * basis.dimension, rng))
    rotated = state.with_phase(theta)
    plain, turned = reduce(state), reduce(rotated)
    for name in ("gamma", "field11", "field10", "sigma_kernel"):
        np.testing.assert_allclose(getattr(turned, name), getattr(plain, name), atol=1e-12, err_msg=name)
    assert trace_distance(turned.gamma, pekar_result.psi) == pytest.approx(
        trace_distance(plain.gamma, pekar_result.psi), abs=1e-12)
    for name, req in default_probes(small_grid, small_modes, 2.0).items():
        assert abs(moment(rotated, req) - moment(state, req)) <= 1e-12, name
    quadrature = HusimiQuadrature(points=21)
    np.testing.assert_allclose(husimi_marginal(rotated, 1, quadrature).density,
                               husimi_marginal(state, 1, quadrature).density, atol=1e-12)
