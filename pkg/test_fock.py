import numpy as np
import pytest
from scipy import sparse

from conftest import random_state_vector
from errors import ConfigurationError, ConvergenceError, ValidationError
from fock import (
    CompositeState,
    FockBasis,
    ModeSet,
    SparseOperator,
    coherent_from_amplitudes,
    cutoff_rule,
    dense_ground_state,
    fock_dimension,
    ground_state,
    hamiltonian,
    ladder_operators,
    lanczos_lowest,
    neglected_interaction_weight,
    number_operator,
    product_trial_energy,
    project_to_modes,
    restrict_interaction,
)
from grid import fourier_transform, laplacian_matrix
from pekar import gaussian_interaction, minimize


def test_basis_dimension_and_order():
    basis = FockBasis(3, 4)
    assert basis.dimension == fock_dimension(3, 4) == 35
    assert tuple(basis.states[0]) == (0, 0, 0)
    assert tuple(basis.states[1]) == (1, 0, 0)
    assert np.all(np.diff(basis.totals) >= 0)
    assert basis.index_of((0, 2, 2)) == basis.dimension - 3
    with pytest.raises(ValidationError):
        basis.index_of((5, 0, 0))


@pytest.mark.parametrize("alpha", [1.0, 2.5])
def test_rescaled_commutators_on_safe_states(alpha):
    basis = FockBasis(2, 5)
    safe = basis.safe_mask()
    for j in range(2):
        a_j, _ = ladder_operators(basis, j, alpha)
        for l in range(2):
            _, adag_l = ladder_operators(basis, l, alpha)
            commutator = (a_j.matrix @ adag_l.matrix - adag_l.matrix @ a_j.matrix).toarray()
            expected = np.eye(basis.dimension) * (j == l) / alpha ** 2
            np.testing.assert_allclose(commutator[:, safe], expected[:, safe], atol=1e-14)


def test_number_operator_is_sum_of_occupations():
    basis = FockBasis(3, 3)
    alpha = 1.7
    total = sparse.csr_matrix((basis.dimension, basis.dimension), dtype=np.complex128)
    for j in range(3):
        a, adag = ladder_operators(basis, j, alpha)
        total = total + adag.matrix @ a.matrix
    np.testing.assert_allclose(total.toarray(), number_operator(basis, alpha).dense(), atol=1e-14)


def test_sparse_operator_checks_hermiticity():
    with pytest.raises(ValidationError):
        SparseOperator(sparse.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]])), hermitian=True)


def test_mode_sets(small_grid):
    modes = ModeSet.lowest(small_grid, 3)
    np.testing.assert_allclose(sorted(modes.wavevectors[:, 0]), [-2 * np.pi / 8, 0.0, 2 * np.pi / 8])
    assert modes.is_symmetric
    with pytest.raises(ConfigurationError):
        ModeSet.lowest(small_grid, 2)
    assert not ModeSet.lowest(small_grid, 2, require_symmetric=False).is_symmetric


def test_hamiltonian_rejects_asymmetric_modes(small_problem, small_grid):
    modes = ModeSet.lowest(small_grid, 2, require_symmetric=False)
    with pytest.raises(ValidationError):
        hamiltonian(small_problem, modes, FockBasis(2, 2), 1.0)
    with pytest.raises(ValidationError):
        hamiltonian(small_problem, ModeSet.lowest(small_grid, 3), FockBasis(2, 2), 1.0)


def test_interaction_weight_splits_between_kept_and_neglected(small_problem, small_modes):
    v = small_problem.v
    kept = small_modes.weight * np.sum(np.abs(fourier_transform(v).values[small_modes.indices]) ** 2)
    assert kept + neglected_interaction_weight(v, small_modes) == pytest.approx(v.mass(), rel=1e-12)
    assert project_to_modes(v, small_modes).mass() == pytest.approx(kept, rel=1e-12)


def test_lanczos_matches_dense_oracle(small_problem, small_modes):
    H = hamiltonian(small_problem, small_modes, FockBasis(3, 3), 1.0)
    assert H.dimension == 16 * 20
    E_dense, dense_state = dense_ground_state(H)
    E, state = ground_state(H, tol=1e-10)
    assert abs(E - E_dense) <= 1e-10
    assert abs(np.vdot(state.vector(), dense_state.vector())) == pytest.approx(1.0, abs=1e-10)
    largest = state.vector()[np.argmax(np.abs(state.vector()))]
    assert abs(largest.imag) <= 1e-14 and largest.real > 0


def test_arpack_path_agrees(small_problem, small_modes):
    H = hamiltonian(small_problem, small_modes, FockBasis(3, 2), 1.5)
    E_dense, _ = dense_ground_state(H)
    E, _ = ground_state(H, tol=1e-10, method="arpack")
    assert abs(E - E_dense) <= 1e-9


def test_lanczos_reports_best_residual(rng):
    matrix = np.diag(np.arange(50, dtype=float))
    with pytest.raises(ConvergenceError) as excinfo:
        lanczos_lowest(matrix, random_state_vector(50, rng), tol=1e-14, krylov_dim=2, max_restarts=1)
    assert np.isfinite(excinfo.value.best_residual)


def test_decoupled_ground_state_is_vacuum(small_problem, small_modes):
    grid = small_problem.grid
    decoupled = small_problem.with_interaction(gaussian_interaction(grid, 0.0, 1.0))
    H = hamiltonian(decoupled, small_modes, FockBasis(3, 3), 2.0)
    E, state = ground_state(H, tol=1e-10)
    lowest = np.linalg.eigvalsh(laplacian_matrix(grid) + np.diag(decoupled.V.values.real))[0]
    assert abs(E - lowest) <= 1e-8
    vacuum_weight = np.sum(np.abs(state.coefficients()[:, 0]) ** 2)
    assert vacuum_weight >= 1 - 1e-10


def test_coherent_state_is_eigenvector_of_annihilation():
    basis = FockBasis(3, 14)
    alpha = 1.3
    amplitudes = np.array([0.3, -0.2j, 0.1 + 0.1j])
    coherent = coherent_from_amplitudes(amplitudes, basis, alpha)
    assert coherent.reliable
    assert np.linalg.norm(coherent.vector) == pytest.approx(1.0)
    for j in range(3):
        a, _ = ladder_operators(basis, j, alpha)
        assert a.expectation(coherent.vector) == pytest.approx(amplitudes[j], abs=1e-10)


def test_coherent_truncation_is_flagged():
    coherent = coherent_from_amplitudes(np.array([2.0]), FockBasis(1, 2), 1.0)
    assert not coherent.reliable
    assert coherent.truncation_error > 0.01


def test_cutoff_rule():
    assert cutoff_rule(1.0, 2.0, 4.0) == 16
    assert cutoff_rule(0.0, 3.0, 4.0) == 4
    with pytest.raises(ConfigurationError):
        cutoff_rule(1.0, 1.0, 2.0)


def test_product_trial_energy_reproduces_restricted_pekar_energy(small_problem, small_modes):
    restricted = restrict_interaction(small_problem, small_modes)
    result = minimize(restricted)
    cutoff = cutoff_rule(project_to_modes(result.u_psi, small_modes), 1.0, safety=10.0)
    H = hamiltonian(small_problem, small_modes, FockBasis(3, cutoff), 1.0)
    trial = product_trial_energy(result.psi, result.u_psi, H)
    assert trial.fock_truncation <= 1e-14
    assert trial.energy == pytest.approx(result.energy, abs=1e-8)
    E, _ = ground_state(H, tol=1e-9, trial=trial.state)
    assert E <= trial.energy + 1e-8


def test_composite_state_normalization(small_grid, small_problem):
    basis = FockBasis(3, 2)
    psi = minimize(small_problem).psi
    vacuum = np.zeros(basis.dimension)
    vacuum[0] = 1.0
    state = CompositeState.product(psi, vacuum, basis, 1.0)
    assert state.norm() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ConfigurationError):
        CompositeState(small_grid, basis, 1.0, np.zeros((small_grid.size, basis.dimension + 1)))
