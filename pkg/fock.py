"""
Second-quantized side: occupation-number basis over a finite mode set,
rescaled ladder operators ([a, a^dagger] = 1/alpha^2), the polaron
Hamiltonian on particle (x) Fock space, Lanczos ground states and coherent
states.

Mode j carries the plane wave e_j(y) = L^(-d/2) exp(i k_j . y). A field u has
amplitude <e_j, u> = sqrt(w) u^(k_j) in mode j. A composite vector is stored
as grid amplitudes Psi(x, b) normalized by h^d sum |Psi|^2 = 1; its
linear-algebra vector is sqrt(h^d) Psi flattened in (x, b) order.
"""

# Standard library
import logging
from dataclasses import dataclass
from functools import cached_property
from math import comb
from typing import Dict, Iterator, NamedTuple, Optional, Sequence, Tuple, Union

# Third-party libraries
import numpy as np
from scipy import sparse
from scipy.linalg import eigh, eigh_tridiagonal
from scipy.sparse.linalg import ArpackNoConvergence, eigsh
from scipy.special import factorial

# Local
from errors import ConfigurationError, ConvergenceError, ValidationError
from grid import Field, Grid, POSITION, fourier_transform, laplacian_matrix
from pekar import PekarProblem

HERMITIAN_TOLERANCE = 1e-12
FULL_REORTHOGONALIZATION_LIMIT = 200_000
COHERENT_TRUNCATION_LIMIT = 0.01


# -------------------- Modes --------------------
@dataclass(frozen=True, eq=False)
class ModeSet:
    grid: Grid
    indices: np.ndarray

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if indices.size == 0:
            raise ConfigurationError("a mode set needs at least one mode")
        if np.unique(indices).size != indices.size:
            raise ConfigurationError("modes must be distinct")
        if indices.min() < 0 or indices.max() >= self.grid.size:
            raise ConfigurationError("mode index outside the dual lattice")
        object.__setattr__(self, "indices", indices)

    @classmethod
    def lowest(cls, grid: Grid, count: int, require_symmetric: bool = True) -> "ModeSet":
        """The `count` lowest-|k| modes; ties ordered with +k before -k."""
        if not 1 <= count <= grid.size:
            raise ConfigurationError(f"mode count must be in [1, {grid.size}], got {count}")
        ksq = grid.wavenumber_squared
        order = sorted(range(grid.size), key=lambda i: (round(float(ksq[i]), 10), tuple(-grid.wavevectors[i])))
        modes = cls(grid, np.array(order[:count]))
        if require_symmetric and not modes.is_symmetric:
            raise ConfigurationError(
                f"the {count} lowest modes are not closed under k -> -k; use an odd count in one dimension"
            )
        return modes

    @property
    def size(self) -> int:
        return self.indices.size

    @property
    def weight(self) -> float:
        return self.grid.mode_weight

    @property
    def wavevectors(self) -> np.ndarray:
        return self.grid.wavevectors[self.indices]

    @cached_property
    def negated_indices(self) -> np.ndarray:
        """Flat lattice index of -k_j for every mode."""
        multi = np.unravel_index(self.indices, self.grid.shape)
        negated = tuple((-m) % self.grid.n for m in multi)
        return np.ravel_multi_index(negated, self.grid.shape)

    @property
    def is_symmetric(self) -> bool:
        return set(self.negated_indices.tolist()) <= set(self.indices.tolist())

    def amplitudes(self, u: Field) -> np.ndarray:
        """<e_j, u> = sqrt(w) u^(k_j) for every retained mode."""
        if u.grid != self.grid or u.domain != POSITION:
            raise ConfigurationError("field is not a position field on the mode-set grid")
        return np.sqrt(self.weight) * fourier_transform(u).values[self.indices]

    def synthesize(self, amplitudes: np.ndarray) -> Field:
        """The field sum_j amplitudes_j e_j."""
        amplitudes = np.asarray(amplitudes, dtype=np.complex128).reshape(self.size)
        waves = np.exp(1j * self.grid.coordinates @ self.wavevectors.T) / self.grid.L ** (self.grid.d / 2.0)
        return Field(self.grid, waves @ amplitudes)

    def unit_vector(self, j: int) -> np.ndarray:
        e = np.zeros(self.size, dtype=np.complex128)
        e[j] = 1.0
        return e


def project_to_modes(f: Field, modes: ModeSet) -> Field:
    projected = modes.synthesize(modes.amplitudes(f))
    if f.is_real() and modes.is_symmetric:
        return projected.with_values(projected.values.real)
    return projected


def neglected_interaction_weight(v: Field, modes: ModeSet) -> float:
    """sum over discarded modes of w |v^(k)|^2."""
    spectrum = np.abs(fourier_transform(v).values) ** 2
    kept = np.zeros(v.grid.size, dtype=bool)
    kept[modes.indices] = True
    return float(modes.weight * np.sum(spectrum[~kept]))


def restrict_interaction(problem: PekarProblem, modes: ModeSet) -> PekarProblem:
    """The Pekar problem seen by the mode-truncated Hamiltonian."""
    return problem.with_interaction(project_to_modes(problem.v, modes))


# -------------------- Fock basis --------------------
def _compositions(total: int, parts: int) -> Iterator[Tuple[int, ...]]:
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def fock_dimension(modes: int, cutoff: int) -> int:
    return comb(modes + cutoff, modes)


class FockBasis:
    """Occupation vectors with total excitation <= cutoff, graded then lexicographic."""

    def __init__(self, modes: int, cutoff: int):
        if modes < 1:
            raise ConfigurationError(f"mode count must be >= 1, got {modes}")
        if cutoff < 0:
            raise ConfigurationError(f"cutoff must be >= 0, got {cutoff}")
        self.logger = logging.getLogger(__name__)
        self.modes = int(modes)
        self.cutoff = int(cutoff)

        states = [s for total in range(self.cutoff + 1) for s in _compositions(total, self.modes)]
        self.states = np.array(states, dtype=np.int64).reshape(-1, self.modes)
        self.states.flags.writeable = False
        self.totals = self.states.sum(axis=1)
        self._index: Dict[Tuple[int, ...], int] = {s: i for i, s in enumerate(states)}
        self._lowering: Dict[int, sparse.csr_matrix] = {}
        assert self.dimension == fock_dimension(self.modes, self.cutoff)
        self.logger.debug(f"Fock basis M={self.modes}, N_tot={self.cutoff}: dimension {self.dimension}")

    @property
    def dimension(self) -> int:
        return self.states.shape[0]

    def __len__(self) -> int:
        return self.dimension

    def __eq__(self, other) -> bool:
        return isinstance(other, FockBasis) and (self.modes, self.cutoff) == (other.modes, other.cutoff)

    def __hash__(self) -> int:
        return hash((self.modes, self.cutoff))

    def __repr__(self) -> str:
        return f"FockBasis(modes={self.modes}, cutoff={self.cutoff})"

    def index_of(self, occupation: Sequence[int]) -> int:
        key = tuple(int(n) for n in occupation)
        if key not in self._index:
            raise ValidationError(f"occupation {key} is outside the basis")
        return self._index[key]

    def safe_mask(self) -> np.ndarray:
        """States on which one creation operator stays inside the truncation."""
        return self.totals < self.cutoff

    def lowering(self, mode: int) -> sparse.csr_matrix:
        """Unscaled annihilation operator of `mode` (amplitude sqrt(n))."""
        if not 0 <= mode < self.modes:
            raise ValidationError(f"mode {mode} outside [0, {self.modes})")
        if mode not in self._lowering:
            rows, cols, vals = [], [], []
            for col, state in enumerate(self.states):
                n = state[mode]
                if n == 0:
                    continue
                target = list(state)
                target[mode] -= 1
                rows.append(self._index[tuple(target)])
                cols.append(col)
                vals.append(np.sqrt(n))
            dim = self.dimension
            self._lowering[mode] = sparse.csr_matrix((vals, (rows, cols)), shape=(dim, dim), dtype=np.complex128)
        return self._lowering[mode]

    def raising(self, mode: int) -> sparse.csr_matrix:
        return self.lowering(mode).T.tocsr()


# -------------------- Operators --------------------
@dataclass(frozen=True, eq=False)
class SparseOperator:
    matrix: sparse.csr_matrix
    hermitian: bool = False

    def __post_init__(self):
        matrix = sparse.csr_matrix(self.matrix, dtype=np.complex128)
        if matrix.shape[0] != matrix.shape[1]:
            raise ValidationError(f"operator must be square, got shape {matrix.shape}")
        object.__setattr__(self, "matrix", matrix)
        if self.hermitian:
            defect = self.hermitian_defect()
            if defect > HERMITIAN_TOLERANCE:
                raise ValidationError(f"operator flagged hermitian has |A - A^dagger| = {defect:.3e}")

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def hermitian_defect(self) -> float:
        difference = self.matrix - self.matrix.conj().T
        return float(abs(difference).max()) if difference.nnz else 0.0

    def expectation(self, vector: np.ndarray) -> complex:
        return complex(np.vdot(vector, self.matrix @ vector))

    def adjoint(self) -> "SparseOperator":
        return SparseOperator(self.matrix.conj().T.tocsr(), self.hermitian)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def __add__(self, other: "SparseOperator") -> "SparseOperator":
        return SparseOperator(self.matrix + other.matrix, self.hermitian and other.hermitian)


def ladder_operators(basis: FockBasis, mode: int, alpha: float) -> Tuple[SparseOperator, SparseOperator]:
    """(a_j, a_j^dagger) with [a_j, a_l^dagger] = delta_jl / alpha^2; `mode` is 0-based."""
    annihilation = SparseOperator(basis.lowering(mode) / alpha)
    return annihilation, annihilation.adjoint()


def number_operator(basis: FockBasis, alpha: float) -> SparseOperator:
    return SparseOperator(sparse.diags(basis.totals / alpha ** 2, format="csr"), hermitian=True)


def field_annihilation(basis: FockBasis, f: np.ndarray, alpha: float) -> sparse.csr_matrix:
    """a(f) = sum_j conj(f_j) a_j for a mode-coefficient vector f."""
    f = np.asarray(f, dtype=np.complex128).reshape(basis.modes)
    total = sparse.csr_matrix((basis.dimension, basis.dimension), dtype=np.complex128)
    for j in np.flatnonzero(f):
        total = total + np.conj(f[j]) * basis.lowering(j)
    return total / alpha


def field_creation(basis: FockBasis, g: np.ndarray, alpha: float) -> sparse.csr_matrix:
    """a^dagger(g) = sum_j g_j a_j^dagger."""
    return field_annihilation(basis, g, alpha).conj().T.tocsr()


# -------------------- Composite states --------------------
@dataclass(frozen=True, eq=False)
class CompositeState:
    grid: Grid
    basis: FockBasis
    alpha: float
    amplitudes: np.ndarray
    residual: Optional[float] = None

    def __post_init__(self):
        amplitudes = np.array(self.amplitudes, dtype=np.complex128)
        expected = (self.grid.size, self.basis.dimension)
        if amplitudes.shape != expected:
            raise ConfigurationError(f"composite amplitudes have shape {amplitudes.shape}, expected {expected}")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "amplitudes", amplitudes)

    @classmethod
    def from_vector(cls, grid: Grid, basis: FockBasis, alpha: float, vector: np.ndarray,
                    residual: Optional[float] = None) -> "CompositeState":
        amplitudes = np.asarray(vector).reshape(grid.size, basis.dimension) / np.sqrt(grid.cell_volume)
        return cls(grid, basis, alpha, amplitudes, residual)

    @classmethod
    def product(cls, psi: Field, fock_vector: np.ndarray, basis: FockBasis, alpha: float) -> "CompositeState":
        return cls(psi.grid, basis, alpha, np.outer(psi.values, fock_vector))

    @property
    def dimension(self) -> int:
        return self.amplitudes.size

    def coefficients(self) -> np.ndarray:
        """Orthonormal-basis coefficients, shape (grid points, Fock dimension)."""
        return np.sqrt(self.grid.cell_volume) * self.amplitudes

    def vector(self) -> np.ndarray:
        return self.coefficients().reshape(-1)

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector()))

    def normalized(self) -> "CompositeState":
        return CompositeState(self.grid, self.basis, self.alpha, self.amplitudes / self.norm(), self.residual)

    def with_phase(self, theta: float) -> "CompositeState":
        return CompositeState(self.grid, self.basis, self.alpha, self.amplitudes * np.exp(1j * theta), self.residual)


# -------------------- Hamiltonian --------------------
@dataclass(frozen=True, eq=False)
class PolaronHamiltonian:
    grid: Grid
    modes: ModeSet
    basis: FockBasis
    alpha: float
    particle: SparseOperator
    field: SparseOperator
    interaction: SparseOperator
    neglected_weight: float

    @cached_property
    def total(self) -> SparseOperator:
        return SparseOperator(self.particle.matrix + self.field.matrix + self.interaction.matrix, hermitian=True)

    @property
    def dimension(self) -> int:
        return self.total.dimension


def coupling_profiles(problem: PekarProblem, modes: ModeSet) -> np.ndarray:
    """g_j(x) = sqrt(w) v^(-k_j) exp(-i k_j . x), the coefficient of a_j^dagger; shape (M, grid points)."""
    grid = problem.grid
    spectrum = fourier_transform(problem.v).values
    phases = np.exp(-1j * modes.wavevectors @ grid.coordinates.T)
    return np.sqrt(modes.weight) * spectrum[modes.negated_indices][:, None] * phases


def hamiltonian(problem: PekarProblem, modes: ModeSet, basis: FockBasis, alpha: float) -> PolaronHamiltonian:
    """
    H = (-Delta + V) (x) 1 + 1 (x) N_alpha + sum_j (g_j(x) a_j^dagger + h.c.).

    Raises ValidationError for a mode set not closed under k -> -k or a
    basis built for a different number of modes.
    """
    if not alpha > 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    if modes.grid != problem.grid:
        raise ValidationError("mode set and problem live on different grids")
    if not modes.is_symmetric:
        raise ValidationError("mode set must be closed under k -> -k")
    if basis.modes != modes.size:
        raise ValidationError(f"basis has {basis.modes} modes, mode set has {modes.size}")

    grid = problem.grid
    single = sparse.csr_matrix(laplacian_matrix(grid) + np.diag(problem.V.values.real))
    fock_identity = sparse.identity(basis.dimension, dtype=np.complex128, format="csr")
    particle = sparse.kron(single, fock_identity, format="csr")
    number = sparse.diags(basis.totals / alpha ** 2, format="csr")
    field = sparse.kron(sparse.identity(grid.size, format="csr"), number, format="csr")

    interaction = sparse.csr_matrix((grid.size * basis.dimension,) * 2, dtype=np.complex128)
    for j, profile in enumerate(coupling_profiles(problem, modes)):
        term = sparse.kron(sparse.diags(profile, format="csr"), basis.raising(j) / alpha, format="csr")
        interaction = interaction + term + term.conj().T

    H = PolaronHamiltonian(
        grid=grid,
        modes=modes,
        basis=basis,
        alpha=float(alpha),
        particle=SparseOperator(particle, hermitian=True),
        field=SparseOperator(field, hermitian=True),
        interaction=SparseOperator(interaction.tocsr(), hermitian=True),
        neglected_weight=neglected_interaction_weight(problem.v, modes),
    )
    logging.debug(f"Hamiltonian alpha={alpha}: dimension {H.dimension}, nnz {H.total.matrix.nnz}")
    return H


# -------------------- Eigensolvers --------------------
def lanczos_lowest(matrix, start: np.ndarray, tol: float, krylov_dim: int = 80,
                   max_restarts: int = 500) -> Tuple[float, np.ndarray, float]:
    """
    Restarted Lanczos with full reorthogonalization for the lowest eigenpair.

    Each cycle builds a Krylov basis from the current Ritz vector; the cycle
    stops early on an invariant subspace. Raises ConvergenceError carrying the
    best residual if `max_restarts` cycles do not reach `tol`.
    """
    dim = start.size
    size_limit = min(krylov_dim, dim)
    vector = start / np.linalg.norm(start)
    best_residual = np.inf

    for restart in range(max_restarts):
        basis = np.zeros((size_limit, dim), dtype=np.complex128)
        basis[0] = vector
        alphas, betas = [], []
        for k in range(size_limit):
            w = matrix @ basis[k]
            a = float(np.vdot(basis[k], w).real)
            w = w - a * basis[k]
            if k > 0:
                w = w - betas[-1] * basis[k - 1]
            for _ in range(2):
                w = w - basis[:k + 1].T @ (basis[:k + 1].conj() @ w)
            alphas.append(a)
            b = float(np.linalg.norm(w))
            if k == size_limit - 1 or b <= 1e-14 * max(1.0, abs(a)):
                break
            betas.append(b)
            basis[k + 1] = w / b

        count = len(alphas)
        if count == 1:
            theta, weights = alphas[0], np.ones(1)
        else:
            values, vectors = eigh_tridiagonal(np.array(alphas), np.array(betas[:count - 1]),
                                               select="i", select_range=(0, 0))
            theta, weights = float(values[0]), vectors[:, 0]
        ritz = weights @ basis[:count]
        ritz /= np.linalg.norm(ritz)
        residual = float(np.linalg.norm(matrix @ ritz - theta * ritz))
        best_residual = min(best_residual, residual)
        logging.debug(f"Lanczos cycle {restart}: theta = {theta:.14f}, residual = {residual:.3e}")
        if residual <= tol:
            return theta, ritz, residual
        vector = ritz

    raise ConvergenceError(f"Lanczos did not reach residual {tol:.1e}", best_residual=best_residual)


def _fix_phase(vector: np.ndarray) -> np.ndarray:
    pivot = vector[int(np.argmax(np.abs(vector)))]
    return vector * (abs(pivot) / pivot)


def ground_state(H: PolaronHamiltonian, tol: float = 1e-8, trial: Optional[CompositeState] = None,
                 seed: int = 0, method: str = "auto") -> Tuple[float, CompositeState]:
    """
    Lowest eigenpair of the assembled Hamiltonian.

    method: "auto" (Lanczos with full reorthogonalization, ARPACK above the
    reorthogonalization limit), "lanczos", "arpack" or "dense".
    """
    operator = H.total
    if not operator.hermitian:
        raise ValidationError("ground_state requires a hermitian operator")
    if method == "dense":
        return dense_ground_state(H)

    rng = np.random.default_rng(seed)
    start = rng.standard_normal(operator.dimension) + 1j * rng.standard_normal(operator.dimension)
    start /= np.linalg.norm(start)
    if trial is not None:
        guess = trial.vector()
        start = guess / np.linalg.norm(guess) + 1e-3 * start

    if method == "arpack" or (method == "auto" and operator.dimension > FULL_REORTHOGONALIZATION_LIMIT):
        try:
            values, vectors = eigsh(operator.matrix, k=1, which="SA", v0=start, tol=tol / 10.0)
        except ArpackNoConvergence as exc:
            raise ConvergenceError(f"ARPACK did not converge: {exc}") from exc
        energy, vector = float(values[0]), vectors[:, 0] / np.linalg.norm(vectors[:, 0])
        residual = float(np.linalg.norm(operator.matrix @ vector - energy * vector))
    else:
        energy, vector, residual = lanczos_lowest(operator.matrix, start, tol)

    state = CompositeState.from_vector(H.grid, H.basis, H.alpha, _fix_phase(vector), residual=residual)
    logging.info(f"Ground state alpha={H.alpha:.6g}: E = {energy:.12f} (dimension {operator.dimension}, "
                f"residual {residual:.2e})")
    return energy, state


def dense_ground_state(H: PolaronHamiltonian) -> Tuple[float, CompositeState]:
    values, vectors = eigh(H.total.dense(), subset_by_index=[0, 0])
    vector = _fix_phase(vectors[:, 0])
    return float(values[0]), CompositeState.from_vector(H.grid, H.basis, H.alpha, vector, residual=0.0)


# -------------------- Coherent states --------------------
class CoherentState(NamedTuple):
    vector: np.ndarray
    truncation_error: float
    reliable: bool


def coherent_from_amplitudes(amplitudes: np.ndarray, basis: FockBasis, alpha: float) -> CoherentState:
    """Truncated displaced vacuum with unscaled amplitudes z_j = alpha * amplitudes_j."""
    z = alpha * np.asarray(amplitudes, dtype=np.complex128).reshape(basis.modes)
    states = basis.states
    terms = np.power(z[None, :], states) / np.sqrt(factorial(states))
    coefficients = np.exp(-0.5 * np.sum(np.abs(z) ** 2)) * np.prod(terms, axis=1)
    kept = float(np.sum(np.abs(coefficients) ** 2))
    truncation_error = max(0.0, 1.0 - kept)
    reliable = truncation_error <= COHERENT_TRUNCATION_LIMIT
    if not reliable:
        logging.warning(f"Coherent state loses {truncation_error:.3e} of its mass to the cutoff N_tot={basis.cutoff}")
    return CoherentState(coefficients / np.sqrt(kept), truncation_error, reliable)


def coherent_state(u: Field, modes: ModeSet, basis: FockBasis, alpha: float) -> CoherentState:
    return coherent_from_amplitudes(modes.amplitudes(u), basis, alpha)


class TrialEnergy(NamedTuple):
    energy: float
    mode_truncation: float
    fock_truncation: float
    state: CompositeState


def product_trial_energy(psi: Field, u: Field, H: PolaronHamiltonian) -> TrialEnergy:
    """Rayleigh quotient of psi (x) xi(u) under H, with both truncation budgets."""
    if abs(psi.mass() - 1.0) > 1e-10:
        raise ValidationError(f"trial wavefunction must be normalized, has mass {psi.mass()}")
    coherent = coherent_state(u, H.modes, H.basis, H.alpha)
    state = CompositeState.product(psi, coherent.vector, H.basis, H.alpha)
    energy = H.total.expectation(state.vector()).real
    return TrialEnergy(float(energy), H.neglected_weight, coherent.truncation_error, state)


def cutoff_rule(u: Union[Field, float], alpha: float, safety: float = 4.0) -> int:
    """
    N_tot = ceil(alpha^2 |u|^2 + s alpha |u| + s).

    The occupation of xi(alpha u) is Poisson with mean alpha^2 |u|^2 and
    standard deviation alpha |u|, so s standard deviations plus s excitations
    of slack keep the discarded tail small.
    """
    if safety < 3:
        raise ConfigurationError(f"cutoff safety must be >= 3, got {safety}")
    norm = u.norm() if isinstance(u, Field) else float(u)
    value = alpha ** 2 * norm ** 2 + safety * alpha * norm + safety
    return int(np.ceil(value - 1e-9))
