"""
Classical side: the Pekar functional, its optimal field configuration, the
minimizer on the mass sphere, and the mixed-state variant.
"""

# Standard library
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

# Third-party libraries
import numpy as np
import scipy.fft as sfft
from scipy.linalg import eigh
from scipy.sparse.linalg import LinearOperator, eigsh

# Local
from errors import NumericalFailure, ValidationError
from grid import (
    Field,
    Grid,
    POSITION,
    apply_multiplier,
    centroid,
    convolve,
    fourier_transform,
    laplacian_apply,
    laplacian_matrix,
    reflect,
    translate,
)

ROUNDING_FLOOR = 64 * np.finfo(float).eps
DENSE_EIGEN_LIMIT = 2048
MAX_ALTERNATIONS = 500
ALTERNATION_TOLERANCE = 1e-10


# -------------------- Parameter families --------------------
def zero_field(grid: Grid) -> Field:
    return Field.zeros(grid)


def gaussian_well(grid: Grid, depth: float, width: float, center: Optional[Sequence[float]] = None) -> Field:
    r = grid.periodic_distance(center)
    return Field(grid, depth * np.exp(-r ** 2 / (2.0 * width ** 2)))


def double_well(grid: Grid, depth: float, depth2: float, width: float, separation: float) -> Field:
    """Two Gaussian wells on the first axis, at center -/+ separation/2."""
    offset = np.zeros(grid.d)
    offset[0] = separation / 2.0
    left = gaussian_well(grid, depth, width, grid.center - offset)
    right = gaussian_well(grid, depth2, width, grid.center + offset)
    return left + right


def gaussian_interaction(grid: Grid, amplitude: float, width: float) -> Field:
    r = grid.periodic_distance(np.zeros(grid.d))
    return Field(grid, amplitude * np.exp(-r ** 2 / (2.0 * width ** 2)))


def cosine_packet(grid: Grid, amplitude: float, width: float, wavenumber: float) -> Field:
    r = grid.periodic_distance(np.zeros(grid.d))
    return Field(grid, amplitude * np.cos(wavenumber * r) * np.exp(-r ** 2 / (2.0 * width ** 2)))


# -------------------- Problem definition --------------------
@dataclass(frozen=True, eq=False)
class PekarProblem:
    grid: Grid
    V: Field
    v: Field
    mass: float = 1.0

    def __post_init__(self):
        for name, f in (("V", self.V), ("v", self.v)):
            if f.grid != self.grid or f.domain != POSITION:
                raise ValidationError(f"{name} must be a position field on the problem grid")
            if not f.is_real():
                raise ValidationError(f"{name} must be real-valued")
        if not self.mass > 0:
            raise ValidationError(f"mass must be positive, got {self.mass}")
        object.__setattr__(self, "V", self.V.with_values(self.V.values.real))
        object.__setattr__(self, "v", self.v.with_values(self.v.values.real))

        potential = self.V.values.real
        sup = float(np.max(np.abs(potential), initial=0.0))
        if np.max(potential, initial=0.0) > 0:
            logging.warning("External potential has positive values; binding is no longer guaranteed")
        if sup > 0 and np.max(np.abs(potential[self.grid.boundary_mask()])) > 1e-3 * sup:
            logging.warning("External potential does not decay toward the box boundary; consider a larger L")

    @cached_property
    def potential_is_zero(self) -> bool:
        return not np.any(self.V.values)

    @cached_property
    def effective_potential(self) -> Field:
        return effective_potential(self.v)

    @cached_property
    def interaction_symbol(self) -> np.ndarray:
        """Raw DFT of W times h^d, so that W * rho = ifft(symbol * fft(rho))."""
        W = self.effective_potential.values.reshape(self.grid.shape)
        return sfft.fftn(W, axes=tuple(range(self.grid.d))).reshape(-1) * self.grid.cell_volume

    def convolve_w(self, density: np.ndarray) -> np.ndarray:
        """Real-valued (W * density) on the grid."""
        axes = tuple(range(self.grid.d))
        spectrum = sfft.fftn(np.asarray(density, dtype=float).reshape(self.grid.shape), axes=axes).reshape(-1)
        result = sfft.ifftn((self.interaction_symbol * spectrum).reshape(self.grid.shape), axes=axes)
        return result.reshape(-1).real

    def with_potential(self, V: Field) -> "PekarProblem":
        return replace(self, V=V)

    def without_potential(self) -> "PekarProblem":
        return replace(self, V=zero_field(self.grid))

    def with_interaction(self, v: Field) -> "PekarProblem":
        return replace(self, v=v)


# -------------------- Functional --------------------
class EnergyTerms(NamedTuple):
    kinetic: float
    potential: float
    interaction: float

    @property
    def total(self) -> float:
        return self.kinetic + self.potential + self.interaction


def _check_on_grid(psi: Field, problem: PekarProblem):
    if psi.grid != problem.grid or psi.domain != POSITION:
        raise ValidationError("wavefunction must be a position field on the problem grid")


def effective_potential(v: Field) -> Field:
    """W(s) = int v(z) v(z + s) dz, equal to v * v for even v; W^ >= 0."""
    if not v.is_real():
        raise ValidationError("effective_potential requires a real interaction profile")
    W = convolve(v, reflect(v))
    return W.with_values(W.values.real)


def field_configuration(psi: Field, v: Field) -> Field:
    """u_psi(y) = -int v(x - y) |psi(x)|^2 dx, i.e. -|psi|^2 * v for even v."""
    psi._check_compatible(v)
    rho = psi.with_values(psi.density())
    u = -convolve(rho, reflect(v))
    if v.is_real():
        return u.with_values(u.values.real)
    return u


def energy_terms(psi: Field, problem: PekarProblem) -> EnergyTerms:
    _check_on_grid(psi, problem)
    h = problem.grid.cell_volume
    rho = psi.density()
    kinetic = psi.inner(laplacian_apply(psi)).real
    potential = h * float(np.dot(problem.V.values.real, rho))
    interaction = -h * float(np.dot(rho, problem.convolve_w(rho)))
    return EnergyTerms(kinetic, potential, interaction)


def pekar_energy(psi: Field, problem: PekarProblem) -> float:
    return energy_terms(psi, problem).total


def product_energy(psi: Field, u: Field, problem: PekarProblem) -> float:
    """Energy of the product state psi (x) xi(u)."""
    _check_on_grid(psi, problem)
    _check_on_grid(u, problem)
    h = problem.grid.cell_volume
    terms = energy_terms(psi, problem)
    rho = psi.with_values(psi.density())
    smeared = convolve(rho, reflect(problem.v)).values.real
    cross = 2.0 * h * float(np.dot(u.values.real, smeared))
    return terms.kinetic + terms.potential + u.mass() + cross


def pekar_gradient(psi: Field, problem: PekarProblem) -> Field:
    """Unconstrained L2 gradient 2(-Delta + V)psi - 4(W * |psi|^2)psi."""
    _check_on_grid(psi, problem)
    linear = laplacian_apply(psi).values + problem.V.values.real * psi.values
    mean_field = problem.convolve_w(psi.density())
    return psi.with_values(2.0 * linear - 4.0 * mean_field * psi.values)


# -------------------- Minimizer --------------------
@dataclass
class MinimizeOptions:
    max_iterations: int = 20000
    tolerance: float = 1e-8
    energy_tolerance: float = 1e-12
    preconditioner_shift: float = 1.0
    initial_step: float = 0.5
    max_step: float = 4.0
    armijo: float = 1e-4
    contraction: float = 0.5
    max_backtracks: int = 40
    polish_below: float = 1e-3
    initial_width: Optional[float] = None
    seed: int = 0
    record_trace: bool = True


@dataclass
class PekarResult:
    psi: Field
    energy: float
    u_psi: Field
    gradient_residual: float
    iterations: int
    converged: bool
    terms: EnergyTerms
    trace: List[Dict[str, float]] = field(default_factory=list)


def initial_guess(problem: PekarProblem, width: Optional[float] = None) -> Field:
    """Normalized Gaussian at the minimum of V, at the box center when V = 0."""
    grid = problem.grid
    if problem.potential_is_zero:
        center = grid.center
    else:
        center = grid.coordinates[int(np.argmin(problem.V.values.real))]
    sigma = width if width is not None else grid.L / 16.0
    r = grid.periodic_distance(center)
    return Field(grid, np.exp(-r ** 2 / (2.0 * sigma ** 2))).normalized(problem.mass)


def perturbed_guess(problem: PekarProblem, rng: np.random.Generator, width: Optional[float] = None,
                    strength: float = 0.1) -> Field:
    base = initial_guess(problem, width)
    grid = problem.grid
    noise = Field(grid, rng.standard_normal(grid.size))
    smoothing = np.exp(-grid.wavenumber_squared * (grid.L / 32.0) ** 2)
    noise = apply_multiplier(noise, smoothing)
    noise = noise.with_values(noise.values.real)
    scale = strength * base.norm() / max(noise.norm(), 1e-300)
    return (base + noise * scale).normalized(problem.mass)


def _retract(psi: Field, mass: float) -> Field:
    return psi.normalized(mass)


def _pin_centroid(psi: Field) -> Field:
    grid = psi.grid
    position = centroid(psi.density(), grid)
    if position is None:
        return psi
    return translate(psi, grid.center - position)


def _tangent_residual(psi: Field, problem: PekarProblem) -> Tuple[Field, Field, float]:
    gradient = pekar_gradient(psi, problem)
    tangent = gradient - psi * (psi.inner(gradient) / problem.mass)
    return gradient, tangent, tangent.norm()


def mean_field_operator(psi: Field, problem: PekarProblem, kinetic: Optional[np.ndarray] = None) -> np.ndarray:
    """Dense -Delta + V - 2 W * |psi|^2; the Pekar gradient is twice its action on psi."""
    kinetic = laplacian_matrix(problem.grid) if kinetic is None else kinetic
    return kinetic + np.diag(problem.V.values.real - 2.0 * problem.convolve_w(psi.density()))


def mean_field_orbital(psi: Field, problem: PekarProblem, kinetic: Optional[np.ndarray] = None) -> Field:
    """Lowest eigenvector of the mean-field operator at psi, phase-aligned with psi and of mass m."""
    grid = problem.grid
    if grid.size <= DENSE_EIGEN_LIMIT:
        _, vectors = eigh(mean_field_operator(psi, problem, kinetic), subset_by_index=[0, 0])
    else:
        potential = problem.V.values.real - 2.0 * problem.convolve_w(psi.density())
        operator = LinearOperator(
            (grid.size, grid.size),
            matvec=lambda x: laplacian_apply(Field(grid, x)).values.real + potential * x,
            dtype=float,
        )
        _, vectors = eigsh(operator, k=1, which="SA", v0=np.abs(psi.values), tol=0)
    vector = vectors[:, 0].astype(np.complex128)
    overlap = np.vdot(vector, psi.values)
    if abs(overlap) > 0:
        vector *= overlap / abs(overlap)
    return Field(grid, vector).normalized(problem.mass)


def minimize(problem: PekarProblem, opts: Optional[MinimizeOptions] = None,
             initial: Optional[Field] = None) -> PekarResult:
    """
    Preconditioned projected gradient descent on the sphere ||psi||^2 = m,
    finished by self-consistent mean-field steps.

    The search direction is the sphere-tangent gradient filtered by
    (shift + |k|^2)^(-1); steps are retracted onto the sphere and accepted
    by Armijo backtracking. Once the residual is below `polish_below`, or the
    line search stalls, psi is replaced by the lowest eigenvector of
    -Delta + V - 2 W * |psi|^2, a step that never raises the energy since W^ >= 0.
    When V = 0 the centroid of |psi|^2 is pinned to the box center after each step.

    Returns the last iterate with converged=False if max_iterations is hit.
    Raises NumericalFailure on a non-finite energy or residual.
    """
    opts = opts or MinimizeOptions()
    grid, mass = problem.grid, problem.mass
    pin = problem.potential_is_zero

    psi = initial_guess(problem, opts.initial_width) if initial is None else _retract(initial, mass)
    if pin:
        psi = _pin_centroid(psi)
    preconditioner = 1.0 / (opts.preconditioner_shift + grid.wavenumber_squared)
    kinetic = laplacian_matrix(grid) if grid.size <= DENSE_EIGEN_LIMIT else None

    energy = pekar_energy(psi, problem)
    step = opts.initial_step
    change = np.inf
    residual = np.inf
    converged = False
    trace: List[Dict[str, float]] = []
    iteration = 0

    for iteration in range(opts.max_iterations + 1):
        gradient, tangent, residual = _tangent_residual(psi, problem)
        if not (np.isfinite(energy) and np.isfinite(residual)):
            raise NumericalFailure(f"Pekar energy or residual is not finite at iteration {iteration}")
        if opts.record_trace:
            trace.append({"iteration": iteration, "energy": energy, "residual": residual, "step": step,
                          "mass": psi.mass()})
        if residual <= opts.tolerance and change <= opts.energy_tolerance:
            converged = True
            break
        if iteration == opts.max_iterations:
            break

        accepted = False
        trial, trial_energy = psi, energy
        if residual > opts.polish_below:
            direction = apply_multiplier(tangent, preconditioner)
            direction = direction - psi * (psi.inner(direction).real / mass)
            slope = gradient.inner(direction).real
            if slope <= 0:
                direction, slope = tangent, residual ** 2

            floor = ROUNDING_FLOOR * (1.0 + abs(energy) + abs(energy_terms(psi, problem).kinetic))
            t = step
            for _ in range(opts.max_backtracks):
                trial = _retract(psi - direction * t, mass)
                trial_energy = pekar_energy(trial, problem)
                if trial_energy <= energy - opts.armijo * t * slope:
                    accepted = True
                # Flat within rounding: only progress in the residual counts.
                elif trial_energy - energy <= floor and _tangent_residual(trial, problem)[2] < residual:
                    accepted = True
                if accepted:
                    break
                t *= opts.contraction
            if accepted:
                step = min(t / opts.contraction, opts.max_step)
            else:
                logging.debug(f"Line search stalled at iteration {iteration} (residual {residual:.3e})")

        if not accepted:
            trial = mean_field_orbital(psi, problem, kinetic)
            trial_energy = pekar_energy(trial, problem)

        change = abs(energy - trial_energy)
        psi, energy = trial, trial_energy
        if pin:
            psi = _pin_centroid(psi)
            energy = pekar_energy(psi, problem)
        if iteration % 500 == 0:
            logging.debug(f"iteration {iteration}: E = {energy:.14f}, residual = {residual:.3e}")

    if converged:
        logging.info(f"Pekar minimizer converged in {iteration} iterations: E = {energy:.12f}")
    else:
        logging.warning(f"Pekar minimizer stopped after {iteration} iterations with residual {residual:.3e}")

    return PekarResult(
        psi=psi,
        energy=pekar_energy(psi, problem),
        u_psi=field_configuration(psi, problem.v),
        gradient_residual=float(residual),
        iterations=iteration,
        converged=converged,
        terms=energy_terms(psi, problem),
        trace=trace,
    )


def pure_state_distance(a: Field, b: Field) -> float:
    """Trace-norm distance between the normalized projections onto a and b."""
    overlap = abs(a.inner(b)) ** 2 / (a.mass() * b.mass())
    return float(2.0 * np.sqrt(max(0.0, 1.0 - overlap)))


def minimizer_spread(problem: PekarProblem, opts: Optional[MinimizeOptions] = None, starts: int = 3) -> float:
    """Largest pairwise distance between minimizers found from perturbed starts."""
    opts = opts or MinimizeOptions()
    rng = np.random.default_rng(opts.seed)
    quiet = replace(opts, record_trace=False)
    found = [minimize(problem, quiet).psi]
    for _ in range(starts - 1):
        found.append(minimize(problem, quiet, initial=perturbed_guess(problem, rng, opts.initial_width)).psi)
    return max(
        (pure_state_distance(a, b) for i, a in enumerate(found) for b in found[i + 1:]),
        default=0.0,
    )


class BindingGap(NamedTuple):
    E_V: float
    E_0: float

    @property
    def gap(self) -> float:
        return self.E_0 - self.E_V


def binding_gap(problem: PekarProblem, opts: Optional[MinimizeOptions] = None) -> BindingGap:
    with_well = minimize(problem, opts)
    if problem.potential_is_zero:
        return BindingGap(with_well.energy, with_well.energy)
    free = minimize(problem.without_potential(), opts)
    gap = BindingGap(with_well.energy, free.energy)
    logging.info(f"Binding gap: E_V = {gap.E_V:.10f}, E_0 = {gap.E_0:.10f}, gap = {gap.gap:.3e}")
    return gap


# -------------------- Mixed states --------------------
@dataclass(frozen=True, eq=False)
class MixedState:
    weights: np.ndarray
    orbitals: Tuple[Field, ...]

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.orbitals) != weights.size or weights.size == 0:
            raise ValidationError("a mixed state needs one orbital per weight")
        if np.any(weights < -1e-14):
            raise ValidationError("mixed-state weights must be non-negative")
        grid = self.orbitals[0].grid
        matrix = np.array([u.values for u in self.orbitals])
        gram = grid.cell_volume * matrix.conj() @ matrix.T
        if np.max(np.abs(gram - np.eye(weights.size))) > 1e-10:
            raise ValidationError("mixed-state orbitals are not orthonormal")
        object.__setattr__(self, "weights", np.clip(weights, 0.0, None))
        object.__setattr__(self, "orbitals", tuple(self.orbitals))

    @property
    def rank(self) -> int:
        return self.weights.size

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights))

    def density(self) -> np.ndarray:
        return sum(w * u.density() for w, u in zip(self.weights, self.orbitals))


@dataclass
class MixedPekarResult:
    state: MixedState
    energy: float
    eigenvalue_ratio: float
    iterations: int
    converged: bool


def mixed_pekar_energy(gamma: MixedState, problem: PekarProblem) -> float:
    if abs(gamma.mass - problem.mass) > 1e-12 * max(1.0, problem.mass):
        raise ValidationError(f"mixed state has mass {gamma.mass}, expected {problem.mass}")
    for u in gamma.orbitals:
        _check_on_grid(u, problem)
    h = problem.grid.cell_volume
    linear = 0.0
    for weight, u in zip(gamma.weights, gamma.orbitals):
        hu = laplacian_apply(u).values + problem.V.values.real * u.values
        linear += weight * (h * np.vdot(u.values, hu)).real
    rho = gamma.density()
    return float(linear - h * np.dot(rho, problem.convolve_w(rho)))


def project_to_simplex(y: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection of y onto {x >= 0, sum x = total}."""
    u = np.sort(y)[::-1]
    cumulative = np.cumsum(u) - total
    index = np.arange(1, y.size + 1)
    active = u - cumulative / index > 0
    rho = index[active][-1]
    theta = cumulative[active][-1] / rho
    return np.maximum(y - theta, 0.0)


def _leading_coefficient(values: np.ndarray, grid: Grid) -> Tuple[float, float]:
    coefficients = fourier_transform(Field(grid, values)).values
    significant = np.flatnonzero(np.abs(coefficients) > 1e-8 * np.max(np.abs(coefficients)))
    first = coefficients[significant[0]] if significant.size else 0.0
    return (round(float(np.real(first)), 10), round(float(np.imag(first)), 10))


def _sorted_spectrum(weights: np.ndarray, orbitals: np.ndarray, grid: Grid, mass: float):
    keys = [(-round(w / mass, 12), _leading_coefficient(u, grid)) for w, u in zip(weights, orbitals)]
    order = sorted(range(weights.size), key=lambda j: keys[j])
    return weights[order], orbitals[order]


def _orthonormalize(orbitals: np.ndarray, h: float) -> np.ndarray:
    """Modified Gram-Schmidt in the grid inner product, first row kept."""
    basis = orbitals.copy()
    for j in range(basis.shape[0]):
        for i in range(j):
            basis[j] -= h * np.vdot(basis[i], basis[j]) * basis[i]
        basis[j] /= np.sqrt(h * np.vdot(basis[j], basis[j]).real)
    return basis


def minimize_mixed(problem: PekarProblem, rank: int, opts: Optional[MinimizeOptions] = None) -> MixedPekarResult:
    """
    Alternating minimization of the mixed Pekar functional at fixed rank.

    Orbital step: the orbitals become the lowest eigenvectors of the mean-field
    operator -Delta + V - 2 W * rho, paired with the weights in descending order.
    Weight step: projected gradient on the simplex sum(lambda) = m.
    Once the weights are rank one the surviving orbital is polished by `minimize`.
    """
    if rank < 1:
        raise ValidationError(f"rank must be >= 1, got {rank}")
    opts = opts or MinimizeOptions()
    grid, mass = problem.grid, problem.mass
    h = grid.cell_volume

    if rank == 1:
        result = minimize(problem, opts)
        state = MixedState(np.array([mass]), (result.psi.normalized(1.0),))
        return MixedPekarResult(state, result.energy, 0.0, result.iterations, result.converged)
    if rank > grid.size:
        raise ValidationError(f"rank {rank} exceeds the grid size {grid.size}")

    base = laplacian_matrix(grid) + np.diag(problem.V.values.real)
    _, vectors = eigh(base, subset_by_index=[0, rank - 1])
    orbitals = vectors.T.astype(np.complex128) / np.sqrt(h)
    weights = np.full(rank, mass / rank)

    def energy_of(w: np.ndarray, u: np.ndarray) -> float:
        state = MixedState(w, tuple(Field(grid, row) for row in u))
        return mixed_pekar_energy(state, problem)

    energy = energy_of(weights, orbitals)
    rank_one = False
    iteration = 0
    for iteration in range(1, min(opts.max_iterations, MAX_ALTERNATIONS) + 1):
        rho = weights @ np.abs(orbitals) ** 2
        mean_field = base - 2.0 * np.diag(problem.convolve_w(rho))
        _, vectors = eigh(mean_field, subset_by_index=[0, rank - 1])
        orbitals = vectors.T.astype(np.complex128) / np.sqrt(h)

        rho = weights @ np.abs(orbitals) ** 2
        mean_field = base - 2.0 * np.diag(problem.convolve_w(rho))
        levels = h * np.einsum("ji,ik,jk->j", orbitals.conj(), mean_field, orbitals).real
        spread = float(levels.max() - levels.min())
        if spread > 0:
            weights = project_to_simplex(weights - (0.5 * mass / spread) * levels, mass)
        order = np.argsort(-weights, kind="stable")
        weights, orbitals = weights[order], orbitals[order]

        new_energy = energy_of(weights, orbitals)
        if not np.isfinite(new_energy):
            raise NumericalFailure(f"mixed Pekar energy is not finite at iteration {iteration}")
        change, energy = abs(energy - new_energy), new_energy
        rank_one = bool(np.all(weights[1:] == 0.0))
        if rank_one and change <= ALTERNATION_TOLERANCE:
            break

    converged = False
    if rank_one:
        polished = minimize(problem, opts, initial=Field(grid, orbitals[0] * np.sqrt(mass)))
        orbitals[0] = polished.psi.values / np.sqrt(mass)
        orbitals = _orthonormalize(orbitals, h)
        energy = polished.energy
        converged = polished.converged
    else:
        logging.warning(f"Mixed Pekar weights did not collapse to rank one after {iteration} alternations")

    weights, orbitals = _sorted_spectrum(weights, orbitals, grid, mass)
    state = MixedState(weights, tuple(Field(grid, row) for row in orbitals))
    ratio = float(weights[1] / weights[0]) if weights[0] > 0 else float("nan")
    logging.info(f"Mixed Pekar rank {rank}: E = {energy:.12f}, lambda2/lambda1 = {ratio:.3e}")
    return MixedPekarResult(state, energy, ratio, iteration, converged)
