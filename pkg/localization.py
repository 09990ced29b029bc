"""
Localization of composite states in a spatial window.

A particle-side localizer q (multiplication by a profile in [0, 1]) and a
field-side contraction q_f on the mode space define the state Gamma_q through
the doubling isometry Y(Q), Q: f -> q_f f (+) sqrt(1 - q_f^2) f, followed by a
partial trace over the second Fock factor.
"""

# Standard library
import logging
from dataclasses import asdict, dataclass
from math import comb
from typing import Dict, List, Optional, Sequence

# Third-party libraries
import numpy as np
import pandas as pd
from scipy import sparse
from scipy.linalg import eigh

# Local
from densities import DensityOperator
from errors import CapacityError, ConfigurationError, ValidationError
from fock import CompositeState, FockBasis, ModeSet, fock_dimension, hamiltonian
from grid import Field, Grid, gradient_apply, laplacian_matrix
from pekar import PekarProblem

DEFAULT_CAPACITY = 200_000
SPECTRUM_TOLERANCE = 1e-12


# -------------------- Partition of unity --------------------
def smoothstep(t: np.ndarray, order: int = 2) -> np.ndarray:
    """Smoothstep whose first `order` derivatives vanish at both ends; order 2 is the quintic."""
    t = np.clip(t, 0.0, 1.0)
    return t ** (order + 1) * sum(comb(order + k, k) * comb(2 * order + 1, order - k) * (-t) ** k
                                  for k in range(order + 1))


@dataclass(frozen=True, eq=False)
class PartitionOfUnity:
    grid: Grid
    radius: float
    center: np.ndarray
    chi: np.ndarray
    eta: np.ndarray
    smoothness: int = 2

    @classmethod
    def around(cls, grid: Grid, radius: float, center: Optional[Sequence[float]] = None,
               smoothness: int = 2) -> "PartitionOfUnity":
        """chi = 1 inside radius R, 0 beyond 2R, chi^2 + eta^2 = 1 everywhere; C^smoothness across both edges."""
        if not radius > 0:
            raise ConfigurationError(f"window radius must be positive, got {radius}")
        if smoothness < 1:
            raise ConfigurationError(f"partition smoothness must be >= 1, got {smoothness}")
        if 2.0 * radius > grid.L / 2.0 + 1e-12:
            raise ConfigurationError(f"window 2R = {2 * radius} does not fit in half the box L/2 = {grid.L / 2}")
        center = grid.center if center is None else np.asarray(center, dtype=float)
        r = grid.periodic_distance(center)
        t = (r - radius) / radius
        angle = 0.5 * np.pi * smoothstep(t, smoothness)
        chi = np.cos(angle)
        eta = np.sin(angle)
        outside = t >= 1.0
        chi[outside], eta[outside] = 0.0, 1.0
        return cls(grid, float(radius), center, chi, eta, smoothness)

    def gradient_squared(self) -> np.ndarray:
        """|grad chi|^2 + |grad eta|^2 from spectral derivatives."""
        total = np.zeros(self.grid.size)
        for profile in (self.chi, self.eta):
            f = Field(self.grid, profile)
            for axis in range(self.grid.d):
                total += np.abs(gradient_apply(f, axis).values.real) ** 2
        return total


# -------------------- Field-side localizers --------------------
def _plane_waves(modes: ModeSet) -> np.ndarray:
    grid = modes.grid
    return np.exp(1j * grid.coordinates @ modes.wavevectors.T) / grid.L ** (grid.d / 2.0)


def _spectral_map(q: np.ndarray, fn) -> np.ndarray:
    values, vectors = eigh(0.5 * (q + q.conj().T))
    return (vectors * fn(values)) @ vectors.conj().T


def field_localizer(chi: np.ndarray, modes: ModeSet) -> np.ndarray:
    """Compression of multiplication by chi to the mode space, spectrum clipped to [0, 1]."""
    waves = _plane_waves(modes)
    compressed = modes.grid.cell_volume * waves.conj().T @ (chi[:, None] * waves)
    return _spectral_map(compressed, lambda x: np.clip(x, 0.0, 1.0))


def complement_localizer(q: np.ndarray) -> np.ndarray:
    """sqrt(1 - q^2)."""
    return _spectral_map(q, lambda x: np.sqrt(np.clip(1.0 - x ** 2, 0.0, None)))


def commutation_defect(chi: np.ndarray, modes: ModeSet) -> float:
    """||P chi^2 P - (P chi P)^2||, zero iff multiplication by chi leaves the mode space invariant."""
    waves = _plane_waves(modes)
    h = modes.grid.cell_volume
    first = h * waves.conj().T @ (chi[:, None] * waves)
    second = h * waves.conj().T @ ((chi ** 2)[:, None] * waves)
    return float(np.linalg.norm(second - first @ first, ord=2))


def validate_localizer(q: np.ndarray):
    q = np.asarray(q)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValidationError("field localizer must be a square matrix")
    if np.max(np.abs(q - q.conj().T), initial=0.0) > SPECTRUM_TOLERANCE:
        raise ValidationError("field localizer must be hermitian")
    spectrum = np.linalg.eigvalsh(0.5 * (q + q.conj().T))
    if spectrum[0] < -SPECTRUM_TOLERANCE or spectrum[-1] > 1.0 + SPECTRUM_TOLERANCE:
        raise ValidationError(f"field localizer spectrum [{spectrum[0]:.3g}, {spectrum[-1]:.3g}] leaves [0, 1]")


# -------------------- Doubling isometry --------------------
@dataclass(frozen=True, eq=False)
class DoublingIsometry:
    """
    Y(Q) from F(M modes, N_tot) into F(2M modes, N_tot). The doubled
    occupation (n_c, n_d) is identified with the pair of basis indices
    (first_index, second_index) of F (x) F.
    """
    basis: FockBasis
    doubled: FockBasis
    q: np.ndarray
    matrix: np.ndarray
    first_index: np.ndarray
    second_index: np.ndarray

    def apply(self, coefficients: np.ndarray) -> np.ndarray:
        """Map (grid points, D) coefficients to the (grid points, D, D) tensor of F (x) F."""
        image = coefficients @ self.matrix.T
        D = self.basis.dimension
        tensor = np.zeros((coefficients.shape[0], D, D), dtype=np.complex128)
        tensor[:, self.first_index, self.second_index] = image
        return tensor


def doubling_isometry(q: np.ndarray, basis: FockBasis) -> DoublingIsometry:
    q = np.asarray(q, dtype=np.complex128)
    if q.shape != (basis.modes, basis.modes):
        raise ValidationError(f"field localizer shape {q.shape} does not match {basis.modes} modes")
    validate_localizer(q)
    M = basis.modes
    Q = np.vstack([q, complement_localizer(q)])
    doubled = FockBasis(2 * M, basis.cutoff)
    creators = []
    for j in range(M):
        creator = sparse.csr_matrix((doubled.dimension,) * 2, dtype=np.complex128)
        for l in range(2 * M):
            if Q[l, j] != 0:
                creator = creator + Q[l, j] * doubled.raising(l)
        creators.append(creator)

    columns = np.zeros((basis.dimension, doubled.dimension), dtype=np.complex128)
    columns[0, 0] = 1.0
    for index in range(1, basis.dimension):
        state = basis.states[index]
        j = int(np.flatnonzero(state)[0])
        parent = list(state)
        parent[j] -= 1
        columns[index] = creators[j] @ columns[basis.index_of(parent)] / np.sqrt(state[j])

    first = np.array([basis.index_of(s[:M]) for s in doubled.states])
    second = np.array([basis.index_of(s[M:]) for s in doubled.states])
    return DoublingIsometry(basis, doubled, q, columns.T.copy(), first, second)


# -------------------- Localized states --------------------
@dataclass(frozen=True, eq=False)
class LocalizedState:
    density: DensityOperator
    q_particle: np.ndarray
    q_field: np.ndarray

    def trace(self) -> float:
        return self.density.trace()


def _check_particle_localizer(q_particle: np.ndarray, grid: Grid) -> np.ndarray:
    q = np.asarray(q_particle)
    if q.shape != (grid.size,):
        raise ValidationError(f"particle localizer needs {grid.size} values, got shape {q.shape}")
    if np.iscomplexobj(q):
        if np.max(np.abs(q.imag)) > 1e-14:
            raise ValidationError("particle localizer must be real")
        q = q.real
    if q.min() < -1e-14 or q.max() > 1.0 + 1e-14:
        raise ValidationError("particle localizer must take values in [0, 1]")
    return np.clip(q.astype(float), 0.0, 1.0)


def localize(Gamma: DensityOperator, q_particle: np.ndarray, q_field: np.ndarray,
             capacity: int = DEFAULT_CAPACITY) -> LocalizedState:
    """
    Gamma_q with Tr[(A (x) B) Gamma_q] = Tr[Y* (qAq (x) B (x) 1) Y Gamma].

    Raises CapacityError when the doubled composite space exceeds `capacity`.
    """
    grid, basis = Gamma.grid, Gamma.basis
    q = _check_particle_localizer(q_particle, grid)
    doubled_dimension = grid.size * fock_dimension(2 * basis.modes, basis.cutoff)
    if doubled_dimension > capacity:
        raise CapacityError(
            f"doubled space has dimension {doubled_dimension} > capacity {capacity}; "
            f"lower N_tot (= {basis.cutoff}) or the mode count (= {basis.modes})",
            parameter="N_tot",
            dimension=doubled_dimension,
        )
    isometry = doubling_isometry(q_field, basis)
    factors = []
    for phi in Gamma.factors:
        tensor = isometry.apply(phi) * q[:, None, None]
        for column in np.moveaxis(tensor, 2, 0):
            if np.any(column):
                factors.append(column)
    if not factors:
        factors.append(np.zeros((grid.size, basis.dimension), dtype=np.complex128))
    density = DensityOperator(grid, basis, Gamma.alpha, np.array(factors))
    return LocalizedState(density, q, np.asarray(q_field, dtype=np.complex128))


# -------------------- Identity checks --------------------
@dataclass
class LocalizationReport:
    """Max absolute deviations between both sides of each localized-density identity."""
    particle: float
    field: float
    interaction: float
    trace: float
    min_eigenvalue: float
    localized_trace: float
    complement_trace: float

    def max_deviation(self) -> float:
        return max(self.particle, self.field, self.interaction, self.trace)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _max_abs(a: np.ndarray) -> float:
    return float(np.max(np.abs(a), initial=0.0))


def verify_localization_identities(Gamma: DensityOperator, q_particle: np.ndarray, q_field: np.ndarray,
                                   capacity: int = DEFAULT_CAPACITY,
                                   test_functions: Optional[Sequence[np.ndarray]] = None) -> LocalizationReport:
    """
    Compare gamma_q with q gamma q, field11 of Gamma_q with q_f field11(q Gamma q) q_f,
    sigma_q(f) with q sigma(q_f f) q, and Tr Gamma_q + Tr Gamma_{sqrt(1-q^2)} with Tr Gamma.
    """
    local = localize(Gamma, q_particle, q_field, capacity)
    q, qf = local.q_particle, local.q_field
    complement = localize(Gamma, np.sqrt(np.clip(1.0 - q ** 2, 0.0, None)), complement_localizer(qf), capacity)
    compressed = DensityOperator(Gamma.grid, Gamma.basis, Gamma.alpha, Gamma.factors * q[None, :, None])

    gamma_q = local.density.particle_density()
    particle = _max_abs(gamma_q - q[:, None] * Gamma.particle_density() * q[None, :])
    field = _max_abs(local.density.field11() - qf @ compressed.field11() @ qf)

    M = Gamma.basis.modes
    if test_functions is None:
        test_functions = [np.eye(M)[j] for j in range(M)] + [np.ones(M) / np.sqrt(M)]
    interaction = 0.0
    for f in test_functions:
        lhs = local.density.field_particle(f)
        rhs = q[:, None] * Gamma.field_particle(qf @ f) * q[None, :]
        interaction = max(interaction, _max_abs(lhs - rhs))

    report = LocalizationReport(
        particle=particle,
        field=field,
        interaction=interaction,
        trace=abs(local.trace() + complement.trace() - Gamma.trace()),
        min_eigenvalue=local.density.min_eigenvalue(),
        localized_trace=local.trace(),
        complement_trace=complement.trace(),
    )
    logging.debug(f"Localization identities: max deviation {report.max_deviation():.3e}")
    return report


# -------------------- Energy splitting --------------------
@dataclass
class ImsReport:
    radius: float
    deviation: float
    gradient_bound: float
    gradient_constant: float
    kinetic: float
    kinetic_inside: float
    kinetic_outside: float
    localization_error: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def ims_check(gamma: np.ndarray, partition: PartitionOfUnity) -> ImsReport:
    """
    Residual of Tr(-Delta g) = Tr(-chi Delta chi g) + Tr(-eta Delta eta g) - Tr((|grad chi|^2 + |grad eta|^2) g)
    with the spectral Laplacian, and the measured constant C of the C/R^2 gradient bound.
    """
    gamma = np.asarray(gamma)
    trace = float(np.trace(gamma).real)
    if abs(trace - 1.0) > 1e-10:
        raise ValidationError(f"particle density must have unit trace, got {trace:.12f}")
    K = laplacian_matrix(partition.grid)
    chi, eta = partition.chi, partition.eta
    gradient = partition.gradient_squared()

    kinetic = float(np.sum(K * gamma.T).real)
    inside = float(np.sum((chi[:, None] * K * chi[None, :]) * gamma.T).real)
    outside = float(np.sum((eta[:, None] * K * eta[None, :]) * gamma.T).real)
    error = float(np.sum(gradient * np.diag(gamma).real))
    bound = float(gradient.max())
    return ImsReport(
        radius=partition.radius,
        deviation=abs(kinetic - inside - outside + error),
        gradient_bound=bound,
        gradient_constant=bound * partition.radius ** 2,
        kinetic=kinetic,
        kinetic_inside=inside,
        kinetic_outside=outside,
        localization_error=error,
    )


def energy_split_check(Psi: CompositeState, partitions: Sequence[PartitionOfUnity], problem: PekarProblem,
                       modes: ModeSet, free_problem: Optional[PekarProblem] = None,
                       capacity: int = DEFAULT_CAPACITY, field_identity: bool = False) -> pd.DataFrame:
    """
    Split defect Tr(H^V Gamma) - Tr(H^V Gamma_chi) - Tr(H^0 Gamma_eta) along a ladder of windows.

    The field side is localized with the compression of chi to the mode space,
    or with the identity when `field_identity` is set. CapacityError from
    localize propagates.
    """
    free_problem = problem.without_potential() if free_problem is None else free_problem
    basis, alpha = Psi.basis, Psi.alpha
    H_V = hamiltonian(problem, modes, basis, alpha).total.matrix
    H_0 = hamiltonian(free_problem, modes, basis, alpha).total.matrix
    Gamma = DensityOperator.from_state(Psi)
    energy = Gamma.expectation(H_V).real
    gamma = Gamma.particle_density()

    rows: List[Dict[str, float]] = []
    for partition in partitions:
        if field_identity:
            q_inside = np.eye(modes.size, dtype=np.complex128)
        else:
            q_inside = field_localizer(partition.chi, modes)
        inside = localize(Gamma, partition.chi, q_inside, capacity)
        outside = localize(Gamma, partition.eta, complement_localizer(q_inside), capacity)
        energy_inside = inside.density.expectation(H_V).real
        energy_outside = outside.density.expectation(H_0).real
        ims = ims_check(gamma, partition)
        rows.append({
            "radius": partition.radius,
            "mass_in_window": inside.trace(),
            "energy": energy,
            "energy_inside": energy_inside,
            "energy_outside": energy_outside,
            "split_defect": energy - energy_inside - energy_outside,
            "ims_deviation": ims.deviation,
            "gradient_bound": ims.gradient_bound,
            "gradient_constant": ims.gradient_constant,
            "commutation_defect": commutation_defect(partition.chi, modes),
        })
        logging.info(f"R={partition.radius:g}: mass in window {inside.trace():.6f}, "
                    f"split defect {rows[-1]['split_defect']:.3e}")
    return pd.DataFrame(rows)
