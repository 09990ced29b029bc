"""
Reduced density matrices of composite states, moment diagnostics against the
Pekar prediction, and one-mode Husimi marginals.

Particle matrices (gamma, observables, sigma(f)) are expressed in the
orthonormal grid basis: the kernel value at (x, y) is matrix[x, y] / h^d.
field11 stores unscaled occupations Tr(Gamma c_l^dagger c_j), c = alpha a;
field10 and the moments use the rescaled operators.
"""

# Standard library
import logging
from dataclasses import dataclass, field
from math import factorial as int_factorial
from typing import Dict, List, Optional, Sequence, Tuple

# Third-party libraries
import numpy as np
import pandas as pd
from scipy import sparse
from scipy.special import factorial

# Local
from errors import ConfigurationError, UnsupportedRangeError, ValidationError
from fock import CompositeState, FockBasis, ModeSet, field_annihilation, field_creation
from grid import Field, Grid
from pekar import PekarResult

NORMALIZATION_TOLERANCE = 1e-10


# -------------------- Density operators --------------------
@dataclass(frozen=True, eq=False)
class DensityOperator:
    """
    Gamma = sum_k |Phi_k><Phi_k| on particle (x) Fock space.

    `factors` has shape (K, grid points, Fock dimension) and holds
    orthonormal-basis coefficients, so Tr Gamma = sum |factors|^2.
    """
    grid: Grid
    basis: FockBasis
    alpha: float
    factors: np.ndarray

    def __post_init__(self):
        factors = np.array(self.factors, dtype=np.complex128)
        if factors.ndim == 2:
            factors = factors[None]
        expected = (self.grid.size, self.basis.dimension)
        if factors.ndim != 3 or factors.shape[1:] != expected:
            raise ConfigurationError(f"density factors have shape {factors.shape}, expected (K,) + {expected}")
        object.__setattr__(self, "factors", factors)

    @classmethod
    def from_state(cls, state: CompositeState) -> "DensityOperator":
        return cls(state.grid, state.basis, state.alpha, state.coefficients()[None])

    @classmethod
    def from_mixture(cls, states: Sequence[CompositeState], weights: Sequence[float]) -> "DensityOperator":
        weights = np.asarray(weights, dtype=float)
        if np.any(weights < 0):
            raise ValidationError("mixture weights must be non-negative")
        first = states[0]
        stack = np.array([np.sqrt(w) * s.coefficients() for s, w in zip(states, weights)])
        return cls(first.grid, first.basis, first.alpha, stack)

    @property
    def rank_bound(self) -> int:
        return self.factors.shape[0]

    @property
    def dimension(self) -> int:
        return self.grid.size * self.basis.dimension

    def trace(self) -> float:
        return float(np.sum(np.abs(self.factors) ** 2))

    def matrix_factor(self) -> np.ndarray:
        """(dimension, K) matrix F with Gamma = F F^dagger."""
        return self.factors.reshape(self.rank_bound, -1).T

    def dense(self) -> np.ndarray:
        F = self.matrix_factor()
        return F @ F.conj().T

    def expectation(self, operator: sparse.spmatrix) -> complex:
        """Tr(A Gamma) for an operator on the composite space."""
        F = self.matrix_factor()
        return complex(np.sum(F.conj() * (operator @ F)))

    def min_eigenvalue(self) -> float:
        """Smallest eigenvalue of Gamma, zero when it is rank deficient."""
        F = self.matrix_factor()
        gram = F.conj().T @ F
        lowest = float(np.linalg.eigvalsh(gram)[0])
        return lowest if self.rank_bound >= self.dimension else min(lowest, 0.0)

    # Reduced quantities in the conventions of the module docstring.
    def particle_density(self) -> np.ndarray:
        return np.einsum("kxb,kyb->xy", self.factors, self.factors.conj())

    def fock_density(self, particle_weight: Optional[np.ndarray] = None) -> np.ndarray:
        """Tr_part[(w (x) 1) Gamma] for a particle weight w (default 1)."""
        stack = self.factors if particle_weight is None else self.factors * np.sqrt(particle_weight)[None, :, None]
        return np.einsum("kxb,kxc->bc", stack, stack.conj())

    def _lowered(self, mode: int) -> np.ndarray:
        """Unscaled c_j applied to every factor."""
        lowering = self.basis.lowering(mode)
        return np.stack([(lowering @ phi.T).T for phi in self.factors])

    def field11(self) -> np.ndarray:
        M = self.basis.modes
        lowered = [self._lowered(j) for j in range(M)]
        result = np.empty((M, M), dtype=np.complex128)
        for j in range(M):
            for l in range(M):
                result[j, l] = np.vdot(lowered[l], lowered[j])
        return result

    def field10(self) -> np.ndarray:
        return np.array([np.vdot(self.factors, self._lowered(j)) for j in range(self.basis.modes)]) / self.alpha

    def field_particle(self, f: np.ndarray) -> np.ndarray:
        """sigma(f) on the particle grid: Tr_F[Gamma(x, y) (a^dagger(f) + a(f))]."""
        operator = field_creation(self.basis, f, self.alpha) + field_annihilation(self.basis, f, self.alpha)
        result = np.zeros((self.grid.size, self.grid.size), dtype=np.complex128)
        for phi in self.factors:
            result += (operator @ phi.T).T @ phi.conj().T
        return result


@dataclass(frozen=True, eq=False)
class ReducedDensities:
    alpha: float
    gamma: np.ndarray
    field11: np.ndarray
    field10: np.ndarray
    sigma_kernel: np.ndarray

    @property
    def field11_scaled(self) -> np.ndarray:
        return self.field11 / self.alpha ** 2

    @property
    def field_number(self) -> float:
        """<N_alpha> = Tr(field11) / alpha^2."""
        return float(np.trace(self.field11).real) / self.alpha ** 2


def _require_normalized(density: DensityOperator):
    trace = density.trace()
    if abs(trace - 1.0) > NORMALIZATION_TOLERANCE:
        raise ValidationError(f"state is not normalized (trace {trace:.12f})")


def reduce_density(density: DensityOperator) -> ReducedDensities:
    _require_normalized(density)
    h = density.grid.cell_volume
    sigma = np.empty((density.grid.size, density.basis.modes), dtype=np.complex128)
    for j in range(density.basis.modes):
        lowered = density._lowered(j)
        diagonal = np.einsum("kxb,kxb->x", density.factors.conj(), lowered)
        sigma[:, j] = 2.0 * diagonal.real / (density.alpha * h)
    return ReducedDensities(
        alpha=density.alpha,
        gamma=density.particle_density(),
        field11=density.field11(),
        field10=density.field10(),
        sigma_kernel=sigma,
    )


def reduce(Psi: CompositeState) -> ReducedDensities:
    return reduce_density(DensityOperator.from_state(Psi))


def field_particle_matrix(Psi: CompositeState, f: np.ndarray) -> np.ndarray:
    return DensityOperator.from_state(Psi).field_particle(f)


def sigma_summability(densities: ReducedDensities, grid: Grid) -> Tuple[float, float]:
    """(sum_x h (sum_j |sigma(x, j)|^2)^(1/2), 1 + <N_alpha>)."""
    lhs = grid.cell_volume * float(np.sum(np.linalg.norm(densities.sigma_kernel, axis=1)))
    return lhs, 1.0 + densities.field_number


def trace_distance(gamma: np.ndarray, psi: Field) -> float:
    """||gamma - |psi><psi|||_1 with psi normalized to one."""
    p = np.sqrt(psi.grid.cell_volume) * psi.values / psi.norm()
    return float(np.sum(np.abs(np.linalg.eigvalsh(gamma - np.outer(p, p.conj())))))


# -------------------- Moments --------------------
@dataclass(frozen=True, eq=False)
class MomentRequest:
    observable: np.ndarray
    annihilate: Tuple[np.ndarray, ...] = ()
    create: Tuple[np.ndarray, ...] = ()
    allow_higher: bool = False

    def __post_init__(self):
        observable = np.asarray(self.observable, dtype=np.complex128)
        if observable.ndim != 2 or observable.shape[0] != observable.shape[1]:
            raise ValidationError("moment observable must be a square matrix")
        object.__setattr__(self, "observable", observable)
        object.__setattr__(self, "annihilate", tuple(np.asarray(f, dtype=np.complex128) for f in self.annihilate))
        object.__setattr__(self, "create", tuple(np.asarray(g, dtype=np.complex128) for g in self.create))
        if self.k + self.l > 2 and not self.allow_higher:
            raise UnsupportedRangeError(
                f"moments with k + l = {self.k + self.l} > 2 need allow_higher=True"
            )

    @property
    def k(self) -> int:
        return len(self.annihilate)

    @property
    def l(self) -> int:
        return len(self.create)


def moment(Psi: CompositeState, req: MomentRequest, alpha: Optional[float] = None) -> complex:
    """sqrt(k! l!) <Psi, A (x) a^dagger(g_1)...a^dagger(g_l) a(f_1)...a(f_k) Psi>."""
    if alpha is not None and not np.isclose(alpha, Psi.alpha, rtol=0, atol=1e-14):
        raise ValidationError(f"state was built at alpha={Psi.alpha}, moment requested at {alpha}")
    if req.observable.shape[0] != Psi.grid.size:
        raise ValidationError("moment observable does not match the particle grid")
    basis = Psi.basis
    operator = sparse.identity(basis.dimension, dtype=np.complex128, format="csr")
    for g in req.create:
        operator = operator @ field_creation(basis, g, Psi.alpha)
    for f in req.annihilate:
        operator = operator @ field_annihilation(basis, f, Psi.alpha)
    C = Psi.coefficients()
    value = np.vdot(C, req.observable @ (operator @ C.T).T)
    return complex(np.sqrt(int_factorial(req.k) * int_factorial(req.l)) * value)


def pekar_prediction(result: PekarResult, req: MomentRequest, modes: ModeSet) -> complex:
    """<psi, A psi> prod <f_j, u_psi> prod <u_psi, g_j> for a point mass at the minimizer."""
    psi = result.psi
    p = np.sqrt(psi.grid.cell_volume) * psi.values
    beta = modes.amplitudes(result.u_psi)
    value = np.vdot(p, req.observable @ p)
    for f in req.annihilate:
        value *= np.vdot(f, beta)
    for g in req.create:
        value *= np.vdot(beta, g)
    return complex(value)


def window_observable(grid: Grid, radius: float, center: Optional[Sequence[float]] = None) -> np.ndarray:
    return np.diag((grid.periodic_distance(center) <= radius).astype(float))


def default_probes(grid: Grid, modes: ModeSet, window_radius: float) -> Dict[str, MomentRequest]:
    """Identity, one position window and two low nonzero-momentum modes."""
    identity = np.eye(grid.size)
    first = 1 if modes.size > 1 else 0
    second = 2 if modes.size > 2 else first
    return {
        "identity": MomentRequest(identity),
        "window": MomentRequest(window_observable(grid, window_radius)),
        "annihilate_mode1": MomentRequest(identity, annihilate=(modes.unit_vector(first),)),
        "number_mode2": MomentRequest(identity, annihilate=(modes.unit_vector(second),),
                                      create=(modes.unit_vector(second),)),
    }


# -------------------- Convergence report --------------------
def convergence_report(sweep: Sequence[Tuple[float, CompositeState]], result: PekarResult, modes: ModeSet,
                       probes: Dict[str, MomentRequest], window: np.ndarray,
                       unique: bool = True) -> pd.DataFrame:
    """
    One row per alpha: trace distance to the Pekar minimizer, moment errors
    for every probe, and Tr[chi gamma chi] for the window profile chi.
    With unique=False the Pekar comparison columns are left as NaN.
    """
    alphas = [alpha for alpha, _ in sweep]
    if any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ValidationError("alpha values must be strictly increasing")
    for alpha, state in sweep:
        if state.grid != result.psi.grid or state.basis.modes != modes.size:
            raise ValidationError(f"state at alpha={alpha} does not share the sweep grid and modes")
    if not unique:
        logging.warning("Distinct Pekar minimizers found; skipping the comparison against the prediction")

    predictions = {name: pekar_prediction(result, req, modes) for name, req in probes.items()}
    rows = []
    for alpha, state in sweep:
        gamma = reduce(state).gamma
        row = {"alpha": alpha}
        row["trace_distance"] = trace_distance(gamma, result.psi) if unique else np.nan
        for name, req in probes.items():
            error = abs(moment(state, req) - predictions[name])
            row[f"moment_err_{name}"] = error if unique else np.nan
        row["mass_in_window"] = float(np.real(np.trace(window[:, None] * gamma * window[None, :])))
        rows.append(row)
    return pd.DataFrame(rows)


def monotone_verdict(values: Sequence[float], decreasing: bool = True, strict: bool = True) -> str:
    values = np.asarray(values, dtype=float)
    if values.size < 2 or np.any(np.isnan(values)):
        return "skipped"
    steps = np.diff(values) if not decreasing else -np.diff(values)
    ok = np.all(steps > 0) if strict else np.all(steps >= -1e-12)
    return "true" if ok else "false"


def convergence_verdicts(report: pd.DataFrame, trivial: float = 1e-12) -> Dict[str, str]:
    """Strict decrease of distances and non-trivial moment errors, non-decrease of window mass."""
    verdicts = {"trace_distance_decreasing": monotone_verdict(report["trace_distance"])}
    for column in [c for c in report.columns if c.startswith("moment_err_")]:
        if report[column].max() > trivial:
            verdicts[f"{column}_decreasing"] = monotone_verdict(report[column])
    verdicts["mass_in_window_nondecreasing"] = monotone_verdict(report["mass_in_window"], decreasing=False,
                                                                strict=False)
    return verdicts


# -------------------- Husimi marginals --------------------
@dataclass
class HusimiQuadrature:
    center: complex = 0.0
    half_width: float = 2.0
    points: int = 81

    @property
    def cell(self) -> float:
        return 2.0 * self.half_width / self.points

    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        offsets = -self.half_width + self.cell * (np.arange(self.points) + 0.5)
        center = complex(self.center)
        return center.real + offsets, center.imag + offsets


@dataclass
class HusimiReport:
    mode: int
    alpha: float
    real_axis: np.ndarray
    imag_axis: np.ndarray
    density: np.ndarray
    cell: float
    predicted: Optional[complex]
    radius: float
    mass_near_prediction: float
    total_mass: float
    coarse: bool
    notes: List[str] = field(default_factory=list)


def mode_marginal(Psi: CompositeState, mode: int) -> np.ndarray:
    """Reduced density matrix of one field mode in its occupation basis (N_tot + 1 levels)."""
    basis = Psi.basis
    if not 0 <= mode < basis.modes:
        raise ValidationError(f"mode {mode} outside [0, {basis.modes})")
    rest = np.delete(basis.states, mode, axis=1)
    if rest.shape[1]:
        _, group = np.unique(rest, axis=0, return_inverse=True)
        group = np.asarray(group).reshape(-1)
    else:
        group = np.zeros(basis.dimension, dtype=np.int64)
    levels = basis.states[:, mode]
    C = Psi.coefficients()
    table = np.zeros((C.shape[0], int(group.max()) + 1, basis.cutoff + 1), dtype=np.complex128)
    table[:, group, levels] = C
    table = table.reshape(-1, basis.cutoff + 1)
    return table.T @ table.conj()


def husimi_marginal(Psi: CompositeState, mode: int, quadrature: HusimiQuadrature, alpha: Optional[float] = None,
                    predicted: Optional[complex] = None, radius: Optional[float] = None) -> HusimiReport:
    """
    Husimi density of one mode in the rescaled amplitude plane,
    Q(beta) = (alpha^2 / pi) <alpha beta| rho_j |alpha beta>, so that the
    integral of Q over the plane is one (epsilon = alpha^-2).
    """
    alpha = Psi.alpha if alpha is None else alpha
    if not np.isclose(alpha, Psi.alpha, rtol=0, atol=1e-14):
        raise ValidationError(f"state was built at alpha={Psi.alpha}, Husimi requested at {alpha}")
    rho = mode_marginal(Psi, mode)
    real_axis, imag_axis = quadrature.axes()
    beta = real_axis[None, :] + 1j * imag_axis[:, None]
    z = alpha * beta.reshape(-1)
    levels = np.arange(rho.shape[0])
    overlaps = np.exp(-0.5 * np.abs(z[:, None]) ** 2) * np.power(z[:, None], levels[None, :]) / np.sqrt(factorial(levels))
    values = np.einsum("pn,nm,pm->p", overlaps.conj(), rho, overlaps).real
    density = np.clip(values, 0.0, None).reshape(beta.shape) * alpha ** 2 / np.pi

    cell = quadrature.cell
    notes = []
    coarse = cell > 0.5 / alpha
    if coarse:
        logging.warning(f"Husimi cell {cell:.3g} is coarser than 0.5/alpha = {0.5 / alpha:.3g}")
        notes.append("coarse quadrature")
    radius = 3.0 / alpha if radius is None else radius
    if predicted is None:
        near = float("nan")
    else:
        near = float(np.sum(density[np.abs(beta - predicted) <= radius]) * cell ** 2)
    return HusimiReport(
        mode=mode,
        alpha=alpha,
        real_axis=real_axis,
        imag_axis=imag_axis,
        density=density,
        cell=cell,
        predicted=predicted,
        radius=radius,
        mass_near_prediction=near,
        total_mass=float(np.sum(density) * cell ** 2),
        coarse=coarse,
        notes=notes,
    )
