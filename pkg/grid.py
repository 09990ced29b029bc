"""
Periodic spatial grid, grid functions and the spectral operations shared by
the classical and the second-quantized sides.

Conventions
-----------
* Positions are x = h * (i_1, ..., i_d) with i in [0, n) on the torus [0, L)^d.
  The box center is L/2 on every axis.
* Wavevectors follow FFT ordering: k = 2 pi j / L, j = 0, 1, ..., n/2 - 1, -n/2, ..., -1.
* Mode coefficients are the quadrature of the unitary continuum transform,
      f^(k) = (2 pi)^(-d/2) h^d sum_x exp(-i k.x) f(x).
* Inner products: <f, g> = h^d sum conj(f) g in position space and
  w sum conj(f^) g^ in mode space, with w = (2 pi / L)^d. Hence ||f^|| = ||f||.
* Convolution is (f * g)(x) = h^d sum_y f(y) g(x - y). On the raw DFT this reads
  DFT(f * g) = h^d DFT(f) DFT(g); in mode coefficients (f * g)^ = (2 pi)^(d/2) f^ g^.
* laplacian_apply returns -Delta f, i.e. the Fourier multiplier |k|^2.
"""

# Standard library
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence

# Third-party libraries
import numpy as np
import scipy.fft as sfft

# Local
from errors import ConfigurationError

POSITION = "position"
MODE = "mode"


def _read_only(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


# -------------------- Grid --------------------
@dataclass(frozen=True)
class Grid:
    points_per_axis: int
    box_length: float
    dimension: int = 1

    def __post_init__(self):
        n = self.points_per_axis
        if isinstance(n, bool) or not isinstance(n, (int, np.integer)):
            raise ConfigurationError(f"points_per_axis must be an integer, got {n!r}")
        if n < 8 or n & (n - 1):
            raise ConfigurationError(f"points_per_axis must be a power of two >= 8, got {n}")
        if not float(self.box_length) > 0:
            raise ConfigurationError(f"box_length must be positive, got {self.box_length}")
        if self.dimension < 1:
            raise ConfigurationError(f"dimension must be >= 1, got {self.dimension}")

    @property
    def n(self) -> int:
        return int(self.points_per_axis)

    @property
    def L(self) -> float:
        return float(self.box_length)

    @property
    def d(self) -> int:
        return int(self.dimension)

    @property
    def spacing(self) -> float:
        return self.L / self.n

    @property
    def size(self) -> int:
        return self.n ** self.d

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.d

    @property
    def mode_weight(self) -> float:
        """Dual-lattice quadrature weight w = (2 pi / L)^d."""
        return (2.0 * np.pi / self.L) ** self.d

    @property
    def transform_scale(self) -> float:
        return self.cell_volume / (2.0 * np.pi) ** (self.d / 2.0)

    @property
    def center(self) -> np.ndarray:
        return np.full(self.d, self.L / 2.0)

    @cached_property
    def axis(self) -> np.ndarray:
        return _read_only(np.arange(self.n) * self.spacing)

    @cached_property
    def axis_wavenumbers(self) -> np.ndarray:
        return _read_only(2.0 * np.pi * sfft.fftfreq(self.n, d=self.spacing))

    @cached_property
    def coordinates(self) -> np.ndarray:
        """Positions as a (size, d) array in C order."""
        mesh = np.meshgrid(*([self.axis] * self.d), indexing="ij")
        return _read_only(np.stack([m.reshape(-1) for m in mesh], axis=1))

    @cached_property
    def wavevectors(self) -> np.ndarray:
        """Wavevectors as a (size, d) array in FFT order."""
        mesh = np.meshgrid(*([self.axis_wavenumbers] * self.d), indexing="ij")
        return _read_only(np.stack([m.reshape(-1) for m in mesh], axis=1))

    @cached_property
    def wavenumber_squared(self) -> np.ndarray:
        return _read_only(np.sum(self.wavevectors ** 2, axis=1))

    def periodic_displacement(self, center: Optional[Sequence[float]] = None) -> np.ndarray:
        """Minimum-image displacement x - center, shape (size, d)."""
        c = self.center if center is None else np.asarray(center, dtype=float).reshape(self.d)
        return (self.coordinates - c + self.L / 2.0) % self.L - self.L / 2.0

    def periodic_distance(self, center: Optional[Sequence[float]] = None) -> np.ndarray:
        return np.linalg.norm(self.periodic_displacement(center), axis=1)

    def boundary_mask(self) -> np.ndarray:
        """Points on the outermost ring of the box centered at L/2."""
        index = np.arange(self.n)
        edge = (index == 0) | (index == self.n - 1)
        mesh = np.meshgrid(*([edge] * self.d), indexing="ij")
        return np.logical_or.reduce([m.reshape(-1) for m in mesh])


# -------------------- Field --------------------
@dataclass(frozen=True, eq=False)
class Field:
    grid: Grid
    values: np.ndarray
    domain: str = POSITION

    def __post_init__(self):
        values = np.array(self.values, dtype=np.complex128).reshape(-1)
        if values.size != self.grid.size:
            raise ConfigurationError(
                f"field has {values.size} values but the grid has {self.grid.size} points"
            )
        if self.domain not in (POSITION, MODE):
            raise ConfigurationError(f"unknown field domain {self.domain!r}")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid, domain: str = POSITION) -> "Field":
        return cls(grid, np.zeros(grid.size, dtype=np.complex128), domain)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> "Field":
        """Sample fn on the (size, d) coordinate array."""
        return cls(grid, fn(grid.coordinates))

    @property
    def weight(self) -> float:
        return self.grid.cell_volume if self.domain == POSITION else self.grid.mode_weight

    def _check_compatible(self, other: "Field"):
        if other.grid != self.grid:
            raise ConfigurationError("fields live on different grids")
        if other.domain != self.domain:
            raise ConfigurationError(f"cannot combine {self.domain} and {other.domain} fields")

    def inner(self, other: "Field") -> complex:
        self._check_compatible(other)
        return complex(self.weight * np.vdot(self.values, other.values))

    def norm(self) -> float:
        return float(np.sqrt(self.weight * np.sum(np.abs(self.values) ** 2)))

    def mass(self) -> float:
        return self.norm() ** 2

    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def is_real(self, tol: float = 1e-14) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.values), initial=0.0)))
        return float(np.max(np.abs(self.values.imag), initial=0.0)) <= tol * scale

    def with_values(self, values: np.ndarray) -> "Field":
        return Field(self.grid, values, self.domain)

    def normalized(self, mass: float = 1.0) -> "Field":
        norm = self.norm()
        if norm == 0:
            raise ConfigurationError("cannot normalize the zero field")
        return self.with_values(self.values * (np.sqrt(mass) / norm))

    def __add__(self, other: "Field") -> "Field":
        self._check_compatible(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        self._check_compatible(other)
        return self.with_values(self.values - other.values)

    def __neg__(self) -> "Field":
        return self.with_values(-self.values)

    def __mul__(self, scalar: complex) -> "Field":
        return self.with_values(self.values * scalar)

    __rmul__ = __mul__


# -------------------- Spectral operations --------------------
def _require(f: Field, domain: str, op: str):
    if f.domain != domain:
        raise ConfigurationError(f"{op} expects a {domain} field, got {f.domain}")


def _axes(grid: Grid) -> tuple:
    return tuple(range(grid.d))


def _fft(grid: Grid, values: np.ndarray) -> np.ndarray:
    return sfft.fftn(values.reshape(grid.shape), axes=_axes(grid)).reshape(-1)


def _ifft(grid: Grid, values: np.ndarray) -> np.ndarray:
    return sfft.ifftn(values.reshape(grid.shape), axes=_axes(grid)).reshape(-1)


def fourier_transform(f: Field) -> Field:
    _require(f, POSITION, "fourier_transform")
    return Field(f.grid, _fft(f.grid, f.values) * f.grid.transform_scale, MODE)


def inverse_transform(fhat: Field) -> Field:
    _require(fhat, MODE, "inverse_transform")
    return Field(fhat.grid, _ifft(fhat.grid, fhat.values / fhat.grid.transform_scale))


def naive_dft(f: Field) -> Field:
    """O(size^2) reference transform with the same normalization as fourier_transform."""
    _require(f, POSITION, "naive_dft")
    grid = f.grid
    phases = np.exp(-1j * grid.wavevectors @ grid.coordinates.T)
    return Field(grid, phases @ f.values * grid.transform_scale, MODE)


def apply_multiplier(f: Field, symbol: np.ndarray) -> Field:
    """Apply the Fourier multiplier `symbol` (FFT order) to a position field."""
    _require(f, POSITION, "apply_multiplier")
    return f.with_values(_ifft(f.grid, symbol * _fft(f.grid, f.values)))


def laplacian_apply(f: Field) -> Field:
    """-Delta f."""
    return apply_multiplier(f, f.grid.wavenumber_squared)


def gradient_apply(f: Field, axis: int = 0) -> Field:
    """Spectral partial derivative along `axis`; the Nyquist mode is dropped."""
    grid = f.grid
    k = grid.wavevectors[:, axis].copy()
    nyquist = np.isclose(np.abs(k), np.pi * grid.n / grid.L)
    k[nyquist] = 0.0
    return apply_multiplier(f, 1j * k)


def convolve(f: Field, g: Field) -> Field:
    _require(f, POSITION, "convolve")
    f._check_compatible(g)
    grid = f.grid
    return f.with_values(_ifft(grid, _fft(grid, f.values) * _fft(grid, g.values)) * grid.cell_volume)


def reflect(f: Field) -> Field:
    """x -> -x on the torus, i.e. index i -> (-i) mod n on every axis."""
    _require(f, POSITION, "reflect")
    values = f.values.reshape(f.grid.shape)
    for axis in _axes(f.grid):
        values = np.roll(np.flip(values, axis=axis), 1, axis=axis)
    return f.with_values(values.reshape(-1))


def translate(f: Field, shift: Sequence[float]) -> Field:
    """Exact spectral translation, returns f(x - shift)."""
    grid = f.grid
    shift = np.asarray(shift, dtype=float).reshape(grid.d)
    return apply_multiplier(f, np.exp(-1j * grid.wavevectors @ shift))


def centroid(density: np.ndarray, grid: Grid) -> Optional[np.ndarray]:
    """Circular mean of a non-negative density on the torus; None when it is flat."""
    total = float(np.sum(density))
    if total <= 0:
        return None
    angles = 2.0 * np.pi * grid.coordinates / grid.L
    moments = np.exp(1j * angles).T @ density
    if np.any(np.abs(moments) <= 1e-12 * total):
        return None
    return (np.angle(moments) % (2.0 * np.pi)) * grid.L / (2.0 * np.pi)


def laplacian_matrix(grid: Grid) -> np.ndarray:
    """Dense real symmetric matrix of -Delta acting on grid values."""
    size = grid.size
    identity = np.eye(size).reshape(grid.shape + (size,))
    spectrum = sfft.fftn(identity, axes=_axes(grid))
    symbol = grid.wavenumber_squared.reshape(grid.shape + (1,))
    matrix = sfft.ifftn(symbol * spectrum, axes=_axes(grid)).reshape(size, size).real
    return 0.5 * (matrix + matrix.T)
