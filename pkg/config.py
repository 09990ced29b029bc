"""
Experiment configuration: YAML files with nested sections, every key checked
against a fixed schema and anchored to its source line.

    grid:         {n, L}
    potential:    {family: gaussian-well | double-well | zero, ...}
    interaction:  {family: gaussian | cosine-packet, ...}
    mass, modes, cutoff_safety, alphas, seed, output
    solver:       {max_iterations, tolerance, energy_tolerance, lanczos_tolerance, preconditioner_shift}
    localization: {radii, capacity}
    husimi:       {mode, points, half_width, radius}
    probes:       {window_radius}
"""

# Standard library
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

# Third-party libraries
import yaml
from dotenv import load_dotenv

# Local
from errors import ConfigurationError, ValidationError
from fock import ModeSet
from grid import Grid
from pekar import PekarProblem, cosine_packet, double_well, gaussian_interaction, gaussian_well, zero_field

VERSION = "0.3.1"
SCHEMA = 1
ENV_WORKERS = "POLARON_LAB_WORKERS"
ENV_LOG_LEVEL = "POLARON_LAB_LOG_LEVEL"

REQUIRED = object()

POTENTIAL_FAMILIES = {
    "gaussian-well": ("depth", "width"),
    "double-well": ("depth", "depth2", "width", "separation"),
    "zero": (),
}
INTERACTION_FAMILIES = {
    "gaussian": ("amplitude", "width"),
    "cosine-packet": ("amplitude", "width", "wavenumber"),
}


# -------------------- Config records --------------------
@dataclass(frozen=True)
class GridSpec:
    n: int
    L: float


@dataclass(frozen=True)
class PotentialSpec:
    family: str
    depth: Optional[float] = None
    depth2: Optional[float] = None
    width: Optional[float] = None
    separation: Optional[float] = None


@dataclass(frozen=True)
class InteractionSpec:
    family: str
    amplitude: Optional[float] = None
    width: Optional[float] = None
    wavenumber: Optional[float] = None


@dataclass(frozen=True)
class SolverSpec:
    max_iterations: int = 20000
    tolerance: float = 1e-8
    energy_tolerance: float = 1e-12
    lanczos_tolerance: float = 1e-8
    preconditioner_shift: float = 1.0


@dataclass(frozen=True)
class LocalizationSpec:
    radii: Tuple[float, ...]
    capacity: int = 200_000


@dataclass(frozen=True)
class HusimiSpec:
    mode: int = 1
    points: int = 81
    half_width: float = 2.0
    radius: float = 3.0


@dataclass(frozen=True)
class ProbeSpec:
    window_radius: float


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridSpec
    potential: PotentialSpec
    interaction: InteractionSpec
    modes: int
    alphas: Tuple[float, ...]
    localization: LocalizationSpec
    probes: ProbeSpec
    mass: float = 1.0
    cutoff_safety: float = 4.0
    seed: int = 0
    solver: SolverSpec = field(default_factory=SolverSpec)
    husimi: HusimiSpec = field(default_factory=HusimiSpec)
    output: str = "results"

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for family_section in ("potential", "interaction"):
            data[family_section] = {k: v for k, v in data[family_section].items() if v is not None}
        data["alphas"] = list(self.alphas)
        data["localization"]["radii"] = list(self.localization.radii)
        return data

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @property
    def hash(self) -> str:
        return config_hash(self)

    def with_output(self, output: Union[str, Path]) -> "ExperimentConfig":
        return replace(self, output=str(output))


def config_hash(config: ExperimentConfig) -> str:
    """First 16 hex digits of SHA-256 over the canonical JSON of the resolved config, output excluded."""
    physics = {key: value for key, value in config.to_dict().items() if key != "output"}
    canonical = json.dumps(physics, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# -------------------- Parsing --------------------
def _line_map(node: yaml.Node, prefix: str = "", lines: Optional[Dict[str, int]] = None) -> Dict[str, int]:
    lines = {} if lines is None else lines
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            dotted = f"{prefix}{key_node.value}"
            lines[dotted] = key_node.start_mark.line + 1
            _line_map(value_node, dotted + ".", lines)
    return lines


class _Reader:
    """Typed access to the parsed document with line-anchored errors."""

    def __init__(self, data: Dict[str, Any], lines: Dict[str, int]):
        self.data = data
        self.lines = lines

    def line(self, key: str) -> Optional[int]:
        key = key.split("[")[0]
        while key:
            if key in self.lines:
                return self.lines[key]
            key = key.rpartition(".")[0]
        return None

    def fail(self, key: str, message: str):
        raise ConfigurationError(f"{key}: {message}", key=key, line=self.line(key))

    def section(self, name: str, required: bool = True) -> Dict[str, Any]:
        if name not in self.data:
            if required:
                raise ConfigurationError(f"missing required section '{name}'", key=name, line=None)
            return {}
        value = self.data[name]
        if not isinstance(value, dict):
            self.fail(name, "expected a mapping")
        return value

    def reject_unknown(self, section: Dict[str, Any], allowed, prefix: str = ""):
        for key in section:
            if key not in allowed:
                self.fail(f"{prefix}{key}", "unknown key")

    def get(self, section: Dict[str, Any], key: str, kind: str, default: Any = REQUIRED, prefix: str = "") -> Any:
        dotted = f"{prefix}{key}"
        if key not in section:
            if default is REQUIRED:
                raise ConfigurationError(f"missing required key '{dotted}'", key=dotted,
                                         line=self.line(prefix.rstrip(".")))
            return default
        return self.coerce(dotted, section[key], kind)

    def coerce(self, key: str, value: Any, kind: str) -> Any:
        if kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                self.fail(key, f"expected an integer, got {value!r}")
            return value
        if kind == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                self.fail(key, f"expected a finite number, got {value!r}")
            return float(value)
        if kind == "str":
            if not isinstance(value, str):
                self.fail(key, f"expected a string, got {value!r}")
            return value
        if kind == "floats":
            if not isinstance(value, list) or not value:
                self.fail(key, f"expected a non-empty list of numbers, got {value!r}")
            return tuple(self.coerce(f"{key}[{i}]", v, "float") for i, v in enumerate(value))
        raise AssertionError(kind)


def _family_section(reader: _Reader, name: str, families: Dict[str, Tuple[str, ...]]) -> Dict[str, Any]:
    section = reader.section(name)
    family = reader.get(section, "family", "str", prefix=f"{name}.")
    if family not in families:
        reader.fail(f"{name}.family", f"unknown family {family!r}, expected one of {sorted(families)}")
    reader.reject_unknown(section, ("family",) + families[family], f"{name}.")
    values = {"family": family}
    for key in families[family]:
        values[key] = reader.get(section, key, "float", prefix=f"{name}.")
    return values


def _positive(reader: _Reader, key: str, value: float, strict: bool = True):
    if value < 0 or (strict and value == 0):
        reader.fail(key, f"must be {'positive' if strict else 'non-negative'}, got {value}")


def load_config_text(text: str) -> ExperimentConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigurationError(f"malformed YAML: {getattr(e, 'problem', e)}",
                                 line=mark.line + 1 if mark is not None else None) from e
    if not isinstance(data, dict):
        raise ConfigurationError("configuration must be a mapping", line=1)
    reader = _Reader(data, _line_map(root))
    reader.reject_unknown(data, ("grid", "potential", "interaction", "mass", "modes", "cutoff_safety", "alphas",
                                 "seed", "solver", "localization", "husimi", "probes", "output"))

    grid_section = reader.section("grid")
    reader.reject_unknown(grid_section, ("n", "L"), "grid.")
    grid = GridSpec(n=reader.get(grid_section, "n", "int", prefix="grid."),
                    L=reader.get(grid_section, "L", "float", prefix="grid."))
    try:
        Grid(grid.n, grid.L)
    except ConfigurationError as e:
        key = "grid.n" if "points_per_axis" in e.message else "grid.L"
        reader.fail(key, e.message)

    potential = PotentialSpec(**_family_section(reader, "potential", POTENTIAL_FAMILIES))
    interaction = InteractionSpec(**_family_section(reader, "interaction", INTERACTION_FAMILIES))
    for spec, name in ((potential, "potential"), (interaction, "interaction")):
        for key in ("width", "separation"):
            if getattr(spec, key, None) is not None:
                _positive(reader, f"{name}.{key}", getattr(spec, key))

    mass = reader.get(data, "mass", "float", 1.0)
    _positive(reader, "mass", mass)
    modes = reader.get(data, "modes", "int")
    _positive(reader, "modes", modes)
    cutoff_safety = reader.get(data, "cutoff_safety", "float", 4.0)
    if cutoff_safety < 3:
        reader.fail("cutoff_safety", f"must be >= 3, got {cutoff_safety}")
    alphas = reader.get(data, "alphas", "floats")
    if alphas[0] <= 0 or any(b <= a for a, b in zip(alphas, alphas[1:])):
        reader.fail("alphas", "must be positive and strictly increasing")
    seed = reader.get(data, "seed", "int", 0)
    output = reader.get(data, "output", "str", "results")

    solver_section = reader.section("solver", required=False)
    reader.reject_unknown(solver_section, SolverSpec.__dataclass_fields__, "solver.")
    solver = SolverSpec(
        max_iterations=reader.get(solver_section, "max_iterations", "int", 20000, "solver."),
        tolerance=reader.get(solver_section, "tolerance", "float", 1e-8, "solver."),
        energy_tolerance=reader.get(solver_section, "energy_tolerance", "float", 1e-12, "solver."),
        lanczos_tolerance=reader.get(solver_section, "lanczos_tolerance", "float", 1e-8, "solver."),
        preconditioner_shift=reader.get(solver_section, "preconditioner_shift", "float", 1.0, "solver."),
    )
    for key, value in asdict(solver).items():
        _positive(reader, f"solver.{key}", value)

    localization_section = reader.section("localization", required=False)
    reader.reject_unknown(localization_section, ("radii", "capacity"), "localization.")
    localization = LocalizationSpec(
        radii=reader.get(localization_section, "radii", "floats", (grid.L / 8.0, grid.L / 4.0), "localization."),
        capacity=reader.get(localization_section, "capacity", "int", 200_000, "localization."),
    )
    for radius in localization.radii:
        _positive(reader, "localization.radii", radius)
    _positive(reader, "localization.capacity", localization.capacity)

    husimi_section = reader.section("husimi", required=False)
    reader.reject_unknown(husimi_section, HusimiSpec.__dataclass_fields__, "husimi.")
    husimi = HusimiSpec(
        mode=reader.get(husimi_section, "mode", "int", 1, "husimi."),
        points=reader.get(husimi_section, "points", "int", 81, "husimi."),
        half_width=reader.get(husimi_section, "half_width", "float", 2.0, "husimi."),
        radius=reader.get(husimi_section, "radius", "float", 3.0, "husimi."),
    )
    if not 0 <= husimi.mode < modes:
        reader.fail("husimi.mode", f"must name one of the {modes} modes (0-based), got {husimi.mode}")
    if husimi.points < 2:
        reader.fail("husimi.points", f"must be >= 2, got {husimi.points}")
    _positive(reader, "husimi.half_width", husimi.half_width)
    _positive(reader, "husimi.radius", husimi.radius)

    probe_section = reader.section("probes", required=False)
    reader.reject_unknown(probe_section, ("window_radius",), "probes.")
    probes = ProbeSpec(window_radius=reader.get(probe_section, "window_radius", "float", grid.L / 4.0, "probes."))
    _positive(reader, "probes.window_radius", probes.window_radius)

    return ExperimentConfig(
        grid=grid,
        potential=potential,
        interaction=interaction,
        modes=modes,
        alphas=alphas,
        localization=localization,
        probes=probes,
        mass=mass,
        cutoff_safety=cutoff_safety,
        seed=seed,
        solver=solver,
        husimi=husimi,
        output=output,
    )


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config: {e.strerror}") from e
    config = load_config_text(text)
    logging.debug(f"Loaded {path} (hash {config.hash})")
    return config


# -------------------- Building problems --------------------
def build_grid(config: ExperimentConfig) -> Grid:
    return Grid(config.grid.n, config.grid.L)


def build_problem(config: ExperimentConfig) -> PekarProblem:
    grid = build_grid(config)
    p = config.potential
    if p.family == "gaussian-well":
        V = gaussian_well(grid, p.depth, p.width)
    elif p.family == "double-well":
        V = double_well(grid, p.depth, p.depth2, p.width, p.separation)
    else:
        V = zero_field(grid)
    i = config.interaction
    if i.family == "gaussian":
        v = gaussian_interaction(grid, i.amplitude, i.width)
    else:
        v = cosine_packet(grid, i.amplitude, i.width, i.wavenumber)
    try:
        return PekarProblem(grid, V, v, config.mass)
    except ValidationError as e:
        raise ConfigurationError(f"cannot build problem: {e}") from e


def build_modes(config: ExperimentConfig, grid: Optional[Grid] = None) -> ModeSet:
    grid = build_grid(config) if grid is None else grid
    try:
        return ModeSet.lowest(grid, config.modes)
    except ConfigurationError as e:
        raise ConfigurationError(e.message, key="modes") from e


# -------------------- Environment --------------------
def worker_count() -> int:
    load_dotenv()
    raw = os.getenv(ENV_WORKERS, "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigurationError(f"{ENV_WORKERS} must be an integer, got {raw!r}") from None
    if workers < 1:
        raise ConfigurationError(f"{ENV_WORKERS} must be >= 1, got {workers}")
    return workers


def log_level() -> str:
    load_dotenv()
    return os.getenv(ENV_LOG_LEVEL, "INFO").upper()
