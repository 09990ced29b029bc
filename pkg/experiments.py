# experiments.py
"""
Experiment orchestration behind the command line: the Pekar minimization, the
alpha sweep, the localization ladder and the Husimi probe. Each run writes its
files under the configured output directory and returns an exit code.
"""

# Standard library
import asyncio
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

# Third-party libraries
import numpy as np
import pandas as pd
from tqdm.asyncio import tqdm

# Local
from config import ExperimentConfig, build_modes, build_problem, worker_count
from densities import (
    DensityOperator,
    HusimiQuadrature,
    convergence_report,
    convergence_verdicts,
    default_probes,
    husimi_marginal,
    monotone_verdict,
    reduce,
)
from errors import EXIT_NOT_CONVERGED, EXIT_OK, CapacityError, ConfigurationError, ConvergenceError
from fock import (
    CompositeState,
    FockBasis,
    cutoff_rule,
    fock_dimension,
    ground_state,
    hamiltonian,
    product_trial_energy,
    project_to_modes,
    restrict_interaction,
)
from localization import PartitionOfUnity, energy_split_check, field_localizer, verify_localization_identities
from pekar import MinimizeOptions, PekarResult, minimize, minimizer_spread
from persistence import encode_complex, save_state, write_csv, write_gnuplot_matrix, write_json

SWEEP_CAPACITY = 5_000_000
UNIQUENESS_TOLERANCE = 1e-6
VARIATIONAL_SLACK = 1e-8


def minimize_options(config: ExperimentConfig) -> MinimizeOptions:
    solver = config.solver
    return MinimizeOptions(
        max_iterations=solver.max_iterations,
        tolerance=solver.tolerance,
        energy_tolerance=solver.energy_tolerance,
        preconditioner_shift=solver.preconditioner_shift,
        seed=config.seed,
    )


def _path(config: ExperimentConfig, name: str) -> str:
    return os.path.join(config.output, name)


# -------------------- Pekar minimization --------------------
def pekar_document(result: PekarResult) -> Dict:
    return {
        "energy": result.energy,
        "kinetic": result.terms.kinetic,
        "potential": result.terms.potential,
        "interaction": result.terms.interaction,
        "gradient_residual": result.gradient_residual,
        "iterations": result.iterations,
        "converged": result.converged,
        "psi": encode_complex(result.psi.values),
        "u_psi": encode_complex(result.u_psi.values),
    }


def run_pekar(config: ExperimentConfig) -> int:
    problem = build_problem(config)
    result = minimize(problem, minimize_options(config))
    write_json(pekar_document(result), _path(config, "pekar.json"), config.hash)
    write_csv(pd.DataFrame(result.trace, columns=["iteration", "energy", "residual", "step", "mass"]),
              _path(config, "pekar_trace.csv"), config.hash)
    if not result.converged:
        logging.error(f"Pekar minimizer did not converge after {result.iterations} iterations "
                     f"(residual {result.gradient_residual:.3e})")
        return EXIT_NOT_CONVERGED
    logging.info(f"E_Pek = {result.energy:.12f} after {result.iterations} iterations")
    return EXIT_OK


# -------------------- Alpha sweep --------------------
@dataclass
class SweepRow:
    alpha: float
    status: str = "ok"
    values: Dict[str, float] = field(default_factory=dict)
    state: Optional[CompositeState] = None


class SweepRunner:
    """Ground states of the truncated Hamiltonian along the configured alpha list."""

    def __init__(self, config: ExperimentConfig, workers: Optional[int] = None):
        if config.mass != 1.0:
            raise ConfigurationError("alpha sweeps compare against the Pekar energy at mass 1", key="mass")
        self.logger = logging.getLogger(__name__)
        self.config = config
        self.workers = worker_count() if workers is None else workers
        self.problem = build_problem(config)
        self.grid = self.problem.grid
        self.modes = build_modes(config, self.grid)
        self.restricted = restrict_interaction(self.problem, self.modes)
        self.opts = minimize_options(config)
        self.pekar = minimize(self.restricted, self.opts)
        self.u_norm = project_to_modes(self.pekar.u_psi, self.modes).norm()
        self.errors: Dict[float, str] = {}
        self.logger.info(f"E_Pek (retained modes) = {self.pekar.energy:.12f}, |u| = {self.u_norm:.6f}")

    def cutoff(self, alpha: float) -> int:
        return cutoff_rule(self.u_norm, alpha, self.config.cutoff_safety)

    def run_alpha(self, alpha: float) -> SweepRow:
        start = time.perf_counter()
        cutoff = self.cutoff(alpha)
        dimension = self.grid.size * fock_dimension(self.modes.size, cutoff)
        row = SweepRow(alpha, values={"N_tot": cutoff, "dimension": dimension})
        try:
            if dimension > SWEEP_CAPACITY:
                raise CapacityError(f"composite dimension {dimension} > {SWEEP_CAPACITY} at N_tot={cutoff}",
                                    parameter="N_tot", dimension=dimension)
            H = hamiltonian(self.problem, self.modes, FockBasis(self.modes.size, cutoff), alpha)
            trial = product_trial_energy(self.pekar.psi, self.pekar.u_psi, H)
            energy, state = ground_state(H, self.config.solver.lanczos_tolerance, trial=trial.state,
                                         seed=self.config.seed)
        except CapacityError as e:
            self.errors[alpha] = str(e)
            self.logger.warning(f"alpha={alpha:g}: {e}")
            row.status = f"capacity:{e.parameter}"
            return row
        except ConvergenceError as e:
            self.errors[alpha] = str(e)
            self.logger.error(f"alpha={alpha:g}: {e}")
            row.status = "not-converged"
            return row
        row.state = state
        row.values.update({
            "E_alpha": energy,
            "E_pekar": self.pekar.energy,
            "E_trial": trial.energy,
            "energy_error": abs(energy - self.pekar.energy),
            "residual": state.residual,
            "mode_truncation": trial.mode_truncation,
            "fock_truncation": trial.fock_truncation,
            "wall_time": time.perf_counter() - start,
        })
        return row

    async def run(self) -> List[SweepRow]:
        semaphore = asyncio.Semaphore(self.workers)
        pbar = tqdm(total=len(self.config.alphas), desc="Sweeping alpha", unit="alpha")

        async def process_with_progress(alpha):
            async with semaphore:
                row = await asyncio.to_thread(self.run_alpha, alpha)
            pbar.update(1)
            return row

        rows = await asyncio.gather(*[process_with_progress(alpha) for alpha in self.config.alphas])
        pbar.close()
        self.logger.info(f"Sweep completed: {len(rows)} alpha values")
        if self.errors:
            self.logger.warning(f"Some alpha values failed: {len(self.errors)} errors logged")
        return list(rows)

    def partitions(self) -> List[PartitionOfUnity]:
        return [PartitionOfUnity.around(self.grid, R) for R in self.config.localization.radii]


def _radius_label(radius: float) -> str:
    return f"mass_in_window_R{radius:g}"


def sweep_table(runner: SweepRunner, rows: List[SweepRow]) -> pd.DataFrame:
    """Per-alpha table in alpha order; failed rows keep their status and NaN diagnostics."""
    config = runner.config
    done = [(row.alpha, row.state) for row in rows if row.state is not None]
    table = pd.DataFrame([{"alpha": row.alpha, "status": row.status, **row.values} for row in rows])
    if not done:
        return table

    spread = minimizer_spread(runner.restricted, replace(runner.opts, record_trace=False))
    window = PartitionOfUnity.around(runner.grid, config.probes.window_radius).chi
    report = convergence_report(done, runner.pekar, runner.modes,
                                default_probes(runner.grid, runner.modes, config.probes.window_radius),
                                window, unique=spread <= UNIQUENESS_TOLERANCE)
    report["minimizer_spread"] = spread
    for partition in runner.partitions():
        chi = partition.chi
        report[_radius_label(partition.radius)] = [
            float(np.real(np.trace(chi[:, None] * reduce(state).gamma * chi[None, :]))) for _, state in done
        ]
    return table.merge(report, on="alpha", how="left")


def sweep_verdicts(table: pd.DataFrame, radii) -> Dict[str, str]:
    if len(table) < 2:
        return {}
    done = table[table["status"] == "ok"]
    if done.empty:
        return {"variational_bound": "skipped", "energy_error_decreasing": "skipped"}
    verdicts = {
        "variational_bound": "true" if bool(np.all(done["E_alpha"] <= done["E_trial"] + VARIATIONAL_SLACK))
        else "false",
        "energy_error_decreasing": monotone_verdict(done["energy_error"]),
    }
    if len(done) >= 2 and "trace_distance" in done:
        verdicts.update(convergence_verdicts(done))
        distances = done["trace_distance"].to_numpy()
        verdicts["trace_distance_halved"] = "skipped" if np.isnan(distances).any() \
            else ("true" if distances[-1] <= distances[0] / 2.0 else "false")
        for radius in radii:
            verdicts[f"{_radius_label(radius)}_nondecreasing"] = monotone_verdict(
                done[_radius_label(radius)], decreasing=False, strict=False)
    return verdicts


def _exit_code(runner: SweepRunner, rows: List[SweepRow]) -> int:
    if not runner.pekar.converged:
        logging.error("Pekar minimizer did not converge; sweep rows compare against a best-so-far energy")
        return EXIT_NOT_CONVERGED
    if any(row.status == "not-converged" for row in rows):
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def run_sweep(config: ExperimentConfig, workers: Optional[int] = None) -> int:
    runner = SweepRunner(config, workers)
    rows = asyncio.run(runner.run())
    table = sweep_table(runner, rows)
    verdicts = sweep_verdicts(table, config.localization.radii)
    write_csv(table, _path(config, "sweep.csv"), config.hash, verdicts)
    for index, row in enumerate(rows):
        if row.state is not None:
            save_state(_path(config, os.path.join("states", f"alpha_{index}.plab")), row.state.amplitudes,
                       config.hash)
    for name, verdict in verdicts.items():
        logging.info(f"verdict {name} = {verdict}")
    return _exit_code(runner, rows)


# -------------------- Localization ladder --------------------
def run_localization(config: ExperimentConfig, workers: Optional[int] = None) -> int:
    runner = SweepRunner(config, workers)
    rows = asyncio.run(runner.run())
    capacity = config.localization.capacity
    partitions = runner.partitions()
    identities, ladder = [], []
    for row in rows:
        if row.state is None:
            ladder.append({"alpha": row.alpha, "status": row.status})
            continue
        Gamma = DensityOperator.from_state(row.state)
        try:
            smoke = verify_localization_identities(Gamma, np.ones(runner.grid.size),
                                                   np.eye(runner.modes.size), capacity)
            windowed = verify_localization_identities(Gamma, partitions[0].chi,
                                                      field_localizer(partitions[0].chi, runner.modes), capacity)
            split = energy_split_check(row.state, partitions, runner.problem, runner.modes, capacity=capacity)
        except CapacityError as e:
            runner.logging.warning(f"alpha={row.alpha:g}: {e}")
            ladder.append({"alpha": row.alpha, "status": f"capacity:{e.parameter}", "dimension": e.dimension})
            identities.append({"alpha": row.alpha, "status": f"capacity:{e.parameter}"})
            continue
        identities.append({"alpha": row.alpha, "status": "ok", "unit_localizer": smoke.to_dict(),
                           "window_localizer": {"radius": partitions[0].radius, **windowed.to_dict()}})
        for record in split.to_dict(orient="records"):
            ladder.append({"alpha": row.alpha, "status": "ok", **record})

    table = pd.DataFrame(ladder)
    verdicts = {}
    if len(config.alphas) > 1 and "radius" in table:
        for radius in config.localization.radii:
            series = table[(table["status"] == "ok") & np.isclose(table["radius"], radius)]["mass_in_window"]
            verdicts[f"{_radius_label(radius)}_nondecreasing"] = monotone_verdict(series, decreasing=False,
                                                                                   strict=False)
    write_json({"identities": identities}, _path(config, "localization.json"), config.hash)
    write_csv(table, _path(config, "localization_ladder.csv"), config.hash, verdicts)
    return _exit_code(runner, rows)


# -------------------- Husimi probe --------------------
def run_husimi(config: ExperimentConfig, workers: Optional[int] = None) -> int:
    runner = SweepRunner(config, workers)
    rows = asyncio.run(runner.run())
    spec = config.husimi
    predicted = complex(runner.modes.amplitudes(runner.pekar.u_psi)[spec.mode])
    summary = []
    for index, row in enumerate(rows):
        if row.state is None:
            summary.append({"alpha": row.alpha, "status": row.status})
            continue
        quadrature = HusimiQuadrature(center=predicted, half_width=spec.half_width, points=spec.points)
        report = husimi_marginal(row.state, spec.mode, quadrature, predicted=predicted,
                                 radius=spec.radius / row.alpha)
        write_gnuplot_matrix(_path(config, f"husimi_mode{spec.mode}_alpha_{index}.dat"),
                             report.real_axis, report.imag_axis, report.density, config.hash)
        summary.append({
            "alpha": row.alpha,
            "status": "coarse" if report.coarse else "ok",
            "mass_near_prediction": report.mass_near_prediction,
            "total_mass": report.total_mass,
            "radius": report.radius,
            "cell": report.cell,
        })

    table = pd.DataFrame(summary)
    verdicts = {}
    if len(config.alphas) > 1 and "mass_near_prediction" in table:
        verdicts["mass_near_prediction_increasing"] = monotone_verdict(
            table["mass_near_prediction"].dropna(), decreasing=False, strict=True)
    write_csv(table, _path(config, "husimi.csv"), config.hash, verdicts)
    write_json({"mode": spec.mode, "predicted": {"real": predicted.real, "imag": predicted.imag},
                "rows": summary}, _path(config, "husimi.json"), config.hash)
    return _exit_code(runner, rows)
