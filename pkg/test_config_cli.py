import os

import pandas as pd
import pytest

from config import (
    ENV_WORKERS,
    build_modes,
    build_problem,
    load_config,
    load_config_text,
    worker_count,
)
from conftest import reference_values
from errors import ConfigurationError
from main import main
from persistence import load_state, read_csv, read_json

CONFIGS = os.path.join(os.path.dirname(__file__), "configs")

BASE = """\
grid:
  n: 64
  L: 16.0
potential:
  family: gaussian-well
  depth: -1.0
  width: 1.5
interaction:
  family: gaussian
  amplitude: 0.5
  width: 1.0
modes: 3
alphas: [1.0, 2.0]
"""


def write_config(tmp_path, text, name="config.yaml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_defaults_are_resolved():
    config = load_config_text(BASE)
    assert config.grid.n == 64 and config.grid.L == 16.0
    assert config.localization.radii == (2.0, 4.0)
    assert config.probes.window_radius == 4.0
    assert config.cutoff_safety == 4.0
    assert config.solver.tolerance == 1e-8
    assert config.husimi.mode == 1
    assert config.potential.depth2 is None


def test_yaml_round_trip_keeps_hash():
    config = load_config(os.path.join(CONFIGS, "sweep-small.yaml"))
    again = load_config_text(config.to_yaml())
    assert again == config
    assert again.hash == config.hash
    assert len(config.hash) == 16
    assert config.with_output("elsewhere").hash == config.hash
    assert config.with_output("elsewhere") != config


def test_family_parameters_are_checked():
    text = BASE.replace("  depth: -1.0\n", "")
    with pytest.raises(ConfigurationError) as excinfo:
        load_config_text(text)
    assert excinfo.value.key == "potential.depth"

    zero = BASE.replace("family: gaussian-well", "family: zero")
    with pytest.raises(ConfigurationError) as excinfo:
        load_config_text(zero)
    assert excinfo.value.key == "potential.depth"
    assert excinfo.value.line == 6


def test_unknown_key_is_anchored():
    text = BASE.replace("  L: 16.0\n", "  L: 16.0\n  m: 3\n")
    with pytest.raises(ConfigurationError) as excinfo:
        load_config_text(text)
    error = excinfo.value
    assert error.key == "grid.m"
    assert error.line == 4
    assert "unknown key" in error.message
    assert error.anchored("run.yaml") == "run.yaml:4: grid.m: unknown key"


def test_invalid_grid_points_to_n():
    with pytest.raises(ConfigurationError) as excinfo:
        load_config_text(BASE.replace("n: 64", "n: 12"))
    assert excinfo.value.key == "grid.n"
    assert excinfo.value.line == 2


@pytest.mark.parametrize("replacement, key", [
    (("alphas: [1.0, 2.0]", "alphas: [2.0, 1.0]"), "alphas"),
    (("alphas: [1.0, 2.0]", "alphas: [1.0, 2.0]\ncutoff_safety: 2"), "cutoff_safety"),
    (("alphas: [1.0, 2.0]", "alphas: [1.0, 2.0]\nhusimi:\n  mode: 3"), "husimi.mode"),
    (("modes: 3", "modes: three"), "modes"),
    (("width: 1.0", "width: -1.0"), "interaction.width"),
])
def test_value_checks(replacement, key):
    with pytest.raises(ConfigurationError) as excinfo:
        load_config_text(BASE.replace(*replacement))
    assert excinfo.value.key == key


def test_malformed_yaml_reports_line():
    with pytest.raises(ConfigurationError) as excinfo:
        load_config_text("grid:\n  n: 64\n L: [\n")
    assert excinfo.value.line is not None


def test_builders():
    config = load_config_text(BASE)
    problem = build_problem(config)
    assert problem.grid.size == 64
    assert build_modes(config).size == 3
    with pytest.raises(ConfigurationError) as excinfo:
        build_modes(load_config_text(BASE.replace("modes: 3", "modes: 2")))
    assert excinfo.value.key == "modes"


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv(ENV_WORKERS, "3")
    assert worker_count() == 3
    monkeypatch.setenv(ENV_WORKERS, "0")
    with pytest.raises(ConfigurationError):
        worker_count()
    monkeypatch.setenv(ENV_WORKERS, "many")
    with pytest.raises(ConfigurationError):
        worker_count()


def test_missing_key_exits_with_invalid_config(tmp_path, capsys):
    path = write_config(tmp_path, BASE.replace("  n: 64\n", ""))
    assert main(["pekar-min", "--config", path, "--out", str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert "grid.n" in err
    assert path in err


def test_missing_file_exits_with_invalid_config(tmp_path):
    assert main(["pekar-min", "--config", str(tmp_path / "absent.yaml")]) == 2


def test_pekar_min_on_free_problem(tmp_path):
    config_path = os.path.join(CONFIGS, "free.yaml")
    out = tmp_path / "free"
    assert main(["pekar-min", "--config", config_path, "--out", str(out)]) == 0
    expected_hash = load_config(config_path).with_output(str(out)).hash
    document = read_json(str(out / "pekar.json"), expected_hash)
    assert document["converged"] is True
    assert abs(document["energy"]) <= 1e-8
    trace, header, _ = read_csv(str(out / "pekar_trace.csv"))
    assert header["config_hash"] == expected_hash
    assert list(trace.columns) == ["iteration", "energy", "residual", "step", "mass"]
    assert (trace["mass"] - 1.0).abs().max() <= 1e-12


def test_pekar_min_reports_non_convergence(tmp_path):
    path = write_config(tmp_path, BASE + "solver:\n  max_iterations: 2\n")
    assert main(["pekar-min", "--config", path, "--out", str(tmp_path / "out")]) == 3
    assert read_json(str(tmp_path / "out" / "pekar.json"))["converged"] is False


def test_alpha_sweep_on_decoupled_problem(tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_WORKERS, "2")
    config_path = os.path.join(CONFIGS, "decoupled.yaml")
    out = tmp_path / "decoupled"
    assert main(["alpha-sweep", "--config", config_path, "--out", str(out)]) == 0
    table, header, verdicts = read_csv(str(out / "sweep.csv"))
    assert list(table["alpha"]) == [1.0, 2.0]
    assert (table["status"] == "ok").all()
    assert (table["N_tot"] == 4).all()
    assert table["energy_error"].max() <= 1e-8
    assert verdicts["variational_bound"] == "true"
    expected_hash = load_config(config_path).with_output(str(out)).hash
    assert header["config_hash"] == expected_hash
    amplitudes = load_state(str(out / "states" / "alpha_1.plab"), expected_hash)
    assert amplitudes.shape == (64, 35)


def test_pekar_min_rerun_is_byte_identical(tmp_path):
    config_path = os.path.join(CONFIGS, "decoupled.yaml")
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["pekar-min", "--config", config_path, "--out", str(first)]) == 0
    assert main(["pekar-min", "--config", config_path, "--out", str(second)]) == 0
    for name in ("pekar.json", "pekar_trace.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_alpha_sweep_rerun_matches_except_wall_time(tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_WORKERS, "2")
    config_path = os.path.join(CONFIGS, "decoupled.yaml")
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["alpha-sweep", "--config", config_path, "--out", str(first)]) == 0
    assert main(["alpha-sweep", "--config", config_path, "--out", str(second)]) == 0
    table_a, header_a, verdicts_a = read_csv(str(first / "sweep.csv"))
    table_b, header_b, verdicts_b = read_csv(str(second / "sweep.csv"))
    assert header_a == header_b
    assert verdicts_a == verdicts_b
    pd.testing.assert_frame_equal(table_a.drop(columns="wall_time"), table_b.drop(columns="wall_time"),
                                  check_exact=True)
    for index in range(2):
        name = os.path.join("states", f"alpha_{index}.plab")
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_pekar_min_reproduces_reference_energy(tmp_path):
    config_path = os.path.join(CONFIGS, "sample1d.yaml")
    config = load_config(config_path)
    reference = reference_values(config)["pekar"]
    out = tmp_path / "sample1d"
    assert main(["pekar-min", "--config", config_path, "--out", str(out)]) == 0
    document = read_json(str(out / "pekar.json"), config.hash)
    assert document["converged"] is True
    assert document["gradient_residual"] <= 1e-8
    assert document["energy"] == pytest.approx(reference["energy"], abs=1e-8)
    for key in ("kinetic", "potential", "interaction"):
        assert document[key] == pytest.approx(reference[key], abs=1e-6), key
