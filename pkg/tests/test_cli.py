import json

import pytest

from cli import CORRELATION_COLUMNS, EXIT_OK, EXIT_USAGE, TfiSection, load_config, main, read_csv


def _write_config(tmp_path, doc):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def _metadata(path):
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.startswith("# ")]
    return {key: json.loads(value) for key, value in (line[2:].split(": ", 1) for line in lines)}


def test_dump_circuit_round_trips(tmp_path, capsys):
    code = main(["dump-circuit", "--n", "8", "--offset", "0.5", "--out", str(tmp_path)])
    assert code == EXIT_OK
    doc = json.loads((tmp_path / "circuit_n8_dit.json").read_text(encoding="utf-8"))
    assert doc["num_wires"] == 8
    assert "two-body gates" in capsys.readouterr().out


def test_dump_circuit_needs_size(tmp_path):
    assert main(["dump-circuit", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["dump-circuit", "--n", "12", "--out", str(tmp_path)]) == EXIT_USAGE


def test_correlations_writes_table(tmp_path):
    config = _write_config(tmp_path, {
        "model": {"kind": "FreeFermion1D", "dims": [16], "particles": 5},
        "output": str(tmp_path / "out"),
    })
    assert main(["correlations", "--config", config, "--stats"]) == EXIT_OK
    path = tmp_path / "out" / "correlations_FreeFermion1D_16_N5.csv"
    frame = read_csv(path)
    assert list(frame.columns) == ["delta"] + CORRELATION_COLUMNS
    assert len(frame) == 16
    assert frame["abs_err"].max() < 1e-10
    meta = _metadata(path)
    assert meta["status"] == "ok"
    assert meta["model"]["particles"] == 5
    assert "engine_stats" in meta


def test_correlations_2d_diagonal_cut(tmp_path):
    config = _write_config(tmp_path, {
        "model": {"kind": "FreeFermion2D", "dims": [4, 4], "particles": 5},
        "correlations": {"cut": "diagonal"},
    })
    assert main(["correlations", "--config", config, "--out", str(tmp_path)]) == EXIT_OK
    frame = read_csv(tmp_path / "correlations_FreeFermion2D_4x4_N5.csv")
    assert list(frame["dx"]) == list(frame["dy"]) == [0, 1, 2, 3]


def test_correlations_vacuum_reports_status(tmp_path):
    config = _write_config(tmp_path, {"model": {"kind": "FreeFermion1D", "dims": [8], "particles": 0}})
    assert main(["correlations", "--config", config, "--out", str(tmp_path)]) == EXIT_OK
    path = tmp_path / "correlations_FreeFermion1D_8_N0.csv"
    assert read_csv(path).empty
    assert "density is zero" in _metadata(path)["status"]


def test_tfi_cross_checks_small_chain(tmp_path):
    config = _write_config(tmp_path, {"tfi": {"n": 8, "h_min": 0.8, "h_max": 1.2, "h_step": 0.1}})
    assert main(["tfi", "--config", config, "--out", str(tmp_path)]) == EXIT_OK
    path = tmp_path / "tfi_n8.csv"
    frame = read_csv(path)
    assert list(frame["h"]) == pytest.approx([0.8, 0.9, 1.0, 1.1, 1.2])
    assert frame["abs_err"].max() < 1e-8
    assert _metadata(path)["h_grid"] == pytest.approx([0.8, 0.9, 1.0, 1.1, 1.2])


def test_tfi_grid_from_range():
    assert TfiSection(n=8, h_min=0.2, h_max=0.3, h_step=0.05).grid() == [0.2, 0.25, 0.3]
    assert TfiSection(n=8, h_min=1.0, h_max=0.5).grid() == []


def test_tfi_empty_grid_is_usage_error(tmp_path):
    config = _write_config(tmp_path, {"tfi": {"n": 8, "h_grid": []}})
    assert main(["tfi", "--config", config, "--out", str(tmp_path)]) == EXIT_USAGE


def test_variational_writes_trace_and_checkpoint(tmp_path):
    config = _write_config(tmp_path, {
        "model": {"kind": "TFI", "dims": [4], "h": 0.8},
        "variational": {"optimization": {"max_sweeps": 2}},
    })
    assert main(["variational", "--config", config, "--out", str(tmp_path)]) == EXIT_OK
    frame = read_csv(tmp_path / "variational_TFI_n4.csv")
    assert frame["relative_error"].iloc[-1] < 1e-8
    assert (tmp_path / "checkpoint.json").exists()


@pytest.mark.parametrize("doc", [
    {"unknown": 1},
    {"model": {"kind": "FreeFermion1D", "dims": [12], "particles": 3}},
    {"variational": {"optimization": {"rule": "newton"}}},
])
def test_bad_configs_are_usage_errors(tmp_path, doc):
    config = _write_config(tmp_path, doc)
    assert main(["correlations", "--config", config, "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_model_and_bad_json(tmp_path):
    assert main(["correlations", "--out", str(tmp_path)]) == EXIT_USAGE
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    assert main(["tfi", "--config", str(path)]) == EXIT_USAGE
    assert main(["tfi", "--config", str(tmp_path / "absent.json")]) == EXIT_USAGE


def test_argument_errors():
    assert main(["--help"]) == EXIT_OK
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["verify", "--level", "thorough"]) == EXIT_USAGE


def test_load_config_defaults():
    cfg = load_config(None)
    assert cfg.model is None
    assert cfg.tfi.n == 1024
    assert cfg.variational.optimization.max_sweeps == 200


def test_tfi_and_variational_report_stats(tmp_path, capsys):
    config = _write_config(tmp_path, {"tfi": {"n": 8, "h_grid": [0.9, 1.1]}})
    assert main(["tfi", "--config", config, "--out", str(tmp_path), "--stats"]) == EXIT_OK
    assert _metadata(tmp_path / "tfi_n8.csv")["engine_stats"]["steps"] > 0
    assert "engine stats" in capsys.readouterr().out

    config = _write_config(tmp_path, {
        "model": {"kind": "TFI", "dims": [4], "h": 0.8},
        "variational": {"optimization": {"max_sweeps": 1}},
    })
    assert main(["variational", "--config", config, "--out", str(tmp_path), "--stats"]) == EXIT_OK
    assert _metadata(tmp_path / "variational_TFI_n4.csv")["engine_stats"]["madds"] > 0
    assert "engine stats" in capsys.readouterr().out


def test_variational_bond_factor_starts_from_the_state(tmp_path):
    config = _write_config(tmp_path, {
        "model": {"kind": "TFI", "dims": [8], "h": 1.2},
        "variational": {"bond_factor": 2, "optimization": {"max_sweeps": 1}},
    })
    assert main(["variational", "--config", config, "--out", str(tmp_path)]) == EXIT_OK
    frame = read_csv(tmp_path / "variational_TFI_n8.csv")
    assert frame["relative_error"].iloc[0] < 1e-8
    assert _metadata(tmp_path / "variational_TFI_n8.csv")["bond_factor"] == 2
