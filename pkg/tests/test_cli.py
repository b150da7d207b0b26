import glob
import io
import math
import os

import numpy as np
import pytest

from nanoresponse.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    cmd_simulate,
    main,
    run_selftest,
)
from nanoresponse.io import RunConfig, read_response_table, read_scaling, read_threshold_table

CONFIG = """
campaign.wavelengths_nm = 1000,1500
campaign.bias_currents_uA = 13:21:1
campaign.mean_photon_numbers = logspace:1:6:12
campaign.pulses_per_window = 3e4
campaign.repeats = 2
campaign.seed = 5
fit.nmax_candidates = 1,2,3
fit.bootstrap_resamples = 16
analysis.delta_eV = 1e-3
analysis.i0_uA = 30
analysis.beta = 1
analysis.gamma_grid = -3.5:-2.3:0.1
"""


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """One full pipeline run shared by the inspection tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "run.cfg"
    cfg_path.write_text(CONFIG)
    out = root / "out"
    rc = main(["pipeline", "--config", str(cfg_path), "--out", str(out)])
    assert rc == EXIT_OK
    return out


class TestPipelineOutputs:
    def test_sweep_files_and_row_counts(self, pipeline_dir):
        sweeps = sorted(glob.glob(str(pipeline_dir / "sweep_*.csv")))
        assert len(sweeps) == 2 * 9  # wavelengths x bias currents
        lines = open(sweeps[0]).read().strip().splitlines()
        assert len(lines) == 1 + 12 * 2  # header + powers x repeats

    def test_response_table_covers_every_sweep(self, pipeline_dir):
        rows = read_response_table(str(pipeline_dir / "responses.csv"))
        assert len(rows) == 18
        keys = {(r["wavelength_nm"], r["bias_current_uA"]) for r in rows}
        assert len(keys) == 18
        for r in rows:
            if not r["no_signal"]:
                assert 0.0 < r["eta"] <= 1.0

    def test_decomposition_per_sweep(self, pipeline_dir):
        decomps = glob.glob(str(pipeline_dir / "decomp_*.csv"))
        assert len(decomps) == 18

    def test_threshold_and_scaling_tables(self, pipeline_dir):
        entries = read_threshold_table(str(pipeline_dir / "thresholds.csv"))
        assert len(entries) >= 2
        for pt, wl, n in entries:
            assert pt.sigma_current_uA >= 0.05
            assert wl in (1000.0, 1500.0) and n >= 1
        fit = read_scaling(str(pipeline_dir / "scaling.csv"))
        assert math.isfinite(fit.gamma_uA_per_eV) and fit.gamma_uA_per_eV < 0
        assert fit.gamma_se > 0

    def test_analysis_side_tables_exist(self, pipeline_dir):
        for name in (
            "collapse.csv",
            "collapse_scan.csv",
            "model_fits.csv",
            "dark_extrapolation.csv",
            "excluded_thresholds.txt",
            "config_echo.txt",
        ):
            assert (pipeline_dir / name).exists(), name

    def test_config_echo_reparses(self, pipeline_dir):
        cfg = RunConfig.from_text((pipeline_dir / "config_echo.txt").read_text())
        assert cfg.wavelengths_nm == [1000.0, 1500.0]
        assert cfg.seed == 5

    def test_analyze_rerun_from_existing_table(self, pipeline_dir, capsys):
        cfg_dir = pipeline_dir.parent
        rc = main(
            [
                "analyze",
                "--config",
                str(cfg_dir / "run.cfg"),
                "--out",
                str(pipeline_dir),
                str(pipeline_dir / "responses.csv"),
            ]
        )
        assert rc == EXIT_OK
        assert "gamma" in capsys.readouterr().out


class TestSimulateDeterminism:
    def test_same_seed_same_bytes(self, tmp_path):
        cfg = RunConfig.from_text(CONFIG)
        cfg.mean_photon_numbers = cfg.mean_photon_numbers[:8]
        cfg.bias_currents_uA = [16.0]
        a, b = tmp_path / "a", tmp_path / "b"
        cfg.out_dir = str(a)
        paths_a = cmd_simulate(cfg)
        cfg.out_dir = str(b)
        paths_b = cmd_simulate(cfg)
        for pa, pb in zip(paths_a, paths_b):
            assert open(pa, "rb").read() == open(pb, "rb").read()


class TestExitCodes:
    def test_bad_config_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("campaign.nosuch = 1\n")
        assert main(["simulate", "--config", str(cfg)]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_missing_responses_exits_4(self, tmp_path, capsys):
        assert main(["analyze", str(tmp_path / "nope.csv")]) == EXIT_IO
        assert "i/o error" in capsys.readouterr().err

    def test_malformed_sweep_exits_4(self, tmp_path, capsys):
        bad = tmp_path / "sweep_bad.csv"
        bad.write_text("wrong,header\n1,2\n")
        assert main(["reconstruct", "--out", str(tmp_path), str(bad)]) == EXIT_IO
        assert "i/o error" in capsys.readouterr().err

    def test_reconstruct_without_sweeps_exits_2(self, tmp_path, capsys):
        assert main(["reconstruct", "--out", str(tmp_path / "empty")]) == EXIT_CONFIG
        capsys.readouterr()

    def test_analyze_without_model_constants_exits_2(self, pipeline_dir, capsys):
        # same response table, but a config missing the fluctuation constants
        rc = main(["analyze", "--out", str(pipeline_dir), str(pipeline_dir / "responses.csv")])
        assert rc == EXIT_CONFIG
        assert "delta_eV" in capsys.readouterr().err


class TestSelftest:
    def test_all_checks_pass(self):
        buf = io.StringIO()
        assert run_selftest(out=buf) is True
        lines = buf.getvalue().strip().splitlines()
        assert len(lines) == 4
        assert all(line.startswith("[PASS]") for line in lines)

    def test_cli_entry(self, capsys):
        assert main(["selftest"]) == EXIT_OK
        assert "[PASS]" in capsys.readouterr().out
