"""Command-line interface: flags, exit codes, and the stage flow."""

import json
import types
from pathlib import Path

import pytest

import psat.cli as cli
import psat.orchestrator as orch
import psat.statsbench as statsbench
from psat.cli import main
from test_orchestrator import _tiny_cohorts


@pytest.fixture(scope="module")
def tiny():
    return _tiny_cohorts()


@pytest.fixture()
def patched_cohorts(tiny, monkeypatch):
    monkeypatch.setattr(orch, "build_cohorts", lambda cfg: dict(tiny))


@pytest.fixture()
def mini_ini(tmp_path):
    ini = tmp_path / "exp.ini"
    ini.write_text(
        "[plan]\nvoxel_budget = 4096\nbase_channels = 4\n"
        "[train]\nepochs = 1\nsteps_per_epoch = 2\nepochs_scale = 0.005\n"
        "lr0_grid = 1e-3\nepochs_grid = 200\nreplay_grid = 0.5\n"
        "[study]\nstrategies = PaSaAdTo, PaSaAdTm\nbaseline = PaSaAdTo\n"
    )
    return str(ini)


class TestExitCodes:
    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 2
        capsys.readouterr()

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2
        capsys.readouterr()

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "study" in capsys.readouterr().out

    def test_version_exits_zero(self, capsys):
        assert main(["--version"]) == 0
        assert "psat" in capsys.readouterr().out

    def test_bad_strategy_code_exits_two(self, capsys, patched_cohorts):
        assert main(["plan", "--strategy", "PxSaAdTo"]) == 2
        assert "offset 1" in capsys.readouterr().err

    def test_missing_config_exits_two(self, capsys, tmp_path):
        assert main(["plan", "--config", str(tmp_path / "nope.ini")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_bad_config_value_exits_two(self, capsys, tmp_path):
        ini = tmp_path / "exp.ini"
        ini.write_text("[cohorts]\nn_adult = lots\n")
        assert main(["plan", "--config", str(ini)]) == 2
        assert "lots" in capsys.readouterr().err

    def test_report_without_study_exits_two(self, capsys, tmp_path):
        assert main(["report", "--out", str(tmp_path / "empty")]) == 2
        assert "study.json" in capsys.readouterr().err


class TestGradcheckCommand:
    def _stub(self, passed):
        return types.SimpleNamespace(
            n_params=5, max_rel_err=1e-9 if passed else 1e-2,
            worst_tensor="enc0a.w", seconds=0.1, passed=passed,
        )

    def test_pass_exits_zero(self, capsys, monkeypatch):
        monkeypatch.setattr(cli, "gradient_check", lambda seed: self._stub(True))
        assert main(["gradcheck"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_fail_exits_three(self, capsys, monkeypatch):
        monkeypatch.setattr(cli, "gradient_check", lambda seed: self._stub(False))
        assert main(["gradcheck", "--seed", "3"]) == 3
        assert "FAIL" in capsys.readouterr().out


class TestInspectionCommands:
    def test_fingerprint_prints_json(self, capsys, patched_cohorts, mini_ini):
        assert main(["fingerprint", "--config", mini_ini]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["n_cases"] == 4  # train split of the 7-case cohort
        assert len(data["spacing_median"]) == 3

    def test_plan_prints_json_and_writes_file(self, capsys, patched_cohorts,
                                              mini_ini, tmp_path):
        out = tmp_path / "plandir"
        assert main(["plan", "--config", mini_ini, "--out", str(out)]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["patch_size"] == [16, 16, 16]
        assert (out / "plan.json").is_file()

    def test_generate_writes_cohorts(self, capsys, patched_cohorts, mini_ini, tmp_path):
        out = tmp_path / "gen"
        assert main(["generate", "--config", mini_ini, "--out", str(out)]) == 0
        for tag in ("adult", "pediatric", "internal"):
            assert (out / "cohorts" / tag / "manifest.json").is_file()
        assert "adult" in capsys.readouterr().out


class TestStageFlow:
    def test_train_transfer_evaluate_report(self, capsys, patched_cohorts,
                                            mini_ini, tmp_path):
        out = str(tmp_path / "exp")

        # adapting before pretraining is a user error
        assert main(["transfer", "--config", mini_ini, "--strategy", "PaSaAdTm",
                     "--out", out]) == 2
        assert "psat train" in capsys.readouterr().err

        assert main(["train", "--config", mini_ini, "--strategy", "PaSaAdTm",
                     "--out", out]) == 0
        assert Path(out, "pretrain", "PaSaAd", "best.psc").is_file()
        assert "checkpoint:" in capsys.readouterr().out

        assert main(["transfer", "--config", mini_ini, "--strategy", "PaSaAdTm",
                     "--out", out]) == 0
        result = json.loads(Path(out, "runs", "PaSaAdTm", "result.json").read_text())
        assert Path(result["checkpoint"]).is_file()
        assert result["chosen"]["lr0"] == 1e-3
        capsys.readouterr()

        assert main(["evaluate", "--config", mini_ini, "--strategy", "PaSaAdTm",
                     "--out", out]) == 0
        for tag in ("adult", "pediatric", "internal"):
            assert Path(out, "runs", "PaSaAdTm", f"eval_{tag}.json").is_file()
        assert "alpha=" in capsys.readouterr().out

        # identity transfer evaluates straight from the pretrain checkpoint
        assert main(["evaluate", "--config", mini_ini, "--strategy", "PaSaAdTo",
                     "--out", out]) == 0
        capsys.readouterr()

    def test_evaluate_without_run_exits_two(self, capsys, patched_cohorts,
                                            mini_ini, tmp_path):
        assert main(["evaluate", "--config", mini_ini, "--strategy", "PaSaAdTm",
                     "--out", str(tmp_path / "none")]) == 2
        assert "psat transfer" in capsys.readouterr().err


class TestStudyCommand:
    def test_study_end_to_end(self, capsys, patched_cohorts, mini_ini, tmp_path):
        out = tmp_path / "study"
        assert main(["study", "--config", mini_ini, "--out", str(out)]) == 0
        captured = capsys.readouterr()
        assert (out / "report.csv").is_file()
        assert "PaSaAdTm" in captured.out
        assert "report written" in captured.out

    def test_study_reports_failed_strategies(self, capsys, patched_cohorts,
                                             mini_ini, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise RuntimeError("synthetic failure")

        monkeypatch.setattr(orch, "transfer", boom)
        assert main(["study", "--config", mini_ini, "--out", str(tmp_path / "s")]) == 3
        assert "PaSaAdTm" in capsys.readouterr().err

    def test_study_preset_dispatch(self, capsys, tmp_path, monkeypatch):
        seen = {}

        def fake_preset(out_root, config=None, log=None):
            seen["out"] = str(out_root)
            return {"passed": True}

        monkeypatch.setattr(statsbench, "run_trends_preset", fake_preset)
        assert main(["study", "--preset", "trends", "--out", str(tmp_path)]) == 0
        assert seen["out"] == str(tmp_path)

        monkeypatch.setattr(statsbench, "run_trends_preset",
                            lambda out_root, config=None, log=None: {"passed": False})
        assert main(["study", "--preset", "trends", "--out", str(tmp_path)]) == 3

    def test_unknown_preset_is_usage_error(self, capsys):
        assert main(["study", "--preset", "nope"]) == 2
        capsys.readouterr()


class TestOutRootEnv:
    def test_psat_out_env_is_fallback(self, capsys, monkeypatch, tmp_path):
        monkeypatch.setenv("PSAT_OUT", str(tmp_path / "envroot"))
        assert main(["report"]) == 2
        assert "envroot" in capsys.readouterr().err
