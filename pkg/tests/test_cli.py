import json

import pytest

from ezgzl.cli import ConfigError, dispatch, validate_config

CONFIG_TEMPLATE = """\
seed = 0
out_dir = "{out}"

[synth]
n_classes = 6
n_seen = 4
dim_text = 8
dim_visual = 10
dim_audio = 9
train_per_class = 8
val_per_class = 2
test_per_class = 4
noise_sigma = 0.2

[ceo]
steps = 50
lr = 0.02

[train]
batch_size = 8
epochs = 2
lr = 0.01
head_kind = "cosine"
heads = 2
head_dim = 4

[paths]
bank = "{out}/bank.ezb"
features = "{out}/data.ezf"
"""


def write_config(tmp_path, out_dir=None):
    out = out_dir or tmp_path / "run"
    cfg = tmp_path / "run.toml"
    cfg.write_text(CONFIG_TEMPLATE.format(out=out))
    return cfg, out


def run_pipeline(cfg_path, out):
    assert dispatch(["synth", "--config", str(cfg_path)]) == 0
    assert (
        dispatch(
            [
                "optimize",
                "--config",
                str(cfg_path),
                "--ceo.alpha",
                "1.0",
                "--ceo.metric",
                "cosine",
            ]
        )
        == 0
    )
    opt_bank = out / "bank_optimized.ezb"
    assert (
        dispatch(
            ["train", "--config", str(cfg_path), "--paths.bank", str(opt_bank)]
        )
        == 0
    )
    assert (
        dispatch(
            [
                "eval",
                "--config",
                str(cfg_path),
                "--paths.bank",
                str(opt_bank),
                "--paths.model",
                str(out / "model.ezm"),
            ]
        )
        == 0
    )


class TestValidateConfig:
    def test_defaults_materialized(self):
        cfg = validate_config(None)
        assert cfg.seed == 0
        assert cfg.ceo.alpha == 0.5
        assert cfg.train.head_kind == "cross_attention"
        assert cfg.synth.n_classes == 18

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            validate_config("/nonexistent/run.toml")

    def test_unknown_key_named(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[ceo]\nalhpa = 0.5\n")
        with pytest.raises(ConfigError, match=r"\[ceo\].alhpa"):
            validate_config(p)

    def test_unknown_top_level_key(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("sede = 3\n")
        with pytest.raises(ConfigError, match="sede"):
            validate_config(p)

    def test_malformed_toml(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[ceo\nalpha=")
        with pytest.raises(ConfigError, match="malformed"):
            validate_config(p)

    def test_section_seed_defaults_to_global(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text("seed = 7\n")
        cfg = validate_config(p)
        assert cfg.ceo.seed == 7
        assert cfg.train.seed == 7
        assert cfg.synth.seed == 7

    def test_explicit_section_seed_wins(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text("seed = 7\n[ceo]\nseed = 11\n")
        cfg = validate_config(p)
        assert cfg.ceo.seed == 11
        assert cfg.synth.seed == 7

    def test_overrides_beat_file(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text("[ceo]\nalpha = 0.2\n")
        cfg = validate_config(p, {"ceo": {"alpha": 0.9}})
        assert cfg.ceo.alpha == 0.9

    def test_type_errors_reported(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text('[ceo]\nsteps = "many"\n')
        with pytest.raises(ConfigError, match="expected an integer"):
            validate_config(p)

    def test_invalid_value_reported_with_section(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[ceo]\nalpha = 2.0\n")
        with pytest.raises(ConfigError, match=r"\[ceo\]"):
            validate_config(p)


class TestDispatchBasics:
    def test_no_args_usage(self, capsys):
        assert dispatch([]) == 1
        assert "usage:" in capsys.readouterr().out

    def test_help(self, capsys):
        assert dispatch(["--help"]) == 0
        assert "usage:" in capsys.readouterr().out

    def test_unknown_subcommand(self, capsys):
        assert dispatch(["explode"]) == 1
        err = capsys.readouterr().err
        assert "unknown subcommand" in err
        assert "usage:" in err

    def test_validation_error_exit_code(self, capsys):
        assert dispatch(["synth", "--ceo.alpha", "2.0"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_path_exit_code(self, capsys, tmp_path):
        code = dispatch(["optimize", "--out-dir", str(tmp_path)])
        assert code == 1
        assert "[paths].bank" in capsys.readouterr().err

    def test_runtime_error_exit_code(self, capsys, tmp_path):
        bad = tmp_path / "bank.ezb"
        bad.write_bytes(b"JUNKJUNKJUNK")
        code = dispatch(
            [
                "optimize",
                "--out-dir",
                str(tmp_path),
                "--paths.bank",
                str(bad),
            ]
        )
        assert code == 2
        assert "runtime error" in capsys.readouterr().err

    def test_config_echo_is_json_first_line(self, capsys, tmp_path):
        cfg_path, out = write_config(tmp_path)
        assert dispatch(["synth", "--config", str(cfg_path)]) == 0
        first = capsys.readouterr().out.splitlines()[0]
        echoed = json.loads(first)
        assert echoed["seed"] == 0
        assert echoed["train"]["head_kind"] == "cosine"
        # defaulted keys are materialized in the echo
        assert echoed["ceo"]["margin"] == 1.0

    def test_flag_equals_syntax(self, capsys):
        assert dispatch(["synth", "--ceo.alpha=2.0"]) == 1
        assert "alpha" in capsys.readouterr().err


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg_path, out = write_config(tmp)
    run_pipeline(cfg_path, out)
    return cfg_path, out


class TestPipeline:
    def test_artifacts_exist(self, artifacts):
        _, out = artifacts
        for name in (
            "bank.ezb",
            "data.ezf",
            "bank_optimized.ezb",
            "ceo_trace.json",
            "model.ezm",
            "loss_curve.json",
            "report.json",
        ):
            assert (out / name).is_file(), name

    def test_report_contents(self, artifacts):
        _, out = artifacts
        payload = json.loads((out / "report.json").read_text())
        for key in ("seen_acc", "unseen_acc", "harmonic_mean", "zsl_acc"):
            assert 0.0 <= payload[key] <= 100.0
        assert len(payload["config_digest"]) == 16

    def test_trace_contents(self, artifacts):
        _, out = artifacts
        trace = json.loads((out / "ceo_trace.json").read_text())
        assert len(trace["loss_trace"]) == 50
        assert trace["min_distance_after"] >= trace["min_distance_before"]
        assert not trace["diverged"]

    def test_inspect_bank(self, artifacts, capsys):
        _, out = artifacts
        code = dispatch(
            [
                "inspect",
                "--out-dir",
                str(out),
                "--paths.bank",
                str(out / "bank_optimized.ezb"),
            ]
        )
        assert code == 0
        assert "base class" in capsys.readouterr().out

    def test_inspect_report(self, artifacts, capsys):
        _, out = artifacts
        code = dispatch(
            [
                "inspect",
                "--out-dir",
                str(out),
                "--paths.report",
                str(out / "report.json"),
            ]
        )
        assert code == 0
        assert "Harmonic Mean" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, artifacts, tmp_path):
        cfg_path, out = artifacts
        cfg2, out2 = write_config(tmp_path, out_dir=tmp_path / "run2")
        run_pipeline(cfg2, out2)
        for name in ("bank.ezb", "bank_optimized.ezb", "model.ezm"):
            assert (out / name).read_bytes() == (out2 / name).read_bytes(), name
        assert (out / "report.json").read_text() == (
            out2 / "report.json"
        ).read_text()
