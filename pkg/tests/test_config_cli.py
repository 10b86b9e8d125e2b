import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from vaflow import cli, data
from vaflow.config import OUT_ROOT_ENV, ConfigError, RunConfig, write_manifest


class TestRunConfig:
    def test_defaults_follow_reference_settings(self):
        cfg = RunConfig()
        assert cfg["tokenizer.m1"] == 0.5
        assert cfg["tokenizer.m2"] == 0.25
        assert cfg["tokenizer.w_hyper"] == 0.1
        assert cfg["tokenizer.lr"] == 1e-4
        assert cfg["tokenizer.beta2"] == 0.95
        assert cfg["dit.patch"] == 1

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            RunConfig().set("tokenizer.bogus", 1)
        with pytest.raises(ConfigError, match="unknown section"):
            RunConfig().set("nope.m1", 1)

    @pytest.mark.parametrize("dotted,value", [
        ("tokenizer.m1", 1.5),
        ("tokenizer.m1", -0.1),
        ("tokenizer.m2", 2.0),
        ("sampler.cfg_scale", -1.0),
        ("dit.label_dropout", 1.2),
    ])
    def test_range_validation(self, dotted, value):
        with pytest.raises(ConfigError, match="outside"):
            RunConfig().set(dotted, value)

    def test_interval_cross_validation(self):
        cfg = RunConfig({"sampler.cfg_lo": 0.8, "sampler.cfg_hi": 0.2})
        with pytest.raises(ConfigError, match="cfg_lo"):
            cfg.validate()

    def test_ini_round_trip(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[run]\nseed = 7\n[tokenizer]\nd_z = 32\nvf = false\n[sampler]\nshift_s = 3.0\n")
        cfg = RunConfig.from_file(ini)
        assert cfg["run.seed"] == 7
        assert cfg["tokenizer.d_z"] == 32
        assert cfg["tokenizer.vf"] is False
        assert cfg["sampler.shift_s"] == 3.0

    def test_ini_unknown_section_rejected(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[wat]\nx = 1\n")
        with pytest.raises(ConfigError):
            RunConfig.from_file(ini)

    def test_overrides_win(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[tokenizer]\nd_z = 32\n")
        cfg = RunConfig.from_file(ini, overrides={"tokenizer.d_z": "64"})
        assert cfg["tokenizer.d_z"] == 64

    def test_out_root_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path / "elsewhere"))
        assert RunConfig().out_root == str(tmp_path / "elsewhere")

    def test_manifest_contents(self, tmp_path):
        src = tmp_path / "input.bin"
        src.write_bytes(b"hello")
        out = tmp_path / "m.json"
        write_manifest(out, "test", RunConfig(), inputs=[src], outputs=["a", "b"])
        manifest = json.loads(out.read_text())
        assert manifest["command"] == "test"
        assert manifest["config"]["tokenizer"]["m1"] == 0.5
        assert len(manifest["inputs"][str(src)]) == 64  # sha256 hex


def run_cli(argv):
    return cli.main(argv)


@pytest.fixture()
def pipeline_dir(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    rc = run_cli(["gen-data", "--n", "32", "--size", "32",
                  "--out", str(out / "data.vimg"), "--set", "run.seed=1"])
    assert rc == 0
    return out


BASE = ["--set", "tokenizer.epochs=1", "--set", "tokenizer.d_z=8", "--set", "tokenizer.batch_size=16"]


class TestCli:
    def test_gen_data_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.vimg", tmp_path / "b.vimg"
        assert run_cli(["gen-data", "--n", "8", "--out", str(a), "--set", "run.seed=3"]) == 0
        assert run_cli(["gen-data", "--n", "8", "--out", str(b), "--set", "run.seed=3"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_gen_data_zero_rejected(self, tmp_path):
        assert run_cli(["gen-data", "--n", "0", "--out", str(tmp_path / "x.vimg")]) == 1

    def test_gen_data_pixel_range(self, pipeline_dir):
        images, _ = data.load_dataset(pipeline_dir / "data.vimg")
        assert images.min() >= -1.0 and images.max() <= 1.0

    def test_full_pipeline_and_sample_determinism(self, pipeline_dir):
        root = str(pipeline_dir)
        dataset = str(pipeline_dir / "data.vimg")
        common = ["--set", f"paths.dataset={dataset}", "--set", f"paths.out_root={root}"]
        assert run_cli(["train-vae", *common, *BASE, "--set", "tokenizer.ablation=no_margin"]) == 0
        assert run_cli(["train-dit", *common, "--set", "dit.steps=30", "--set", "dit.depth=1",
                        "--set", "dit.width=32", "--set", "dit.heads=2"]) == 0
        out1 = pipeline_dir / "s1.vimg"
        out2 = pipeline_dir / "s2.vimg"
        sample = ["sample", *common, "--set", "sampler.steps=6", "--set", "sampler.n_samples=2"]
        assert run_cli([*sample, "--out", str(out1)]) == 0
        assert run_cli([*sample, "--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        assert run_cli(["analyze", *common]) == 0
        # reports exist and parse
        from vaflow.diagnostics import read_csv
        rows = read_csv(pipeline_dir / "analysis.csv")
        metrics = {m for _, m, _ in rows}
        assert {"density_cv", "gini", "normalized_entropy", "psnr_db", "ssim"} <= metrics
        manifest = json.loads((pipeline_dir / "tokenizer.vavk.manifest.json").read_text())
        assert dataset in manifest["inputs"]
        tree = ET.parse(pipeline_dir / "train_vae.svg")
        assert tree.getroot().tag.endswith("svg")

    def test_analyze_with_external_embedding(self, pipeline_dir, tmp_path):
        root = str(pipeline_dir)
        dataset = str(pipeline_dir / "data.vimg")
        common = ["--set", f"paths.dataset={dataset}", "--set", f"paths.out_root={root}"]
        assert run_cli(["train-vae", *common, *BASE]) == 0
        emb = tmp_path / "emb.txt"
        rng = np.random.default_rng(0)
        np.savetxt(emb, rng.standard_normal((64, 2)))
        assert run_cli(["analyze", *common, "--embedding", str(emb)]) == 0

    def test_error_is_single_line_and_nonzero(self, tmp_path, capsys):
        rc = run_cli(["train-vae", "--set", "paths.dataset=/nonexistent.vimg",
                      "--set", f"paths.out_root={tmp_path}"])
        assert rc == 1
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1
        assert err.startswith("vaflow-error command=train-vae")

    def test_bad_config_value_fails_before_compute(self, tmp_path):
        rc = run_cli(["train-vae", "--set", "tokenizer.m1=2.0",
                      "--set", f"paths.out_root={tmp_path}"])
        assert rc == 1

    def test_mirrored_flags(self, tmp_path):
        out = tmp_path / "d.vimg"
        assert run_cli(["gen-data", "--n", "4", "--out", str(out), "--run.seed", "9"]) == 0
        with open(str(out) + ".manifest.json") as fh:
            manifest = json.load(fh)
        assert manifest["config"]["run"]["seed"] == 9

    def test_gradcheck_command(self, capsys):
        assert run_cli(["gradcheck"]) == 0
        out = capsys.readouterr().out
        for name in ("mcos_loss", "mdms_loss", "vf_loss_total", "kl_loss", "velocity_loss",
                     "swiglu_ffn", "rmsnorm", "attention", "dit_full"):
            assert name in out
        assert "FAIL" not in out
