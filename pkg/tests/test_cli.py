import csv
import io

import numpy as np
import pytest

from funcvi import cli, selftest
from funcvi import likelihoods as lk


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(argv):
    out = io.StringIO()
    code = cli.main(argv, out=out)
    return code, out.getvalue()


TINY_SEG = """# tiny segmentation run
task = segmentation
epochs = 2
n_train = 24
n_test = 6
L = 4
hidden = 4
output_dir = {out}
"""

TINY_1D = """task = regression1d
epochs = 3
n_train = 48
n_test = 16
L = 4
hidden = 8
output_dir = {out}
"""


class TestConfig:
    def test_defaults(self):
        cfg = cli.resolve_config({}, env={})
        assert cfg["L"] == 20 and cfg["jitter"] == 1e-3 and cfg["noise_var"] == 0.1
        assert cfg["momentum"] == 0.9 and cfg["weight_decay"] == 1e-4
        assert cfg["prior_mean"] == 0.0 and cfg["likelihood"] == "gaussian"
        seg = cli.resolve_config({"task": "segmentation"}, env={})
        assert seg["prior_mean"] == 1.0 and seg["likelihood"] == lk.BOLTZMANN
        assert cli.resolve_config({"task": "depth"}, env={})["prior_mean"] == 0.5

    def test_parse_and_types(self):
        raw = cli.parse_config("L = 7  # comment\n\nlr=0.5\ndata_scale = no\ngrad_clip = none\n")
        cfg = cli.resolve_config(raw, env={})
        assert cfg["L"] == 7 and cfg["lr"] == 0.5 and cfg["data_scale"] is False and cfg["grad_clip"] is None

    @pytest.mark.parametrize("text", ["bogus = 1", "L = 2\nL = 3", "no equals sign"])
    def test_rejected(self, text):
        with pytest.raises(cli.UsageError):
            cli.parse_config(text)

    def test_bad_values(self):
        for raw in ({"L": "x"}, {"task": "nope"}, {"likelihood": "cauchy"},
                    {"task": "segmentation", "likelihood": "gaussian"}):
            with pytest.raises(cli.UsageError):
                cli.resolve_config(raw, env={})

    def test_env_override(self):
        cfg = cli.resolve_config({"output_dir": "a"}, env={cli.OUTPUT_ENV: "b"})
        assert cfg["output_dir"] == "b"

    def test_format_roundtrip(self):
        cfg = cli.resolve_config({"task": "depth", "grad_clip": "none"}, env={})
        assert cli.resolve_config(cli.parse_config(cli.format_config(cfg)), env={}) == cfg


class TestCommands:
    def test_selftest_passes(self):
        code, out = run(["selftest"])
        assert code == 0
        assert out.count("PASS") == len(selftest.run_all()) and "FAIL" not in out

    def test_selftest_catches_a_corrupted_constant(self, monkeypatch):
        monkeypatch.setattr(lk, "LOG_SQRT_2PI", lk.LOG_SQRT_2PI + 0.01)
        code, out = run(["selftest"])
        assert code == 2 and "FAIL" in out

    def test_train_eval_regression(self, tmp_path):
        out_dir = tmp_path / "r"
        cfg = write_cfg(tmp_path, TINY_1D.format(out=out_dir))
        assert run(["train", cfg])[0] == 0
        assert run(["eval", cfg])[0] == 0
        for name in ("model.npz", "train_log.csv", "config.txt", "predictions.csv", "metrics.csv",
                     "calibration.csv"):
            assert (out_dir / name).exists(), name
        rows = list(csv.reader(open(out_dir / "metrics.csv")))
        names = {r[0] for r in rows[1:]}
        assert {"rel", "log10", "rms", "calibration", "ood_epistemic_ratio"} <= names
        assert open(out_dir / "calibration.csv").readline().strip() == "level,observed"

    def test_identical_runs(self, tmp_path):
        outputs = []
        for k in range(2):
            out_dir = tmp_path / f"s{k}"
            cfg = write_cfg(tmp_path, TINY_SEG.format(out=out_dir), f"{k}.cfg")
            assert run(["train", cfg])[0] == 0 and run(["eval", cfg])[0] == 0
            outputs.append([(out_dir / n).read_bytes() for n in ("train_log.csv", "predictions.csv", "metrics.csv")])
        assert outputs[0] == outputs[1]

    def test_eval_without_checkpoint(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, TINY_1D.format(out=tmp_path / "empty"))
        code, _ = run(["eval", cfg])
        assert code == 1
        assert "checkpoint not found" in capsys.readouterr().err

    def test_set_override_and_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        cfg = write_cfg(tmp_path, TINY_1D.format(out=tmp_path / "ignored"))
        assert run(["train", cfg, "--set", "epochs=1"])[0] == 0
        log = list(csv.reader(open(tmp_path / "env" / "train_log.csv")))
        assert len(log) == 2
        assert not (tmp_path / "ignored").exists()

    def test_kernel_dump(self, tmp_path):
        cfg = write_cfg(tmp_path, TINY_1D.format(out=tmp_path / "k"))
        inputs = tmp_path / "x.csv"
        np.savetxt(inputs, np.repeat(np.array([[0.0], [1.0], [-2.0]]), 8, axis=1), delimiter=",")
        assert run(["kernel", cfg, "--inputs", str(inputs)])[0] == 0
        from funcvi.block_cov import read_csv
        K = read_csv(open(tmp_path / "k" / "kernel.csv"))
        assert (K.B, K.P) == (3, 1)
        assert K.blocks[2, 2, 0] > K.blocks[1, 1, 0] > K.blocks[0, 0, 0]

    def test_gen_data(self, tmp_path):
        cfg = write_cfg(tmp_path, TINY_SEG.format(out=tmp_path / "g"))
        assert run(["gen-data", cfg, "--pgm", "2"])[0] == 0
        from funcvi.toytasks import load_dataset
        ds = load_dataset(tmp_path / "g" / "data")
        assert ds.X_train.shape == (24, 1, 8, 8)
        assert (tmp_path / "g" / "data" / "target_1.pgm").exists()

    def test_usage_errors(self, tmp_path):
        assert run([])[0] == 1
        assert run(["train", str(tmp_path / "missing.cfg")])[0] == 1
        assert run(["train", write_cfg(tmp_path, "bogus = 3")])[0] == 1

    def test_numerical_failure_exit_code(self, tmp_path):
        cfg = write_cfg(tmp_path, TINY_1D.format(out=tmp_path / "n") + "lr = 1e6\ngrad_clip = none\n")
        assert run(["train", cfg])[0] == 2
