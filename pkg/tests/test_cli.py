"""Command-line front end: exit codes, outputs, determinism, config parsing."""

import os

import numpy as np
import pytest

from nplab import cli

TINY_TRAIN = ["--enc-dim", "8", "--enc-width", "8", "--enc-layers", "1",
              "--dec-width", "8", "--dec-layers", "2",
              "--tasks-per-epoch", "32", "--crossval-tasks", "8"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    return code, capsys.readouterr().out


def assert_machine_parseable(out):
    for line in out.strip().splitlines():
        for token in line.split():
            assert "=" in token, f"not key=value: {token!r} in {line!r}"


class TestTrain:
    def test_writes_history_and_checkpoint(self, tmp_path, capsys):
        code, out = run(capsys, "train", "--model", "cnp", "--process", "eq",
                        "--epochs", "1", "--seed", "0", "--out", str(tmp_path),
                        *TINY_TRAIN)
        assert code == 0
        assert (tmp_path / "history.csv").exists()
        assert (tmp_path / "best.ckpt").exists()
        assert_machine_parseable(out)

    def test_same_seed_identical_history(self, tmp_path, capsys):
        for sub in ("a", "b"):
            code, _ = run(capsys, "train", "--model", "cnp", "--process", "eq",
                          "--epochs", "2", "--seed", "3", "--out", str(tmp_path / sub),
                          *TINY_TRAIN)
            assert code == 0
        assert (tmp_path / "a" / "history.csv").read_bytes() == \
               (tmp_path / "b" / "history.csv").read_bytes()

    def test_bad_model_name_lists_variants(self, tmp_path, capsys):
        with pytest.raises(SystemExit):
            cli.main(["train", "--model", "lstm", "--process", "eq",
                      "--out", str(tmp_path)])
        err = capsys.readouterr().err
        assert "convcnp" in err  # argparse enumerates the valid choices

    def test_bad_model_name_in_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("model=lstm\nprocess=eq\n")
        code, out = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path))
        assert code == 1
        assert "cnp" in out and "convcnp" in out

    def test_missing_required_setting(self, tmp_path, capsys):
        code, out = run(capsys, "train", "--process", "eq", "--out", str(tmp_path))
        assert code == 1
        assert "model" in out


class TestConfigFile:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("modell=cnp\n")
        code, out = run(capsys, "train", "--config", str(cfg))
        assert code == 1
        assert "unknown key" in out

    def test_flags_override_file(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("model=cnp\nprocess=eq\nepochs=9\nseed=1\n"
                       "tasks_per_epoch=32\ncrossval_tasks=8\n"
                       "enc_dim=8\nenc_width=8\nenc_layers=1\ndec_width=8\ndec_layers=2\n")
        code, out = run(capsys, "train", "--config", str(cfg), "--epochs", "1",
                        "--out", str(tmp_path))
        assert code == 0
        assert "epochs=1" in out

    def test_comments_and_blank_lines(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# a comment\n\nmodel=cnp  # trailing\n")
        assert cli._read_config_file(str(cfg)) == {"model": "cnp"}


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    code = cli.main(["train", "--model", "cnp", "--process", "eq", "--epochs", "1",
                     "--seed", "0", "--out", str(out), *TINY_TRAIN])
    assert code == 0
    return out / "best.ckpt"


class TestEval:
    def test_kl_rows_include_oracle_and_trivial(self, checkpoint, tmp_path, capsys):
        code, out = run(capsys, "eval", "--checkpoint", str(checkpoint), "--process", "eq",
                        "--split", "int", "--metric", "kl", "--n-tasks", "8",
                        "--seed", "1", "--out", str(tmp_path))
        assert code == 0
        assert_machine_parseable(out)
        text = (tmp_path / "metrics.csv").read_text()
        assert "diagonal-oracle" in text
        assert "trivial" in text
        # the reference against itself is exactly zero
        oracle_rows = [l for l in text.splitlines() if "diagonal-oracle" in l]
        assert all(",0.0," in row for row in oracle_rows)

    def test_sawtooth_kl_refused(self, checkpoint, tmp_path, capsys):
        code, out = run(capsys, "eval", "--checkpoint", str(checkpoint), "--process",
                        "sawtooth", "--metric", "kl", "--n-tasks", "4",
                        "--out", str(tmp_path))
        assert code == 1
        assert "Gaussian" in out

    def test_variant_mismatch_refused(self, checkpoint, tmp_path, capsys):
        code, out = run(capsys, "eval", "--checkpoint", str(checkpoint), "--model",
                        "convcnp", "--process", "eq", "--n-tasks", "4",
                        "--out", str(tmp_path))
        assert code == 1
        assert "cnp" in out

    def test_missing_checkpoint(self, tmp_path, capsys):
        code, out = run(capsys, "eval", "--checkpoint", str(tmp_path / "no.ckpt"),
                        "--process", "eq", "--out", str(tmp_path))
        assert code == 1

    def test_deterministic_csv(self, checkpoint, tmp_path, capsys):
        args = ["eval", "--checkpoint", str(checkpoint), "--process", "eq",
                "--split", "int", "--metric", "loglik", "--n-tasks", "6", "--seed", "5"]
        code1, _ = run(capsys, *args, "--out", str(tmp_path / "r1"))
        code2, _ = run(capsys, *args, "--out", str(tmp_path / "r2"))
        assert code1 == code2 == 0
        assert (tmp_path / "r1" / "metrics.csv").read_bytes() == \
               (tmp_path / "r2" / "metrics.csv").read_bytes()


class TestOracle:
    def test_battery_passes(self, capsys):
        code, out = run(capsys, "oracle", "--seed", "0")
        assert code == 0
        assert_machine_parseable(out)
        assert "failures=0" in out

    def test_perturbation_fails_chain_rule(self, capsys):
        code, out = run(capsys, "oracle", "--seed", "0", "--perturb")
        assert code == 3
        assert "check=chain_rule result=fail" in out

    def test_jacobi_residuals_monotone(self, capsys):
        _, out = run(capsys, "oracle", "--seed", "0")
        residuals = [float(line.split("residual=")[1])
                     for line in out.splitlines() if "jacobi_residual" in line]
        assert len(residuals) == 20
        assert all(b <= a + 1e-12 for a, b in zip(residuals, residuals[1:]))


class TestSimulate:
    def test_outputs_and_positivity(self, tmp_path, capsys):
        code, out = run(capsys, "simulate", "--n", "2", "--seed", "0", "--dt", "0.05",
                        "--out", str(tmp_path))
        assert code == 0
        assert_machine_parseable(out)
        assert "positive=true" in out
        for i in range(2):
            body = (tmp_path / f"trajectory_{i:03d}.csv").read_text().splitlines()
            assert body[0] == "t,prey,predator"
            values = np.array([[float(v) for v in line.split(",")] for line in body[1:]])
            assert np.all(values[:, 1:] > 0)
            for kind in ("interpolation", "forecasting", "reconstruction"):
                assert (tmp_path / f"task_{i:03d}_{kind}.csv").exists()

    def test_same_seed_identical_files(self, tmp_path, capsys):
        for sub in ("a", "b"):
            run(capsys, "simulate", "--n", "1", "--seed", "7", "--dt", "0.05",
                "--out", str(tmp_path / sub))
        for name in os.listdir(tmp_path / "a"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_sigma_zero_reported_and_accepted(self, tmp_path, capsys):
        code, out = run(capsys, "simulate", "--n", "1", "--seed", "2", "--dt", "0.05",
                        "--sigma", "0", "--out", str(tmp_path))
        assert code == 0
        assert "sigma=0.0000" in out


class TestThreadCap:
    def test_env_cap_applied(self, monkeypatch):
        monkeypatch.setenv("NPLAB_THREADS", "2")
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        cli._apply_thread_cap()
        assert os.environ["OMP_NUM_THREADS"] == "2"
