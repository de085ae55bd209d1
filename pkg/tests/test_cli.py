import csv
import shutil

import numpy as np
import pytest

from fpsa.cli import SECTIONS, RunConfig, main, read_config_file, write_config_file
from fpsa.diagnostics import read_attention_csv, read_trace_csv
from fpsa.errors import ConfigError

SMALL = ["--set", "task.vocab_size=6", "--set", "train.batch=8", "--set", "fpi.max_iter=40"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def trained(tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train", "--out", str(out), "--epochs", "2", *SMALL)
    assert code == 0
    return out, stdout


class TestConfig:
    def test_help_lists_every_key_and_exit_code(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["train", "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for section, keys in SECTIONS.items():
            assert f"[{section}]" in text
            for key in keys:
                assert key in text
        for code in range(2, 7):
            assert f"  {code} " in text

    def test_file_round_trip(self, tmp_path):
        config = RunConfig(epochs=7, lr=1e-3, attention="vanilla", f64=True)
        write_config_file(config, tmp_path / "c.ini")
        assert read_config_file(tmp_path / "c.ini") == config

    def test_unknown_key(self, tmp_path, capsys):
        (tmp_path / "c.ini").write_text("[train]\nlearning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            read_config_file(tmp_path / "c.ini")
        assert run(capsys, "train", "--config", str(tmp_path / "c.ini"))[0] == 2

    def test_unknown_section(self, tmp_path):
        (tmp_path / "c.ini").write_text("[optim]\nlr = 0.1\n")
        with pytest.raises(ConfigError, match="optim"):
            read_config_file(tmp_path / "c.ini")

    @pytest.mark.parametrize("item", ["fpi.max_iter=0", "fpi.granularity=rows", "train.lr=fast", "run.seed"])
    def test_bad_values_exit_2(self, capsys, item, tmp_path):
        code, _, err = run(capsys, "train", "--out", str(tmp_path), "--set", item)
        assert code == 2 and err.startswith("error:")

    def test_flags_override_file(self, tmp_path, capsys):
        (tmp_path / "c.ini").write_text("[train]\nepochs = 50\n[task]\nvocab_size = 6\n")
        code, _, _ = run(capsys, "train", "--config", str(tmp_path / "c.ini"), "--epochs", "0", "--out", str(tmp_path / "o"))
        assert code == 0
        assert read_config_file(tmp_path / "o" / "config.ini").epochs == 0


class TestExitCodes:
    def test_missing_mnist_is_data_error(self, tmp_path, capsys):
        assert run(capsys, "train", "--task", "mnist_patch", "--out", str(tmp_path))[0] == 3
        assert run(capsys, "train", "--task", "mnist_patch", "--data", str(tmp_path / "none"), "--out", str(tmp_path))[0] == 3

    def test_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--out", str(tmp_path), *SMALL)
        assert code == 5 and "checkpoint" in err

    def test_incompatible_checkpoint(self, trained, capsys):
        out, _ = trained
        code, _, err = run(capsys, "eval", "--out", str(out), "--set", "task.heads=4", *SMALL)
        assert code == 5 and "shape mismatch" in err

    def test_corrupt_checkpoint(self, trained, capsys):
        out, _ = trained
        blob = out / "checkpoint" / "tensors.bin"
        blob.write_bytes(blob.read_bytes()[:-1] + b"\x00")
        assert run(capsys, "eval", "--out", str(out), *SMALL)[0] == 5

    def test_trace_refuses_vanilla(self, tmp_path, capsys):
        assert run(capsys, "trace", "--attention", "vanilla", "--out", str(tmp_path), *SMALL)[0] == 2

    def test_gradcheck_and_its_negative_control(self, capsys):
        code, out, _ = run(capsys, "gradcheck")
        assert code == 0 and "PASS" in out
        code, out, _ = run(capsys, "gradcheck", "--corrupt-vjp")
        assert code == 6 and "FAIL" in out


class TestArtifacts:
    def test_files_written(self, trained):
        out, stdout = trained
        names = {p.name for p in out.iterdir()}
        assert names == {"config.ini", "checkpoint", "metrics.csv", "trace.csv", "run_meta.json"}
        assert "final accuracy:" in stdout
        rows = list(csv.DictReader((out / "metrics.csv").open()))
        assert [r["epoch"] for r in rows] == ["1", "2"]
        assert {"head0_mean_iter", "head1_non_converged"} <= rows[0].keys()

    def test_eval_reproduces_final_accuracy(self, trained, capsys):
        out, stdout = trained
        final = stdout.split("final accuracy:")[1].split()[0]
        code, eval_out, _ = run(capsys, "eval", "--out", str(out), *SMALL)
        assert code == 0 and eval_out.strip() == f"accuracy: {final}"

    def test_repeat_run_is_byte_identical(self, trained, capsys):
        out, _ = trained
        first = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
        shutil.rmtree(out)
        assert run(capsys, "train", "--out", str(out), "--epochs", "2", *SMALL)[0] == 0
        second = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
        assert first.keys() == second.keys()
        differing = [str(k) for k in first if first[k] != second[k]]
        # only the timestamped metadata may differ
        assert set(differing) <= {"run_meta.json"}

    def test_zero_epochs_evaluates_untrained_model(self, tmp_path, capsys):
        code, stdout, _ = run(capsys, "train", "--out", str(tmp_path), "--epochs", "0", *SMALL)
        assert code == 0 and "final accuracy:" in stdout
        assert (tmp_path / "metrics.csv").read_text().count("\n") == 1

    def test_trace_limit(self, tmp_path, capsys):
        code, stdout, _ = run(capsys, "trace", "--limit", "5", "--out", str(tmp_path), *SMALL)
        assert code == 0 and "head 0" in stdout
        rows = read_trace_csv(tmp_path / "trace_train.csv")
        assert len(rows) == 5 * 2 * 7
        assert {r["sample_id"] for r in rows} == set(range(5))

    def test_heatmap_and_eval_export(self, trained, capsys):
        out, _ = trained
        code, stdout, _ = run(capsys, "heatmap", "--out", str(out), "--sample", "1", *SMALL)
        assert code == 0 and len(stdout.split()) == 2
        matrix, labels = read_attention_csv(stdout.split()[0])
        assert labels[5] == "5:MASK" and matrix.shape == (7, 7)
        np.testing.assert_allclose(matrix.sum(1), 1.0, atol=1e-6)
        assert run(capsys, "eval", "--out", str(out), "--export", *SMALL)[0] == 0
        assert (out / "attention" / "eval_head1.csv").exists()

    def test_heatmap_sample_out_of_range(self, tmp_path, capsys):
        assert run(capsys, "heatmap", "--sample", "999", "--out", str(tmp_path), *SMALL)[0] == 3
