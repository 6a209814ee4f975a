import json

import pytest

from minimoe.checkpoint import save_checkpoint
from minimoe.main import build_parser, main
from minimoe.model import EncoderModel


def emitted(capsys):
    return json.loads(capsys.readouterr().out)


class TestAnalyticCommands:
    def test_flops(self, capsys):
        assert main(["flops", "--config", "bert-base", "--seq-len", "128"]) == 0
        report = emitted(capsys)
        assert report["schema"] == "v1"
        assert report["gflops"] == pytest.approx(10.872, abs=1e-3)

    def test_params_from_preset(self, capsys):
        assert main(["params", "--config", "bert-base"]) == 0
        assert emitted(capsys)["params_total"] == 109_512_762

    def test_params_from_checkpoint(self, tiny_model, tmp_path, capsys):
        path = save_checkpoint(tiny_model, tmp_path / "m.bin")
        assert main(["params", "--checkpoint", str(path)]) == 0
        assert emitted(capsys)["params_total"] == tiny_model.num_parameters()

    def test_params_needs_one_source(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["params"])

    def test_library_errors_exit_with_two(self):
        assert main(["flops", "--config", "no-such-preset"]) == 2


class TestSvdCommand:
    def test_writes_the_report(self, tiny_model, tmp_path, capsys):
        path = save_checkpoint(tiny_model, tmp_path / "m.bin")
        out = tmp_path / "svd"
        assert main(["svd-analyze", "--checkpoint", str(path), "--selector", "layer.*.ffn.*",
                     "--factorize", "0.5", "--out", str(out)]) == 0
        payload = emitted(capsys)
        assert payload["spectra"]
        assert (out / "spectra.json").exists()
        assert (out / "factored.bin").exists()


class TestDistillCommand:
    def test_distills_from_a_plan_file(self, tiny_config, tiny_teacher_config, corpus_file, tmp_path, capsys):
        teacher = save_checkpoint(EncoderModel.initialize(tiny_teacher_config, seed=3), tmp_path / "t.bin")
        plan = tmp_path / "plan.json"
        plan.write_text(json.dumps({"teacher": str(teacher), "student": tiny_config.to_dict(), "batch_size": 4,
                                    "seq_len": 8, "max_steps": 2, "log_interval": 1}))
        out = tmp_path / "student"
        assert main(["--seed", "5", "distill", "--plan", str(plan), "--corpus", str(corpus_file),
                     "--out", str(out)]) == 0
        payload = emitted(capsys)
        assert payload["checkpoint"].endswith("student.bin")
        assert json.loads((out / "plan.json").read_text())["seed"] == 5

    def test_missing_teacher_is_a_config_error(self, corpus_file, tmp_path, caplog):
        code = main(["distill", "--corpus", str(corpus_file), "--out", str(tmp_path / "s")])
        assert code == 2
        assert "needs a teacher" in caplog.text
        assert not (tmp_path / "s").exists()

    def test_plan_without_teacher_is_a_config_error(self, tiny_config, corpus_file, tmp_path):
        plan = tmp_path / "plan.json"
        plan.write_text(json.dumps({"student": tiny_config.to_dict()}))
        assert main(["distill", "--plan", str(plan), "--corpus", str(corpus_file),
                     "--out", str(tmp_path / "s")]) == 2


class TestSweepExpertsParser:
    def test_expert_counts_default(self):
        args = build_parser().parse_args(["sweep-experts", "--teacher", "t.bin", "--corpus", "c.txt"])
        assert args.experts == "1,2,4,8"
        assert args.expert_pairs is None

    def test_expert_pairs(self):
        args = build_parser().parse_args(["sweep-experts", "--teacher", "t.bin", "--corpus", "c.txt",
                                          "--expert-pairs", "1,1", "2,4", "4,4"])
        assert args.expert_pairs == [(1, 1), (2, 4), (4, 4)]

    @pytest.mark.parametrize("cell", ["2", "1,2,3", "a,b"])
    def test_malformed_pairs_are_rejected(self, cell):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["sweep-experts", "--teacher", "t.bin", "--corpus", "c.txt",
                                       "--expert-pairs", cell])

    def test_counts_and_pairs_are_exclusive(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["sweep-experts", "--teacher", "t.bin", "--corpus", "c.txt",
                                       "--experts", "1,2", "--expert-pairs", "1,1"])
