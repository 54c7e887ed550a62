import json
from pathlib import Path

import numpy as np
import pytest

from bcrec.cli import main
from bcrec.data import load_split


def dir_bytes(path: Path, skip=()) -> dict:
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name not in skip:
            out[str(p.relative_to(path))] = p.read_bytes()
    return out


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "data"
    code = main(["synth", "--users", "50", "--items", "60", "--seed", "5",
                 "--interactions-per-user", "12", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture
def split_dir(tmp_path, synth_dir):
    out = tmp_path / "split"
    code = main(["split", "--input", str(synth_dir / "interactions.txt"),
                 "--strategy", "random", "--seed", "1", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture
def trained(tmp_path, split_dir):
    out = tmp_path / "model"
    code = main(["train", "--split-dir", str(split_dir), "--loss", "bc",
                 "--dim", "8", "--batch-size", "64", "--num-negatives", "8",
                 "--max-epochs", "3", "--patience", "5", "--lr", "0.05",
                 "--seed", "2", "--out", str(out)])
    assert code == 0
    return out


class TestSynthCommand:
    def test_writes_expected_files(self, synth_dir):
        for name in ("interactions.txt", "truth.txt", "manifest.json", "run.json"):
            assert (synth_dir / name).exists()
        manifest = json.loads((synth_dir / "manifest.json").read_text())
        assert manifest["observed_interactions"] == 50 * 12

    def test_byte_identical_rerun(self, tmp_path):
        args = ["synth", "--users", "30", "--items", "40", "--seed", "7"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert dir_bytes(a) == dir_bytes(b)

    def test_degenerate_parameters_exit_2(self, tmp_path):
        assert main(["synth", "--users", "1", "--out", str(tmp_path / "x")]) == 2


class TestSplitCommand:
    def test_default_random_split_files_and_kl_stats(self, split_dir):
        manifest = json.loads((split_dir / "manifest.json").read_text())
        assert set(manifest["members"]) == {"train", "validation",
                                            "test_imbalanced", "test_balanced"}
        for entry in manifest["members"].values():
            assert (split_dir / entry["file"]).exists()
            assert entry["kl_uniform_items"] is not None
        split = load_split(split_dir)
        assert len(split.train) > 0

    def test_byte_identical_rerun(self, tmp_path, synth_dir):
        args = ["split", "--input", str(synth_dir / "interactions.txt"), "--seed", "3"]
        a, b = tmp_path / "sa", tmp_path / "sb"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert dir_bytes(a) == dir_bytes(b)

    def test_temporal_without_timestamps_exits_2(self, tmp_path, synth_dir, capsys):
        code = main(["split", "--input", str(synth_dir / "interactions.txt"),
                     "--strategy", "temporal", "--out", str(tmp_path / "t")])
        assert code == 2
        assert "temporal" in capsys.readouterr().err

    def test_temporal_split_with_timestamps(self, tmp_path):
        log = tmp_path / "log.txt"
        log.write_text("".join(f"u{k}\ti{k % 3}\t{k}\n" for k in range(20)))
        out = tmp_path / "tsplit"
        assert main(["split", "--input", str(log), "--strategy", "temporal",
                     "--out", str(out)]) == 0
        split = load_split(out)
        assert len(split.train) == 14
        assert len(split.validation) == 2
        assert len(split.test_temporal) == 4

    def test_k_core_flag(self, tmp_path):
        log = tmp_path / "log.txt"
        lines = [f"u{u}\ti{i}" for u in range(4) for i in range(4)]
        lines += ["u9\ti9"]  # degree-1 user and item
        log.write_text("\n".join(lines) + "\n")
        out = tmp_path / "kc"
        assert main(["split", "--input", str(log), "--k-core", "2",
                     "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["num_users"] == 4
        assert "u9" not in manifest["users"]

    def test_missing_input_exits_2(self, tmp_path):
        assert main(["split", "--out", str(tmp_path / "x")]) == 2


class TestTrainCommand:
    def test_artifacts(self, trained):
        for name in ("checkpoint.bin", "extractor.bin", "metrics.csv", "run.json"):
            assert (trained / name).exists()
        run = json.loads((trained / "run.json").read_text())
        assert run["command"] == "train"
        assert run["config"]["loss"] == "bc"
        lines = (trained / "metrics.csv").read_text().strip().splitlines()
        assert lines[0].startswith("epoch,")
        assert len(lines) == 1 + 3

    def test_byte_identical_rerun(self, tmp_path, split_dir):
        args = ["train", "--split-dir", str(split_dir), "--loss", "softmax",
                "--dim", "4", "--batch-size", "64", "--num-negatives", "4",
                "--max-epochs", "2", "--patience", "5", "--seed", "4"]
        a, b = tmp_path / "ta", tmp_path / "tb"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert dir_bytes(a) == dir_bytes(b)

    def test_unknown_loss_exits_2_with_usage(self, split_dir, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--split-dir", str(split_dir), "--loss", "nope"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_config_file_and_flag_precedence(self, tmp_path, split_dir):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"dim": 4, "max_epochs": 2, "batch_size": 64,
                                        "num_negatives": 4, "loss": "softmax",
                                        "patience": 5}))
        out = tmp_path / "cfgrun"
        assert main(["train", "--split-dir", str(split_dir), "--config", str(cfg_file),
                     "--max-epochs", "1", "--out", str(out)]) == 0
        run = json.loads((out / "run.json").read_text())
        assert run["config"]["dim"] == 4          # from file
        assert run["config"]["max_epochs"] == 1   # flag wins
        assert run["config"]["loss"] == "softmax"

    def test_bc_defaults_tau2(self, trained):
        run = json.loads((trained / "run.json").read_text())
        assert run["config"]["tau2"] == 0.1


class TestEvalCommand:
    def test_reports_match_library_evaluation(self, tmp_path, split_dir, trained):
        out = tmp_path / "ev"
        assert main(["eval", "--checkpoint", str(trained / "checkpoint.bin"),
                     "--split-dir", str(split_dir), "--member", "test_imbalanced",
                     "--k", "10", "--subgroups", "--out", str(out)]) == 0
        payload = json.loads((out / "report.json").read_text())

        from bcrec.data import subgroup_partition
        from bcrec.encoders import Recommender, load_checkpoint
        from bcrec.evaluator import evaluate

        kind, table, _ = load_checkpoint(trained / "checkpoint.bin")
        split = load_split(split_dir)
        rec = Recommender(kind, table, None)
        expect = evaluate(rec, split.test_imbalanced, split.train,
                          subgroups=subgroup_partition(split.train.item_pop), k=10)
        assert payload["overall"]["recall"] == pytest.approx(expect.overall.recall)
        assert payload["overall"]["ndcg"] == pytest.approx(expect.overall.ndcg)
        for name in ("head", "mid", "tail"):
            want = expect.subgroups[name]
            got = payload["subgroups"][name]
            if want is None:
                assert got is None
            else:
                assert got["recall"] == pytest.approx(want.recall)

    def test_missing_member_exits_2(self, tmp_path, split_dir, trained):
        assert main(["eval", "--checkpoint", str(trained / "checkpoint.bin"),
                     "--split-dir", str(split_dir), "--member", "test_temporal",
                     "--out", str(tmp_path / "x")]) == 2


class TestDiagnoseCommand:
    def test_all_kinds_write_reports(self, tmp_path, split_dir, trained):
        for which, files in [
            ("angles", ["angles.json", "angles.csv"]),
            ("geometry", ["geometry.json", "geometry.csv"]),
            ("bias-corr", ["bias_corr.json", "bias_corr.csv"]),
            ("subgroup-matrix", ["subgroup_matrix.json", "subgroup_matrix.csv"]),
            ("bias-report", ["bias_report.csv"]),
        ]:
            out = tmp_path / f"d_{which}"
            assert main(["diagnose", "--checkpoint", str(trained / "checkpoint.bin"),
                         "--extractor", str(trained / "extractor.bin"),
                         "--split-dir", str(split_dir), "--which", which,
                         "--out", str(out)]) == 0
            for f in files:
                assert (out / f).exists()

    def test_bias_corr_without_extractor_exits_2(self, tmp_path, split_dir, trained):
        assert main(["diagnose", "--checkpoint", str(trained / "checkpoint.bin"),
                     "--split-dir", str(split_dir), "--which", "bias-corr",
                     "--out", str(tmp_path / "x")]) == 2

    def test_geometry_matches_library_output(self, tmp_path, split_dir, trained):
        out = tmp_path / "geo"
        assert main(["diagnose", "--checkpoint", str(trained / "checkpoint.bin"),
                     "--split-dir", str(split_dir), "--which", "geometry",
                     "--seed", "3", "--out", str(out)]) == 0
        payload = json.loads((out / "geometry.json").read_text())

        from bcrec.diagnostics import NegativeSampleSpec, geometry_report
        from bcrec.encoders import load_checkpoint

        _, table, _ = load_checkpoint(trained / "checkpoint.bin")
        split = load_split(split_dir)
        expect = geometry_report(table, split.train, NegativeSampleSpec(seed=3))
        assert payload["compactness_sum"] == pytest.approx(expect.compactness_sum)
        assert payload["dispersion_sum"] == pytest.approx(expect.dispersion_sum)


class TestHelp:
    def test_every_command_has_help(self, capsys):
        for cmd in ("synth", "split", "train", "eval", "diagnose"):
            with pytest.raises(SystemExit) as exc:
                main([cmd, "--help"])
            assert exc.value.code == 0
            out = capsys.readouterr().out
            assert "--seed" in out and "--out" in out and "--config" in out
