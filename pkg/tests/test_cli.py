import json

import pytest
from click.testing import CliRunner

from vipnet.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared corpus and a one-epoch checkpoint for the command tests."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    r = runner.invoke(main, ["synth", "--count", "6", "--seed", "2",
                             "--out", str(root / "corpus")])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["train", "--corpus", str(root / "corpus"),
                             "--out", str(root / "run"), "--epochs", "1",
                             "--batch-size", "4", "--lr", "1e-3",
                             "--warmup-epochs", "0", "--dim", "16"])
    assert r.exit_code == 0, r.output
    return root


class TestSynth:
    def test_writes_corpus_and_fingerprint(self, tmp_path):
        runner = CliRunner()
        r = runner.invoke(main, ["synth", "--count", "5", "--seed", "7",
                                 "--out", str(tmp_path / "c")])
        assert r.exit_code == 0, r.output
        assert "config fingerprint:" in r.output
        assert (tmp_path / "c" / "oracle.json").exists()

    def test_deterministic_across_runs(self, tmp_path):
        runner = CliRunner()
        for name in ("a", "b"):
            r = runner.invoke(main, ["synth", "--count", "5", "--seed", "7",
                                     "--out", str(tmp_path / name)])
            assert r.exit_code == 0, r.output
        assert (tmp_path / "a" / "oracle.json").read_bytes() == \
            (tmp_path / "b" / "oracle.json").read_bytes()

    def test_bad_profile_exits_nonzero(self, tmp_path):
        r = CliRunner().invoke(main, ["synth", "--count", "5", "--profile", "bogus",
                                      "--out", str(tmp_path / "c")])
        assert r.exit_code != 0


class TestBaseline:
    def test_prints_rank_metrics(self, workspace, tmp_path):
        r = CliRunner().invoke(main, ["baseline", "--cue", "centrality",
                                      "--corpus", str(workspace / "corpus"),
                                      "--out", str(tmp_path / "rep")])
        assert r.exit_code == 0, r.output
        assert "rank1=" in r.output
        assert (tmp_path / "rep" / "report.csv").exists()


class TestTrainEval:
    def test_checkpoint_written(self, workspace):
        ck = workspace / "run" / "checkpoint"
        assert (ck / "checkpoint.json").exists()
        manifest = json.loads((ck / "checkpoint.json").read_text())
        assert manifest["train_config"]["epochs"] == 1

    def test_eval_writes_report(self, workspace, tmp_path):
        r = CliRunner().invoke(main, [
            "eval", "--checkpoint", str(workspace / "run" / "checkpoint"),
            "--corpus", str(workspace / "corpus"), "--split", "test",
            "--out", str(tmp_path / "rep")])
        assert r.exit_code == 0, r.output
        report = json.loads((tmp_path / "rep" / "report.json").read_text())
        assert "rank1" in report
        assert (tmp_path / "rep" / "rank_accuracy.png").exists()

    def test_sweep_writes_three_rows(self, workspace, tmp_path):
        r = CliRunner().invoke(main, [
            "train", "--corpus", str(workspace / "corpus"),
            "--out", str(tmp_path / "sweep"), "--epochs", "1",
            "--batch-size", "4", "--warmup-epochs", "0", "--dim", "8",
            "--sweep-cont", "0.0,0.3"])
        assert r.exit_code == 0, r.output
        rows = json.loads((tmp_path / "sweep" / "sweep_report.json").read_text())
        assert [row["lambda_cont"] for row in rows] == [0.0, 0.3]

    def test_config_file_precedence(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 1, "batch_size": 3, "dim": 8}))
        r = CliRunner().invoke(main, [
            "train", "--corpus", str(workspace / "corpus"),
            "--out", str(tmp_path / "run"), "--config", str(cfg),
            "--batch-size", "2"])
        assert r.exit_code == 0, r.output
        saved = json.loads((tmp_path / "run" / "train_config.json").read_text())
        train_cfg = saved[1]
        assert train_cfg["epochs"] == 1        # from file
        assert train_cfg["batch_size"] == 2    # flag wins over file


class TestPredictExplain:
    def test_predict_emits_json(self, workspace, tmp_path):
        r = CliRunner().invoke(main, [
            "predict", "--checkpoint", str(workspace / "run" / "checkpoint"),
            "--corpus", str(workspace / "corpus"), "--out", str(tmp_path / "p")])
        assert r.exit_code == 0, r.output
        files = list((tmp_path / "p").glob("*.json"))
        assert len(files) == 6
        data = json.loads(files[0].read_text())
        assert {"clip_id", "probabilities", "ranked_ids", "vip_id",
                "per_cue_rank"} <= set(data)

    def test_predict_requires_exactly_one_source(self, workspace, tmp_path):
        r = CliRunner().invoke(main, [
            "predict", "--checkpoint", str(workspace / "run" / "checkpoint"),
            "--out", str(tmp_path / "p")])
        assert r.exit_code == 1

    def test_explain_emits_rationale(self, workspace, tmp_path):
        clip_dir = next(d for d in (workspace / "corpus").iterdir()
                        if (d / "manifest.json").exists())
        r = CliRunner().invoke(main, [
            "explain", "--checkpoint", str(workspace / "run" / "checkpoint"),
            "--clip", str(clip_dir), "--mode", "guided",
            "--out", str(tmp_path / "e")])
        assert r.exit_code == 0, r.output
        payload = json.loads(next((tmp_path / "e").glob("*.json")).read_text())
        assert payload["guidance_mode"] == "guided"
        assert payload["refined_text"].startswith("Refined rationale:")


class TestGradcheck:
    def test_exits_zero(self):
        r = CliRunner().invoke(main, ["gradcheck", "--tolerance", "1e-3"])
        assert r.exit_code == 0, r.output
        assert "gradient check passed" in r.output
