import re
from pathlib import Path

import numpy as np
import pytest

from svmr.benchmark import load_corpus
from svmr.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from svmr.data import MomentPrediction, load_predictions, save_predictions
from svmr.gradsuite import GradCheckResult
from svmr.index import build_index, save_index
from svmr.report import read_metrics_report
from svmr.stage1 import Stage1Model, resize_batch

TINY_CFG = """\
synth.num_classes = 6
synth.channels = 8
corpus.num_query_videos = 10
corpus.num_reference_videos = 9
corpus.train_fraction = 0.5
corpus.val_fraction = 0.25
corpus.test_fraction = 0.25
stage1.channels = 8
stage1.d_e = 16
stage1.t_emb = 2
stage1.l_q = 4
stage1.l_r = 24
stage1.ctc_filters = 1,4,1
stage1.lr = 0.001
stage1.batch_size = 8
stage1.micro_batch = 8
stage1.epochs = 2
stage1.steps_per_epoch = 5
stage1.val_batches = 1
stage2.channels = 8
stage2.base_hidden = 12
stage2.map_channels = 8
stage2.n_samples = 4
stage2.head_channels = 8
stage2.l_q = 4
stage2.l_r = 12
stage2.lr = 0.001
stage2.batch_size = 4
stage2.epochs = 1
stage2.steps_per_epoch = 3
stage2.val_pairs = 4
"""


def run(*argv) -> int:
    return main([str(a) for a in argv])


def run_pipeline(root: Path, seed: int = 7) -> dict[str, Path]:
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.cfg"
    cfg.write_text(TINY_CFG)
    out = root / "out"
    paths = {
        "cfg": cfg, "out": out, "corpus": out / "corpus",
        "stage1": out / "stage1.ckpt", "stage2": out / "stage2.ckpt",
        "index": out / "gallery.svmidx",
        "predictions": out / "predictions.jsonl",
    }
    base = ("--config", cfg, "--seed", seed, "--out-dir", out)
    assert run("synth-corpus", *base) == EXIT_OK
    assert run("train-stage1", *base, "--corpus", paths["corpus"]) == EXIT_OK
    assert run("embed-gallery", *base, "--corpus", paths["corpus"],
               "--stage1", paths["stage1"]) == EXIT_OK
    assert run("train-stage2", *base, "--corpus", paths["corpus"]) == EXIT_OK
    assert run("query", *base, "--corpus", paths["corpus"],
               "--index", paths["index"], "--stage1", paths["stage1"],
               "--stage2", paths["stage2"], "--split", "test") == EXIT_OK
    assert run("evaluate", *base, "--corpus", paths["corpus"],
               "--predictions", paths["predictions"],
               "--split", "test") == EXIT_OK
    return paths


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipeline"))


class TestParser:
    def test_no_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth-corpus", "--frobnicate"])
        assert exc.value.code == 2

    def test_query_requires_a_source(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["query", "--corpus", "c", "--index", "i",
                  "--stage1", "a", "--stage2", "b"])
        assert exc.value.code == 2


class TestExitCodes:
    def test_missing_config_file(self, tmp_path, capsys):
        code = run("synth-corpus", "--config", tmp_path / "nope.cfg",
                   "--out-dir", tmp_path)
        assert code == EXIT_CONFIG
        assert capsys.readouterr().err.startswith("error:")

    def test_bad_config_value(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("stage1.d_e = wide\n")
        assert run("synth-corpus", "--config", cfg,
                   "--out-dir", tmp_path) == EXIT_CONFIG

    def test_missing_corpus(self, tmp_path, capsys):
        code = run("train-stage1", "--corpus", tmp_path / "missing",
                   "--out-dir", tmp_path)
        assert code == EXIT_DATA
        err = capsys.readouterr().err
        assert err.startswith("error:") and err.count("\n") == 1

    def test_gradcheck_failure_exits_4(self, monkeypatch, capsys):
        import svmr.cli as cli_mod
        monkeypatch.setattr(
            cli_mod, "run_gradient_suite",
            lambda seeds: [GradCheckResult("broken_op", 0, 1.0, 1e-3)])
        assert run("gradcheck") == EXIT_NUMERIC
        assert "broken_op" in capsys.readouterr().out


class TestPipelineArtifacts:
    def test_expected_files(self, pipeline):
        out = pipeline["out"]
        for name in ("stage1.ckpt", "stage2.ckpt", "gallery.svmidx",
                     "predictions.jsonl", "metrics.txt", "ar_an_curve.csv",
                     "ar_curve.png", "stage1_loss.png", "stage2_loss.png",
                     "stage1_history.csv", "stage2_history.csv", "run.log"):
            assert (out / name).exists(), name

    def test_run_log_format(self, pipeline):
        lines = (pipeline["out"] / "run.log").read_text().splitlines()
        assert [l.split()[0] for l in lines] == [
            "command=synth-corpus", "command=train-stage1",
            "command=embed-gallery", "command=train-stage2",
            "command=query", "command=evaluate"]
        for line in lines:
            assert re.fullmatch(
                r"command=[a-z0-9-]+ config_hash=[0-9a-f]{12} seed=\d+", line)

    def test_metrics_report_keys(self, pipeline):
        metrics = read_metrics_report(pipeline["out"] / "metrics.txt")
        for key in ("hr_at_1", "hr_at_5", "hr_at_10", "map_at_1", "map_at_5",
                    "map_at_10", "auc", "prec_at_1", "prec_at_5", "queries"):
            assert key in metrics, key
        assert metrics["queries"] >= 1

    def test_ar_curve_csv_has_100_rows(self, pipeline):
        lines = (pipeline["out"] / "ar_an_curve.csv").read_text().splitlines()
        assert lines[0] == "an,ar"
        assert len(lines) == 101

    def test_history_csv_shape(self, pipeline):
        lines = (pipeline["out"] / "stage1_history.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss"
        assert len(lines) == 3


class TestQueryModes:
    def test_single_query_features(self, pipeline, tmp_path):
        from svmr.data import save_features
        corpus = load_corpus(pipeline["corpus"])
        clip = corpus.queries["train"][0]
        feat = tmp_path / "probe.svmf"
        save_features(clip.features, feat)
        out = tmp_path / "single"
        code = run("query", "--config", pipeline["cfg"], "--out-dir", out,
                   "--corpus", pipeline["corpus"], "--index", pipeline["index"],
                   "--stage1", pipeline["stage1"], "--stage2", pipeline["stage2"],
                   "--query-features", feat, "--query-id", "probe")
        assert code == EXIT_OK
        preds = load_predictions(out / "predictions.jsonl")
        assert all(qid == "probe" for qid, _ in preds)

    def test_top_videos_caps_candidates(self, pipeline, tmp_path):
        """Index built so every reference ties at cosine 1: the --top-videos
        budget alone decides how many videos can appear in the output."""
        corpus = load_corpus(pipeline["corpus"])
        clip = corpus.queries["test"][0]
        model = Stage1Model.load(pipeline["stage1"])
        e_q = model.encode_query(
            resize_batch([clip.features.data], model.config.l_q))[0]
        index = build_index([(v.video_id, e_q[:, None].copy())
                             for v in corpus.references])
        index_path = tmp_path / "ones.svmidx"
        save_index(index, index_path)
        counts = {}
        for budget in (2, 5):
            out = tmp_path / f"top{budget}"
            code = run("query", "--config", pipeline["cfg"], "--out-dir", out,
                       "--corpus", pipeline["corpus"], "--index", index_path,
                       "--stage1", pipeline["stage1"],
                       "--stage2", pipeline["stage2"],
                       "--split", "test", "--top-videos", budget)
            assert code == EXIT_OK
            preds = load_predictions(out / "predictions.jsonl")
            by_query: dict[str, set] = {}
            for qid, p in preds:
                by_query.setdefault(qid, set()).add(p.video_id)
            assert by_query, "tied index should yield predictions"
            assert all(len(vids) <= budget for vids in by_query.values())
            counts[budget] = max(len(vids) for vids in by_query.values())
        assert counts[2] == 2
        assert counts[5] == 5

    def test_unknown_index_id_is_data_error(self, pipeline, tmp_path):
        corpus = load_corpus(pipeline["corpus"])
        clip = corpus.queries["test"][0]
        model = Stage1Model.load(pipeline["stage1"])
        e_q = model.encode_query(
            resize_batch([clip.features.data], model.config.l_q))[0]
        index = build_index([("ghost", e_q[:, None].copy())])
        index_path = tmp_path / "ghost.svmidx"
        save_index(index, index_path)
        code = run("query", "--config", pipeline["cfg"],
                   "--out-dir", tmp_path / "g",
                   "--corpus", pipeline["corpus"], "--index", index_path,
                   "--stage1", pipeline["stage1"],
                   "--stage2", pipeline["stage2"], "--split", "test")
        assert code == EXIT_DATA


class TestEvaluate:
    def test_perfect_predictions_score_one(self, pipeline, tmp_path, capsys):
        corpus = load_corpus(pipeline["corpus"])
        references = corpus.reference_by_id()
        rows = []
        for clip in corpus.queries["test"]:
            qid = clip.features.video_id
            for vid in sorted(references):
                for inst in references[vid].instances:
                    if inst.class_id == clip.class_id:
                        rows.append((qid, MomentPrediction(
                            vid, inst.t_start, inst.t_end, 1.0)))
        assert rows, "test queries must have positive references"
        pred_path = tmp_path / "perfect.jsonl"
        save_predictions(rows, pred_path)
        out = tmp_path / "eval"
        code = run("evaluate", "--config", pipeline["cfg"], "--out-dir", out,
                   "--corpus", pipeline["corpus"],
                   "--predictions", pred_path, "--split", "test")
        assert code == EXIT_OK
        capsys.readouterr()
        metrics = read_metrics_report(out / "metrics.txt")
        assert metrics["prec_at_1"] == pytest.approx(1.0)
        assert metrics["hr_at_1"] == pytest.approx(1.0)
        assert metrics["auc"] > 90.0

    def test_tiou_tau_flag_changes_report(self, pipeline, tmp_path):
        corpus = load_corpus(pipeline["corpus"])
        references = corpus.reference_by_id()
        rows = []
        for clip in corpus.queries["test"]:
            qid = clip.features.video_id
            for vid in sorted(references):
                for inst in references[vid].instances:
                    if inst.class_id == clip.class_id:
                        span = inst.t_end - inst.t_start
                        # overlap ~0.55: counted at tau 0.5, not at tau 0.9
                        rows.append((qid, MomentPrediction(
                            vid, inst.t_start, inst.t_end - 0.29 * span, 1.0)))
        pred_path = tmp_path / "partial.jsonl"
        save_predictions(rows, pred_path)
        values = {}
        for tau in ("0.5", "0.9"):
            out = tmp_path / f"tau{tau}"
            assert run("evaluate", "--config", pipeline["cfg"],
                       "--out-dir", out, "--corpus", pipeline["corpus"],
                       "--predictions", pred_path, "--split", "test",
                       "--tiou-tau", tau) == EXIT_OK
            values[tau] = read_metrics_report(out / "metrics.txt")["prec_at_1"]
        assert values["0.5"] == pytest.approx(1.0)
        assert values["0.9"] == pytest.approx(0.0)


class TestDeterminism:
    def test_pipeline_twice_identical_bytes(self, tmp_path):
        a = run_pipeline(tmp_path / "a", seed=3)
        b = run_pipeline(tmp_path / "b", seed=3)
        for name in ("stage1.ckpt", "stage2.ckpt", "gallery.svmidx",
                     "predictions.jsonl", "metrics.txt", "ar_an_curve.csv",
                     "ar_curve.png", "stage1_loss.png", "stage2_loss.png",
                     "run.log"):
            left = (a["out"] / name).read_bytes()
            right = (b["out"] / name).read_bytes()
            assert left == right, f"{name} differs between identical runs"


class TestGradcheckCommand:
    def test_passes_and_prints(self, monkeypatch, capsys):
        import svmr.cli as cli_mod
        monkeypatch.setattr(
            cli_mod, "run_gradient_suite",
            lambda seeds: [GradCheckResult("op_a", s, 1e-9, 1e-3)
                           for s in seeds])
        assert run("gradcheck", "--seed", 2) == EXIT_OK
        out = capsys.readouterr().out
        assert "op_a" in out and "all 5 gradient checks passed" in out
