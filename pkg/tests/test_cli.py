import filecmp
import json
import os

import numpy as np
import pytest

from fpi.cli import main
from fpi.volume import load_array, save_array

MODEL = {"input_size": 16, "stem_width": 4, "stage_widths": [4, 8],
         "stage_blocks": [2, 2], "downsamples": 2}


def run(*argv) -> int:
    return main(list(argv))


def dir_bytes_equal(a, b, ignore=()) -> bool:
    names = sorted(os.listdir(a))
    if names != sorted(os.listdir(b)):
        return False
    names = [n for n in names if n not in ignore]
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    return not mismatch and not errors


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "phantoms")
    assert run("phantom", "--count", "10", "--shape", "16", "--seed", "7",
               "--out", out) == 0
    return out


class TestPhantom:
    def test_writes_volumes_and_manifest(self, corpus):
        manifest = json.load(open(os.path.join(corpus, "manifest.json")))
        assert len(manifest["entries"]) == 10
        splits = [e["split"] for e in manifest["entries"]]
        assert splits.count("train") == 6
        assert splits.count("test-normal") == 1
        assert splits.count("test-anomaly-source") == 3

    def test_rerun_byte_identical(self, tmp_path, corpus):
        other = str(tmp_path / "again")
        assert run("phantom", "--count", "10", "--shape", "16", "--seed", "7",
                   "--out", other) == 0
        rel = [e["path"] for e in
               json.load(open(os.path.join(other, "manifest.json")))["entries"]]
        assert all(os.path.isabs(p) or True for p in rel)
        names = [n for n in os.listdir(corpus) if n.endswith(".raw")]
        match, mismatch, errors = filecmp.cmpfiles(corpus, other, names, shallow=False)
        assert not mismatch and not errors

    def test_zero_count_is_usage_error(self, tmp_path):
        assert run("phantom", "--count", "0", "--out", str(tmp_path / "x")) == 2


class TestSynth:
    def test_discrete_labels_take_class_values(self, corpus, tmp_path):
        out = str(tmp_path / "synth")
        assert run("synth", "--manifest", os.path.join(corpus, "manifest.json"),
                   "--mode", "discrete", "--seed", "1", "--count", "12",
                   "--out", out) == 0
        index = json.load(open(os.path.join(out, "index.json")))
        assert len(index["pairs"]) == 12
        seen = set()
        for pair in index["pairs"]:
            label = load_array(os.path.join(out, pair["label"]))
            seen |= set(np.unique(label).tolist())
        assert seen <= {0.0, 0.25, 0.5, 0.75, 1.0}

    def test_continuous_labels_zero_outside_patch(self, corpus, tmp_path):
        out = str(tmp_path / "synth")
        assert run("synth", "--manifest", os.path.join(corpus, "manifest.json"),
                   "--mode", "continuous", "--seed", "2", "--count", "20",
                   "--out", out) == 0
        index = json.load(open(os.path.join(out, "index.json")))
        for pair in index["pairs"]:
            label = load_array(os.path.join(out, pair["label"]))
            j0, i0, j1, i1 = pair["patch_bounds"]
            outside = np.ones_like(label, dtype=bool)
            outside[j0:j1, i0:i1] = False
            assert (label[outside] == 0).all()

    def test_same_seed_identical_export(self, corpus, tmp_path):
        outs = [str(tmp_path / d) for d in ("a", "b")]
        for out in outs:
            assert run("synth", "--manifest", os.path.join(corpus, "manifest.json"),
                       "--mode", "continuous", "--seed", "5", "--count", "8",
                       "--out", out) == 0
        assert dir_bytes_equal(*outs)

    def test_bad_mode_is_usage_error(self, corpus, tmp_path):
        assert run("synth", "--manifest", os.path.join(corpus, "manifest.json"),
                   "--mode", "bogus", "--out", str(tmp_path / "x")) == 2


class TestMakeTestset:
    def test_counts_and_masks(self, corpus, tmp_path):
        out = str(tmp_path / "testset")
        assert run("make-testset", "--manifest", os.path.join(corpus, "manifest.json"),
                   "--seed", "3", "--out", out) == 0
        index = json.load(open(os.path.join(out, "index.json")))
        anomalous = [c for c in index["cases"] if c["subject_label"] == 1]
        normal = [c for c in index["cases"] if c["subject_label"] == 0]
        assert len(anomalous) == 3 and len(normal) == 1
        for case in anomalous:
            mask = load_array(os.path.join(out, case["mask"]))
            assert mask.sum() > 0

    def test_deterministic(self, corpus, tmp_path):
        outs = [str(tmp_path / d) for d in ("a", "b")]
        for out in outs:
            assert run("make-testset", "--manifest",
                       os.path.join(corpus, "manifest.json"),
                       "--seed", "3", "--out", out) == 0
        assert dir_bytes_equal(*outs)


def write_config(path, corpus, out_dir, **overrides):
    cfg = {
        "seed": 3, "threads": 1, "mode": "continuous",
        "epochs": 1, "lr": 1e-3, "batch_size": 16,
        "model": dict(MODEL),
        "manifest": os.path.join(corpus, "manifest.json"),
        "out_dir": out_dir,
    }
    cfg.update(overrides)
    with open(path, "w") as f:
        json.dump(cfg, f)
    return path


class TestTrainCommand:
    def test_smoke_run_writes_checkpoint_and_log(self, corpus, tmp_path):
        out = str(tmp_path / "run")
        cfg = write_config(str(tmp_path / "cfg.json"), corpus, out, epochs=2)
        assert run("train", "--config", cfg) == 0
        assert os.path.exists(os.path.join(out, "model.ckpt"))
        with open(os.path.join(out, "train_log.jsonl")) as f:
            records = [json.loads(line) for line in f]
        assert [r["epoch"] for r in records] == [0, 1]

    def test_unknown_config_key_rejected(self, corpus, tmp_path):
        cfg_path = str(tmp_path / "cfg.json")
        write_config(cfg_path, corpus, str(tmp_path / "run"))
        with open(cfg_path) as f:
            data = json.load(f)
        data["banana"] = 1
        with open(cfg_path, "w") as f:
            json.dump(data, f)
        assert run("train", "--config", cfg_path) == 2

    def test_head_mode_mismatch_rejected(self, corpus, tmp_path):
        model = dict(MODEL)
        model["head"] = "softmax"
        cfg = write_config(str(tmp_path / "cfg.json"), corpus, str(tmp_path / "run"),
                           mode="continuous", model=model)
        assert run("train", "--config", cfg) == 2

    def test_deterministic_checkpoint(self, corpus, tmp_path):
        ckpts = []
        for d in ("a", "b"):
            out = str(tmp_path / d)
            cfg = write_config(str(tmp_path / f"cfg{d}.json"), corpus, out)
            assert run("train", "--config", cfg) == 0
            ckpts.append(os.path.join(out, "model.ckpt"))
        with open(ckpts[0], "rb") as f1, open(ckpts[1], "rb") as f2:
            assert f1.read() == f2.read()


class TestSwaCommand:
    def test_writes_ten_snapshots(self, corpus, tmp_path):
        out = str(tmp_path / "run")
        cfg = write_config(str(tmp_path / "cfg.json"), corpus, out)
        assert run("train", "--config", cfg) == 0
        swa_out = str(tmp_path / "swa")
        cfg2 = write_config(str(tmp_path / "cfg2.json"), corpus, swa_out)
        assert run("swa", "--config", cfg2, "--checkpoint",
                   os.path.join(out, "model.ckpt")) == 0
        snapshots = [n for n in os.listdir(swa_out) if n.startswith("swa_snapshot")]
        assert len(snapshots) == 10
        assert os.path.exists(os.path.join(swa_out, "model_swa.ckpt"))


@pytest.fixture(scope="module")
def testset(corpus, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ts") / "testset")
    assert run("make-testset", "--manifest", os.path.join(corpus, "manifest.json"),
               "--seed", "4", "--out", out) == 0
    return out


class TestScoreEvaluate:
    def test_oracle_scores_give_perfect_metrics(self, testset, tmp_path):
        scores_dir = str(tmp_path / "scores")
        os.makedirs(scores_dir)
        index = json.load(open(os.path.join(testset, "index.json")))
        for case in index["cases"]:
            if case["mask"]:
                mask = load_array(os.path.join(testset, case["mask"]))
            else:
                img = load_array(os.path.join(testset, case["img"]))
                mask = np.zeros_like(img)
            save_array(mask, os.path.join(scores_dir, f"{case['id']}_score"))
            with open(os.path.join(scores_dir, f"{case['id']}_subject.json"), "w") as f:
                json.dump({"id": case["id"], "subject_score": float(mask.max()),
                           "slice_scores": [], "aggregator": "max",
                           "score_map": f"{case['id']}_score.raw"}, f)
        report_path = str(tmp_path / "report.json")
        assert run("evaluate", "--testset", testset, "--scores", scores_dir,
                   "--out", report_path) == 0
        report = json.load(open(report_path))
        assert report["pixel"]["ap"] == 1.0
        assert report["pixel"]["auroc"] == 1.0
        assert report["pixel"]["dice_ceiling"] == 1.0
        assert report["subject"]["ap"] == 1.0

    def test_missing_record_names_case(self, testset, tmp_path, capsys):
        scores_dir = str(tmp_path / "empty")
        os.makedirs(scores_dir)
        code = run("evaluate", "--testset", testset, "--scores", scores_dir,
                   "--out", str(tmp_path / "r.json"))
        assert code == 3
        err = capsys.readouterr().err
        assert "phantom-" in err

    def test_score_command_produces_records(self, testset, corpus, tmp_path):
        out = str(tmp_path / "run")
        cfg = write_config(str(tmp_path / "cfg.json"), corpus, out)
        assert run("train", "--config", cfg) == 0
        scores_dir = str(tmp_path / "scores")
        assert run("score", "--checkpoint", os.path.join(out, "model.ckpt"),
                   "--volumes", testset, "--out", scores_dir) == 0
        index = json.load(open(os.path.join(testset, "index.json")))
        for case in index["cases"]:
            assert os.path.exists(os.path.join(scores_dir, f"{case['id']}_score.raw"))
            record = json.load(open(os.path.join(scores_dir, f"{case['id']}_subject.json")))
            assert 0.0 <= record["subject_score"] <= 1.0
        report_path = str(tmp_path / "report.json")
        assert run("evaluate", "--testset", testset, "--scores", scores_dir,
                   "--out", report_path, "--curves", str(tmp_path / "curves")) == 0
        curves = os.listdir(str(tmp_path / "curves"))
        assert any(n.endswith("_roc.csv") for n in curves)
        assert any(n.endswith("_pr.csv") for n in curves)
