"""Command-line surface: end-to-end runs, determinism, exit codes."""

import filecmp
import json
import os
from pathlib import Path

import numpy as np
import pytest

from corrkit import io as kio
from corrkit.cli import main

TINY_CONFIG = """\
seed = 0
synth.categories = 2
synth.instances = 6
synth.parts = 6
synth.grid = 14
synth.channels = 30
labels.count_per_category = 6
chain.k = 3
chain.count_per_category = 3
sphere_train.total_steps = 8
sphere_train.hidden1 = 8
sphere_train.hidden2 = 6
sphere_train.max_cells = 16
sphere_train.batch_pairs = 2
train.total_steps = 6
train.adapter_hidden = 4
train.adapter_blocks = 2
train.max_matches = 8
eval.per_category = 4
eval.max_keypoints = 8
ablate.seeds = 2
"""


def tree_bytes(root):
    """Relative path -> content for every file under ``root``."""
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory, cfg_path):
    d = str(tmp_path_factory.mktemp("synth"))
    rc = main(["synth", "--config", cfg_path, "--out-dir", d,
               "--eval-pairs", "4"])
    assert rc == 0
    return d


@pytest.fixture(scope="module")
def labels_dir(tmp_path_factory, cfg_path, synth_dir):
    d = str(tmp_path_factory.mktemp("pairs"))
    rc = main(["pairs", "--config", cfg_path, "--out-dir", d,
               "--manifest", os.path.join(synth_dir, "manifest.tsv")])
    assert rc == 0
    return os.path.join(d, "labels")


@pytest.fixture(scope="module")
def adapter_dir(tmp_path_factory, cfg_path, synth_dir, labels_dir):
    d = str(tmp_path_factory.mktemp("train"))
    rc = main(["train-adapter", "--config", cfg_path, "--out-dir", d,
               "--manifest", os.path.join(synth_dir, "manifest.tsv"),
               "--labels", labels_dir])
    assert rc == 0
    return d


class TestSynth:
    def test_outputs_complete(self, synth_dir):
        records = kio.read_manifest(os.path.join(synth_dir, "manifest.tsv"),
                                    check_files=True)
        assert len(records) == 12
        assert all(r.rotation is not None for r in records)
        report = json.loads(
            (Path(synth_dir) / "plant_report.json").read_text())
        assert "expected_visibility_rate" in report
        prov = json.loads((Path(synth_dir) / "provenance.json").read_text())
        assert prov["seed"] == 0
        gt_files = sorted(Path(synth_dir, "gt").glob("*.ccpl"))
        assert gt_files
        ms, grids, p = kio.read_pseudo_labels(gt_files[0])
        assert p["generator"] == "oracle-gt"
        assert grids == ((14, 14), (14, 14))

    def test_repeat_run_is_byte_identical(self, tmp_path, cfg_path,
                                          synth_dir):
        d2 = str(tmp_path / "again")
        rc = main(["synth", "--config", cfg_path, "--out-dir", d2,
                   "--eval-pairs", "4"])
        assert rc == 0
        a, b = tree_bytes(synth_dir), tree_bytes(d2)
        assert a.keys() == b.keys()
        for name in a:
            assert a[name] == b[name], f"{name} differs between runs"

    def test_seed_override_changes_world(self, tmp_path, cfg_path,
                                         synth_dir):
        d2 = str(tmp_path / "seed7")
        rc = main(["synth", "--config", cfg_path, "--seed", "7",
                   "--out-dir", d2])
        assert rc == 0
        prov = json.loads((Path(d2) / "provenance.json").read_text())
        assert prov["seed"] == 7
        assert (Path(d2) / "manifest.tsv").read_bytes() != \
            (Path(synth_dir) / "manifest.tsv").read_bytes()


class TestLabelCommands:
    def test_pairs_outputs(self, synth_dir, labels_dir):
        files = sorted(Path(labels_dir).glob("pair*.ccpl"))
        assert len(files) == 12       # 6 per category, 2 categories
        total = 0
        for f in files:
            ms, _grids, prov = kio.read_pseudo_labels(f)
            assert prov["generator"] == "pairs"
            total += len(ms)
        assert total > 0

    def test_pairs_threads_match_sequential(self, tmp_path, cfg_path,
                                            synth_dir, labels_dir):
        d2 = str(tmp_path / "threaded")
        rc = main(["pairs", "--config", cfg_path, "--out-dir", d2,
                   "--threads", "4",
                   "--manifest", os.path.join(synth_dir, "manifest.tsv")])
        assert rc == 0
        a = tree_bytes(Path(labels_dir))
        b = tree_bytes(Path(d2) / "labels")
        assert a == b

    def test_chain_outputs(self, tmp_path, cfg_path, synth_dir):
        d = str(tmp_path / "chain")
        rc = main(["chain", "--config", cfg_path, "--out-dir", d,
                   "--manifest", os.path.join(synth_dir, "manifest.tsv")])
        assert rc == 0
        files = sorted(Path(d, "labels").glob("chain*_hop*.ccpl"))
        assert files
        for f in files:
            ms, _grids, prov = kio.read_pseudo_labels(f)
            assert prov["generator"] == "chain"
            assert len(prov["chain"]) >= 2

    def test_sphere_training_and_filtering(self, tmp_path, cfg_path,
                                           synth_dir, labels_dir):
        sd = str(tmp_path / "sphere")
        manifest = os.path.join(synth_dir, "manifest.tsv")
        rc = main(["train-sphere", "--config", cfg_path, "--out-dir", sd,
                   "--manifest", manifest])
        assert rc == 0
        mapper_path = os.path.join(sd, "mapper.ccs")
        assert os.path.exists(mapper_path)
        assert len(kio.read_metrics(os.path.join(sd, "metrics.log"))) == 8

        fd = str(tmp_path / "filtered")
        rc = main(["filter-sphere", "--config", cfg_path, "--out-dir", fd,
                   "--manifest", manifest, "--labels", labels_dir,
                   "--mapper", mapper_path])
        assert rc == 0
        for f in sorted(Path(labels_dir).glob("*.ccpl")):
            before, _g, _p = kio.read_pseudo_labels(f)
            after, _g, prov = kio.read_pseudo_labels(Path(fd, "labels",
                                                          f.name))
            assert len(after) <= len(before)
            assert prov["sphere"]["mapper"] == "mapper.ccs"


class TestTrainAndEval:
    def test_adapter_artifacts(self, adapter_dir):
        assert os.path.exists(os.path.join(adapter_dir, "adapter.ckpt"))
        log = kio.read_metrics(os.path.join(adapter_dir, "metrics.log"))
        assert [r["step"] for r in log] == list(range(6))

    def test_eval_with_checkpoint_then_saved_predictions(
            self, tmp_path, cfg_path, synth_dir, adapter_dir):
        manifest = os.path.join(synth_dir, "manifest.tsv")
        gt = os.path.join(synth_dir, "gt")
        ckpt = os.path.join(adapter_dir, "adapter.ckpt")
        d1 = str(tmp_path / "eval1")
        rc = main(["eval", "--config", cfg_path, "--out-dir", d1,
                   "--manifest", manifest, "--gt", gt,
                   "--checkpoint", ckpt, "--save-predictions"])
        assert rc == 0
        rows1 = (Path(d1) / "results.csv").read_text().splitlines()
        assert rows1[0] == "bin,alpha,mode,value"
        assert rows1[1].startswith("all,")
        pred_dir = Path(d1) / "predictions"
        assert sorted(pred_dir.glob("*.ccpr"))

        d2 = str(tmp_path / "eval2")
        rc = main(["eval", "--config", cfg_path, "--out-dir", d2,
                   "--manifest", manifest, "--gt", gt,
                   "--predictions", str(pred_dir)])
        assert rc == 0
        rows2 = (Path(d2) / "results.csv").read_text().splitlines()
        v1 = float(rows1[1].split(",")[3])
        v2 = float(rows2[1].split(",")[3])
        assert abs(v1 - v2) < 1e-9

    def test_analyze_viewpoint_writes_all_bins(self, tmp_path, cfg_path,
                                               synth_dir, adapter_dir):
        d = str(tmp_path / "vp")
        rc = main(["analyze-viewpoint", "--config", cfg_path, "--out-dir", d,
                   "--manifest", os.path.join(synth_dir, "manifest.tsv"),
                   "--gt", os.path.join(synth_dir, "gt"),
                   "--checkpoint", os.path.join(adapter_dir, "adapter.ckpt")])
        assert rc == 0
        lines = (Path(d) / "results.csv").read_text().splitlines()
        assert len(lines) == 6
        assert [l.split(",")[0] for l in lines[1:]] == \
            ["0-45", "0-90", "45-135", "90-180", "135-225"]


class TestAblateCommand:
    def test_csv_shape(self, tmp_path, cfg_path):
        d = str(tmp_path / "ablate")
        rc = main(["ablate", "--config", cfg_path, "--out-dir", d,
                   "--stages", "baseline,pseudo"])
        assert rc == 0
        lines = (Path(d) / "ablation.csv").read_text().splitlines()
        assert lines[0] == "stage,mean,seed0,seed1"
        assert len(lines) == 3
        for line in lines[1:]:
            cells = line.split(",")
            per_seed = [float(c) for c in cells[2:]]
            assert float(cells[1]) == pytest.approx(np.mean(per_seed))

    def test_unknown_stage_is_validation_error(self, tmp_path, cfg_path,
                                               capsys):
        rc = main(["ablate", "--config", cfg_path,
                   "--out-dir", str(tmp_path / "x"), "--stages", "bogus"])
        assert rc == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "bogus" in err["message"]


class TestExitCodes:
    def test_missing_required_argument(self, capsys):
        assert main(["pairs"]) == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "CliError"

    def test_unknown_subcommand(self, capsys):
        assert main(["transmogrify"]) == 1

    def test_missing_manifest_file(self, tmp_path, capsys):
        rc = main(["pairs", "--out-dir", str(tmp_path),
                   "--manifest", str(tmp_path / "absent.tsv")])
        assert rc == 1

    def test_bad_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("nonsense.key = 1\n")
        rc = main(["synth", "--config", str(bad),
                   "--out-dir", str(tmp_path / "o")])
        assert rc == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "line 1" in err["message"]

    def test_eval_without_prediction_source(self, tmp_path, synth_dir,
                                            capsys):
        rc = main(["eval", "--out-dir", str(tmp_path / "o"),
                   "--manifest", os.path.join(synth_dir, "manifest.tsv"),
                   "--gt", os.path.join(synth_dir, "gt")])
        assert rc == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "missing predictions" in err["message"]

    def test_missing_prediction_file(self, tmp_path, synth_dir, capsys):
        empty = tmp_path / "preds"
        empty.mkdir()
        rc = main(["eval", "--out-dir", str(tmp_path / "o"),
                   "--manifest", os.path.join(synth_dir, "manifest.tsv"),
                   "--gt", os.path.join(synth_dir, "gt"),
                   "--predictions", str(empty)])
        assert rc == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "missing predictions file" in err["message"]

    def test_unknown_image_id_is_runtime_error(self, tmp_path, cfg_path,
                                               synth_dir, capsys):
        from corrkit.matching import MatchSet
        labels = tmp_path / "labels"
        labels.mkdir()
        ghost = MatchSet("ghost_image", "other_ghost", [[0, 0]], [[1, 1]],
                         [1.0])
        kio.write_pseudo_labels(labels / "pair00000.ccpl", ghost, (14, 14),
                                (14, 14), {"generator": "test"})
        rc = main(["train-adapter", "--config", cfg_path,
                   "--out-dir", str(tmp_path / "o"),
                   "--manifest", os.path.join(synth_dir, "manifest.tsv"),
                   "--labels", str(labels)])
        assert rc == 2

    def test_empty_label_dir(self, tmp_path, cfg_path, synth_dir, capsys):
        labels = tmp_path / "labels"
        labels.mkdir()
        rc = main(["train-adapter", "--config", cfg_path,
                   "--out-dir", str(tmp_path / "o"),
                   "--manifest", os.path.join(synth_dir, "manifest.tsv"),
                   "--labels", str(labels)])
        assert rc == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "no .ccpl label files" in err["message"]
