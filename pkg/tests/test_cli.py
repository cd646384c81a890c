import json
import time
from pathlib import Path

import pytest
import yaml

from ifdetect import config, pipeline
from ifdetect.cli import run
from ifdetect.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SYNTH = str(CONFIGS / "synthetic.yaml")


def _cli(*args):
    return run([str(a) for a in args])


class TestConfig:
    def test_shipped_configs_load(self):
        for path in CONFIGS.glob("*.yaml"):
            cfg = config.load(path)
            assert config.from_dict(yaml.safe_load(config.dumps(cfg))) == cfg

    def test_defaults_resolve_by_architecture(self):
        cfg = config.load(None)
        assert cfg.train.optimizer == "sgd" and cfg.curvature.mode == "diag_exact"
        cnn = config.load(None, ["arch.kind=cnn3", "dataset.kind=mnist_idx", "dataset.root=/x"])
        assert cnn.train.optimizer == "adam" and cnn.train.learning_rate == 1e-3
        assert cnn.curvature.mode == "lastlayer_full"
        assert cnn.dataset.train_images == "/x/train-images-idx3-ubyte"

    def test_hash_is_stable_and_sensitive(self):
        a, b = config.load(SYNTH), config.load(SYNTH)
        assert a.content_hash() == b.content_hash()
        assert config.load(SYNTH, ["budget=2.0"]).content_hash() != a.content_hash()

    @pytest.mark.parametrize(
        "override,path",
        [
            ("dataset.colour=red", "dataset.colour"),
            ("budget=150", "budget"),
            ("curvature.damping=-1", "curvature.damping"),
            ("aggregation=median", "aggregation"),
            ("train.batch_size=abc", "train.batch_size"),
            ("curvature.mode=kfac", "curvature.mode"),
        ],
    )
    def test_errors_name_the_field(self, override, path):
        with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
            config.load(SYNTH, [override])

    def test_override_needs_equals(self):
        with pytest.raises(ConfigError):
            config.load(SYNTH, ["budget"])

    def test_save_round_trip(self, tmp_path):
        cfg = config.load(SYNTH)
        config.save(cfg, tmp_path / "c.yaml")
        assert config.load(tmp_path / "c.yaml") == cfg

    def test_config_command(self, capsys):
        assert _cli("config", "--config", SYNTH) == 0
        out = capsys.readouterr().out
        assert f"# hash: {config.load(SYNTH).content_hash()}" in out


class TestExitCodes:
    def test_bad_config_exits_2(self, tmp_path):
        assert _cli("prepare", "--config", SYNTH, "--run-dir", tmp_path, "--override", "budget=-1") == 2
        assert _cli("prepare", "--config", SYNTH, "--run-dir", tmp_path, "--workers", "0") == 2

    def test_missing_config_file_exits_2(self, tmp_path):
        assert _cli("prepare", "--config", tmp_path / "nope.yaml", "--run-dir", tmp_path) == 2

    def test_missing_mnist_exits_3(self, tmp_path):
        rc = _cli("prepare", "--config", CONFIGS / "mnist49.yaml", "--run-dir", tmp_path, "--override", f"dataset.root={tmp_path / 'none'}")
        assert rc == 3

    def test_stage_before_upstream_exits_3(self, tmp_path):
        assert _cli("value", "--config", SYNTH, "--run-dir", tmp_path) == 3

    def test_tampered_artifact_exits_3(self, tmp_path):
        assert _cli("prepare", "--config", SYNTH, "--run-dir", tmp_path) == 0
        path = tmp_path / "prepare" / "train_flipped.npz"
        path.write_bytes(path.read_bytes() + b"\0")
        assert _cli("train", "--config", SYNTH, "--run-dir", tmp_path) == 3

    def test_oracle_size_guard_exits_4(self, tmp_path):
        args = ("--config", SYNTH, "--run-dir", tmp_path, "--override", "dataset.n_per_class=260")
        assert _cli("prepare", *args) == 0
        assert _cli("train", *args) == 0
        assert _cli("oracle", *args) == 4

    def test_failed_check_exits_5(self, tmp_path):
        # Recall and separation on this small synthetic instance miss the default targets.
        assert _cli("all", "--check", "--config", SYNTH, "--run-dir", tmp_path) == 5
        body = json.loads((tmp_path / "check.json").read_text())
        assert body["passed"] is False
        assert _cli("all", "--config", SYNTH, "--run-dir", tmp_path) == 0

    def test_reachable_targets_exit_0(self, tmp_path):
        args = ["--override", "check.min_recall=0.5", "--override", "check.min_gap_se=1.0"]
        assert _cli("all", "--check", "--config", SYNTH, "--run-dir", tmp_path, *args) == 0


@pytest.fixture(scope="module")
def synth_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    start = time.perf_counter()
    assert _cli("all", "--config", SYNTH, "--run-dir", root, "--workers", "2") == 0
    return root, time.perf_counter() - start


class TestPipeline:
    def test_fast(self, synth_run):
        assert synth_run[1] < 10.0

    def test_artifacts(self, synth_run):
        root, _ = synth_run
        for stage, names in {
            "prepare": ["train_clean.npz", "train_flipped.npz", "test.npz", "datasets.json"],
            "train": ["baseline.ckpt", "flipped.ckpt", "baseline_report.json", "flipped_curves.csv"],
            "value": ["curvature.bin", "influence.bin", "summary.csv", "misclassified.json"],
            "detect": ["detection_report.json", "sweep.csv", "topk.json"],
        }.items():
            for name in names:
                assert (root / stage / name).exists(), f"{stage}/{name}"
            assert (root / stage / "manifest.json").exists()
        assert (root / "config.yaml").exists()

    def test_report_contents(self, synth_run):
        root, _ = synth_run
        rep = json.loads((root / "detect" / "detection_report.json").read_text())
        assert rep["n_flipped"] == 10 and rep["budget"] == 1.0
        assert rep["config_hash"] == config.load(SYNTH).content_hash()
        assert 0 <= rep["recall"] <= 1 and 0 <= rep["precision"] <= 1
        assert rep["separation"]["standard_error"] > 0

    def test_topk_flags_match_mask(self, synth_run):
        root, _ = synth_run
        train = pipeline.load_dataset(root / "prepare" / "train_flipped.npz")
        for entry in json.loads((root / "detect" / "topk.json").read_text()):
            for row in entry["harmful"] + entry["helpful"]:
                assert row["flipped"] == bool(train.flip_mask[row["train_index"]])
            assert len(entry["harmful"]) == 10

    def test_idempotent_rerun(self, synth_run):
        root, _ = synth_run
        before = {p: p.stat().st_mtime_ns for p in root.rglob("*") if p.is_file() and p.name != "config.yaml"}
        assert _cli("all", "--config", SYNTH, "--run-dir", root) == 0
        after = {p: p.stat().st_mtime_ns for p in root.rglob("*") if p.is_file() and p.name != "config.yaml"}
        assert before == after

    def test_force_recomputes_identically(self, synth_run, tmp_path):
        root, _ = synth_run
        report = (root / "detect" / "detection_report.json").read_bytes()
        assert _cli("detect", "--config", SYNTH, "--run-dir", root, "--force") == 0
        assert (root / "detect" / "detection_report.json").read_bytes() == report

    def test_second_directory_is_byte_identical(self, synth_run, tmp_path):
        root, _ = synth_run
        assert _cli("all", "--config", SYNTH, "--run-dir", tmp_path, "--workers", "1") == 0
        for rel in ["detect/detection_report.json", "value/influence.bin", "train/flipped.ckpt", "prepare/manifest.json"]:
            assert (tmp_path / rel).read_bytes() == (root / rel).read_bytes(), rel

    def test_oracle_stage(self, synth_run):
        root, _ = synth_run
        assert _cli("oracle", "--config", SYNTH, "--run-dir", root) == 0
        summary = json.loads((root / "oracle" / "loo_summary.json").read_text())
        assert summary["n"] == 100 and summary["spearman"] < 0


class TestEdgeCases:
    def test_no_flip_gives_zero_count(self, tmp_path):
        assert _cli("prepare", "--config", SYNTH, "--run-dir", tmp_path, "--override", "flip=null") == 0
        m = json.loads((tmp_path / "prepare" / "manifest.json").read_text())
        assert m["flip_count"] == 0

    def test_no_misclassified_points(self, tmp_path):
        args = ("--config", SYNTH, "--run-dir", tmp_path, "--override", "flip=null", "--override", "dataset.separation=40")
        assert _cli("train", *args) == 3
        assert _cli("prepare", *args) == 0
        assert _cli("train", *args) == 0
        assert _cli("value", *args) == 3

    def test_same_config_same_manifest(self, tmp_path):
        for name in ("a", "b"):
            assert _cli("prepare", "--config", SYNTH, "--run-dir", tmp_path / name) == 0
        a = (tmp_path / "a" / "prepare" / "manifest.json").read_bytes()
        assert a == (tmp_path / "b" / "prepare" / "manifest.json").read_bytes()
