"""The four pipeline stages over a run directory, plus the leave-one-out oracle.

Each stage writes its artifacts and a ``manifest.json`` recording the config
hash, the sha256 of every file it wrote and the hashes of the upstream files it
consumed. A stage whose manifest already matches the config and upstream is
skipped; a stage whose upstream files no longer match their manifest refuses to
run.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ifdetect import curvature, detect, influence, oracle
from ifdetect.blob import canonical_json, sha256_bytes, sha256_file
from ifdetect.config import RunConfig
from ifdetect.data import (
    LabeledDataset,
    flip_labels,
    load_dataset,
    load_idx,
    make_synthetic,
    manifest_for,
    restrict_classes,
    save_dataset,
)
from ifdetect.errors import AcceptanceError, ConsistencyError, PipelineError, SizeError
from ifdetect.model import ArchitectureSpec, init_params, load_checkpoint, predict_proba, save_checkpoint
from ifdetect.train import fit, misclassified_test_set

log = logging.getLogger(__name__)

STAGES = ("prepare", "train", "value", "detect", "oracle")
UPSTREAM = {"prepare": (), "train": ("prepare",), "value": ("prepare", "train"), "detect": ("prepare", "value"), "oracle": ("prepare", "train")}


@dataclass
class Run:
    cfg: RunConfig
    root: Path
    workers: int = 1
    force: bool = False

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        self.config_hash = self.cfg.content_hash()

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def path(self, stage: str, name: str) -> Path:
        return self.root / stage / name


def default_run_dir(cfg: RunConfig, base: str | Path = "runs") -> Path:
    return Path(base) / cfg.content_hash()[:16]


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path: Path):
    return json.loads(Path(path).read_text())


# --------------------------------------------------------------------------- manifests


def _manifest_path(run: Run, stage: str) -> Path:
    return run.path(stage, "manifest.json")


def verify_stage(run: Run, stage: str) -> dict:
    """Load a stage manifest and check every listed file against its recorded hash."""
    mpath = _manifest_path(run, stage)
    if not mpath.exists():
        raise PipelineError(f"stage {stage!r} has not run in {run.root}; run `ifdetect {stage}` first")
    manifest = read_json(mpath)
    if manifest.get("config_hash") != run.config_hash:
        raise ConsistencyError(f"stage {stage!r} in {run.root} was produced by a different config")
    for name, digest in manifest["files"].items():
        path = run.path(stage, name)
        if not path.exists() or sha256_file(path) != digest:
            raise ConsistencyError(f"{path}: content does not match the {stage} manifest")
    return manifest


def _upstream_hashes(run: Run, stage: str) -> dict:
    return {up: sha256_bytes(canonical_json(verify_stage(run, up)["files"])) for up in UPSTREAM[stage]}


def _is_current(run: Run, stage: str, upstream: dict) -> bool:
    if run.force or not _manifest_path(run, stage).exists():
        return False
    try:
        manifest = verify_stage(run, stage)
    except (ConsistencyError, PipelineError):
        return False
    return manifest.get("upstream") == upstream


def _finish(run: Run, stage: str, files: list[str], upstream: dict, **extra) -> dict:
    manifest = {
        "stage": stage,
        "config_hash": run.config_hash,
        "upstream": upstream,
        "files": {name: sha256_file(run.path(stage, name)) for name in sorted(files)},
    }
    manifest.update(extra)
    write_json(_manifest_path(run, stage), manifest)
    return manifest


# --------------------------------------------------------------------------- prepare


def _derived_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def build_datasets(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Clean train, flipped train and test sets as described by the config."""
    ds = cfg.dataset
    if ds.kind == "mnist_idx":
        paths = ds.idx_paths()
        for key, p in paths.items():
            if not p.exists():
                raise PipelineError(f"dataset.{key}: file not found: {p}")
        train = load_idx(paths["train_images"], paths["train_labels"], "train")
        test = load_idx(paths["test_images"], paths["test_labels"], "test")
    else:
        train = make_synthetic(ds.n_per_class, ds.dim, ds.separation, _derived_seed(cfg.seeds.data, 0), "train")
        test = make_synthetic(ds.n_test_per_class, ds.dim, ds.separation, _derived_seed(cfg.seeds.data, 1), "test")
    if cfg.classes_kept is not None:
        train = restrict_classes(train, cfg.classes_kept)
        test = restrict_classes(test, cfg.classes_kept)
    spec = cfg.flip_spec()
    flipped = flip_labels(train, spec) if spec is not None else train
    return train, flipped, test


def cmd_prepare(run: Run) -> dict:
    if _is_current(run, "prepare", {}):
        log.info("prepare: up to date")
        return verify_stage(run, "prepare")
    run.dir("prepare").mkdir(parents=True, exist_ok=True)
    clean, flipped, test = build_datasets(run.cfg)
    spec = run.cfg.flip_spec()
    datasets = {"train_clean": clean, "train_flipped": flipped, "test": test}
    manifests = {}
    for name, d in datasets.items():
        save_dataset(d, run.path("prepare", f"{name}.npz"))
        manifests[name] = manifest_for(
            d, spec if name == "train_flipped" else None, run.cfg.seeds.data
        ).to_json()
    write_json(run.path("prepare", "datasets.json"), manifests)
    log.info("prepare: %d train (%d flipped), %d test", len(flipped), int(flipped.flip_mask.sum()), len(test))
    files = [f"{n}.npz" for n in datasets] + ["datasets.json"]
    return _finish(run, "prepare", files, {}, flip_count=int(flipped.flip_mask.sum()))


def load_prepared(run: Run) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    verify_stage(run, "prepare")
    return tuple(load_dataset(run.path("prepare", f"{n}.npz")) for n in ("train_clean", "train_flipped", "test"))


# --------------------------------------------------------------------------- train


def arch_spec(cfg: RunConfig, ds: LabeledDataset) -> ArchitectureSpec:
    a = cfg.arch
    return ArchitectureSpec(
        kind=a.kind,
        input_shape=ds.sample_shape,
        n_classes=len(ds.class_names),
        hidden_width=a.hidden_width,
        conv_channels=tuple(a.conv_channels) if a.conv_channels else None,
    )


def sensitivity_check(baseline: dict, flipped: dict, flip_count: int) -> dict:
    """The flipped model must do strictly worse on clean test data than the baseline."""
    applicable = flip_count > 0
    acc_lower = flipped["accuracy"] < baseline["accuracy"]
    loss_higher = flipped["loss"] > baseline["loss"]
    return {
        "applicable": applicable,
        "baseline_test_accuracy": baseline["accuracy"],
        "flipped_test_accuracy": flipped["accuracy"],
        "baseline_test_loss": baseline["loss"],
        "flipped_test_loss": flipped["loss"],
        "accuracy_lower": acc_lower,
        "loss_higher": loss_higher,
        "passed": (acc_lower and loss_higher) if applicable else True,
    }


def _raise_if_insensitive(check: dict) -> None:
    if not check["passed"]:
        raise AcceptanceError(
            "sensitivity check failed: flipped model test accuracy "
            f"{check['flipped_test_accuracy']:.4f} vs baseline {check['baseline_test_accuracy']:.4f}, "
            f"loss {check['flipped_test_loss']:.4f} vs {check['baseline_test_loss']:.4f}"
        )


def cmd_train(run: Run) -> dict:
    upstream = _upstream_hashes(run, "train")
    if _is_current(run, "train", upstream):
        log.info("train: up to date")
        manifest = verify_stage(run, "train")
        _raise_if_insensitive(manifest["sensitivity"])
        return manifest
    clean, flipped, test = load_prepared(run)
    run.dir("train").mkdir(parents=True, exist_ok=True)
    spec = arch_spec(run.cfg, flipped)
    init = init_params(spec, run.cfg.seeds.init)
    tcfg = run.cfg.train_config()
    files = []
    results = {}
    for name, ds in (("baseline", clean), ("flipped", flipped)):
        report = fit(spec, ds, tcfg, test_ds=test, init=init)
        save_checkpoint(report.final_params, run.path("train", f"{name}.ckpt"))
        write_json(run.path("train", f"{name}_report.json"), report.to_json())
        report.write_curves(run.path("train", f"{name}_curves.csv"))
        files += [f"{name}.ckpt", f"{name}.ckpt.json", f"{name}_report.json", f"{name}_curves.csv"]
        results[name] = {"accuracy": report.test_accuracy, "loss": report.test_loss}
        log.info(
            "train %s: %d epochs, test accuracy %.4f, loss %.4f",
            name, report.epochs_run, report.test_accuracy, report.test_loss,
        )
    check = sensitivity_check(results["baseline"], results["flipped"], int(flipped.flip_mask.sum()))
    manifest = _finish(run, "train", files, upstream, sensitivity=check)
    _raise_if_insensitive(check)
    return manifest


# --------------------------------------------------------------------------- value


def cmd_value(run: Run) -> dict:
    upstream = _upstream_hashes(run, "value")
    if _is_current(run, "value", upstream):
        log.info("value: up to date")
        return verify_stage(run, "value")
    _raise_if_insensitive(read_json(_manifest_path(run, "train"))["sensitivity"])
    _, train, test = load_prepared(run)
    params = load_checkpoint(run.path("train", "flipped.ckpt"))
    mis = misclassified_test_set(params, test)
    if not mis:
        raise PipelineError(
            "the flipped model misclassifies no test point, so there is nothing to attribute; "
            "verify the sensitivity check of the train stage"
        )
    cv = run.cfg.curvature
    op = curvature.build(cv.mode, params, train, cv.damping)
    matrix = influence.influence_matrix(params, train, test, mis, op, workers=run.workers)
    summary = influence.summarize(matrix, run.cfg.aggregation)
    run.dir("value").mkdir(parents=True, exist_ok=True)
    curvature.save_operator(op, run.path("value", "curvature.bin"))
    influence.save_matrix(matrix, run.path("value", "influence.bin"))
    influence.write_summary_csv(summary, train.flip_mask, run.path("value", "summary.csv"))
    pred = predict_proba(params, test.features[mis]).argmax(axis=1)
    write_json(
        run.path("value", "misclassified.json"),
        {"test_indices": mis, "predicted": [int(p) for p in pred], "true": [int(test.true_labels[i]) for i in mis]},
    )
    log.info("value: %d misclassified test points, %s curvature over %d parameters", len(mis), op.mode, op.dim)
    files = ["curvature.bin", "influence.bin", "summary.csv", "misclassified.json"]
    return _finish(run, "value", files, upstream, n_misclassified=len(mis))


# --------------------------------------------------------------------------- detect


def separation_stats(avg_score: np.ndarray, flip_mask: np.ndarray) -> dict:
    """Mean gap between flipped and non-flipped aggregate scores, in standard errors."""
    s = np.asarray(avg_score, dtype=np.float64)
    m = np.asarray(flip_mask, dtype=bool)
    f, nf = s[m], s[~m]
    if len(f) < 2 or len(nf) < 2:
        return {"n_flipped": int(len(f)), "n_nonflipped": int(len(nf)), "defined": False}
    gap = float(f.mean() - nf.mean())
    se = float(np.sqrt(f.var(ddof=1) / len(f) + nf.var(ddof=1) / len(nf)))
    return {
        "defined": True,
        "n_flipped": int(len(f)),
        "n_nonflipped": int(len(nf)),
        "mean_flipped": float(f.mean()),
        "mean_nonflipped": float(nf.mean()),
        "gap": gap,
        "standard_error": se,
        "gap_over_se": gap / se if se > 0 else float("inf") if gap > 0 else 0.0,
        "median_nonflipped": float(np.median(nf)),
        "fraction_nonflipped_negative": float(np.mean(nf < 0)),
    }


def topk_manifest(
    matrix: influence.InfluenceMatrix, train: LabeledDataset, test: LabeledDataset, test_indices: list[int], k: int
) -> list[dict]:
    names = train.class_names
    out = []
    for t in test_indices:
        harmful, helpful = influence.top_k(matrix, t, k)

        def rows(pairs):
            return [
                {
                    "train_index": j,
                    "score": s,
                    "label": names[int(train.labels[j])],
                    "true_label": names[int(train.true_labels[j])],
                    "flipped": bool(train.flip_mask[j]),
                }
                for j, s in pairs
            ]

        out.append(
            {"test_index": t, "true_label": names[int(test.true_labels[t])], "harmful": rows(harmful), "helpful": rows(helpful)}
        )
    return out


def cmd_detect(run: Run) -> dict:
    upstream = _upstream_hashes(run, "detect")
    if _is_current(run, "detect", upstream):
        log.info("detect: up to date")
        return verify_stage(run, "detect")
    _, train, test = load_prepared(run)
    summary, mask = influence.read_summary_csv(run.path("value", "summary.csv"), run.cfg.aggregation)
    if not np.array_equal(mask, train.flip_mask):
        raise ConsistencyError("summary flip column disagrees with the prepared training set")
    matrix = influence.load_matrix(run.path("value", "influence.bin"))
    sw = detect.sweep(summary, mask, detect.default_grid(summary.avg_score, run.cfg.sweep.n_points, run.cfg.sweep.include_zero))
    threshold = detect.pick_threshold(sw, run.cfg.budget)
    report = detect.detection_report(summary, mask, threshold, sw, config_echo=run.cfg.to_dict())
    body = report.to_json()
    body["config_hash"] = run.config_hash
    body["budget"] = run.cfg.budget
    body["nonflipped_detected_pct"] = float(np.mean(summary.avg_score[~mask] > threshold) * 100) if (~mask).any() else 0.0
    body["separation"] = separation_stats(summary.avg_score, mask)
    run.dir("detect").mkdir(parents=True, exist_ok=True)
    write_json(run.path("detect", "detection_report.json"), body)
    detect.write_sweep_csv(sw, run.path("detect", "sweep.csv"))
    chosen = list(matrix.test_indices[: run.cfg.report.n_test_points])
    write_json(run.path("detect", "topk.json"), topk_manifest(matrix, train, test, chosen, run.cfg.report.top_k))
    log.info(
        "detect: threshold %.6g detects %d samples, precision %.3f recall %.3f",
        threshold, len(report.detected_indices), report.precision, report.recall,
    )
    files = ["detection_report.json", "sweep.csv", "topk.json"]
    return _finish(run, "detect", files, upstream, report_sha256=sha256_file(run.path("detect", "detection_report.json")))


# --------------------------------------------------------------------------- oracle


def default_oracle_point(cfg: RunConfig, params, test: LabeledDataset) -> int:
    """First misclassified test point of the flip source class; else first misclassified; else 0.

    Flipped samples are harmful to source-class points, so those are the points
    where the leave-one-out ranking says something about label noise.
    """
    mis = misclassified_test_set(params, test)
    if cfg.flip is not None and cfg.flip.source_class in test.class_names:
        src = test.class_index(cfg.flip.source_class)
        for i in mis:
            if test.true_labels[i] == src:
                return i
    return mis[0] if mis else 0


def cmd_oracle(run: Run) -> dict:
    upstream = _upstream_hashes(run, "oracle")
    if _is_current(run, "oracle", upstream):
        log.info("oracle: up to date")
        return verify_stage(run, "oracle")
    _, train, test = load_prepared(run)
    if len(train) > oracle.LOO_MAX_SAMPLES:
        raise SizeError(f"leave-one-out capped at {oracle.LOO_MAX_SAMPLES} training samples, got {len(train)}")
    spec = arch_spec(run.cfg, train)
    t = run.cfg.oracle.test_index
    if t is None:
        t = default_oracle_point(run.cfg, load_checkpoint(run.path("train", "flipped.ckpt")), test)
    if not 0 <= t < len(test):
        raise PipelineError(f"oracle.test_index {t} out of range for {len(test)} test samples")
    cv = run.cfg.curvature
    result = oracle.loo_sweep(
        spec,
        train,
        (test.features[t], int(test.true_labels[t])),
        run.cfg.train_config(),
        op_builder=cv.mode,
        damping=cv.damping,
        workers=run.workers,
        tol=run.cfg.oracle.tol,
        max_iter=run.cfg.oracle.max_iter,
        init=init_params(spec, run.cfg.seeds.init),
    )
    run.dir("oracle").mkdir(parents=True, exist_ok=True)
    result.write_csv(run.path("oracle", "loo.csv"))
    write_json(run.path("oracle", "loo_summary.json"), dict(result.summary_json(), test_index=int(t)))
    log.info("oracle: spearman %.4f (oriented %.4f)", result.spearman, result.spearman_oriented)
    return _finish(run, "oracle", ["loo.csv", "loo_summary.json"], upstream)


# --------------------------------------------------------------------------- all


def acceptance_check(run: Run) -> dict:
    """Targets for ``all --check``: sensitivity, recall at the budget, and score separation."""
    train_m = verify_stage(run, "train")
    report = read_json(run.path("detect", "detection_report.json"))
    sep = report["separation"]
    c = run.cfg.check
    results = {
        "sensitivity": bool(train_m["sensitivity"]["passed"]),
        "recall_at_budget": report["recall"] >= c.min_recall,
        "separation": bool(sep.get("defined")) and sep["gap"] > 0 and sep["gap_over_se"] > c.min_gap_se,
    }
    out = {"results": results, "recall": report["recall"], "budget": run.cfg.budget, "separation": sep, "passed": all(results.values())}
    write_json(run.root / "check.json", out)
    return out


def cmd_all(run: Run, check: bool = False) -> dict:
    cmd_prepare(run)
    cmd_train(run)
    cmd_value(run)
    manifest = cmd_detect(run)
    if check:
        out = acceptance_check(run)
        if not out["passed"]:
            failed = [k for k, v in out["results"].items() if not v]
            raise AcceptanceError(f"acceptance check failed: {', '.join(failed)}")
    return manifest


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "value": cmd_value, "detect": cmd_detect, "oracle": cmd_oracle}
