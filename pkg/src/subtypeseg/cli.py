"""Command-line entry point: each pipeline stage plus an end-to-end run.

Exit codes: 0 success, 1 validation failure (manifest, config, model or
policy files), 2 processing failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import nibabel
import numpy as np
import scipy

from . import __version__
from .config import ConfigError, TaskConfig, build_config, load_config
from .fusion import EnsembleWeights, argmax_labels, fuse
from .manifest import CaseEntry, Manifest, ManifestError, load_labels, load_manifest, load_stack, manifest_to_doc
from .metrics import evaluate_case, evaluate_dataset, write_case_csv, write_summary_csv
from .postproc import FitCase, PolicyError, apply_policy, fit_policy, load_policy, save_policy, write_fit_report
from .radiomics import (DiscretizationSpec, EmptyMaskError, FeatureVector, extract_case_features,
                        feature_names, read_feature_table, write_feature_table)
from .subtype import ModelFormatError, assign_subtype, fit_subtype_model, load_model, save_model
from .volume import VolumeIOError, read_volume, write_volume

log = logging.getLogger("subtypeseg")

EXIT_OK, EXIT_VALIDATION, EXIT_PROCESSING = 0, 1, 2
NO_CLUSTER = -1


class ProcessingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _run_parallel(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _finish(failures: list[tuple[str, str]], strict: bool) -> int:
    for case_id, reason in failures:
        log.error("case %s failed: %s", case_id, reason)
    if failures and strict:
        return EXIT_PROCESSING
    return EXIT_OK


def _case_error(case_id: str, exc: Exception) -> tuple[str, str]:
    return case_id, f"{type(exc).__name__}: {exc}"


# ---------------------------------------------------------------------------
# per-case workers (top level so they pickle for process pools)
# ---------------------------------------------------------------------------

def _features_one(item: tuple[CaseEntry, Path | None], config: TaskConfig):
    """-> (case id, FeatureVector | None, status, reason)."""
    case, wt_path = item
    if wt_path is None:
        return case.case_id, None, "skipped", "no whole-tumor source"
    try:
        missing = [s for s in config.sequences if s not in case.sequences]
        if missing:
            raise KeyError(f"missing sequences {missing}")
        seqs = {s: read_volume(case.sequences[s]) for s in config.sequences}
        wt = load_labels(wt_path, config.alphabet)
        fv = extract_case_features(seqs, wt, config.spacing_mm, config.sequences,
                                   DiscretizationSpec(config.subtype.bin_width),
                                   config.subtype.connectivity, case.case_id)
        return case.case_id, fv, "ok", ""
    except EmptyMaskError as exc:
        return case.case_id, None, "skipped", str(exc)
    except (VolumeIOError, ValueError, KeyError) as exc:
        return case.case_id, None, "failed", _case_error(case.case_id, exc)[1]


def _ensemble_one(case: CaseEntry, config: TaskConfig, out_dir: Path):
    try:
        active = [(m, w) for m, w in zip(config.weights.models, config.weights.weights) if w > 0]
        absent = [m for m, _ in active if m not in case.models]
        if absent:
            raise ValueError(f"no probability stack for models {absent}")
        stacks = [load_stack(case, m, config.channel_names) for m, _ in active]
        fused = fuse(stacks, EnsembleWeights(tuple(m for m, _ in active), tuple(w for _, w in active)))
        labels = argmax_labels(fused, config.alphabet)
        write_volume(labels, out_dir / f"{case.case_id}.nii.gz")
        return case.case_id, None
    except (VolumeIOError, ValueError, KeyError) as exc:
        return _case_error(case.case_id, exc)


def _apply_one(item: tuple[str, Path, int], config: TaskConfig, policy, out_dir: Path):
    case_id, pred_path, cluster = item
    try:
        labels = load_labels(pred_path, config.alphabet)
        out = apply_policy(labels, cluster, policy, config.postproc.connectivity)
        write_volume(out, out_dir / f"{case_id}.nii.gz")
        return case_id, None
    except (VolumeIOError, ValueError) as exc:
        return _case_error(case_id, exc)


def _evaluate_one(item: tuple[str, Path, Path], config: TaskConfig):
    case_id, pred_path, gt_path = item
    try:
        pred = load_labels(pred_path, config.alphabet)
        gt = load_labels(gt_path, config.alphabet)
        return evaluate_case(pred, gt, config.region_spec, config.metrics, case_id), None
    except (VolumeIOError, ValueError) as exc:
        return None, _case_error(case_id, exc)[1]


# ---------------------------------------------------------------------------
# stage functions shared by the commands and the pipeline
# ---------------------------------------------------------------------------

def compute_features(items: Sequence[tuple[CaseEntry, Path | None]], config: TaskConfig, jobs: int = 1):
    """-> (rows, skipped, failed); rows are ``(case id, FeatureVector)``."""
    results = _run_parallel(partial(_features_one, config=config), list(items), jobs)
    rows, skipped, failed = [], [], []
    for case_id, fv, status, reason in results:
        if status == "ok":
            rows.append((case_id, fv))
        elif status == "skipped":
            log.warning("case %s skipped: %s", case_id, reason)
            skipped.append((case_id, reason))
        else:
            failed.append((case_id, reason))
    return rows, skipped, failed


def write_features(out_csv: Path, rows, skipped, failed, config: TaskConfig) -> Path:
    write_feature_table(out_csv, rows, feature_names(config.sequences))
    sidecar = out_csv.with_name(out_csv.stem + ".skipped.csv")
    with open(sidecar, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("case_id", "status", "reason"))
        for case_id, reason in skipped:
            w.writerow((case_id, "skipped", reason))
        for case_id, reason in failed:
            w.writerow((case_id, "failed", reason))
    return sidecar


def assign_clusters(rows: Sequence[tuple[str, FeatureVector]], model) -> dict[str, int]:
    return {case_id: assign_subtype(model, fv) for case_id, fv in rows}


def write_clusters(path: Path, clusters: dict[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("case_id", "cluster"))
        for case_id in sorted(clusters):
            w.writerow((case_id, clusters[case_id]))


def assign_folds(clusters: dict[str, int], n_folds: int) -> dict[str, int]:
    """Round-robin fold indices within each cluster (cases sorted by id)."""
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    folds = {}
    offset = 0
    for cluster in sorted(set(clusters.values())):
        members = sorted(c for c, k in clusters.items() if k == cluster)
        for i, case_id in enumerate(members):
            folds[case_id] = (offset + i) % n_folds
        # continue the rotation so small clusters do not all land in fold 0
        offset = (offset + len(members)) % n_folds
    return folds


def run_evaluation(items, config: TaskConfig, out_dir: Path, jobs: int = 1):
    results = _run_parallel(partial(_evaluate_one, config=config), list(items), jobs)
    reports, failed = [], []
    for (case_id, _, _), (report, err) in zip(items, results):
        if err is None:
            reports.append(report)
        else:
            failed.append((case_id, err))
    if reports:
        write_case_csv(out_dir / "report_cases.csv", reports)
        write_summary_csv(out_dir / "report_summary.csv", evaluate_dataset(reports))
    return reports, failed


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _config(args) -> TaskConfig:
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        raw = dict(config.raw)
        raw["subtype"] = dict(raw["subtype"], seed=int(args.seed))
        config = build_config(raw)
    return config


def _manifest(args, config: TaskConfig, channels: bool = False) -> Manifest:
    manifest = load_manifest(args.manifest, config.channel_names if channels else (), strict=args.strict)
    if manifest.task not in ("custom", config.task):
        raise ManifestError(f"manifest task {manifest.task!r} does not match config task {config.task!r}")
    return manifest


def cmd_features(args) -> int:
    config = _config(args)
    manifest = _manifest(args, config)
    items = [(c, c.ground_truth if args.wt_source == "gt" else c.prediction) for c in manifest.cases]
    rows, skipped, failed = compute_features(items, config, args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features(out, rows, skipped, failed, config)
    log.info("wrote %d feature rows to %s", len(rows), out)
    return _finish(failed, args.strict)


def cmd_cluster_fit(args) -> int:
    config = _config(args)
    try:
        ids, names, X = read_feature_table(args.features)
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read feature table: {exc}") from exc
    expected = feature_names(config.sequences)
    if names != expected:
        raise ManifestError("feature table columns do not match the task's canonical feature names")
    n = len(ids)
    k_hi = min(config.subtype.k_max, n - 1)
    if k_hi < config.subtype.k_min:
        raise ManifestError(f"{n} cases cannot support k range {config.subtype.k_min}..{config.subtype.k_max}")
    model = fit_subtype_model(X, names, range(config.subtype.k_min, k_hi + 1),
                              config.subtype.seed, config.subtype.variance_threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    log.info("subtype model: k=%d, %d PCA components -> %s", model.k, model.n_components, out)
    return EXIT_OK


def cmd_ensemble(args) -> int:
    config = _config(args)
    manifest = _manifest(args, config, channels=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = _run_parallel(partial(_ensemble_one, config=config, out_dir=out), list(manifest.cases), args.jobs)
    return _finish([r for r in results if r[1] is not None], args.strict)


def _fit_cases(manifest: Manifest, config: TaskConfig, model, jobs: int):
    usable = []
    for c in manifest.cases:
        if c.ground_truth is None or c.prediction is None:
            log.warning("case %s excluded from fitting: needs ground truth and prediction", c.case_id)
            continue
        usable.append(c)
    rows, skipped, failed = compute_features([(c, c.prediction) for c in usable], config, jobs)
    clusters = assign_clusters(rows, model)
    cases = []
    for c in usable:
        if c.case_id not in clusters:
            continue
        cases.append(FitCase(c.case_id, load_labels(c.prediction, config.alphabet),
                             load_labels(c.ground_truth, config.alphabet), clusters[c.case_id]))
    return cases, failed


def cmd_postproc_fit(args) -> int:
    config = _config(args)
    manifest = _manifest(args, config)
    model = load_model(args.model)
    cases, failed = _fit_cases(manifest, config, model, args.jobs)
    if not cases:
        raise ProcessingError("no usable cases for post-processing fit")
    report: list = []
    pp = config.postproc
    policy = fit_policy(cases, config.region_spec, pp.stage1_grid, pp.ratio_grid, pp.relabel_menu,
                        config.metrics, range(model.k), pp.connectivity, report)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_policy(policy, out)
    write_fit_report(out.with_name(out.stem + "_fit_report.csv"), report)
    log.info("policy with %d stage-2 rules -> %s", len(policy.stage2), out)
    return _finish(failed, args.strict)


def _cluster_predictions(cases: Sequence[CaseEntry], pred_paths: dict[str, Path], config, model, jobs):
    rows, skipped, failed = compute_features([(c, pred_paths.get(c.case_id)) for c in cases], config, jobs)
    clusters = {c.case_id: NO_CLUSTER for c in cases}
    clusters.update(assign_clusters(rows, model))
    return clusters, rows, skipped, failed


def cmd_postproc_apply(args) -> int:
    config = _config(args)
    manifest = _manifest(args, config)
    model = load_model(args.model)
    policy = load_policy(args.policy, config.alphabet)
    cases = [c for c in manifest.cases if c.prediction is not None]
    for c in manifest.cases:
        if c.prediction is None:
            log.warning("case %s has no prediction; skipped", c.case_id)
    preds = {c.case_id: c.prediction for c in cases}
    clusters, _, _, failed = _cluster_predictions(cases, preds, config, model, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed_ids = {f[0] for f in failed}
    items = [(c.case_id, c.prediction, clusters[c.case_id]) for c in cases if c.case_id not in failed_ids]
    results = _run_parallel(partial(_apply_one, config=config, policy=policy, out_dir=out), items, args.jobs)
    write_clusters(out / "clusters.csv", {k: v for k, v in clusters.items() if k not in failed_ids})
    return _finish(failed + [r for r in results if r[1] is not None], args.strict)


def cmd_evaluate(args) -> int:
    config = _config(args)
    manifest = _manifest(args, config)
    items = [(c.case_id, c.prediction, c.ground_truth) for c in manifest.cases
             if c.prediction is not None and c.ground_truth is not None]
    if not items:
        raise ManifestError("no cases with both prediction and ground truth to evaluate")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports, failed = run_evaluation(items, config, out, args.jobs)
    if not reports:
        raise ProcessingError("every case failed evaluation")
    return _finish(failed, args.strict)


def cmd_folds(args) -> int:
    config = _config(args)
    manifest = _manifest(args, config)
    model = load_model(args.model)
    src = {c.case_id: (c.ground_truth if args.wt_source == "gt" else c.prediction) for c in manifest.cases}
    clusters, _, _, failed = _cluster_predictions(manifest.cases, src, config, model, args.jobs)
    folds = assign_folds(clusters, args.n_folds)
    updated = manifest.with_cases(replace(c, fold=folds[c.case_id]) for c in manifest.cases)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = manifest_to_doc(updated, Path(args.manifest).resolve().parent)
    doc["task"] = manifest.task
    out.write_text(json.dumps(doc, indent=2) + "\n")
    return _finish(failed, args.strict)


def cmd_pipeline(args) -> int:
    """ensemble -> features of the predicted tumor -> subtype -> post-processing -> evaluation."""
    config = _config(args)
    manifest = _manifest(args, config, channels=True)
    if not manifest.cases:
        raise ManifestError("manifest has no cases")
    model = load_model(args.model)
    policy = load_policy(args.policy, config.alphabet)
    out = Path(args.out)
    ens_dir, final_dir = out / "ensemble", out / "final"
    ens_dir.mkdir(parents=True, exist_ok=True)
    final_dir.mkdir(parents=True, exist_ok=True)
    failures: list[tuple[str, str]] = []

    todo = [c for c in manifest.cases
            if not (args.resume and (ens_dir / f"{c.case_id}.nii.gz").is_file())]
    if len(todo) < len(manifest.cases):
        log.info("resume: %d ensemble outputs reused", len(manifest.cases) - len(todo))
    results = _run_parallel(partial(_ensemble_one, config=config, out_dir=ens_dir), todo, args.jobs)
    failures += [r for r in results if r[1] is not None]
    bad = {f[0] for f in failures}
    cases = [c for c in manifest.cases if c.case_id not in bad]

    preds = {c.case_id: ens_dir / f"{c.case_id}.nii.gz" for c in cases}
    clusters, rows, skipped, failed = _cluster_predictions(cases, preds, config, model, args.jobs)
    failures += failed
    write_features(out / "features.csv", rows, skipped, failed, config)
    bad |= {f[0] for f in failed}
    clusters = {k: v for k, v in clusters.items() if k not in bad}
    write_clusters(out / "clusters.csv", clusters)

    items = [(cid, preds[cid], clusters[cid]) for cid in sorted(clusters)
             if not (args.resume and (final_dir / f"{cid}.nii.gz").is_file())]
    results = _run_parallel(partial(_apply_one, config=config, policy=policy, out_dir=final_dir), items, args.jobs)
    failures += [r for r in results if r[1] is not None]
    bad |= {f[0] for f in failures}

    stages = ["ensemble", "features", "subtype", "postproc"]
    evaluated = 0
    eval_items = [(c.case_id, final_dir / f"{c.case_id}.nii.gz", c.ground_truth) for c in cases
                  if c.ground_truth is not None and c.case_id not in bad]
    if eval_items:
        reports, failed = run_evaluation(eval_items, config, out, args.jobs)
        failures += failed
        evaluated = len(reports)
        stages.append("evaluate")

    summary = {
        "tool": "subtypeseg",
        "version": __version__,
        "dependencies": {"numpy": np.__version__, "scipy": scipy.__version__, "nibabel": nibabel.__version__},
        "task": config.task,
        "config_sha256": config.digest(),
        "seed": config.subtype.seed,
        "model_sha256": _sha256(Path(args.model)),
        "policy_sha256": _sha256(Path(args.policy)),
        "stages": stages,
        "n_cases": len(manifest.cases),
        "n_evaluated": evaluated,
        "clusters": {cid: clusters[cid] for cid in sorted(clusters)},
        "failures": {cid: reason for cid, reason in sorted(failures)},
        "artifacts": {
            "ensemble": "ensemble/",
            "features": "features.csv",
            "clusters": "clusters.csv",
            "final": "final/",
            "report_cases": "report_cases.csv" if evaluated else None,
            "report_summary": "report_summary.csv" if evaluated else None,
        },
    }
    (out / "run_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return _finish(failures, args.strict)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subtypeseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        if manifest:
            p.add_argument("--manifest", required=True, help="case manifest (JSON)")
        p.add_argument("--config", required=True, help="task preset name (ped, men-rt, met) or JSON/TOML file")
        p.add_argument("--out", required=True, help="output file or directory")
        p.add_argument("--strict", action="store_true", help="fail on any invalid or failed case")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="case-level parallelism")
        p.add_argument("--seed", type=int, default=None, help="override the subtype seed")
        return p

    p = common(sub.add_parser("features", help="radiomic feature table"))
    p.add_argument("--wt-source", choices=("gt", "prediction"), default="gt")
    p.set_defaults(func=cmd_features)

    p = common(sub.add_parser("cluster-fit", help="fit the subtype model on a feature table"), manifest=False)
    p.add_argument("--features", required=True)
    p.set_defaults(func=cmd_cluster_fit)

    p = common(sub.add_parser("ensemble", help="weighted fusion of model probabilities"))
    p.set_defaults(func=cmd_ensemble)

    p = common(sub.add_parser("postproc-fit", help="fit the post-processing policy"))
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_postproc_fit)

    p = common(sub.add_parser("postproc-apply", help="apply a post-processing policy"))
    p.add_argument("--model", required=True)
    p.add_argument("--policy", required=True)
    p.set_defaults(func=cmd_postproc_apply)

    p = common(sub.add_parser("evaluate", help="lesion-wise evaluation reports"))
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("folds", help="assign folds round-robin within subtypes"))
    p.add_argument("--model", required=True)
    p.add_argument("--n-folds", type=int, default=5)
    p.add_argument("--wt-source", choices=("gt", "prediction"), default="gt")
    p.set_defaults(func=cmd_folds)

    p = common(sub.add_parser("pipeline", help="end-to-end inference run"))
    p.add_argument("--model", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--resume", action="store_true", help="reuse per-case stage outputs already on disk")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ManifestError, ConfigError, ModelFormatError, PolicyError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except (ProcessingError, VolumeIOError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_PROCESSING


if __name__ == "__main__":
    sys.exit(main())
