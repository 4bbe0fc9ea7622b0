"""Subtype-adaptive post-processing of predicted label maps.

Stage 1 removes connected components of a label whose volume falls below a
per-(cluster, label) threshold. Stage 2 rewrites a whole label to another
one when its share of the whole tumor falls below a fitted ratio. Both
stages are fitted by exhaustive grid search on cross-validated predictions,
maximizing the mean lesion-wise Dice of the evaluation regions involved.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import MetricConfig, RegionSpec, lesionwise
from .morphology import connected_components
from .volume import LabelVolume

log = logging.getLogger(__name__)

POLICY_FORMAT = "subtypeseg.threshold-policy"
POLICY_VERSION = 1
MAX_PASSES = 32


class PolicyError(ValueError):
    """Raised for invalid, corrupt or mismatched policies."""


@dataclass(frozen=True)
class RelabelRule:
    cluster: int
    label: int
    ratio: float
    target: int


@dataclass
class ThresholdPolicy:
    task: str
    alphabet: tuple[tuple[int, str], ...]
    clusters: tuple[int, ...]
    stage1: dict[tuple[int, int], float] = field(default_factory=dict)
    stage2: list[RelabelRule] = field(default_factory=list)
    region_digest: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alphabet = tuple((int(i), str(n)) for i, n in self.alphabet)
        self.clusters = tuple(int(c) for c in self.clusters)
        ids = {i for i, _ in self.alphabet}
        for (cluster, label), vol in self.stage1.items():
            if cluster not in self.clusters:
                raise PolicyError(f"stage-1 entry references unknown cluster {cluster}")
            if label not in ids:
                raise PolicyError(f"stage-1 entry references unknown label {label}")
            if not vol >= 0:
                raise PolicyError(f"negative volume threshold {vol}")
        for rule in self.stage2:
            if rule.cluster not in self.clusters:
                raise PolicyError(f"relabel rule references unknown cluster {rule.cluster}")
            if rule.label not in ids or (rule.target != 0 and rule.target not in ids):
                raise PolicyError(f"relabel rule references unknown label: {rule}")
            if rule.label == rule.target:
                raise PolicyError(f"relabel rule maps a label onto itself: {rule}")
            if not 0 <= rule.ratio <= 1:
                raise PolicyError(f"ratio outside [0, 1]: {rule}")
        for cluster in self.clusters:
            _check_acyclic([r for r in self.stage2 if r.cluster == cluster])

    @classmethod
    def empty(cls, task: str, alphabet, clusters: Iterable[int] = (0,)) -> "ThresholdPolicy":
        return cls(task, tuple(alphabet), tuple(clusters))


def _check_acyclic(rules: Sequence[RelabelRule]) -> None:
    edges: dict[int, set[int]] = {}
    for r in rules:
        if r.target:
            edges.setdefault(r.label, set()).add(r.target)
    state: dict[int, int] = {}

    def visit(node):
        if state.get(node) == 1:
            raise PolicyError("relabel rules form a cycle")
        if state.get(node) == 2:
            return
        state[node] = 1
        for nxt in edges.get(node, ()):
            visit(nxt)
        state[node] = 2

    for node in list(edges):
        visit(node)


@dataclass(frozen=True, eq=False)
class FitCase:
    case_id: str
    prediction: LabelVolume
    ground_truth: LabelVolume
    cluster: int

    def __post_init__(self):
        if not self.prediction.geometry.matches(self.ground_truth.geometry):
            raise ValueError(f"{self.case_id}: prediction and ground truth are not aligned")


# ---------------------------------------------------------------------------
# primitive steps
# ---------------------------------------------------------------------------

def tumor_ratio(labels: np.ndarray, label: int) -> float:
    """Voxel share of ``label`` within the whole tumor (all non-zero voxels)."""
    wt = int(np.count_nonzero(labels))
    if wt == 0:
        return 0.0
    return int(np.count_nonzero(labels == label)) / wt


def relabel_if_small(labels: np.ndarray, label: int, ratio: float, target: int) -> np.ndarray:
    if tumor_ratio(labels, label) < ratio:
        out = labels.copy()
        out[labels == label] = target
        return out
    return labels


def _stage1_pass(data, cluster, policy, spacing, connectivity):
    for label in sorted(i for i, _ in policy.alphabet):
        threshold = policy.stage1.get((cluster, label), 0.0)
        if threshold <= 0:
            continue
        cc = connected_components(data == label, connectivity, spacing)
        small = np.flatnonzero(cc.volumes < threshold) + 1
        if small.size:
            data = data.copy()
            data[np.isin(cc.labels, small)] = 0
    return data


def apply_policy(labels: LabelVolume, cluster: int, policy: ThresholdPolicy,
                 connectivity: int = 26) -> LabelVolume:
    """Stage-1 removals (ascending label id) then stage-2 rules (stored order).

    The two stages are repeated until the map stops changing: relabeling can
    create a fresh small component that stage 1 would remove on a second
    call, and iterating to the fixpoint makes the operation idempotent.
    """
    if tuple(labels.alphabet) != policy.alphabet:
        raise PolicyError(f"label alphabet {labels.alphabet} does not match policy {policy.alphabet}")
    if cluster not in policy.clusters:
        log.warning("cluster %s not in policy; labels left unchanged", cluster)
        return labels
    rules = [r for r in policy.stage2 if r.cluster == cluster]
    data = labels.data
    for _ in range(MAX_PASSES):
        new = _stage1_pass(data, cluster, policy, labels.spacing, connectivity)
        for r in rules:
            new = relabel_if_small(new, r.label, r.ratio, r.target)
        if np.array_equal(new, data):
            return labels.with_data(new)
        data = new
    raise RuntimeError("post-processing did not reach a fixpoint")


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _case_score(pred: np.ndarray, gt_masks: dict, regions, spec: RegionSpec, spacing,
                metric: MetricConfig) -> float:
    """Sum of lesion-wise Dice over ``regions`` for one case."""
    total = 0.0
    for region in regions:
        p = np.isin(pred, spec.labels_of(region))
        d, _ = lesionwise(p, gt_masks[region], spacing, metric.dilation_radius,
                          metric.connectivity, metric.penalty)
        total += d
    return total


def _gt_masks(case: FitCase, spec: RegionSpec) -> dict:
    gt = case.ground_truth.data
    return {r: np.isin(gt, spec.labels_of(r)) for r in spec.region_names}


def _by_cluster(cases: Sequence[FitCase], clusters):
    groups = {c: [] for c in clusters}
    for case in cases:
        if case.cluster not in groups:
            raise ValueError(f"{case.case_id}: cluster {case.cluster} not among {tuple(clusters)}")
        groups[case.cluster].append(case)
    return groups


def fit_stage1(cases: Sequence[FitCase], candidate_volumes: Sequence[float], spec: RegionSpec,
               metric: MetricConfig = MetricConfig(), clusters: Iterable[int] | None = None,
               connectivity: int = 26, report: list | None = None) -> dict[tuple[int, int], float]:
    """Per (cluster, label) minimum component volume maximizing mean lesion-wise Dice.

    Each label is searched independently with the other labels untouched.
    Threshold 0 (no removal) is always a candidate and ties go to the
    smallest threshold, so a fitted threshold never lowers the fitting-set
    score.
    """
    grid = sorted(set(float(v) for v in candidate_volumes) | {0.0})
    clusters = sorted(set(c.cluster for c in cases)) if clusters is None else list(clusters)
    stage1: dict[tuple[int, int], float] = {}
    for cluster, group in _by_cluster(cases, clusters).items():
        if not group:
            log.warning("cluster %d has no fitting cases; stage-1 thresholds default to 0", cluster)
            for label, _ in spec.alphabet:
                stage1[(cluster, label)] = 0.0
            continue
        gts = [_gt_masks(c, spec) for c in group]
        for label, _ in spec.alphabet:
            regions = [r for r in spec.region_names if label in spec.labels_of(r)]
            if not regions:
                stage1[(cluster, label)] = 0.0
                continue
            n_terms = len(group) * len(regions)
            # removal sets are nested in the threshold, so cache per number of removed components
            per_case = []
            for case, gt in zip(group, gts):
                pred = case.prediction.data
                cc = connected_components(pred == label, connectivity, case.prediction.spacing)
                order = np.argsort(cc.volumes, kind="stable")
                per_case.append((pred, cc, order, np.sort(cc.volumes), gt, case.prediction.spacing, {}))
            scores = []
            for t in grid:
                total = 0.0
                for pred, cc, order, vols, gt, spacing, cache in per_case:
                    n_removed = int(np.searchsorted(vols, t, side="left"))
                    if n_removed not in cache:
                        out = pred
                        if n_removed:
                            out = pred.copy()
                            out[np.isin(cc.labels, order[:n_removed] + 1)] = 0
                        cache[n_removed] = _case_score(out, gt, regions, spec, spacing, metric)
                    total += cache[n_removed]
                scores.append(total / n_terms)
                if report is not None:
                    report.append(("stage1", cluster, label, t, "", scores[-1], len(group)))
            best = int(np.argmax(scores))   # first maximum = smallest threshold
            if scores[best] < scores[0]:
                raise AssertionError("stage-1 fit lowered the fitting-set score")
            stage1[(cluster, label)] = grid[best]
    return stage1


def apply_stage1(labels: LabelVolume, cluster: int, stage1: dict, connectivity: int = 26) -> LabelVolume:
    policy = ThresholdPolicy("", labels.alphabet, (cluster,),
                             {k: v for k, v in stage1.items() if k[0] == cluster})
    return labels.with_data(_stage1_pass(labels.data, cluster, policy, labels.spacing, connectivity))


def fit_stage2(cases: Sequence[FitCase], candidate_ratios: Sequence[float],
               relabel_menu: Sequence[tuple[int, int]], spec: RegionSpec,
               metric: MetricConfig = MetricConfig(), clusters: Iterable[int] | None = None,
               report: list | None = None) -> list[RelabelRule]:
    """Ratio-based relabel rules, adopted only on strict improvement.

    ``cases`` should already carry stage-1 refined predictions. Source labels
    are processed in menu order, each seeing the rules adopted before it. For
    one source the candidates are tried by ascending ratio, then menu order;
    the first best one wins.
    """
    ratios = sorted(set(float(r) for r in candidate_ratios))
    clusters = sorted(set(c.cluster for c in cases)) if clusters is None else list(clusters)
    sources = list(dict.fromkeys(src for src, _ in relabel_menu))
    rules: list[RelabelRule] = []
    for cluster, group in _by_cluster(cases, clusters).items():
        if not group:
            log.warning("cluster %d has no fitting cases; no relabel rules", cluster)
            continue
        gts = [_gt_masks(c, spec) for c in group]
        preds = [c.prediction.data for c in group]
        for src in sources:
            targets = [dst for s, dst in relabel_menu if s == src]
            regions = [r for r in spec.region_names
                       if any((src in spec.labels_of(r)) != (dst in spec.labels_of(r)) for dst in targets)]
            if not regions:
                continue
            n_terms = len(group) * len(regions)
            ratio_i = []
            base_i = []
            fired_i = []
            for pred, gt, case in zip(preds, gts, group):
                ratio_i.append(tumor_ratio(pred, src))
                if not np.count_nonzero(pred):
                    log.info("%s: empty whole tumor, ratio taken as 0", case.case_id)
                sp = case.prediction.spacing
                base_i.append(_case_score(pred, gt, regions, spec, sp, metric))
                fired = {}
                for dst in targets:
                    out = pred.copy()
                    out[pred == src] = dst
                    fired[dst] = _case_score(out, gt, regions, spec, sp, metric)
                fired_i.append(fired)
            baseline = sum(base_i) / n_terms
            best, best_score = None, baseline
            for r in ratios:
                for dst in targets:
                    total = sum(f[dst] if q < r else b for q, b, f in zip(ratio_i, base_i, fired_i))
                    score = total / n_terms
                    if report is not None:
                        report.append(("stage2", cluster, src, r, dst, score, len(group)))
                    if score > best_score:
                        best, best_score = (r, dst), score
            if best is None:
                continue
            rule = RelabelRule(cluster, src, best[0], best[1])
            if not best_score > baseline:
                raise AssertionError("stage-2 rule adopted without strict improvement")
            try:
                _check_acyclic([x for x in rules if x.cluster == cluster] + [rule])
            except PolicyError:
                log.warning("skipping rule %s: it would close a relabel cycle", rule)
                continue
            rules.append(rule)
            preds = [relabel_if_small(p, rule.label, rule.ratio, rule.target) for p in preds]
    return rules


def fit_policy(cases: Sequence[FitCase], spec: RegionSpec, candidate_volumes: Sequence[float],
               candidate_ratios: Sequence[float], relabel_menu: Sequence[tuple[int, int]],
               metric: MetricConfig = MetricConfig(), clusters: Iterable[int] | None = None,
               connectivity: int = 26, report: list | None = None) -> ThresholdPolicy:
    """Stage 1, then stage 2 on the stage-1 refined maps."""
    clusters = sorted(set(c.cluster for c in cases)) if clusters is None else sorted(set(clusters))
    stage1 = fit_stage1(cases, candidate_volumes, spec, metric, clusters, connectivity, report)
    refined = [FitCase(c.case_id, apply_stage1(c.prediction, c.cluster, stage1, connectivity),
                       c.ground_truth, c.cluster) for c in cases]
    stage2 = fit_stage2(refined, candidate_ratios, relabel_menu, spec, metric, clusters, report)
    counts = {str(k): sum(1 for c in cases if c.cluster == k) for k in clusters}
    provenance = {
        "objective": "mean lesion-wise dice",
        "n_cases": len(cases),
        "cases_per_cluster": counts,
        "stage1_grid": sorted(set(float(v) for v in candidate_volumes) | {0.0}),
        "ratio_grid": sorted(set(float(r) for r in candidate_ratios)),
        "relabel_menu": [list(p) for p in relabel_menu],
        "metric": {"dilation_radius": metric.dilation_radius, "connectivity": metric.connectivity,
                   "penalty": metric.penalty},
    }
    return ThresholdPolicy(spec.task, spec.alphabet, tuple(clusters), stage1, stage2,
                           spec.digest(), provenance)


def mean_lesionwise_dice(preds: Sequence[LabelVolume], gts: Sequence[LabelVolume],
                         spec: RegionSpec, metric: MetricConfig = MetricConfig()) -> float:
    """Mean lesion-wise Dice over all cases and regions of ``spec``."""
    total = 0.0
    for p, g in zip(preds, gts):
        gt_masks = {r: np.isin(g.data, spec.labels_of(r)) for r in spec.region_names}
        total += _case_score(p.data, gt_masks, spec.region_names, spec, p.spacing, metric)
    return total / (len(preds) * len(spec.region_names))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_policy(policy: ThresholdPolicy, path) -> None:
    doc = {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "task": policy.task,
        "alphabet": [list(a) for a in policy.alphabet],
        "clusters": list(policy.clusters),
        "region_digest": policy.region_digest,
        "stage1": [{"cluster": c, "label": l, "min_volume": v}
                   for (c, l), v in sorted(policy.stage1.items())],
        "stage2": [{"cluster": r.cluster, "label": r.label, "ratio": r.ratio, "target": r.target}
                   for r in policy.stage2],
        "provenance": policy.provenance,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_policy(path, alphabet=None) -> ThresholdPolicy:
    """Read a policy file; with ``alphabet`` given, the policy must match it."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PolicyError(f"{path}: unreadable policy file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != POLICY_FORMAT:
        raise PolicyError(f"{path}: not a threshold policy file")
    if doc.get("version") != POLICY_VERSION:
        raise PolicyError(f"{path}: unsupported policy version {doc.get('version')!r}")
    try:
        policy = ThresholdPolicy(
            task=str(doc["task"]),
            alphabet=tuple((int(i), str(n)) for i, n in doc["alphabet"]),
            clusters=tuple(int(c) for c in doc["clusters"]),
            stage1={(int(e["cluster"]), int(e["label"])): float(e["min_volume"]) for e in doc["stage1"]},
            stage2=[RelabelRule(int(e["cluster"]), int(e["label"]), float(e["ratio"]), int(e["target"]))
                    for e in doc["stage2"]],
            region_digest=str(doc.get("region_digest", "")),
            provenance=dict(doc.get("provenance", {})),
        )
    except PolicyError as exc:
        raise PolicyError(f"{path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise PolicyError(f"{path}: corrupt policy file ({exc})") from exc
    if alphabet is not None:
        expected = tuple((int(i), str(n)) for i, n in alphabet)
        if policy.alphabet != expected:
            raise PolicyError(f"{path}: policy alphabet {policy.alphabet} does not match task alphabet {expected}")
    return policy


def write_fit_report(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("stage", "cluster", "label", "candidate", "target", "mean_lw_dice", "n_cases"))
        for stage, cluster, label, cand, target, score, n in rows:
            w.writerow([stage, cluster, label, repr(float(cand)), target, repr(float(score)), n])
