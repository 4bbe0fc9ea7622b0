"""Region composition, Dice / HD95 and their lesion-wise variants.

The lesion-wise procedure follows the public BraTS 2023/2024 evaluation
convention: ground-truth lesions are dilated only to decide which predicted
components belong to them, unmatched predictions count as false positives,
and every false positive or missed lesion costs a fixed HD95 penalty.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .morphology import binary_dilate, connected_components, structuring_element
from .volume import LabelVolume

HD_PENALTY = 374.0
METRIC_NAMES = ("lw_dice", "lw_hd95", "dice", "hd95")
STAT_NAMES = ("mean", "std", "q25", "median", "q75")


@dataclass(frozen=True)
class MetricConfig:
    dilation_radius: int = 1
    connectivity: int = 26
    penalty: float = HD_PENALTY


@dataclass(frozen=True)
class RegionSpec:
    """Evaluation regions composed from a task's base labels."""

    task: str
    alphabet: tuple[tuple[int, str], ...]
    regions: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        alphabet = tuple((int(i), str(n)) for i, n in self.alphabet)
        ids = {i for i, _ in alphabet}
        regions = tuple((str(name), tuple(sorted(int(x) for x in labels))) for name, labels in self.regions)
        for name, labels in regions:
            if not labels:
                raise ValueError(f"region {name!r} is empty")
            if not set(labels) <= ids:
                raise ValueError(f"region {name!r} uses labels outside the alphabet: {labels}")
        object.__setattr__(self, "alphabet", alphabet)
        object.__setattr__(self, "regions", regions)

    @classmethod
    def from_names(cls, task: str, alphabet, regions: Mapping[str, Sequence[str]]) -> "RegionSpec":
        by_name = {n: i for i, n in alphabet}
        try:
            resolved = tuple((r, tuple(by_name[n] for n in names)) for r, names in regions.items())
        except KeyError as exc:
            raise ValueError(f"unknown label name {exc.args[0]!r} in region definition") from None
        return cls(task, tuple(alphabet), resolved)

    @property
    def region_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.regions)

    def labels_of(self, region: str) -> tuple[int, ...]:
        for name, labels in self.regions:
            if name == region:
                return labels
        raise KeyError(f"unknown region {region!r} for task {self.task!r}")

    def digest(self) -> str:
        doc = {"task": self.task, "alphabet": self.alphabet, "regions": self.regions}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def region_mask(labels: LabelVolume | np.ndarray, spec: RegionSpec, region: str) -> np.ndarray:
    data = labels.data if isinstance(labels, LabelVolume) else np.asarray(labels)
    return np.isin(data, spec.labels_of(region))


# ---------------------------------------------------------------------------
# plain metrics
# ---------------------------------------------------------------------------

def dice(a: np.ndarray, b: np.ndarray) -> float:
    """``2|a & b| / (|a| + |b|)``, defined as 1.0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbor outside the mask (grid edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=structuring_element(6), border_value=0)
    return mask & ~inner


def hd95(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0), penalty: float = HD_PENALTY) -> float:
    """95th percentile of the pooled surface distances a->b and b->a (mm)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    a_any, b_any = a.any(), b.any()
    if not a_any and not b_any:
        return 0.0
    if not a_any or not b_any:
        return float(penalty)
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface_voxels(a)) * sp
    pb = np.argwhere(surface_voxels(b)) * sp
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


# ---------------------------------------------------------------------------
# lesion-wise
# ---------------------------------------------------------------------------

def _grow(sl: tuple[slice, ...], margin: int, shape) -> tuple[slice, ...]:
    return tuple(slice(max(s.start - margin, 0), min(s.stop + margin, n)) for s, n in zip(sl, shape))


def _merge(boxes) -> tuple[slice, ...]:
    boxes = list(boxes)
    return tuple(slice(min(b[i].start for b in boxes), max(b[i].stop for b in boxes)) for i in range(3))


@dataclass(frozen=True)
class LesionMatch:
    """Per-lesion detail behind a lesion-wise score."""

    lesion_id: int
    pred_ids: tuple[int, ...]
    dice: float
    hd95: float


def lesionwise_detail(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0),
                      config: MetricConfig = MetricConfig()):
    """Lesion matches plus false-positive / false-negative counts."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    gt_cc = connected_components(gt, config.connectivity)
    pred_cc = connected_components(pred, config.connectivity)
    gt_boxes = ndimage.find_objects(gt_cc.labels)
    pred_boxes = ndimage.find_objects(pred_cc.labels)
    shape = gt.shape
    matches: list[LesionMatch] = []
    matched: set[int] = set()
    n_fn = 0
    for lesion_id, box in enumerate(gt_boxes, 1):
        zone_box = _grow(box, config.dilation_radius, shape)
        lesion = gt_cc.labels[zone_box] == lesion_id
        zone = binary_dilate(lesion, config.dilation_radius, config.connectivity)
        ids = np.unique(pred_cc.labels[zone_box][zone])
        ids = tuple(int(i) for i in ids if i > 0)
        if not ids:
            n_fn += 1
            matches.append(LesionMatch(lesion_id, (), 0.0, float(config.penalty)))
            continue
        matched.update(ids)
        crop = _grow(_merge([box] + [pred_boxes[i - 1] for i in ids]), 1, shape)
        g = gt_cc.labels[crop] == lesion_id
        p = np.isin(pred_cc.labels[crop], ids)
        matches.append(LesionMatch(lesion_id, ids, dice(p, g), hd95(p, g, spacing, config.penalty)))
    n_fp = pred_cc.count - len(matched)
    return matches, n_fp, n_fn


def lesionwise(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0),
               dilation_radius: int = 1, connectivity: int = 26,
               penalty: float = HD_PENALTY) -> tuple[float, float]:
    """Lesion-wise (Dice, HD95).

    Both are averaged over ``#gt lesions + #false positives``; missed lesions
    add Dice 0, and every false positive or missed lesion adds ``penalty`` mm
    to the HD95 sum.
    """
    config = MetricConfig(dilation_radius, connectivity, penalty)
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if not pred.any() and not gt.any():
        return 1.0, 0.0
    matches, n_fp, n_fn = lesionwise_detail(pred, gt, spacing, config)
    denom = len(matches) + n_fp
    hit = [m for m in matches if m.pred_ids]
    lw_dice = sum(m.dice for m in hit) / denom
    lw_hd = (sum(m.hd95 for m in hit) + penalty * (n_fp + n_fn)) / denom
    return float(lw_dice), float(lw_hd)


# ---------------------------------------------------------------------------
# case / dataset reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionScores:
    lw_dice: float
    lw_hd95: float
    dice: float
    hd95: float

    def get(self, metric: str) -> float:
        return getattr(self, metric)


@dataclass(frozen=True)
class CaseReport:
    case_id: str
    scores: dict[str, RegionScores]


def evaluate_case(pred: LabelVolume, gt: LabelVolume, spec: RegionSpec,
                  config: MetricConfig = MetricConfig(), case_id: str = "") -> CaseReport:
    if not pred.geometry.matches(gt.geometry):
        raise ValueError(f"{case_id or 'case'}: prediction and ground truth geometry differ")
    scores = {}
    for region in spec.region_names:
        p = region_mask(pred, spec, region)
        g = region_mask(gt, spec, region)
        lw_d, lw_h = lesionwise(p, g, pred.spacing, config.dilation_radius,
                                config.connectivity, config.penalty)
        scores[region] = RegionScores(lw_d, lw_h, dice(p, g), hd95(p, g, pred.spacing, config.penalty))
    return CaseReport(case_id, scores)


@dataclass(frozen=True)
class DatasetReport:
    regions: tuple[str, ...]
    n_cases: int
    # stats[(region, metric)] -> {"mean": .., "std": .., "q25": .., "median": .., "q75": ..}
    stats: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)


def evaluate_dataset(cases: Sequence[CaseReport]) -> DatasetReport:
    """Mean, population std and linear-interpolated quartiles per region and metric."""
    if not cases:
        raise ValueError("no cases to aggregate")
    regions = tuple(cases[0].scores)
    stats = {}
    for region in regions:
        for metric in METRIC_NAMES:
            v = np.array([c.scores[region].get(metric) for c in cases], dtype=np.float64)
            q25, q50, q75 = np.percentile(v, [25, 50, 75])
            stats[(region, metric)] = {
                "mean": float(v.mean()),
                "std": float(v.std()),
                "q25": float(q25),
                "median": float(q50),
                "q75": float(q75),
            }
    return DatasetReport(regions, len(cases), stats)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_case_csv(path, cases: Sequence[CaseReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("case_id", "region") + METRIC_NAMES)
        for c in cases:
            for region, s in c.scores.items():
                w.writerow([c.case_id, region] + [_fmt(s.get(m)) for m in METRIC_NAMES])


def write_summary_csv(path, report: DatasetReport) -> None:
    """One row per statistic, one column per (metric, region), Dice block first."""
    columns = [(r, m) for m in METRIC_NAMES for r in report.regions]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic"] + [f"{m}_{r}" for r, m in columns])
        for stat in STAT_NAMES:
            w.writerow([stat] + [_fmt(report.stats[col][stat]) for col in columns])
