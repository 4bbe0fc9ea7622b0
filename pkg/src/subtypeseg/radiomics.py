"""Shape and first-order intensity features of a tumor region.

Only the first-order intensity family is implemented; texture-matrix
families (GLCM, GLRLM, GLSZM, GLDM, NGTDM) are deliberately left out.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import ConvexHull

from .morphology import largest_component
from .volume import LabelVolume, Volume, resample_isotropic

SHAPE_FEATURES = (
    "voxel_volume",
    "surface_area",
    "surface_volume_ratio",
    "sphericity",
    "max_3d_diameter",
    "max_2d_diameter_slice",
    "max_2d_diameter_column",
    "max_2d_diameter_row",
    "major_axis_length",
    "minor_axis_length",
    "least_axis_length",
    "elongation",
    "flatness",
    "compactness",
)

FIRSTORDER_FEATURES = (
    "energy",
    "total_energy",
    "entropy",
    "minimum",
    "p10",
    "p90",
    "maximum",
    "mean",
    "median",
    "interquartile_range",
    "range",
    "mean_absolute_deviation",
    "robust_mad",
    "rms",
    "standard_deviation",
    "skewness",
    "kurtosis",
    "variance",
    "uniformity",
)


class EmptyMaskError(ValueError):
    """Raised when a feature is requested on an empty region."""

    def __init__(self, message: str = "empty mask", case_id: str | None = None):
        self.case_id = case_id
        super().__init__(message if case_id is None else f"{case_id}: {message}")


@dataclass(frozen=True)
class DiscretizationSpec:
    bin_width: float = 25.0

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ValueError(f"bin_width must be positive, got {self.bin_width}")


@dataclass(frozen=True, eq=False)
class FeatureVector:
    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (len(self.names),):
            raise ValueError("feature names and values differ in length")
        if not np.all(np.isfinite(values)):
            bad = [n for n, v in zip(self.names, values) if not np.isfinite(v)]
            raise ValueError(f"non-finite feature values: {bad}")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.names)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------

def _max_pairwise_distance(points: np.ndarray) -> float:
    """Largest Euclidean distance between any two rows of ``points``.

    The farthest pair always lies on the convex hull, so candidates are
    reduced to hull vertices (computed in the points' own affine span,
    which keeps planar and linear sets well-posed) before a direct search.
    """
    pts = np.unique(points, axis=0)
    if len(pts) < 2:
        return 0.0
    centered = pts - pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(sv > sv[0] * 1e-9))
    proj = centered @ vt[:rank].T
    if rank == 1:
        cand = pts[[np.argmin(proj[:, 0]), np.argmax(proj[:, 0])]]
    elif len(pts) <= rank + 1:
        cand = pts
    else:
        cand = pts[ConvexHull(proj).vertices]
    best = 0.0
    for start in range(0, len(cand), 512):
        block = cand[start:start + 512]
        d2 = ((block[:, None, :] - cand[None, :, :]) ** 2).sum(axis=-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def _exposed_faces(mask: np.ndarray) -> np.ndarray:
    """Number of foreground faces bordering background, per axis."""
    padded = np.pad(mask, 1, constant_values=False)
    counts = []
    for axis in range(3):
        diff = np.diff(padded.astype(np.int8), axis=axis)
        counts.append(int(np.count_nonzero(diff)))
    return np.array(counts, dtype=np.int64)


def shape_features(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> dict[str, float]:
    """The 14 shape descriptors of a single-component mask.

    Surface area counts exposed voxel faces, so it overestimates smooth
    surfaces (staircase effect); values are consistent across cases, which
    is what clustering needs.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError()
    sp = np.asarray(spacing, dtype=np.float64)
    n = int(mask.sum())
    volume = n * float(sp.prod())
    face_area = np.array([sp[1] * sp[2], sp[0] * sp[2], sp[0] * sp[1]])
    area = float(_exposed_faces(mask) @ face_area)

    coords = np.argwhere(mask) * sp
    cov = np.cov(coords, rowvar=False, bias=True) if n > 1 else np.zeros((3, 3))
    lam = np.clip(np.sort(np.linalg.eigvalsh(cov))[::-1], 0.0, None)
    # planar / linear masks: round-off eigenvalues become exact zeros
    lam[lam < 1e-10 * lam[0]] = 0.0
    if lam[0] > 0:
        elongation = float(np.sqrt(lam[1] / lam[0]))
        flatness = float(np.sqrt(lam[2] / lam[0]))
    else:
        elongation = flatness = 0.0

    return {
        "voxel_volume": volume,
        "surface_area": area,
        "surface_volume_ratio": area / volume,
        "sphericity": float((36.0 * np.pi * volume ** 2) ** (1.0 / 3.0) / area),
        "max_3d_diameter": _max_pairwise_distance(coords),
        "max_2d_diameter_slice": _max_pairwise_distance(coords[:, [0, 1]]),
        "max_2d_diameter_column": _max_pairwise_distance(coords[:, [0, 2]]),
        "max_2d_diameter_row": _max_pairwise_distance(coords[:, [1, 2]]),
        "major_axis_length": float(4.0 * np.sqrt(lam[0])),
        "minor_axis_length": float(4.0 * np.sqrt(lam[1])),
        "least_axis_length": float(4.0 * np.sqrt(lam[2])),
        "elongation": elongation,
        "flatness": flatness,
        "compactness": float(volume / (np.sqrt(np.pi) * area ** 1.5)),
    }


# ---------------------------------------------------------------------------
# first order
# ---------------------------------------------------------------------------

def firstorder_features(image: Volume | np.ndarray, mask: np.ndarray,
                        disc: DiscretizationSpec = DiscretizationSpec(),
                        spacing=None) -> dict[str, float]:
    """The 19 first-order statistics of the in-mask intensities.

    Percentiles interpolate linearly; entropy and uniformity use fixed-width
    bins whose origin is the in-mask minimum. Skewness and kurtosis are 0
    for a constant region.
    """
    if isinstance(image, Volume):
        if spacing is None:
            spacing = image.spacing
        image = image.data
    if spacing is None:
        spacing = (1.0, 1.0, 1.0)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape:
        raise ValueError(f"image shape {image.shape} and mask shape {mask.shape} differ")
    if not mask.any():
        raise EmptyMaskError()
    x = np.asarray(image, dtype=np.float64)[mask]
    n = x.size

    lo, hi = float(x.min()), float(x.max())
    p10, p25, p50, p75, p90 = np.percentile(x, [10, 25, 50, 75, 90])
    mean = lo if lo == hi else float(x.mean())
    dev = x - mean
    m2 = float(np.mean(dev ** 2))
    if m2 > 0:
        skewness = float(np.mean(dev ** 3) / m2 ** 1.5)
        kurtosis = float(np.mean(dev ** 4) / m2 ** 2)
    else:
        skewness = kurtosis = 0.0

    bins = np.floor((x - lo) / disc.bin_width).astype(np.int64)
    p = np.bincount(bins) / n
    p = p[p > 0]

    robust = x[(x >= p10) & (x <= p90)]
    energy = float(np.sum(x ** 2))
    return {
        "energy": energy,
        "total_energy": energy * float(np.prod(spacing)),
        "entropy": float(-np.sum(p * np.log2(p))) + 0.0,
        "minimum": lo,
        "p10": float(p10),
        "p90": float(p90),
        "maximum": hi,
        "mean": mean,
        "median": float(p50),
        "interquartile_range": float(p75 - p25),
        "range": hi - lo,
        "mean_absolute_deviation": float(np.mean(np.abs(dev))),
        "robust_mad": float(np.mean(np.abs(robust - robust.mean()))),
        "rms": float(np.sqrt(energy / n)),
        "standard_deviation": float(np.sqrt(m2)),
        "skewness": skewness,
        "kurtosis": kurtosis,
        "variance": m2,
        "uniformity": float(np.sum(p ** 2)),
    }


# ---------------------------------------------------------------------------
# per case
# ---------------------------------------------------------------------------

def feature_names(sequences: Sequence[str]) -> tuple[str, ...]:
    names = [f"shape.{f}" for f in SHAPE_FEATURES]
    for seq in sequences:
        names.extend(f"{seq}.firstorder.{f}" for f in FIRSTORDER_FEATURES)
    return tuple(names)


def extract_case_features(sequences: Mapping[str, Volume], wt_mask: Volume | np.ndarray,
                          spacing_mm: float, sequence_names: Sequence[str] | None = None,
                          disc: DiscretizationSpec = DiscretizationSpec(),
                          connectivity: int = 26, case_id: str | None = None) -> FeatureVector:
    """Resample, keep the largest whole-tumor component and compute all features.

    ``wt_mask`` may be a binary array aligned with the sequences or a volume;
    any non-zero voxel counts as tumor.
    """
    if sequence_names is None:
        sequence_names = list(sequences)
    missing = [s for s in sequence_names if s not in sequences]
    if missing:
        raise KeyError(f"missing sequences {missing}")
    vols = [sequences[s] for s in sequence_names]
    ref = vols[0].geometry
    for name, v in zip(sequence_names, vols):
        if not v.geometry.matches(ref):
            raise ValueError(f"sequence {name!r} is not aligned with {sequence_names[0]!r}")
    if isinstance(wt_mask, Volume):
        if not wt_mask.geometry.matches(ref):
            raise ValueError("whole-tumor mask is not aligned with the sequences")
        wt = wt_mask.data != 0
    else:
        wt = np.asarray(wt_mask) != 0
        if wt.shape != ref.dims:
            raise ValueError("whole-tumor mask is not aligned with the sequences")
    if not wt.any():
        raise EmptyMaskError("empty whole-tumor mask", case_id)

    mask_vol = resample_isotropic(LabelVolume(wt.astype(np.uint8), geometry=ref, alphabet=[(1, "WT")]),
                                  spacing_mm, mode="nearest")
    mask = mask_vol.data != 0
    if not mask.any():
        raise EmptyMaskError("whole-tumor mask vanished after resampling", case_id)
    mask = largest_component(mask, connectivity)
    sp = mask_vol.spacing

    values = list(shape_features(mask, sp).values())
    for v in vols:
        img = resample_isotropic(v, spacing_mm, mode="trilinear")
        values.extend(firstorder_features(img.data, mask, disc, sp).values())
    return FeatureVector(feature_names(sequence_names), np.array(values))


def write_feature_table(path, rows: Sequence[tuple[str, FeatureVector]],
                        names: Sequence[str] | None = None) -> None:
    """CSV with a ``case_id`` column followed by the canonical feature names."""
    if names is None:
        if not rows:
            raise ValueError("no feature rows and no header names")
        names = rows[0][1].names
    names = tuple(names)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("case_id",) + names)
        for case_id, fv in rows:
            if fv.names != names:
                raise ValueError(f"{case_id}: feature names differ from the table header")
            writer.writerow([case_id] + [repr(float(v)) for v in fv.values])


def read_feature_table(path) -> tuple[list[str], tuple[str, ...], np.ndarray]:
    """Inverse of :func:`write_feature_table`: (case ids, names, n x d matrix)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "case_id":
            raise ValueError(f"{path}: missing case_id header")
        ids, rows = [], []
        for line in reader:
            if not line:
                continue
            if len(line) != len(header):
                raise ValueError(f"{path}: row for {line[0]!r} has {len(line)} fields")
            ids.append(line[0])
            rows.append([float(v) for v in line[1:]])
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    return ids, tuple(header[1:]), X
