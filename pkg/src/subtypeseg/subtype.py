"""Tumor subtype model: standardization, PCA to a variance threshold, k-means.

The number of clusters is picked by grid search over the mean silhouette.
Everything is seeded through :func:`numpy.random.default_rng` (PCG64), so a
given ``(X, k, seed)`` always yields bit-identical centroids.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .radiomics import FeatureVector

log = logging.getLogger(__name__)

DEFAULT_SEED = 20240
MODEL_FORMAT = "subtypeseg.subtype-model"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Raised for unreadable, truncated or mismatched model files."""


# ---------------------------------------------------------------------------
# standardization and PCA
# ---------------------------------------------------------------------------

def standardize_fit(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and population standard deviations.

    Columns whose std is below 1e-12 get std 1 so they standardize to 0.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need at least 2 rows to standardize, got shape {X.shape}")
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds[stds < 1e-12] = 1.0
    return means, stds


def standardize_apply(X: np.ndarray, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - means) / stds


@dataclass(frozen=True, eq=False)
class PCABasis:
    components: np.ndarray            # (m, d) orthonormal rows
    explained_variance_ratio: np.ndarray  # (d,) non-increasing, sums to 1

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit(X_std: np.ndarray, variance_threshold: float = 0.99) -> PCABasis:
    """Eigendecomposition of the sample covariance.

    Keeps the smallest number of leading components whose cumulative
    explained-variance ratio reaches ``variance_threshold``. Each basis row is
    sign-fixed so that its largest-magnitude entry is positive.
    """
    X = np.asarray(X_std, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need at least 2 rows for PCA, got shape {X.shape}")
    if not 0 < variance_threshold <= 1:
        raise ValueError(f"variance_threshold must lie in (0, 1], got {variance_threshold}")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / (X.shape[0] - 1)
    lam, vec = np.linalg.eigh(cov)
    order = np.argsort(lam, kind="stable")[::-1]
    lam = np.clip(lam[order], 0.0, None)
    vec = vec[:, order].T
    total = lam.sum()
    if not total > 0:
        raise ValueError("degenerate input: all-zero covariance")
    ratios = lam / total
    cumulative = np.cumsum(ratios)
    m = int(np.searchsorted(cumulative, variance_threshold, side="left")) + 1
    m = min(m, len(ratios))
    basis = vec[:m].copy()
    pivots = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(m), pivots])
    basis *= signs[:, None]
    return PCABasis(basis, ratios)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _sq_dist(Z: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((Z[:, None, :] - C[None, :, :]) ** 2).sum(axis=-1)


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    history: tuple[float, ...] = field(default=())


def _kmeans_pp(Z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = Z.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dist(Z, Z[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.choice(np.setdiff1d(np.arange(n), chosen)))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dist(Z, Z[[idx]])[:, 0])
    return Z[chosen].copy()


def _lloyd(Z: np.ndarray, C: np.ndarray, max_iter: int, tol: float) -> KMeansResult:
    k = C.shape[0]
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dist(Z, C)
        labels = np.argmin(d2, axis=1)
        own = d2[np.arange(len(Z)), labels]
        history.append(float(own.sum()))
        new = np.empty_like(C)
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = Z[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # reseed empty clusters on the points that are worst served
            far = np.argsort(-own, kind="stable")
            for j, idx in zip(empty, far):
                new[j] = Z[idx]
        shift = float(np.sqrt(((new - C) ** 2).sum(axis=1)).max())
        C = new
        if shift < tol:
            break
    d2 = _sq_dist(Z, C)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(Z)), labels].sum())
    history.append(inertia)
    return KMeansResult(C, labels, inertia, n_iter, tuple(history))


def kmeans_fit(Z: np.ndarray, k: int, seed: int = DEFAULT_SEED, max_iter: int = 300,
               tol: float = 1e-6, n_init: int = 10) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations, best of ``n_init`` runs.

    All restarts draw from a single generator seeded with ``seed``; ties in
    the objective keep the earliest run.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")
    if len(np.unique(Z, axis=0)) < k:
        raise ValueError(f"fewer than k={k} distinct points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        result = _lloyd(Z, _kmeans_pp(Z, k, rng), max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def silhouette_mean(Z: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient; points in singleton clusters score 0."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    dist = np.sqrt(_sq_dist(Z, Z))
    member = labels[:, None] == clusters[None, :]          # (n, k)
    sizes = member.sum(axis=0)
    sums = dist @ member                                     # (n, k)
    own = np.argmax(member, axis=1)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(len(Z)), own] / np.maximum(own_size - 1, 1), 0.0)
    means = sums / sizes[None, :]
    means[np.arange(len(Z)), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def select_k(Z: np.ndarray, k_range: Iterable[int] = range(2, 9), seed: int = DEFAULT_SEED,
             **kmeans_kw) -> tuple[int, dict[int, float]]:
    """Grid search over ``k_range``; returns the argmax k and all scores.

    Ties go to the smallest k.
    """
    Z = np.asarray(Z, dtype=np.float64)
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("empty k range")
    n = Z.shape[0]
    if ks[0] < 2 or ks[-1] > n - 1:
        raise ValueError(f"k range {ks[0]}..{ks[-1]} must lie within [2, n-1] = [2, {n - 1}]")
    scores: dict[int, float] = {}
    for k in ks:
        try:
            result = kmeans_fit(Z, k, seed, **kmeans_kw)
        except ValueError as exc:
            log.warning("skipping k=%d: %s", k, exc)
            continue
        scores[k] = silhouette_mean(Z, result.labels)
    if not scores:
        raise ValueError("no feasible k in range")
    best_k = ks[0]
    best = -np.inf
    for k in ks:
        if k in scores and scores[k] > best:
            best_k, best = k, scores[k]
    return best_k, scores


# ---------------------------------------------------------------------------
# fitted model
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SubtypeModel:
    feature_names: tuple[str, ...]
    means: np.ndarray
    stds: np.ndarray
    components: np.ndarray
    explained_variance_ratio: np.ndarray
    centroids: np.ndarray
    seed: int = DEFAULT_SEED
    variance_threshold: float = 0.99
    k_scores: dict[int, float] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def project(self, X: np.ndarray) -> np.ndarray:
        return standardize_apply(np.atleast_2d(X), self.means, self.stds) @ self.components.T

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Nearest-centroid ids for the rows of a raw feature matrix."""
        return np.argmin(_sq_dist(self.project(X), self.centroids), axis=1)


def fit_subtype_model(X: np.ndarray, feature_names: Sequence[str],
                      k_range: Iterable[int] = range(2, 9), seed: int = DEFAULT_SEED,
                      variance_threshold: float = 0.99) -> SubtypeModel:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != len(feature_names):
        raise ValueError("feature matrix width does not match the feature names")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains non-finite values")
    means, stds = standardize_fit(X)
    basis = pca_fit(standardize_apply(X, means, stds), variance_threshold)
    model = SubtypeModel(tuple(feature_names), means, stds, basis.components,
                         basis.explained_variance_ratio, np.zeros((0, basis.n_components)),
                         int(seed), float(variance_threshold))
    Z = model.project(X)
    k, scores = select_k(Z, k_range, seed)
    model.centroids = kmeans_fit(Z, k, seed).centroids
    model.k_scores = scores
    log.info("subtype model: %d components, k=%d", model.n_components, k)
    return model


def assign_subtype(model: SubtypeModel, fv: FeatureVector) -> int:
    """Nearest centroid in PCA space; ties go to the smaller id."""
    if tuple(fv.names) != model.feature_names:
        raise ValueError("feature vector schema does not match the subtype model")
    return int(model.predict(fv.values[None, :])[0])


def save_model(model: SubtypeModel, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "feature_names": list(model.feature_names),
        "means": model.means.tolist(),
        "stds": model.stds.tolist(),
        "components": model.components.tolist(),
        "explained_variance_ratio": model.explained_variance_ratio.tolist(),
        "centroids": model.centroids.tolist(),
        "seed": model.seed,
        "variance_threshold": model.variance_threshold,
        "k_scores": {str(k): v for k, v in sorted(model.k_scores.items())},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_model(path) -> SubtypeModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable model file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: not a subtype model file")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {doc.get('version')!r}")
    try:
        names = tuple(doc["feature_names"])
        d = len(names)
        components = np.array(doc["components"], dtype=np.float64).reshape(-1, d)
        model = SubtypeModel(
            feature_names=names,
            means=np.array(doc["means"], dtype=np.float64).reshape(d),
            stds=np.array(doc["stds"], dtype=np.float64).reshape(d),
            components=components,
            explained_variance_ratio=np.array(doc["explained_variance_ratio"], dtype=np.float64).reshape(d),
            centroids=np.array(doc["centroids"], dtype=np.float64).reshape(-1, components.shape[0]),
            seed=int(doc["seed"]),
            variance_threshold=float(doc["variance_threshold"]),
            k_scores={int(k): float(v) for k, v in doc["k_scores"].items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: corrupt model file ({exc})") from exc
    if model.k < 1:
        raise ModelFormatError(f"{path}: model has no centroids")
    return model
