"""Connected components, dilation and small-component removal on binary grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelVolume

_RANK = {6: 1, 18: 2, 26: 3}


def structuring_element(connectivity: int) -> np.ndarray:
    if connectivity not in _RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, _RANK[connectivity])


@dataclass(frozen=True, eq=False)
class ComponentMap:
    """Component ids (0 = background, 1..K) plus per-component sizes.

    ``voxel_counts[i]`` belongs to component ``i + 1``.
    """

    labels: np.ndarray
    voxel_counts: np.ndarray
    voxel_volume: float
    connectivity: int

    @property
    def count(self) -> int:
        return int(self.voxel_counts.size)

    @property
    def volumes(self) -> np.ndarray:
        """Component volumes in mm^3."""
        return self.voxel_counts * self.voxel_volume


def connected_components(mask: np.ndarray, connectivity: int = 26,
                         spacing=(1.0, 1.0, 1.0)) -> ComponentMap:
    """Label the connected components of ``mask``.

    Ids are ordered by each component's first voxel in canonical
    (x-fastest) linear order.
    """
    mask = np.asarray(mask, dtype=bool)
    structure = structuring_element(connectivity)
    labels, k = ndimage.label(mask, structure=structure)
    labels = labels.astype(np.int32, copy=False)
    if k:
        flat = labels.ravel(order="F")
        ids, first = np.unique(flat, return_index=True)
        first, ids = first[ids > 0], ids[ids > 0]
        order = ids[np.argsort(first, kind="stable")]
        if np.any(order != np.arange(1, k + 1)):
            remap = np.zeros(k + 1, dtype=np.int32)
            remap[order] = np.arange(1, k + 1, dtype=np.int32)
            labels = remap[labels]
    counts = np.bincount(labels.ravel(), minlength=k + 1)[1:].astype(np.int64)
    sx, sy, sz = spacing
    return ComponentMap(labels, counts, float(sx) * float(sy) * float(sz), connectivity)


def largest_component(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Restrict ``mask`` to its largest component; ties go to the smallest id."""
    cc = connected_components(mask, connectivity)
    if cc.count == 0:
        raise ValueError("no foreground")
    keep = int(np.argmax(cc.voxel_counts)) + 1
    return cc.labels == keep


def binary_dilate(mask: np.ndarray, radius: int, connectivity: int = 26) -> np.ndarray:
    """Dilate ``radius`` times with the element implied by ``connectivity``."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    # scipy treats iterations=0 as "until stable", hence the early return above
    return ndimage.binary_dilation(mask, structure=structuring_element(connectivity),
                                   iterations=int(radius))


def remove_small_components(labels: np.ndarray, label: int, min_volume: float,
                            spacing=(1.0, 1.0, 1.0), connectivity: int = 26) -> np.ndarray:
    """Array-level worker for :func:`remove_components_below`."""
    labels = np.asarray(labels)
    if min_volume <= 0:
        return labels.copy()
    cc = connected_components(labels == label, connectivity, spacing)
    small = np.flatnonzero(cc.volumes < min_volume) + 1
    out = labels.copy()
    if small.size:
        out[np.isin(cc.labels, small)] = 0
    return out


def remove_components_below(labels: LabelVolume, label: int, min_volume: float,
                            connectivity: int = 26) -> LabelVolume:
    """Zero every component of ``label`` whose volume (mm^3) is below ``min_volume``."""
    if label not in labels.label_ids:
        raise ValueError(f"label {label} is not in the alphabet {labels.alphabet}")
    out = remove_small_components(labels.data, label, min_volume, labels.spacing, connectivity)
    return labels.with_data(out)
