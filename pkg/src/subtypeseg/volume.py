"""3D volumes with physical geometry, NIfTI-1 I/O and isotropic resampling.

Voxel arrays are stored with shape ``(nx, ny, nz)`` so that the canonical
linear index ``x + nx * (y + ny * z)`` is Fortran order: ``data.ravel(order="F")``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import nibabel as nib
import numpy as np

SUPPORTED_DTYPES = (np.dtype(np.uint8), np.dtype(np.int16), np.dtype(np.float32))
ORTHONORMAL_TOL = 1e-6


class VolumeIOError(IOError):
    """Raised when a volume file cannot be read or written."""

    def __init__(self, path, cause: str):
        self.path = str(path)
        self.cause = cause
        super().__init__(f"{self.path}: {cause}")


@dataclass(frozen=True, eq=False)
class Geometry:
    """Grid size plus voxel-to-world mapping (spacing, origin, direction)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        direction = np.array(self.direction, dtype=np.float64).reshape(3, 3)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(np.isfinite(spacing)) or min(spacing) <= 0:
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        if len(origin) != 3:
            raise ValueError(f"origin must be a 3-vector, got {self.origin}")
        if not np.allclose(direction.T @ direction, np.eye(3), rtol=0, atol=ORTHONORMAL_TOL):
            raise ValueError("direction matrix is not orthonormal (sheared affines are rejected)")
        direction.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    @property
    def affine(self) -> np.ndarray:
        aff = np.eye(4)
        aff[:3, :3] = self.direction * np.asarray(self.spacing)[None, :]
        aff[:3, 3] = self.origin
        return aff

    @classmethod
    def from_affine(cls, dims: Sequence[int], affine: np.ndarray) -> "Geometry":
        affine = np.asarray(affine, dtype=np.float64)
        linear = affine[:3, :3]
        spacing = np.linalg.norm(linear, axis=0)
        if not np.all(np.isfinite(linear)) or np.any(spacing == 0) or abs(np.linalg.det(linear)) == 0:
            raise ValueError("non-invertible affine")
        return cls(tuple(dims), tuple(spacing), tuple(affine[:3, 3]), linear / spacing[None, :])

    def matches(self, other: "Geometry", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
            and np.allclose(self.direction, other.direction, rtol=0, atol=tol)
        )

    def with_dims(self, dims, spacing) -> "Geometry":
        return Geometry(tuple(dims), tuple(spacing), self.origin, self.direction)


class Volume:
    """Immutable scalar 3D grid with physical geometry."""

    def __init__(self, data: np.ndarray, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                 direction=None, *, geometry: Geometry | None = None):
        data = np.array(data, copy=True)
        if data.ndim != 3:
            raise ValueError(f"expected a 3D array, got {data.ndim}D")
        if geometry is None:
            geometry = Geometry(data.shape, spacing, origin,
                                np.eye(3) if direction is None else direction)
        elif geometry.dims != data.shape:
            raise ValueError(f"geometry dims {geometry.dims} do not match data shape {data.shape}")
        data.setflags(write=False)
        self._data = data
        self.geometry = geometry

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.geometry.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.geometry.spacing

    @property
    def origin(self) -> tuple[float, float, float]:
        return self.geometry.origin

    @property
    def direction(self) -> np.ndarray:
        return self.geometry.direction

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    def linear(self) -> np.ndarray:
        """Voxel values in canonical (x-fastest) linear order."""
        return self._data.ravel(order="F")

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, geometry=self.geometry)

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims}, spacing={self.spacing}, dtype={self.dtype})"


class LabelVolume(Volume):
    """Integer label map over an ordered alphabet of ``(label id, name)`` pairs.

    Background (0) is implicit and never part of the alphabet. When no alphabet
    is given one is inferred from the non-zero values present.
    """

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), direction=None,
                 *, alphabet: Sequence[tuple[int, str]] | None = None,
                 geometry: Geometry | None = None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.mod(data, 1) == 0):
                raise ValueError("label data must be integer valued")
            data = data.astype(np.int16)
        if data.size and data.min() < 0:
            raise ValueError("label data must be non-negative")
        present = [int(v) for v in np.unique(data) if v != 0]
        if alphabet is None:
            alphabet = [(v, f"label{v}") for v in present]
        alphabet = tuple((int(i), str(n)) for i, n in alphabet)
        ids = [i for i, _ in alphabet]
        if 0 in ids or len(set(ids)) != len(ids):
            raise ValueError(f"alphabet ids must be unique and non-zero, got {ids}")
        unknown = sorted(set(present) - set(ids))
        if unknown:
            raise ValueError(f"label values {unknown} are not in the alphabet {alphabet}")
        super().__init__(data, spacing, origin, direction, geometry=geometry)
        self.alphabet = alphabet

    @property
    def label_ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.alphabet)

    def with_data(self, data: np.ndarray) -> "LabelVolume":
        return LabelVolume(np.asarray(data).astype(self.dtype, copy=False),
                           geometry=self.geometry, alphabet=self.alphabet)


class ProbabilityStack:
    """``C`` aligned per-class channels sharing one geometry.

    ``data`` has shape ``(C, nx, ny, nz)``; channel 0 is background by convention.
    """

    def __init__(self, data: np.ndarray, channel_names: Sequence[str], geometry: Geometry,
                 normalized: bool = False, *, sum_tol: float = 1e-3):
        data = np.array(data, copy=True)
        if data.ndim != 4:
            raise ValueError(f"expected (C, nx, ny, nz) data, got shape {data.shape}")
        if data.shape[0] != len(channel_names) or data.shape[0] < 1:
            raise ValueError(f"{data.shape[0]} channels but {len(channel_names)} channel names")
        if tuple(data.shape[1:]) != geometry.dims:
            raise ValueError(f"channel shape {data.shape[1:]} does not match geometry {geometry.dims}")
        if normalized:
            sums = data.sum(axis=0, dtype=np.float64)
            if np.any(np.abs(sums - 1.0) > sum_tol):
                raise ValueError("channel sums deviate from 1 beyond tolerance")
        data.setflags(write=False)
        self._data = data
        self.channel_names = tuple(str(n) for n in channel_names)
        self.geometry = geometry
        self.normalized = bool(normalized)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def n_channels(self) -> int:
        return self._data.shape[0]

    def channel(self, name: str) -> Volume:
        return Volume(self._data[self.channel_names.index(name)], geometry=self.geometry)

    @classmethod
    def from_volumes(cls, volumes: Sequence[Volume], channel_names: Sequence[str],
                     normalized: bool = False) -> "ProbabilityStack":
        if not volumes:
            raise ValueError("no channel volumes")
        geom = volumes[0].geometry
        for v in volumes[1:]:
            if not v.geometry.matches(geom):
                raise ValueError("channel volumes do not share geometry")
        return cls(np.stack([v.data for v in volumes]), channel_names, geom, normalized)


# ---------------------------------------------------------------------------
# NIfTI I/O
# ---------------------------------------------------------------------------

def read_volume(path, alphabet: Sequence[tuple[int, str]] | None = None,
                labels: bool = False) -> Volume:
    """Read a NIfTI-1 file (``.nii`` or ``.nii.gz``).

    Returns a :class:`LabelVolume` when ``labels`` is set or an alphabet is
    given, otherwise a plain :class:`Volume`. The sform is used when its code
    is non-zero, then the qform.
    """
    path = Path(path)
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise VolumeIOError(path, f"unreadable file ({exc})") from exc
    if not isinstance(img, nib.Nifti1Image) or isinstance(img, nib.Nifti2Image):
        raise VolumeIOError(path, "not a NIfTI-1 image")
    if len(img.shape) != 3:
        raise VolumeIOError(path, f"expected a 3D image, got shape {img.shape}")
    dtype = img.get_data_dtype().newbyteorder("=")
    if dtype not in SUPPORTED_DTYPES:
        raise VolumeIOError(path, f"unsupported dtype {dtype}")
    try:
        geometry = Geometry.from_affine(img.shape, img.affine)
    except ValueError as exc:
        raise VolumeIOError(path, str(exc)) from exc
    try:
        data = np.asanyarray(img.dataobj)
    except Exception as exc:
        raise VolumeIOError(path, f"corrupt voxel payload ({exc})") from exc
    if data.dtype != dtype:
        # scaled integer payloads are not part of the supported set
        slope, inter = img.header.get_slope_inter()
        if slope not in (None, 1.0) or inter not in (None, 0.0):
            raise VolumeIOError(path, "scaled voxel data is not supported")
    data = np.ascontiguousarray(data, dtype=dtype)
    if labels or alphabet is not None:
        try:
            return LabelVolume(data, geometry=geometry, alphabet=alphabet)
        except ValueError as exc:
            raise VolumeIOError(path, str(exc)) from exc
    return Volume(data, geometry=geometry)


def write_volume(v: Volume, path) -> None:
    """Write ``v`` as NIfTI-1; a ``.gz`` suffix selects gzip compression."""
    path = Path(path)
    dtype = v.dtype.newbyteorder("=")
    if dtype not in SUPPORTED_DTYPES:
        raise VolumeIOError(path, f"unsupported dtype {v.dtype}")
    if not path.parent.is_dir():
        raise VolumeIOError(path, "parent directory does not exist")
    data = np.asarray(v.data, dtype=dtype.newbyteorder("<"))
    img = nib.Nifti1Image(data, v.geometry.affine)
    img.header.set_data_dtype(dtype.newbyteorder("<"))
    img.header.set_xyzt_units("mm")
    img.set_sform(v.geometry.affine, code=1)
    img.set_qform(v.geometry.affine, code=1)
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise VolumeIOError(path, f"write failed ({exc})") from exc


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _axis_coords(n_in: int, n_out: int, scale: float) -> np.ndarray:
    # output voxel i sits at input continuous index i * scale (voxel 0 centers coincide)
    return np.clip(np.arange(n_out, dtype=np.float64) * scale, 0.0, n_in - 1)


def _linear_along(data: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, data.shape[axis] - 1)
    frac = coords - lo
    shape = [1, 1, 1]
    shape[axis] = -1
    frac = frac.reshape(shape)
    return np.take(data, lo, axis=axis) * (1.0 - frac) + np.take(data, hi, axis=axis) * frac


def resample_isotropic(v: Volume, target: float, mode: str = "trilinear") -> Volume:
    """Resample onto an isotropic grid of ``target`` mm.

    New dims are ``max(1, round(n * s / target))`` per axis, the first voxel
    center is kept fixed and samples falling outside the input take the
    nearest border value. Label volumes must use ``mode="nearest"``.
    """
    target = float(target)
    if not target > 0:
        raise ValueError(f"target spacing must be positive, got {target}")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if isinstance(v, LabelVolume) and mode != "nearest":
        raise ValueError("label volumes can only be resampled with mode='nearest'")

    dims_in = v.dims
    dims_out = tuple(max(1, int(np.floor(n * s / target + 0.5))) for n, s in zip(dims_in, v.spacing))
    geometry = v.geometry.with_dims(dims_out, (target, target, target))
    coords = [_axis_coords(n_in, n_out, target / s) for n_in, n_out, s in zip(dims_in, dims_out, v.spacing)]

    if mode == "nearest":
        idx = [np.floor(c + 0.5).astype(np.intp) for c in coords]
        out = v.data[np.ix_(*idx)]
    else:
        out = v.data.astype(np.float64)
        for axis, c in enumerate(coords):
            out = _linear_along(out, axis, c)
        out = out.astype(np.float32)

    if isinstance(v, LabelVolume):
        return LabelVolume(out, geometry=geometry, alphabet=v.alphabet)
    return Volume(out, geometry=geometry)
