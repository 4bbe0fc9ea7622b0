"""Weighted ensembling of per-model probability stacks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .volume import LabelVolume, ProbabilityStack

MODEL_ORDER = ("nnunet", "mednext", "swinunetr")


@dataclass(frozen=True)
class EnsembleWeights:
    """Ordered ``(model, weight)`` pairs, normalized to sum to 1 on construction."""

    models: tuple[str, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        models = tuple(str(m) for m in self.models)
        w = np.asarray(self.weights, dtype=np.float64)
        if len(models) != w.size or not models:
            raise ValueError("need one weight per model")
        if len(set(models)) != len(models):
            raise ValueError(f"duplicate model names in {models}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError(f"weights must be finite and non-negative, got {self.weights}")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights sum to zero")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "weights", tuple(float(x) for x in w / total))

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, float]) -> "EnsembleWeights":
        return cls(tuple(mapping), tuple(mapping.values()))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.models, self.weights))


# published per-task weights, model order (nnU-Net, MedNeXt, SwinUNETR)
WEIGHT_PRESETS = {
    "ped": EnsembleWeights(MODEL_ORDER, (0.33, 0.34, 0.33)),
    "men-rt": EnsembleWeights(MODEL_ORDER, (0.33, 0.33, 0.34)),
    "met": EnsembleWeights(MODEL_ORDER, (0.487, 0.513, 0.0)),
}


def fuse(stacks: Sequence[ProbabilityStack], weights: EnsembleWeights | Sequence[float]) -> ProbabilityStack:
    """Voxelwise convex combination ``sum_i w_i * stack_i``.

    Accumulation is float64 in ascending model order. Zero-weight stacks are
    skipped entirely, so their content cannot leak into the result (not even
    as NaN * 0).
    """
    if not stacks:
        raise ValueError("need at least one probability stack")
    w = weights.weights if isinstance(weights, EnsembleWeights) else tuple(weights)
    if len(w) != len(stacks):
        raise ValueError(f"{len(stacks)} stacks but {len(w)} weights")
    ref = stacks[0]
    for i, s in enumerate(stacks[1:], 1):
        if s.channel_names != ref.channel_names:
            raise ValueError(f"stack {i} channels {s.channel_names} differ from {ref.channel_names}")
        if not s.geometry.matches(ref.geometry):
            raise ValueError(f"stack {i} geometry differs from stack 0")
    out = np.zeros(ref.data.shape, dtype=np.float64)
    for wi, s in zip(w, stacks):
        if wi == 0:
            continue
        out += wi * s.data.astype(np.float64, copy=False)
    normalized = all(s.normalized for s in stacks)
    return ProbabilityStack(out, ref.channel_names, ref.geometry, normalized=normalized)


def argmax_labels(stack: ProbabilityStack, alphabet: Sequence[tuple[int, str]]) -> LabelVolume:
    """Per-voxel label of the largest channel; ties go to the lowest channel.

    Channel 0 is background, channel ``i`` maps to ``alphabet[i - 1]``.
    """
    alphabet = tuple((int(i), str(n)) for i, n in alphabet)
    if stack.n_channels != len(alphabet) + 1:
        raise ValueError(f"{stack.n_channels} channels for an alphabet of {len(alphabet)} labels")
    lut = np.array([0] + [i for i, _ in alphabet])
    idx = np.argmax(stack.data, axis=0)
    dtype = np.uint8 if lut.max() < 256 else np.int16
    return LabelVolume(lut[idx].astype(dtype), geometry=stack.geometry, alphabet=alphabet)


def estimate_weights(scores: Mapping[str, float], exclusion_floor: float = 0.0) -> EnsembleWeights:
    """Weights proportional to per-model cross-validated scores.

    Models scoring below ``exclusion_floor`` get weight 0 before
    normalization; the default floor of 0 disables exclusion.
    """
    names = tuple(scores)
    s = np.array([float(scores[m]) for m in names])
    if np.any((s < 0) | (s > 1)):
        raise ValueError(f"scores must lie in [0, 1], got {dict(scores)}")
    s = np.where(s < exclusion_floor, 0.0, s)
    if not np.any(s > 0):
        raise ValueError("all model scores are zero after exclusion")
    return EnsembleWeights(names, tuple(s))
