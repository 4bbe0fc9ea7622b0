"""Task configuration: label alphabets, regions, and per-stage settings.

Shipped presets cover the pediatric (``ped``), meningioma radiotherapy
(``men-rt``) and metastasis (``met``) tasks. A config file (JSON or TOML)
names a ``task`` preset and overrides any subset of its fields; ``custom``
tasks must spell out every field.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .fusion import EnsembleWeights
from .metrics import MetricConfig, RegionSpec
from .radiomics import DiscretizationSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BACKGROUND = "background"

_PRESETS: dict[str, dict[str, Any]] = {
    "ped": {
        "labels": [[1, "ET"], [2, "NET"], [3, "CC"], [4, "ED"]],
        "regions": {
            "ET": ["ET"],
            "TC": ["ET", "NET", "CC"],
            "WT": ["ET", "NET", "CC", "ED"],
            "NET": ["NET"],
            "CC": ["CC"],
            "ED": ["ED"],
        },
        "sequences": ["t1", "t1ce", "t2", "flair"],
        # no resampling spacing is published for this task; 1.0 mm assumed
        "spacing_mm": 1.0,
        "ensemble": {"nnunet": 0.33, "mednext": 0.34, "swinunetr": 0.33},
        "postproc": {"relabel_menu": [["CC", "NET"], ["ED", BACKGROUND]]},
    },
    "men-rt": {
        "labels": [[1, "GTV"]],
        "regions": {"GTV": ["GTV"]},
        "sequences": ["t1ce"],
        "spacing_mm": 0.9375,
        "ensemble": {"nnunet": 0.33, "mednext": 0.33, "swinunetr": 0.34},
        "postproc": {"relabel_menu": []},
    },
    "met": {
        "labels": [[1, "NET"], [2, "SNFH"], [3, "ET"]],
        "regions": {
            "ET": ["ET"],
            "TC": ["ET", "NET"],
            "WT": ["ET", "NET", "SNFH"],
        },
        "sequences": ["t1", "t1ce", "t2", "flair"],
        "spacing_mm": 1.0,
        "ensemble": {"nnunet": 0.487, "mednext": 0.513, "swinunetr": 0.0},
        "postproc": {"relabel_menu": [["NET", "SNFH"]]},
    },
}

_COMMON = {
    "subtype": {"k_min": 2, "k_max": 8, "seed": 20240, "variance_threshold": 0.99,
                "bin_width": 25.0, "connectivity": 26},
    "postproc": {"stage1_grid": [0, 10, 20, 50, 100, 200, 500, 1000],
                 "ratio_grid": [0, 0.01, 0.02, 0.05, 0.1],
                 "connectivity": 26},
    "metrics": {"dilation_radius": 1, "connectivity": 26, "penalty": 374.0},
}

PRESET_NAMES = tuple(_PRESETS)


class ConfigError(ValueError):
    pass


def _deep_update(base: dict, overrides: dict) -> dict:
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


@dataclass(frozen=True)
class SubtypeSettings:
    k_min: int = 2
    k_max: int = 8
    seed: int = 20240
    variance_threshold: float = 0.99
    bin_width: float = 25.0
    connectivity: int = 26

    @property
    def k_range(self) -> range:
        return range(self.k_min, self.k_max + 1)


@dataclass(frozen=True)
class PostprocSettings:
    stage1_grid: tuple[float, ...]
    ratio_grid: tuple[float, ...]
    relabel_menu: tuple[tuple[int, int], ...]   # (source id, target id); 0 = background
    connectivity: int = 26


@dataclass(frozen=True)
class TaskConfig:
    task: str
    region_spec: RegionSpec
    sequences: tuple[str, ...]
    spacing_mm: float
    weights: EnsembleWeights
    subtype: SubtypeSettings
    postproc: PostprocSettings
    metrics: MetricConfig
    raw: dict

    @property
    def alphabet(self) -> tuple[tuple[int, str], ...]:
        return self.region_spec.alphabet

    @property
    def channel_names(self) -> tuple[str, ...]:
        return (BACKGROUND,) + tuple(n for _, n in self.alphabet)

    @property
    def models(self) -> tuple[str, ...]:
        return self.weights.models

    def digest(self) -> str:
        """sha256 of the canonical JSON form of the resolved config."""
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def label_id(self, name: str) -> int:
        if name == BACKGROUND:
            return 0
        for i, n in self.alphabet:
            if n == name:
                return i
        raise ConfigError(f"unknown label {name!r}")


def build_config(doc: dict) -> TaskConfig:
    """Resolve a (possibly partial) config document against its task preset."""
    task = str(doc.get("task", "")).lower()
    if task in _PRESETS:
        raw = _deep_update(copy.deepcopy(_COMMON), copy.deepcopy(_PRESETS[task]))
    elif task == "custom":
        raw = copy.deepcopy(_COMMON)
    else:
        raise ConfigError(f"unknown task {task!r}; expected one of {PRESET_NAMES + ('custom',)}")
    raw = _deep_update(raw, {k: v for k, v in doc.items() if k != "task"})
    raw["task"] = task
    try:
        alphabet = tuple((int(i), str(n)) for i, n in raw["labels"])
        spec = RegionSpec.from_names(task, alphabet, raw["regions"])
        by_name = {n: i for i, n in alphabet}
        by_name[BACKGROUND] = 0
        menu = []
        for src, dst in raw["postproc"].get("relabel_menu", []):
            if src not in by_name or src == BACKGROUND or dst not in by_name or src == dst:
                raise ConfigError(f"invalid relabel pair {src!r} -> {dst!r}")
            menu.append((by_name[src], by_name[dst]))
        pp = raw["postproc"]
        cfg = TaskConfig(
            task=task,
            region_spec=spec,
            sequences=tuple(raw["sequences"]),
            spacing_mm=float(raw["spacing_mm"]),
            weights=EnsembleWeights.from_mapping(raw["ensemble"]),
            subtype=SubtypeSettings(**raw["subtype"]),
            postproc=PostprocSettings(tuple(sorted(float(x) for x in pp["stage1_grid"])),
                                      tuple(sorted(float(x) for x in pp["ratio_grid"])),
                                      tuple(menu), int(pp.get("connectivity", 26))),
            metrics=MetricConfig(**raw["metrics"]),
            raw=raw,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid task config: {exc}") from exc
    if not cfg.sequences:
        raise ConfigError("config lists no sequences")
    if not cfg.spacing_mm > 0:
        raise ConfigError("spacing_mm must be positive")
    if not cfg.postproc.stage1_grid or not cfg.postproc.ratio_grid:
        raise ConfigError("post-processing grids must be non-empty")
    if any(not 0 <= r <= 1 for r in cfg.postproc.ratio_grid):
        raise ConfigError("ratio grid values must lie in [0, 1]")
    if cfg.subtype.k_min < 2 or cfg.subtype.k_max < cfg.subtype.k_min:
        raise ConfigError("subtype k range must satisfy 2 <= k_min <= k_max")
    return cfg


def load_config(source: str | Path) -> TaskConfig:
    """Load a preset by name or a JSON/TOML file."""
    if str(source).lower() in _PRESETS:
        return build_config({"task": str(source).lower()})
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    try:
        doc = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return build_config(doc)
