"""Case manifests: explicit JSON lists of per-case input files.

Example::

    {
      "task": "ped",
      "cases": [
        {
          "id": "case-001",
          "fold": 0,
          "sequences": {"t1": "img/case-001_t1.nii.gz", "t1ce": "...", "t2": "...", "flair": "..."},
          "models": {"nnunet": "probs/nnunet", "mednext": "probs/mednext", "swinunetr": "probs/swin"},
          "ground_truth": "gt/case-001.nii.gz",
          "prediction": "pred/case-001.nii.gz"
        }
      ]
    }

Relative paths resolve against the manifest's directory. Each ``models``
entry is a directory holding one NIfTI per channel, named
``<case id>_<channel>.nii.gz``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .volume import LabelVolume, ProbabilityStack, read_volume

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    """Raised when a manifest fails validation."""


@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    sequences: dict[str, Path] = field(default_factory=dict)
    models: dict[str, Path] = field(default_factory=dict)
    ground_truth: Path | None = None
    prediction: Path | None = None
    fold: int | None = None

    def channel_path(self, model: str, channel: str) -> Path:
        return self.models[model] / f"{self.case_id}_{channel}.nii.gz"

    def referenced_paths(self, channel_names: Sequence[str] = ()) -> list[Path]:
        paths = list(self.sequences.values())
        for model in self.models:
            paths.extend(self.channel_path(model, ch) for ch in channel_names)
        paths.extend(p for p in (self.ground_truth, self.prediction) if p is not None)
        return paths


@dataclass(frozen=True)
class Manifest:
    task: str
    cases: tuple[CaseEntry, ...]
    path: Path | None = None

    def __len__(self):
        return len(self.cases)

    def with_cases(self, cases: Iterable[CaseEntry]) -> "Manifest":
        return replace(self, cases=tuple(cases))


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def parse_manifest(doc: dict, base: Path) -> Manifest:
    if not isinstance(doc, dict) or not isinstance(doc.get("cases"), list):
        raise ManifestError("manifest must be an object with a 'cases' list")
    cases = []
    for i, raw in enumerate(doc["cases"]):
        if not isinstance(raw, dict) or not raw.get("id"):
            raise ManifestError(f"case #{i} has no id")
        try:
            fold = raw.get("fold")
            cases.append(CaseEntry(
                case_id=str(raw["id"]),
                sequences={str(k): _resolve(base, v) for k, v in raw.get("sequences", {}).items()},
                models={str(k): _resolve(base, v) for k, v in raw.get("models", {}).items()},
                ground_truth=_resolve(base, raw["ground_truth"]) if raw.get("ground_truth") else None,
                prediction=_resolve(base, raw["prediction"]) if raw.get("prediction") else None,
                fold=None if fold is None else int(fold),
            ))
        except (AttributeError, TypeError, ValueError) as exc:
            raise ManifestError(f"case {raw.get('id')!r}: malformed entry ({exc})") from exc
    ids = [c.case_id for c in cases]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ManifestError(f"duplicate case ids: {dupes}")
    return Manifest(str(doc.get("task", "custom")).lower(), tuple(sorted(cases, key=lambda c: c.case_id)))


def load_manifest(path, channel_names: Sequence[str] = (), strict: bool = True) -> Manifest:
    """Parse and eagerly validate a manifest.

    Every referenced file must exist. In strict mode the first missing file
    fails the whole manifest; otherwise the offending case is dropped with
    a warning.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: cannot load manifest ({exc})") from exc
    manifest = parse_manifest(doc, path.parent)
    kept = []
    for case in manifest.cases:
        missing = [p for p in case.referenced_paths(channel_names) if not p.is_file()]
        if missing:
            msg = f"case {case.case_id}: missing file {missing[0]}"
            if strict:
                raise ManifestError(msg)
            log.warning("%s; case dropped", msg)
            continue
        kept.append(case)
    return Manifest(manifest.task, tuple(kept), path)


def manifest_to_doc(manifest: Manifest, base: Path | None = None) -> dict:
    def rel(p: Path) -> str:
        if base is not None:
            try:
                return str(p.relative_to(base))
            except ValueError:
                pass
        return str(p)

    cases = []
    for c in manifest.cases:
        entry: dict = {"id": c.case_id}
        if c.fold is not None:
            entry["fold"] = c.fold
        if c.sequences:
            entry["sequences"] = {k: rel(v) for k, v in c.sequences.items()}
        if c.models:
            entry["models"] = {k: rel(v) for k, v in c.models.items()}
        if c.ground_truth is not None:
            entry["ground_truth"] = rel(c.ground_truth)
        if c.prediction is not None:
            entry["prediction"] = rel(c.prediction)
        cases.append(entry)
    return {"task": manifest.task, "cases": cases}


def load_stack(case: CaseEntry, model: str, channel_names: Sequence[str]) -> ProbabilityStack:
    vols = [read_volume(case.channel_path(model, ch)) for ch in channel_names]
    return ProbabilityStack.from_volumes(vols, channel_names)


def load_labels(path: Path, alphabet) -> LabelVolume:
    return read_volume(path, alphabet=alphabet)
