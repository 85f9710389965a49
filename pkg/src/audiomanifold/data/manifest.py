"""JSON Lines manifest of (audio, visual) pairs.

The first line is a header record with dataset-wide metadata (depth
normalisation bounds, segmentation palette); every following line is one
pair. Paths are stored relative to the manifest's directory.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

SPLITS = ("train", "val", "test")
MODALITIES = ("depth", "segmentation")


class ManifestError(ValueError):
    pass


class DanglingPathError(ManifestError):
    pass


class SplitOverlapError(ManifestError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    audio_path: str
    visual_path: str
    modality: str
    split: str

    def to_json(self) -> dict:
        return {"kind": "entry", "id": self.id, "audio": self.audio_path, "visual": self.visual_path,
                "modality": self.modality, "split": self.split}


@dataclass
class PairManifest:
    entries: list[ManifestEntry]
    depth_bounds: tuple[float, float] | None = None
    palette: list[tuple[int, int, int]] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)
    depth_convention: str = "metres; larger normalised value = farther"
    extra: dict = field(default_factory=dict)
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def select(self, split: str | None = None, modality: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if (split is None or e.split == split) and (modality is None or e.modality == modality)]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def header(self) -> dict:
        return {"kind": "header", "depth_bounds": list(self.depth_bounds) if self.depth_bounds else None,
                "palette": [list(c) for c in self.palette], "class_names": list(self.class_names),
                "depth_convention": self.depth_convention, "extra": self.extra}


def validate(manifest: PairManifest, check_paths: bool = True) -> None:
    seen_split: dict[str, str] = {}
    for e in manifest.entries:
        if e.split not in SPLITS:
            raise ManifestError(f"entry {e.id}: unknown split {e.split!r}")
        if e.modality not in MODALITIES:
            raise ManifestError(f"entry {e.id}: unknown modality {e.modality!r}")
        if check_paths:
            for p in (e.audio_path, e.visual_path):
                if not manifest.resolve(p).is_file():
                    raise DanglingPathError(f"entry {e.id}: missing file {p}")
        prev = seen_split.setdefault(e.audio_path, e.split)
        if prev != e.split:
            raise SplitOverlapError(f"entry {e.id}: {e.audio_path} appears in both {prev} and {e.split}")
    b = manifest.depth_bounds
    if b is not None and not (all(map(_finite, b)) and b[0] < b[1]):
        raise ManifestError(f"invalid depth bounds {b}")


def _finite(x) -> bool:
    return x == x and abs(x) != float("inf")


def write_manifest(manifest: PairManifest, path: str | os.PathLike) -> None:
    lines = [json.dumps(manifest.header(), sort_keys=True)]
    lines += [json.dumps(e.to_json(), sort_keys=True) for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | os.PathLike, check_paths: bool = True) -> PairManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    header, entries = None, []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        kind = rec.get("kind", "entry")
        if kind == "header":
            header = rec
        elif kind == "entry":
            try:
                entries.append(ManifestEntry(str(rec["id"]), rec["audio"], rec["visual"],
                                             rec["modality"], rec["split"]))
            except KeyError as exc:
                raise ManifestError(f"{path}:{lineno}: missing field {exc}") from None
        else:
            raise ManifestError(f"{path}:{lineno}: unknown record kind {kind!r}")
    header = header or {}
    bounds = header.get("depth_bounds")
    manifest = PairManifest(
        entries=entries,
        depth_bounds=tuple(bounds) if bounds else None,
        palette=[tuple(c) for c in header.get("palette", [])],
        class_names=list(header.get("class_names", [])),
        depth_convention=header.get("depth_convention", PairManifest.depth_convention),
        extra=header.get("extra", {}),
        root=path.parent,
    )
    validate(manifest, check_paths)
    return manifest
