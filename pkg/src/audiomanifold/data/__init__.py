from .manifest import (
    DanglingPathError, ManifestEntry, ManifestError, PairManifest, SplitOverlapError, load_manifest,
    write_manifest,
)
from .synth import Scene, SceneObject, SynthConfig, generate, render_depth, render_seg

__all__ = [
    "DanglingPathError", "ManifestEntry", "ManifestError", "PairManifest", "Scene", "SceneObject",
    "SplitOverlapError", "SynthConfig", "generate", "load_manifest", "render_depth", "render_seg",
    "write_manifest",
]
