"""Write synthetic datasets to disk and load manifest splits as training tensors."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .. import dsp, tensorio
from ..metrics import resize_nearest
from . import io
from .manifest import ManifestEntry, ManifestError, PairManifest, load_manifest, write_manifest
from .synth import Sample, SynthConfig, generate

CACHE_ENV = "AUDIOMANIFOLD_CACHE"

DEFAULT_DSP = {
    "target_rate": 22050, "window_seconds": 1.0, "window_length": 2048,
    "hop_length": 256, "mel_bins": 256, "size": 128, "power": 1.0, "log_compress": True,
}


def depth_bounds(samples: list[Sample]) -> tuple[float, float]:
    train = [s.depth for s in samples if s.split == "train"] or [s.depth for s in samples]
    return float(min(d.min() for d in train)), float(max(d.max() for d in train))


def write_dataset(cfg: SynthConfig, seed: int, out_dir: str | os.PathLike,
                  samples: list[Sample] | None = None) -> PairManifest:
    """Generate (unless ``samples`` given) and write WAV/PNG files plus ``manifest.jsonl``."""
    out = Path(out_dir)
    for sub in ("audio", "depth", "seg"):
        io.ensure_dir(out / sub)
    samples = samples if samples is not None else generate(cfg, seed)
    entries = []
    for s in samples:
        sid = f"{s.index:06d}"
        io.write_wav(out / "audio" / f"{sid}.wav", s.audio, cfg.sample_rate)
        io.write_depth_png(out / "depth" / f"{sid}.png", s.depth)
        io.write_seg_png(out / "seg" / f"{sid}.png", s.seg)
        entries.append(ManifestEntry(sid, f"audio/{sid}.wav", f"depth/{sid}.png", "depth", s.split))
        entries.append(ManifestEntry(sid, f"audio/{sid}.wav", f"seg/{sid}.png", "segmentation", s.split))
    manifest = PairManifest(
        entries=entries,
        depth_bounds=depth_bounds(samples),
        palette=io.DEFAULT_PALETTE[:cfg.num_classes],
        class_names=["background"] + [f"class{c}" for c in range(1, cfg.num_classes)],
        extra={"generator": "synth", "seed": seed, "config": _jsonable(asdict(cfg)),
               "depth_png_units_per_metre": io.DEPTH_UNITS_PER_METRE},
        root=out,
    )
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=list))


def visual_tensor(arrays: list[np.ndarray], modality: str, image_size: int,
                  bounds=None, num_classes: int | None = None) -> torch.Tensor:
    """Depth (metres) -> normalised (N, 1, S, S); class maps -> one-hot (N, C, S, S)."""
    if modality == "depth":
        lo, hi = bounds
        out = np.stack([dsp.resize_bilinear(np.clip((a - lo) / (hi - lo), 0.0, 1.0), image_size, image_size)
                        for a in arrays])[:, None]
        return torch.from_numpy(out.astype(np.float32))
    ids = np.stack([resize_nearest(a, image_size, image_size) for a in arrays])
    onehot = np.eye(num_classes, dtype=np.float32)[ids]
    return torch.from_numpy(np.ascontiguousarray(onehot.transpose(0, 3, 1, 2)))


def cache_dir() -> Path | None:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else None


def spectrogram_for(path: str | os.PathLike, params: dict, cache: Path | None = None) -> np.ndarray:
    """First-window spectrogram of a WAV file, cached as ``.vtsr`` keyed by content + params."""
    raw = Path(path).read_bytes()
    key = hashlib.sha256(raw + json.dumps(params, sort_keys=True).encode()).hexdigest()[:32]
    if cache is not None:
        hit = cache / f"{key}.vtsr"
        if hit.is_file():
            return tensorio.load(hit)
    windows = dsp.spectrogram_pipeline(io.read_wav(path), **params)
    if not windows:
        raise dsp.InvalidInputError(f"{path}: audio shorter than one analysis window")
    spec = windows[0]
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        tmp = cache / f".{key}.{os.getpid()}.tmp"
        tensorio.save(tmp, spec)
        os.replace(tmp, cache / f"{key}.vtsr")
    return spec


def load_split(manifest: PairManifest | str | os.PathLike, split: str, modality: str,
               image_size: int, dsp_params: dict | None = None, with_audio: bool = True):
    """Load one split as tensors.

    Returns ``(ids, specs, visuals, raw_visuals)``; ``specs`` is None when
    ``with_audio`` is false and ``raw_visuals`` are the untouched ground
    truth arrays (metres or class ids).
    """
    if not isinstance(manifest, PairManifest):
        manifest = load_manifest(manifest)
    entries = manifest.select(split, modality)
    if not entries:
        raise ManifestError(f"manifest has no {modality} entries in split {split!r}")
    reader = io.read_depth_png if modality == "depth" else io.read_seg_png
    raw = [reader(manifest.resolve(e.visual_path)) for e in entries]
    visuals = visual_tensor(raw, modality, image_size, manifest.depth_bounds, manifest.num_classes or None)
    specs = None
    if with_audio:
        params = {**DEFAULT_DSP, **(dsp_params or {})}
        cache = cache_dir()
        specs = torch.from_numpy(np.stack([spectrogram_for(manifest.resolve(e.audio_path), params, cache)
                                           for e in entries]))
    return [e.id for e in entries], specs, visuals, raw


def sha256_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(x) for x in paths):
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()
