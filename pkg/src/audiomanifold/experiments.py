"""In-memory desk-scale experiments on the synthetic set.

These wrap the library pieces into the runs the acceptance suite needs:
two-stage training for either modality (VQ or Gaussian manifold), the
end-to-end ablation, and the trivial baselines they are compared with. No
files are written; the CLI covers the on-disk workflow.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import dsp
from .atnet import AtNetConfig, infer_e2e, infer_spectrograms, normalize_depth, train_atnet, train_e2e
from .data.synth import SynthConfig, generate
from .metrics import DepthMetricReport, SegMetricReport, depth_metrics, miou, per_class_iou
from .vq import TrainConfig, VqConfig, train_vqvae


@dataclass
class ToySetup:
    """Sizes and budgets for one desk-scale experiment.

    ``lr`` is higher than the full-scale default of 1e-4 so that a few
    hundred steps suffice on one CPU core.
    """

    synth: SynthConfig = field(default_factory=SynthConfig.toy)
    spec_size: int = 32
    latent_size: int = 8
    encoder_width: int = 32
    vq_steps: int = 600
    at_steps: int = 600
    vq_batch: int = 16
    at_batch: int = 32
    lr: float = 1e-3
    patience: int = 1000  # the step cap, not the plateau rule, ends toy runs

    @property
    def dsp_params(self) -> dict:
        return {"target_rate": self.synth.sample_rate, "window_seconds": self.synth.duration,
                "window_length": 2048, "hop_length": 256, "mel_bins": 256, "size": self.spec_size}

    def train_config(self, steps: int, batch: int, seed: int) -> TrainConfig:
        return TrainConfig(batch_size=batch, max_steps=steps, lr=self.lr, seed=seed, eval_every=50,
                           patience=self.patience)


@dataclass
class ToyData:
    specs: dict[str, torch.Tensor]  # split -> (B, M, s, s)
    depth: dict[str, np.ndarray]  # split -> (B, S, S) metres
    seg: dict[str, np.ndarray]  # split -> (B, S, S) class ids
    bounds: tuple[float, float]
    num_classes: int
    seconds: float

    def depth01(self, split: str) -> torch.Tensor:
        return torch.from_numpy(normalize_depth(self.depth[split], self.bounds)).float()[:, None]

    def seg_onehot(self, split: str) -> torch.Tensor:
        eye = np.eye(self.num_classes, dtype=np.float32)
        return torch.from_numpy(np.ascontiguousarray(eye[self.seg[split]].transpose(0, 3, 1, 2)))

    def visuals(self, split: str, modality: str) -> torch.Tensor:
        return self.depth01(split) if modality == "depth" else self.seg_onehot(split)


@dataclass
class RunOutcome:
    name: str
    predictions: np.ndarray
    seconds: float
    losses: dict[str, list[float]] = field(default_factory=dict)


def prepare(setup: ToySetup, seed: int) -> ToyData:
    """Generate the synthetic set for ``seed`` and run the DSP chain on every clip."""
    t0 = time.perf_counter()
    samples = generate(setup.synth, seed)
    specs, depth, seg = {}, {}, {}
    for split in ("train", "val", "test"):
        chosen = [s for s in samples if s.split == split]
        if not chosen:
            continue
        clips = [dsp.AudioClip(s.audio, setup.synth.sample_rate) for s in chosen]
        specs[split] = torch.from_numpy(np.stack([dsp.spectrogram_pipeline(c, **setup.dsp_params)[0]
                                                  for c in clips]))
        depth[split] = np.stack([s.depth for s in chosen]).astype(np.float64)
        seg[split] = np.stack([s.seg for s in chosen])
    train_depth = depth["train"]
    bounds = (float(train_depth.min()), float(train_depth.max()))
    return ToyData(specs, depth, seg, bounds, setup.synth.num_classes, time.perf_counter() - t0)


def _vq_config(setup: ToySetup, data: ToyData, modality: str, variant: str) -> VqConfig:
    channels = 1 if modality == "depth" else data.num_classes
    return VqConfig(modality=modality, in_channels=channels, image_size=setup.synth.image_size,
                    latent_size=setup.latent_size, variant=variant)


def _at_config(setup: ToySetup, data: ToyData) -> AtNetConfig:
    return AtNetConfig(input_channels=data.specs["train"].shape[1], input_size=setup.spec_size,
                       latent_size=setup.latent_size, encoder_width=setup.encoder_width)


def run_two_stage(setup: ToySetup, data: ToyData, modality: str, seed: int, variant: str = "vq",
                  split: str = "test") -> RunOutcome:
    """Train the manifold, then the AT-net against it, and predict ``split``."""
    t0 = time.perf_counter()
    visuals = data.visuals("train", modality)
    manifold, r1 = train_vqvae(visuals, _vq_config(setup, data, modality, variant),
                               setup.train_config(setup.vq_steps, setup.vq_batch, seed))
    atnet, r2 = train_atnet(data.specs["train"], visuals, manifold, _at_config(setup, data),
                            setup.train_config(setup.at_steps, setup.at_batch, seed))
    bounds = data.bounds if modality == "depth" else None
    preds = infer_spectrograms(atnet, manifold, data.specs[split], bounds)
    return RunOutcome(f"two-stage-{variant}", preds, time.perf_counter() - t0,
                      {"manifold": r1.evaluations, "atnet": r2.evaluations})


def run_e2e(setup: ToySetup, data: ToyData, modality: str, seed: int, steps: int | None = None,
            split: str = "test") -> RunOutcome:
    """Single-stage ablation; by default it gets the two stages' combined step budget."""
    t0 = time.perf_counter()
    steps = steps if steps is not None else setup.vq_steps + setup.at_steps
    model, r = train_e2e(data.specs["train"], data.visuals("train", modality), _at_config(setup, data),
                         _vq_config(setup, data, modality, "vq"), setup.train_config(steps, setup.at_batch, seed))
    bounds = data.bounds if modality == "depth" else None
    preds = infer_e2e(model, data.specs[split], bounds)
    return RunOutcome("e2e", preds, time.perf_counter() - t0, {"e2e": r.evaluations})


def constant_depth_baseline(data: ToyData, split: str = "test") -> np.ndarray:
    """Mean training depth at every pixel."""
    return np.full_like(data.depth[split], data.depth["train"].mean())


def pixel_mean_depth_baseline(data: ToyData, split: str = "test") -> np.ndarray:
    """Per-pixel mean training depth; ignores the audio but knows the average layout."""
    return np.broadcast_to(data.depth["train"].mean(axis=0), data.depth[split].shape).copy()


def majority_class_baseline(data: ToyData, split: str = "test") -> np.ndarray:
    """Most frequent training class at every pixel."""
    majority = int(np.bincount(data.seg["train"].ravel(), minlength=data.num_classes).argmax())
    return np.full_like(data.seg[split], majority)


def score_depth(preds: np.ndarray, data: ToyData, split: str = "test") -> DepthMetricReport:
    return depth_metrics(list(preds), list(data.depth[split]))


def score_segmentation(results: dict[str, np.ndarray], data: ToyData, split: str = "test") -> dict[str, SegMetricReport]:
    """mIoU for several methods with the <1% exclusion applied across all of them."""
    gts = list(data.seg[split])
    classes = range(data.num_classes)
    tables = {name: per_class_iou(list(p), gts, classes) for name, p in results.items()}
    return {name: miou(list(p), gts, classes, exclusion={k: v for k, v in tables.items() if k != name})
            for name, p in results.items()}


def with_overrides(setup: ToySetup, **kw) -> ToySetup:
    synth_kw = {k[len("synth_"):]: kw.pop(k) for k in list(kw) if k.startswith("synth_")}
    if synth_kw:
        kw["synth"] = replace(setup.synth, **synth_kw)
    return replace(setup, **kw)
