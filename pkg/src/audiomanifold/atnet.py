"""Audio-transformation network: spectrogram -> continuous visual latent.

Three parts: a ResNet18-topology audio encoder collapsed to a 512 vector
by global average pooling, a three-layer dropout MLP, and a transposed-conv
manifold decoder growing a small seed grid up to the latent resolution.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dsp
from .core import checkpoint as ckpt
from .core.layers import (
    BatchNorm, Dense, Dropout, GlobalAvgPool, ShapeError, StridedConv, deconv_bn_relu,
)
from .core.training import TrainResult, fit
from .vq import Decoder, GaussianVAE, LatentMap, TrainConfig, VqConfig, VQVAE, reconstruction_loss


class CompatibilityError(ValueError):
    """Two artifacts (configs, checkpoints, datasets) cannot be combined."""


@dataclass
class AtNetConfig:
    input_channels: int = 8
    input_size: int = 128
    latent_size: int = 8
    code_dim: int = 64
    mlp_widths: list[int] = field(default_factory=lambda: [512, 1024])
    dropout_p: float = 0.2
    decoder_start: int = 1
    start_channels: int = 512
    encoder_width: int = 64

    def __post_init__(self):
        if self.latent_size not in (2, 4, 8, 16, 32, 64):
            raise ValueError(f"unsupported latent size {self.latent_size}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        ratio = self.latent_size / self.decoder_start
        if ratio < 1 or ratio != 2 ** round(math.log2(ratio)):
            raise ValueError("latent_size / decoder_start must be a power of two")
        if len(self.mlp_widths) != 2:
            raise ValueError("mlp_widths lists the two hidden widths of the three-layer MLP")
        if self.input_size % 32:
            raise ValueError("input_size must be a multiple of 32 (the ResNet trunk downsamples 32x)")
        if self.start_channels >> self.n_upsample < 1:
            raise ValueError(f"start_channels {self.start_channels} cannot be halved {self.n_upsample} times")

    @property
    def n_upsample(self) -> int:
        return int(round(math.log2(self.latent_size // self.decoder_start)))

    @property
    def feature_dim(self) -> int:
        return self.encoder_width * 8

    @property
    def mlp_out(self) -> int:
        return self.decoder_start ** 2 * self.start_channels


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = StridedConv(in_ch, out_ch, stride=stride, kernel=3, bias=False)
        self.bn1 = BatchNorm(out_ch)
        self.conv2 = StridedConv(out_ch, out_ch, stride=1, kernel=3, bias=False)
        self.bn2 = BatchNorm(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(StridedConv(in_ch, out_ch, stride=stride, kernel=1, bias=False),
                                          BatchNorm(out_ch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class AudioEncoder(nn.Module):
    """ResNet18 layout (2-2-2-2 basic blocks) with an N-channel stem."""

    def __init__(self, in_channels: int, width: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.stem = nn.Sequential(
            StridedConv(in_channels, width, stride=2, kernel=7, bias=False), BatchNorm(width), nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        blocks, prev = [], width
        for i, w in enumerate([width, 2 * width, 4 * width, 8 * width]):
            stride = 1 if i == 0 else 2
            blocks += [BasicBlock(prev, w, stride), BasicBlock(w, w, 1)]
            prev = w
        self.blocks = nn.Sequential(*blocks)
        self.pool = GlobalAvgPool()
        self.out_features = prev

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"audio encoder expects (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        return self.pool(self.blocks(self.stem(x)))


class DomainMLP(nn.Module):
    def __init__(self, in_features: int, widths: Sequence[int], out_features: int, p: float):
        super().__init__()
        a, b = widths
        self.net = nn.Sequential(
            Dense(in_features, a), nn.ReLU(), Dropout(p),
            Dense(a, b), nn.ReLU(), Dropout(p),
            Dense(b, out_features),
        )

    def forward(self, x):
        return self.net(x)


class ManifoldDecoder(nn.Module):
    def __init__(self, cfg: AtNetConfig):
        super().__init__()
        self.cfg = cfg
        layers, ch = [], cfg.start_channels
        for _ in range(cfg.n_upsample):
            layers.append(deconv_bn_relu(ch, ch // 2))
            ch //= 2
        layers.append(StridedConv(ch, cfg.code_dim, stride=1, kernel=1))
        self.net = nn.Sequential(*layers)

    def forward(self, v):
        c = self.cfg
        if v.dim() != 2 or v.shape[1] != c.mlp_out:
            raise ShapeError(f"manifold decoder expects (B, {c.mlp_out}), got {tuple(v.shape)}")
        return self.net(v.view(-1, c.start_channels, c.decoder_start, c.decoder_start))


class ATNet(nn.Module):
    def __init__(self, cfg: AtNetConfig):
        super().__init__()
        self.cfg = cfg
        self.audio_encoder = AudioEncoder(cfg.input_channels, cfg.encoder_width)
        self.mlp = DomainMLP(cfg.feature_dim, cfg.mlp_widths, cfg.mlp_out, cfg.dropout_p)
        self.manifold_decoder = ManifoldDecoder(cfg)

    def audio_encode(self, spec: torch.Tensor) -> torch.Tensor:
        return self.audio_encoder(spec)

    def domain_transform(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.dim() != 2 or feat.shape[1] != self.cfg.feature_dim:
            raise ShapeError(f"domain MLP expects (B, {self.cfg.feature_dim}), got {tuple(feat.shape)}")
        return self.mlp(feat)

    def manifold_decode(self, vec: torch.Tensor) -> LatentMap:
        return LatentMap(self.manifold_decoder(vec))

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        return self.manifold_decoder(self.domain_transform(self.audio_encode(spec)))


def at_loss(pred: LatentMap | torch.Tensor, target: LatentMap | torch.Tensor) -> torch.Tensor:
    """Mean squared error over every latent entry; the target must be continuous."""
    if isinstance(target, LatentMap):
        if target.quantized:
            raise ValueError("AT-net targets must be continuous (unquantized) latents")
        target = target.grid
    if isinstance(pred, LatentMap):
        pred = pred.grid
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return F.mse_loss(pred, target)


def check_compatible(cfg: AtNetConfig, manifold_cfg: VqConfig) -> None:
    if cfg.latent_size != manifold_cfg.latent_size:
        raise CompatibilityError(
            f"AT-net latent {cfg.latent_size}x{cfg.latent_size} does not match manifold latent "
            f"{manifold_cfg.latent_size}x{manifold_cfg.latent_size}")
    if cfg.code_dim != manifold_cfg.code_dim:
        raise CompatibilityError(f"AT-net code_dim {cfg.code_dim} != manifold code_dim {manifold_cfg.code_dim}")


@torch.no_grad()
def encode_targets(manifold: VQVAE | GaussianVAE, visuals: torch.Tensor, batch: int = 64) -> torch.Tensor:
    """Continuous latents of ``visuals`` under a frozen manifold (eval mode)."""
    manifold.eval()
    return torch.cat([manifold.encode(visuals[i:i + batch].float()).grid for i in range(0, len(visuals), batch)])


def train_atnet(
    specs: torch.Tensor,
    visuals: torch.Tensor,
    manifold: VQVAE | GaussianVAE,
    cfg: AtNetConfig,
    train: TrainConfig | None = None,
    model: ATNet | None = None,
    start_step: int = 0,
    optimizer=None,
) -> tuple[ATNet, TrainResult]:
    """Regress the frozen manifold's continuous latents from spectrograms."""
    train = train or TrainConfig()
    check_compatible(cfg, manifold.cfg)
    if len(specs) != len(visuals):
        raise ValueError(f"{len(specs)} spectrograms but {len(visuals)} visual samples")
    for p in manifold.parameters():
        p.requires_grad_(False)
    targets = encode_targets(manifold, visuals)
    if model is None:
        torch.manual_seed(train.seed)
        model = ATNet(cfg)
    model.train()
    specs = specs.float()
    params = [p for p in model.parameters() if p.requires_grad]

    def loss_fn(idx):
        return at_loss(model(specs[idx]), targets[idx])

    result = fit(params, loss_fn, len(specs), batch_size=train.batch_size, max_steps=train.max_steps,
                 lr=train.lr, seed=train.seed, eval_every=train.eval_every, patience=train.patience,
                 rel_threshold=train.rel_threshold, start_step=start_step, optimizer=optimizer)
    model.eval()
    return model, result


class E2ENet(nn.Module):
    """Single-stage ablation: AT-net trunk feeding a fresh visual decoder, no quantizer."""

    def __init__(self, cfg: AtNetConfig, visual_cfg: VqConfig):
        super().__init__()
        check_compatible(cfg, visual_cfg)
        self.cfg, self.visual_cfg = cfg, visual_cfg
        self.atnet = ATNet(cfg)
        self.decoder = Decoder(visual_cfg)

    def decode_raw(self, spec):
        return self.decoder(self.atnet(spec))

    def forward(self, spec):
        raw = self.decode_raw(spec)
        return torch.sigmoid(raw) if self.visual_cfg.modality == "depth" else torch.softmax(raw, dim=1)


def train_e2e(
    specs: torch.Tensor,
    visuals: torch.Tensor,
    cfg: AtNetConfig,
    visual_cfg: VqConfig,
    train: TrainConfig | None = None,
) -> tuple[E2ENet, TrainResult]:
    train = train or TrainConfig()
    if len(specs) != len(visuals):
        raise ValueError(f"{len(specs)} spectrograms but {len(visuals)} visual samples")
    torch.manual_seed(train.seed)
    model = E2ENet(cfg, visual_cfg)
    model.train()
    specs, visuals = specs.float(), visuals.float()
    params = list(model.parameters())
    modality = visual_cfg.modality

    def loss_fn(idx):
        raw = model.decode_raw(specs[idx])
        out = torch.sigmoid(raw) if modality == "depth" else raw
        return reconstruction_loss(visuals[idx], out, modality)

    result = fit(params, loss_fn, len(specs), batch_size=train.batch_size, max_steps=train.max_steps,
                 lr=train.lr, seed=train.seed, eval_every=train.eval_every, patience=train.patience,
                 rel_threshold=train.rel_threshold)
    model.eval()
    return model, result


def denormalize_depth(depth01: np.ndarray, bounds: Sequence[float]) -> np.ndarray:
    lo, hi = bounds
    return lo + np.asarray(depth01, dtype=np.float64) * (hi - lo)


def normalize_depth(depth_m: np.ndarray, bounds: Sequence[float]) -> np.ndarray:
    lo, hi = bounds
    return np.clip((np.asarray(depth_m, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


@torch.no_grad()
def predict_latents(atnet: ATNet, manifold: VQVAE | GaussianVAE, specs: torch.Tensor) -> LatentMap:
    """AT-net latent, snapped to the frozen codebook when the manifold is a VQ-VAE."""
    atnet.eval()
    manifold.eval()
    z = atnet(specs.float())
    if isinstance(manifold, VQVAE):
        return manifold.quantize(z)
    return LatentMap(z)


@torch.no_grad()
def infer_spectrograms(
    atnet: ATNet,
    manifold: VQVAE | GaussianVAE,
    specs: torch.Tensor,
    bounds: Sequence[float] | None = None,
    batch: int = 64,
) -> np.ndarray:
    """Predictions for a batch of spectrograms.

    Depth comes back in metres (or [0, 1] without ``bounds``), shaped
    (B, S, S); segmentation comes back as int64 class ids (B, S, S).
    """
    check_compatible(atnet.cfg, manifold.cfg)
    outs = []
    for i in range(0, len(specs), batch):
        z = predict_latents(atnet, manifold, specs[i:i + batch])
        outs.append(manifold.decode(z).numpy())
    return finalize_output(np.concatenate(outs), manifold.cfg.modality, bounds)


@torch.no_grad()
def infer_e2e(model: E2ENet, specs: torch.Tensor, bounds=None, batch: int = 64) -> np.ndarray:
    model.eval()
    outs = [model(specs[i:i + batch].float()).numpy() for i in range(0, len(specs), batch)]
    return finalize_output(np.concatenate(outs), model.visual_cfg.modality, bounds)


def finalize_output(out: np.ndarray, modality: str, bounds=None) -> np.ndarray:
    if modality == "depth":
        depth = out[:, 0].astype(np.float64)
        return denormalize_depth(depth, bounds) if bounds is not None else depth
    return out.argmax(axis=1).astype(np.int64)


def infer(
    audio: dsp.AudioClip,
    atnet: ATNet,
    manifold: VQVAE | GaussianVAE,
    bounds: Sequence[float] | None = None,
    dsp_params: dict | None = None,
) -> np.ndarray:
    """Full chain from raw audio; uses the first window of the clip."""
    params = dict(dsp_params or {})
    params.setdefault("size", atnet.cfg.input_size)
    windows = dsp.spectrogram_pipeline(audio, **params)
    if not windows:
        raise dsp.InvalidInputError("audio is shorter than one analysis window")
    spec = torch.from_numpy(windows[0])[None]
    if spec.shape[1] != atnet.cfg.input_channels:
        raise CompatibilityError(f"audio has {spec.shape[1]} channels, AT-net expects {atnet.cfg.input_channels}")
    return infer_spectrograms(atnet, manifold, spec, bounds)[0]


def save_atnet(path, model: ATNet | E2ENet, manifold_meta: dict, step: int = 0, seed: int = 0, dsp_params=None,
               kind: str | None = None, optimizer=None, extra=None, extra_files=None):
    kind = kind or ("e2e" if isinstance(model, E2ENet) else "atnet")
    meta = {"kind": kind, "config": asdict(model.cfg), "global_step": step, "seed": seed,
            "manifold_info": manifold_meta.get("manifold_info"), "dsp": dsp_params or {}, **(extra or {})}
    if isinstance(model, E2ENet):
        meta["visual_config"] = asdict(model.visual_cfg)
    return ckpt.save_checkpoint(path, model, meta, optimizer, extra_files=extra_files)


def load_atnet(path) -> tuple[ATNet | E2ENet, dict]:
    meta = ckpt.read_metadata(path)
    kind = meta.get("kind")
    if kind == "atnet":
        model = ATNet(AtNetConfig(**meta["config"]))
    elif kind == "e2e":
        model = E2ENet(AtNetConfig(**meta["config"]), VqConfig(**meta["visual_config"]))
    else:
        raise ckpt.CheckpointError(f"{path} is not an AT-net checkpoint (kind={kind!r})")
    ckpt.load_state(path, model)
    model.eval()
    return model, meta
