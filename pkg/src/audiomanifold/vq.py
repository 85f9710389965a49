"""VQ-VAE over one visual modality, plus the Gaussian-VAE ablation.

Tensors are channel-first: images (B, C, S, S), latents (B, D, h, w).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import checkpoint as ckpt
from .core.layers import ResidualBlock, ShapeError, StridedConv, TransposedConv, conv_bn_relu
from .core.training import TrainResult, fit

Modality = Literal["depth", "segmentation"]


@dataclass
class VqConfig:
    modality: Modality = "depth"
    in_channels: int = 1
    image_size: int = 128
    latent_size: int = 8
    num_codes: int = 64
    code_dim: int = 64
    first_features: int = 64
    features: int = 128
    n_residual: int = 3
    beta: float = 0.25
    variant: Literal["vq", "vae"] = "vq"
    kl_weight: float = 1e-3
    ema: bool = False
    ema_decay: float = 0.99
    restart_dead_codes: bool = False

    def __post_init__(self):
        if self.modality not in ("depth", "segmentation"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == "depth" and self.in_channels != 1:
            raise ValueError("depth maps have exactly one channel")
        if self.num_codes < 2:
            raise ValueError("codebook needs at least two codewords")
        ratio = self.image_size / self.latent_size
        if ratio < 2 or ratio != 2 ** round(math.log2(ratio)):
            raise ValueError(f"image_size/latent_size must be a power of two >= 2, got {ratio}")

    @property
    def n_stages(self) -> int:
        return int(round(math.log2(self.image_size // self.latent_size)))

    def stage_widths(self) -> list[int]:
        return [self.first_features] + [self.features] * (self.n_stages - 1)


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_steps: int = 2000
    lr: float = 1e-4
    seed: int = 0
    eval_every: int = 50
    patience: int = 10
    rel_threshold: float = 1e-3


@dataclass
class LatentMap:
    """Latent grid (B, D, h, w); ``indices`` (B, h, w) present iff quantized."""

    grid: torch.Tensor
    quantized: bool = False
    indices: torch.Tensor | None = None

    def __post_init__(self):
        if self.grid.dim() != 4:
            raise ShapeError(f"latent grid must be (B, D, h, w), got {tuple(self.grid.shape)}")
        if self.quantized != (self.indices is not None):
            raise ValueError("indices must be given exactly when the map is quantized")


@dataclass
class VqLossBreakdown:
    reconstruction: torch.Tensor
    codebook: torch.Tensor
    commitment: torch.Tensor
    beta: float
    total: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.total = self.reconstruction + self.codebook + self.beta * self.commitment

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("reconstruction", "codebook", "commitment", "total")}


class Encoder(nn.Module):
    def __init__(self, cfg: VqConfig, out_channels: int):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths()
        layers, prev = [], cfg.in_channels
        for w in widths:
            layers.append(conv_bn_relu(prev, w))
            prev = w
        layers += [ResidualBlock(prev) for _ in range(cfg.n_residual)]
        layers.append(StridedConv(prev, out_channels, stride=1, kernel=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        s = self.cfg.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (self.cfg.in_channels, s, s):
            raise ShapeError(f"encoder expects (B, {self.cfg.in_channels}, {s}, {s}), got {tuple(x.shape)}")
        return self.net(x)


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`; returns logits (seg) or pre-sigmoid depth."""

    def __init__(self, cfg: VqConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths()[::-1]
        top = widths[0]
        layers: list[nn.Module] = [conv_bn_relu(cfg.code_dim, top, stride=1)]
        layers += [ResidualBlock(top) for _ in range(cfg.n_residual)]
        outs = widths[1:] + [cfg.in_channels]
        prev = top
        for i, w in enumerate(outs):
            layers.append(TransposedConv(prev, w, bias=(i == len(outs) - 1)))
            if i < len(outs) - 1:
                layers += [nn.BatchNorm2d(w), nn.ReLU()]
            prev = w
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        h = self.cfg.latent_size
        if z.dim() != 4 or tuple(z.shape[1:]) != (self.cfg.code_dim, h, h):
            raise ShapeError(f"decoder expects (B, {self.cfg.code_dim}, {h}, {h}), got {tuple(z.shape)}")
        return self.net(z)


def nearest_codes(vectors: torch.Tensor, codebook: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Index of the nearest codeword (squared L2) for each row; ties go to the lowest index."""
    if vectors.shape[-1] != codebook.shape[-1]:
        raise ShapeError(f"vector dim {vectors.shape[-1]} != codebook dim {codebook.shape[-1]}")
    out = []
    for start in range(0, vectors.shape[0], chunk):
        v = vectors[start:start + chunk]
        d = ((v[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
        out.append(torch.argmin(d, dim=1))
    if not out:
        return torch.zeros(0, dtype=torch.long)
    return torch.cat(out)


class Quantizer(nn.Module):
    def __init__(self, num_codes: int, code_dim: int, ema: bool = False, decay: float = 0.99):
        super().__init__()
        self.num_codes, self.code_dim = num_codes, code_dim
        self.ema, self.decay = ema, decay
        self.embedding = nn.Parameter(torch.empty(num_codes, code_dim).uniform_(-1.0 / num_codes, 1.0 / num_codes),
                                      requires_grad=not ema)
        if ema:
            self.register_buffer("cluster_size", torch.zeros(num_codes))
            self.register_buffer("embed_sum", self.embedding.detach().clone())

    def lookup(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Quantize a (B, D, h, w) grid; returns (z_q, indices) with z_q built from the codebook."""
        if z.dim() != 4 or z.shape[1] != self.code_dim:
            raise ShapeError(f"latent dim {tuple(z.shape)} does not match codebook dim {self.code_dim}")
        b, d, h, w = z.shape
        flat = z.detach().permute(0, 2, 3, 1).reshape(-1, d)
        idx = nearest_codes(flat, self.embedding.detach().to(flat.dtype))
        zq = self.embedding[idx].to(z.dtype).view(b, h, w, d).permute(0, 3, 1, 2)
        return zq, idx.view(b, h, w)

    @torch.no_grad()
    def ema_update(self, z: torch.Tensor, idx: torch.Tensor) -> None:
        flat = z.detach().permute(0, 2, 3, 1).reshape(-1, self.code_dim)
        onehot = F.one_hot(idx.reshape(-1), self.num_codes).to(flat.dtype)
        self.cluster_size.mul_(self.decay).add_(onehot.sum(0), alpha=1 - self.decay)
        self.embed_sum.mul_(self.decay).add_(onehot.t() @ flat, alpha=1 - self.decay)
        n = self.cluster_size.sum()
        smoothed = (self.cluster_size + 1e-5) / (n + self.num_codes * 1e-5) * n
        self.embedding.data.copy_(self.embed_sum / smoothed[:, None])

    @torch.no_grad()
    def restart(self, dead: torch.Tensor, z: torch.Tensor, generator: torch.Generator) -> int:
        """Re-seed codewords flagged in ``dead`` with random encoder outputs."""
        n_dead = int(dead.sum())
        if n_dead == 0:
            return 0
        flat = z.detach().permute(0, 2, 3, 1).reshape(-1, self.code_dim)
        pick = torch.randint(0, flat.shape[0], (n_dead,), generator=generator)
        self.embedding.data[dead] = flat[pick].to(self.embedding.dtype)
        return n_dead


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z_e, z_q):
        return z_q.detach().clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(z_e: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value ``z_q``; backward copies the incoming gradient to ``z_e`` unchanged.

    Written as an autograd function rather than ``z_e + (z_q - z_e).detach()``
    so the forward value is bitwise ``z_q`` instead of a rounded sum.
    """
    if z_e.shape != z_q.shape:
        raise ShapeError(f"straight-through needs equal shapes, got {tuple(z_e.shape)} and {tuple(z_q.shape)}")
    return _StraightThrough.apply(z_e, z_q)


def reconstruction_loss(x: torch.Tensor, out: torch.Tensor, modality: Modality) -> torch.Tensor:
    """MSE on sigmoid depth, or pixelwise cross-entropy of logits against one-hot maps."""
    if x.shape != out.shape:
        raise ShapeError(f"target {tuple(x.shape)} vs reconstruction {tuple(out.shape)}")
    if modality == "depth":
        return F.mse_loss(out, x)
    return -(x * F.log_softmax(out, dim=1)).sum(1).mean()


def vq_loss(x, x_hat, z_e, z_q, beta: float = 0.25, modality: Modality = "depth") -> VqLossBreakdown:
    """Reconstruction + codebook + beta * commitment with stop-gradients.

    ``x_hat`` is a depth map for depth and logits for segmentation.
    """
    if z_e.shape != z_q.shape:
        raise ShapeError(f"z_e {tuple(z_e.shape)} vs z_q {tuple(z_q.shape)}")
    return VqLossBreakdown(
        reconstruction=reconstruction_loss(x, x_hat, modality),
        codebook=F.mse_loss(z_q, z_e.detach()),
        commitment=F.mse_loss(z_e, z_q.detach()),
        beta=beta,
    )


def gaussian_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)), averaged over elements."""
    return 0.5 * (mean ** 2 + logvar.exp() - 1.0 - logvar).mean()


class VQVAE(nn.Module):
    def __init__(self, cfg: VqConfig):
        super().__init__()
        if cfg.variant != "vq":
            raise ValueError("use GaussianVAE for the vae variant")
        self.cfg = cfg
        self.encoder = Encoder(cfg, cfg.code_dim)
        self.quantizer = Quantizer(cfg.num_codes, cfg.code_dim, cfg.ema, cfg.ema_decay)
        self.decoder = Decoder(cfg)

    @property
    def codebook(self) -> torch.Tensor:
        return self.quantizer.embedding

    def encode(self, x: torch.Tensor) -> LatentMap:
        return LatentMap(self.encoder(x))

    def quantize(self, z: LatentMap | torch.Tensor) -> LatentMap:
        grid = z.grid if isinstance(z, LatentMap) else z
        zq, idx = self.quantizer.lookup(grid)
        return LatentMap(zq, quantized=True, indices=idx)

    def decode_raw(self, z: LatentMap | torch.Tensor) -> torch.Tensor:
        return self.decoder(z.grid if isinstance(z, LatentMap) else z)

    def decode(self, z: LatentMap | torch.Tensor) -> torch.Tensor:
        """Depth in [0, 1] or per-pixel class probabilities."""
        return output_activation(self.decode_raw(z), self.cfg.modality)

    def forward(self, x: torch.Tensor):
        z_e = self.encoder(x)
        z_q, idx = self.quantizer.lookup(z_e)
        raw = self.decoder(straight_through(z_e, z_q))
        x_hat = torch.sigmoid(raw) if self.cfg.modality == "depth" else raw
        return x_hat, z_e, z_q, idx

    def loss(self, x: torch.Tensor) -> tuple[VqLossBreakdown, torch.Tensor, torch.Tensor]:
        x_hat, z_e, z_q, idx = self(x)
        if self.cfg.ema:
            if self.training:
                self.quantizer.ema_update(z_e, idx)
            z_q = z_q.detach()
        return vq_loss(x, x_hat, z_e, z_q, self.cfg.beta, self.cfg.modality), z_e, idx


class GaussianVAE(nn.Module):
    """Same trunk as :class:`VQVAE` with a diagonal Gaussian latent instead of a codebook."""

    def __init__(self, cfg: VqConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg, 2 * cfg.code_dim)
        self.decoder = Decoder(cfg)

    def encode_gaussian(self, x: torch.Tensor) -> tuple[LatentMap, LatentMap]:
        stats = self.encoder(x)
        mean, logvar = stats.chunk(2, dim=1)
        return LatentMap(mean), LatentMap(logvar)

    def encode(self, x: torch.Tensor) -> LatentMap:
        return self.encode_gaussian(x)[0]

    def decode_raw(self, z):
        return self.decoder(z.grid if isinstance(z, LatentMap) else z)

    def decode(self, z):
        return output_activation(self.decode_raw(z), self.cfg.modality)

    def loss(self, x: torch.Tensor) -> tuple[torch.Tensor, dict[str, float]]:
        mean, logvar = self.encode_gaussian(x)
        mu, lv = mean.grid, logvar.grid.clamp(-20.0, 10.0)
        z = mu + torch.randn_like(mu) * (0.5 * lv).exp() if self.training else mu
        raw = self.decoder(z)
        x_hat = torch.sigmoid(raw) if self.cfg.modality == "depth" else raw
        recon = reconstruction_loss(x, x_hat, self.cfg.modality)
        kl = gaussian_kl(mu, lv)
        total = recon + self.cfg.kl_weight * kl
        return total, {"reconstruction": float(recon.detach()), "kl": float(kl.detach()), "total": float(total.detach())}


def vae_loss(x, x_hat, mean, logvar, kl_weight: float, modality: Modality = "depth") -> torch.Tensor:
    return reconstruction_loss(x, x_hat, modality) + kl_weight * gaussian_kl(mean, logvar)


def output_activation(raw: torch.Tensor, modality: Modality) -> torch.Tensor:
    return torch.sigmoid(raw) if modality == "depth" else torch.softmax(raw, dim=1)


def build_manifold(cfg: VqConfig) -> VQVAE | GaussianVAE:
    return VQVAE(cfg) if cfg.variant == "vq" else GaussianVAE(cfg)


def train_vqvae(
    images: torch.Tensor,
    cfg: VqConfig,
    train: TrainConfig | None = None,
    model: VQVAE | GaussianVAE | None = None,
    start_step: int = 0,
    optimizer=None,
) -> tuple[VQVAE | GaussianVAE, TrainResult]:
    """Fit a manifold model on ``images`` (N, C, S, S) with Adam and plateau stopping."""
    train = train or TrainConfig()
    if images.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if model is None:
        torch.manual_seed(train.seed)
        model = build_manifold(cfg)
    model.train()
    images = images.float()
    params = [p for p in model.parameters() if p.requires_grad]
    is_vq = isinstance(model, VQVAE)
    per_epoch = max(1, images.shape[0] // min(train.batch_size, images.shape[0]))
    usage = torch.zeros(cfg.num_codes, dtype=torch.bool)
    restart_gen = torch.Generator().manual_seed(train.seed + 17)
    last_z = {}

    def loss_fn(idx):
        x = images[idx]
        if is_vq:
            breakdown, z_e, codes = model.loss(x)
            usage[codes.unique()] = True
            last_z["z"] = z_e
            return breakdown.total
        total, _ = model.loss(x)
        return total

    def after_step(step, _):
        if is_vq and cfg.restart_dead_codes and step % per_epoch == 0:
            model.quantizer.restart(~usage, last_z["z"], restart_gen)
            usage.zero_()

    result = fit(params, loss_fn, images.shape[0], batch_size=train.batch_size, max_steps=train.max_steps,
                 lr=train.lr, seed=train.seed, eval_every=train.eval_every, patience=train.patience,
                 rel_threshold=train.rel_threshold, start_step=start_step, optimizer=optimizer,
                 after_step=after_step)
    model.eval()
    return model, result


def manifold_info(cfg: VqConfig, bounds: tuple[float, float] | None = None,
                  num_classes: int | None = None) -> dict:
    return {
        "modality": cfg.modality,
        "latent_h": cfg.latent_size,
        "latent_w": cfg.latent_size,
        "num_codes": cfg.num_codes,
        "code_dim": cfg.code_dim,
        "variant": cfg.variant,
        "depth_bounds": list(bounds) if bounds is not None else None,
        "num_classes": num_classes,
    }


def save_manifold(path, model, bounds=None, step: int = 0, seed: int = 0, optimizer=None, extra=None,
                  extra_files=None) -> Path:
    cfg = model.cfg
    num_classes = cfg.in_channels if cfg.modality == "segmentation" else None
    info = manifold_info(cfg, bounds, num_classes)
    meta = {"kind": "manifold", "config": asdict(cfg), "global_step": step, "seed": seed,
            "manifold_info": info, **(extra or {})}
    return ckpt.save_checkpoint(path, model, meta, optimizer,
                                extra_files={"manifold-info.json": info, **(extra_files or {})})


def load_manifold(path) -> tuple[VQVAE | GaussianVAE, dict]:
    meta = ckpt.read_metadata(path)
    if meta.get("kind") != "manifold":
        raise ckpt.CheckpointError(f"{path} is not a manifold checkpoint (kind={meta.get('kind')!r})")
    model = build_manifold(VqConfig(**meta["config"]))
    ckpt.load_state(path, model)
    model.eval()
    return model, meta
