"""Layer set shared by the VQ-VAE, the AT-net and the E2E baseline.

Tensors are torch tensors; autograd supplies the reverse pass. Every
layer checks its input shape so a mismatch names the offending layer.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


def _check_channels(layer: nn.Module, x: torch.Tensor, expected: int, name: str) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise ShapeError(f"{name}: expected (B, {expected}, H, W) input, got {tuple(x.shape)}")


def kaiming_uniform_(weight: torch.Tensor, bias: torch.Tensor | None = None, fan_in: int | None = None):
    """Kaiming-uniform fan-in initialisation for ReLU networks."""
    if fan_in is None:
        fan_in = weight[0].numel()
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound)
        if bias is not None:
            bias.zero_()


class StridedConv(nn.Module):
    """k x k convolution; stride 2 halves H and W exactly, stride 1 keeps them."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 2, kernel: int | None = None, bias: bool = True):
        super().__init__()
        if stride < 1:
            raise ValueError("stride must be >= 1")
        if kernel is None:
            kernel = 4 if stride == 2 else 3
        # halves exactly for even inputs with k in {1, 3, 4, 7} at stride 2
        pad = (kernel - 1) // 2
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=pad, bias=bias)
        kaiming_uniform_(self.conv.weight, self.conv.bias)

    def forward(self, x):
        _check_channels(self, x, self.in_ch, f"StridedConv({self.in_ch}->{self.out_ch})")
        if self.stride > 1 and (x.shape[2] % self.stride or x.shape[3] % self.stride):
            raise ShapeError(f"StridedConv: spatial size {tuple(x.shape[2:])} not divisible by stride {self.stride}")
        return self.conv(x)


class TransposedConv(nn.Module):
    """4x4 stride-2 transposed convolution, doubles H and W."""

    def __init__(self, in_ch: int, out_ch: int, bias: bool = True):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.conv = nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1, bias=bias)
        kaiming_uniform_(self.conv.weight, self.conv.bias, fan_in=in_ch * 4)

    def forward(self, x):
        _check_channels(self, x, self.in_ch, f"TransposedConv({self.in_ch}->{self.out_ch})")
        return self.conv(x)


class Dense(nn.Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.linear = nn.Linear(in_features, out_features)
        kaiming_uniform_(self.linear.weight, self.linear.bias)

    def forward(self, x):
        if x.dim() != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Dense({self.in_features}->{self.out_features}): got {tuple(x.shape)}")
        return self.linear(x)


class Dropout(nn.Module):
    """Inverted dropout: identity in eval mode, unbiased in train mode."""

    def __init__(self, p: float = 0.2):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout p must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = (torch.rand(x.shape, dtype=x.dtype, device=x.device) >= self.p).to(x.dtype)
        return x * keep / (1.0 - self.p)


class BatchNorm(nn.BatchNorm2d):
    """BatchNorm2d with gamma=1, beta=0 and a channel check."""

    def forward(self, x):
        _check_channels(self, x, self.num_features, f"BatchNorm({self.num_features})")
        return super().forward(x)


class GlobalAvgPool(nn.Module):
    """(B, C, H, W) -> (B, C)."""

    def forward(self, x):
        if x.dim() != 4:
            raise ShapeError(f"GlobalAvgPool: expected 4-d input, got {tuple(x.shape)}")
        return x.mean(dim=(2, 3))


class ResidualBlock(nn.Module):
    """conv3x3-BN-ReLU-conv3x3-BN plus identity skip, ReLU after the add."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = StridedConv(channels, channels, stride=1, kernel=3, bias=False)
        self.bn1 = BatchNorm(channels)
        self.conv2 = StridedConv(channels, channels, stride=1, kernel=3, bias=False)
        self.bn2 = BatchNorm(channels)

    def forward(self, x):
        _check_channels(self, x, self.channels, f"ResidualBlock({self.channels})")
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + x)


def conv_bn_relu(in_ch: int, out_ch: int, stride: int = 2) -> nn.Sequential:
    return nn.Sequential(StridedConv(in_ch, out_ch, stride=stride, bias=False), BatchNorm(out_ch), nn.ReLU())


def deconv_bn_relu(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(TransposedConv(in_ch, out_ch, bias=False), BatchNorm(out_ch), nn.ReLU())


def build_layer(kind: str, **kw) -> nn.Module:
    """Construct a layer from a LayerSpec-style ``kind`` plus parameters."""
    builders = {
        "conv2d-strided": lambda: StridedConv(kw["in_ch"], kw["out_ch"], stride=kw.get("stride", 2),
                                              kernel=kw.get("kernel")),
        "conv2d-transposed": lambda: TransposedConv(kw["in_ch"], kw["out_ch"]),
        "dense": lambda: Dense(kw["in_features"], kw["out_features"]),
        "relu": nn.ReLU,
        "batchnorm": lambda: BatchNorm(kw["channels"]),
        "dropout": lambda: Dropout(kw.get("p", 0.2)),
        "global-avg-pool": GlobalAvgPool,
        "residual-block": lambda: ResidualBlock(kw["channels"]),
    }
    if kind not in builders:
        raise ValueError(f"unknown layer kind {kind!r}")
    return builders[kind]()


LAYER_KINDS = (
    "conv2d-strided", "conv2d-transposed", "dense", "relu",
    "batchnorm", "dropout", "global-avg-pool", "residual-block",
)
