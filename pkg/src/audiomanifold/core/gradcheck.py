"""Central finite-difference verification of autograd gradients."""
from __future__ import annotations

import copy
from typing import Callable, Sequence

import torch
import torch.nn as nn


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> torch.Tensor:
    return (analytic - numeric).abs() / torch.clamp(analytic.abs() + numeric.abs(), min=1e-8)


def grad_check(
    net: nn.Module | Callable,
    inputs: torch.Tensor | Sequence[torch.Tensor],
    eps: float = 1e-6,
    *,
    train: bool = True,
    check_inputs: bool = True,
    max_checks: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    The scalar objective is ``sum(net(x) * w)`` for a fixed random ``w`` so
    every output element contributes with a distinct weight. Everything runs
    in float64 on a private copy of ``net``; random layers (dropout) see the
    same draws on every evaluation.

    Args:
        net: module (or plain callable) to check.
        inputs: one tensor or a sequence of tensors fed positionally.
        eps: finite-difference step. Kept small so a perturbation rarely
            straddles a ReLU kink; float64 keeps round-off far below 1e-4.
        train: evaluate the module in train mode.
        check_inputs: also compare gradients with respect to the inputs.
        max_checks: if set, at most this many randomly chosen coordinates
            are perturbed per tensor (keeps large layers tractable).
        seed: seeds the weights ``w``, the coordinate subset and dropout.
    """
    if isinstance(inputs, torch.Tensor):
        inputs = [inputs]
    if isinstance(net, nn.Module):
        net = copy.deepcopy(net).double()
        net.train(train)
        params = [p for p in net.parameters() if p.requires_grad]
    else:
        params = []
    xs = [x.detach().double().clone().requires_grad_(check_inputs) for x in inputs]

    def objective() -> torch.Tensor:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            out = net(*xs)
        return (out * weights).sum()

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        probe = net(*xs).detach()
    gen = torch.Generator().manual_seed(seed)
    weights = torch.randn(probe.shape, generator=gen, dtype=torch.float64)

    targets = list(params) + (xs if check_inputs else [])
    if not targets:
        return 0.0
    loss = objective()
    analytic = torch.autograd.grad(loss, targets, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for t, a in zip(targets, analytic):
            if a is None:
                a = torch.zeros_like(t)
            flat = t.view(-1)
            n = flat.numel()
            if max_checks is not None and n > max_checks:
                coords = torch.randperm(n, generator=gen)[:max_checks].tolist()
            else:
                coords = range(n)
            a_flat = a.reshape(-1)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = objective().item()
                flat[i] = orig - eps
                f_minus = objective().item()
                flat[i] = orig
                numeric = torch.tensor((f_plus - f_minus) / (2 * eps), dtype=torch.float64)
                err = relative_error(a_flat[i], numeric).item()
                worst = max(worst, err)
    return worst
