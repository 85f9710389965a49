"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: AdamState) -> None:
    """One in-place Adam update.

    ``None`` gradients count as zero. Moments are lazily created on the
    first call so their shapes always match the parameters.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    if len(state.exp_avg) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    present = [g for g in grads if g is not None]
    if present:
        norms = torch.stack(torch._foreach_norm(present))
        if not torch.isfinite(norms).all():
            bad = [i for i, g in enumerate(grads) if g is not None and not torch.isfinite(g).all()]
            raise NonFiniteGradientError(f"non-finite gradient for parameter(s) {bad}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for p, m in zip(params, state.exp_avg):
        if m.shape != p.shape:
            raise ValueError(f"moment shape {tuple(m.shape)} != param shape {tuple(p.shape)}")
    with torch.no_grad():
        # m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
        torch._foreach_mul_(state.exp_avg, b1)
        torch._foreach_add_(state.exp_avg, grads, alpha=1.0 - b1)
        torch._foreach_mul_(state.exp_avg_sq, b2)
        torch._foreach_addcmul_(state.exp_avg_sq, grads, grads, value=1.0 - b2)
        # p <- p - lr * (m / bc1) / (sqrt(v / bc2) + eps)
        denom = torch._foreach_div(state.exp_avg_sq, bc2)
        torch._foreach_sqrt_(denom)
        torch._foreach_add_(denom, state.eps)
        torch._foreach_addcdiv_(list(params), state.exp_avg, denom, value=-state.lr / bc1)


class Adam:
    """Thin stateful wrapper: ``zero_grad`` / ``step`` over a parameter list."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)
