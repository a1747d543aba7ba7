"""Differentiation core: float64 reverse mode (torch autograd), Adam, clipping."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import torch

DTYPE = torch.float64


class NonFiniteLossError(FloatingPointError):
    pass


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor], retain_graph: bool = False):
    """Gradients of a scalar loss w.r.t. params. Unused params get zeros."""
    if loss.dim() != 0 and loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError(f"non-finite loss: {loss.item()}")
    params = list(params)
    grads = torch.autograd.grad(loss.reshape(()), params, retain_graph=retain_graph, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def global_norm(grads: Iterable[torch.Tensor]) -> float:
    grads = [g.detach() for g in grads]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack(torch._foreach_norm(grads))))


def clip_by_global_norm(grads: Sequence[torch.Tensor], max_norm: float):
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return list(grads)


class Adam:
    """Adam with bias-corrected moments, applied in place to leaf tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps), batched over tensors
        torch._foreach_mul_(self.m, self.beta1)
        torch._foreach_add_(self.m, grads, alpha=1.0 - self.beta1)
        torch._foreach_mul_(self.v, self.beta2)
        torch._foreach_addcmul_(self.v, grads, grads, value=1.0 - self.beta2)
        denom = torch._foreach_sqrt(self.v)
        torch._foreach_mul_(denom, 1.0 / math.sqrt(c2))
        torch._foreach_add_(denom, self.eps)
        torch._foreach_addcdiv_(self.params, self.m, denom, value=-self.lr / c1)

    def state_dict(self):
        return {"t": self.t, "m": [m.clone() for m in self.m], "v": [v.clone() for v in self.v]}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst.copy_(torch.as_tensor(src, dtype=dst.dtype).reshape(dst.shape))
        for dst, src in zip(self.v, state["v"]):
            dst.copy_(torch.as_tensor(src, dtype=dst.dtype).reshape(dst.shape))


def finite_difference_grad(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences of a scalar function of a flat tensor."""
    x = x.detach().clone()
    flat = x.reshape(-1)
    out = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            fp = float(fn(x))
            flat[i] = old - h
            fm = float(fn(x))
            flat[i] = old
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)
