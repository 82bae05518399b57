"""Dense-tensor primitives, reverse-mode gradients, Adam, and LR schedule.

Backed by torch: tensors are torch.Tensor with requires_grad parameters, and
`backward` drives torch autograd. Every primitive used by the model is
re-exported here under a stable name so gradient acceptance tests can sweep
the full closure with finite differences.
"""

import math
from dataclasses import dataclass, field

import torch


class ShapeError(ValueError):
    """Operand shapes incompatible with the named primitive."""


def _check(cond: bool, op: str, msg: str):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(a.shape[-1] == b.shape[-2], "matmul", f"{tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a * b


def transpose(a: torch.Tensor, dim0: int = -2, dim1: int = -1) -> torch.Tensor:
    return a.transpose(dim0, dim1)


def reshape(a: torch.Tensor, shape) -> torch.Tensor:
    return a.reshape(shape)


def concat(tensors, axis: int = 0) -> torch.Tensor:
    return torch.cat(list(tensors), dim=axis)


def slice_(a: torch.Tensor, axis: int, start: int, length: int) -> torch.Tensor:
    _check(0 <= start and start + length <= a.shape[axis], "slice",
           f"[{start}:{start + length}] out of bounds for axis {axis} of {tuple(a.shape)}")
    return a.narrow(axis, start, length)


def mean(a: torch.Tensor, axis=None) -> torch.Tensor:
    return a.mean() if axis is None else a.mean(dim=axis)


def softmax(a: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.softmax(a, dim=axis)


def layer_norm(a: torch.Tensor, axis: int = -1, eps: float = 1e-5) -> torch.Tensor:
    """Normalization over one axis, pre-affine (no scale/shift here)."""
    mu = a.mean(dim=axis, keepdim=True)
    var = a.var(dim=axis, unbiased=False, keepdim=True)
    return (a - mu) / torch.sqrt(var + eps)


def gelu(a: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.gelu(a)


def linear(x: torch.Tensor, weight: torch.Tensor, bias=None) -> torch.Tensor:
    """x @ weight.T + bias, weight of shape (out, in)."""
    _check(x.shape[-1] == weight.shape[-1], "linear",
           f"input width {x.shape[-1]} != weight fan-in {weight.shape[-1]}")
    return torch.nn.functional.linear(x, weight, bias)


def backward(loss: torch.Tensor):
    """Populate .grad on every parameter reachable from a scalar loss.

    Gradients accumulate additively; call zero_grads between steps.
    """
    if loss.dim() != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    loss.backward(retain_graph=False)


def grad_of(param: torch.Tensor) -> torch.Tensor:
    """Parameter gradient; zeros for parameters disconnected from the loss."""
    return torch.zeros_like(param) if param.grad is None else param.grad


def zero_grads(params):
    for p in params:
        if p.grad is not None:
            p.grad = None


def kaiming_uniform_(weight: torch.Tensor, generator=None):
    """Fan-in Kaiming uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    fan_in = weight.shape[-1]
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
    return weight


@dataclass
class AdamState:
    """First/second moment buffers and step counter per parameter list."""

    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(
    params,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One in-place Adam update over a list of parameters."""
    params = list(params)
    grads = list(grads)
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return state


def cosine_warmup_lr(
    step: int, total_steps: int, warmup_steps: int, base_lr: float
) -> float:
    """Linear 0 -> base_lr over warmup, then cosine decay to ~0."""
    if step < warmup_steps:
        return base_lr * step / max(1, warmup_steps)
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(1.0, progress)
    return base_lr * 0.5 * (1 + math.cos(math.pi * progress))
