"""Dense float32 tensor arithmetic with reverse-mode differentiation.

Tensors are ``torch.Tensor`` objects and the autograd tape is torch's. This
module adds the few primitives whose numerical conventions are pinned by the
model (stable softmax, layer norm epsilon), a finite-value guard, the
initialization scheme, and a centered finite-difference gradient checker used
as a test oracle.
"""

from __future__ import annotations

from typing import Callable

import torch
from torch import Tensor, nn

from .errors import ContractError, NumericalError, ShapeError

DTYPE = torch.float32
LN_EPS = 1e-5
INIT_STD = 0.02

__all__ = [
    "Tensor",
    "DTYPE",
    "matmul",
    "softmax",
    "layer_norm",
    "grad_check",
    "check_finite",
    "init_weights",
]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with broadcasting over leading batch dimensions."""
    if a.dim() < 1 or b.dim() < 1:
        raise ShapeError("matmul needs tensors of rank >= 1")
    inner_a = a.shape[-1]
    inner_b = b.shape[-2] if b.dim() >= 2 else b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(
            f"matmul inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError as exc:
        raise ShapeError(
            f"matmul batch dimensions do not broadcast: {tuple(a.shape)} @ {tuple(b.shape)}"
        ) from exc
    return torch.matmul(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"axis {axis} invalid for rank {x.dim()}")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(
    x: Tensor, gain: Tensor | None, bias: Tensor | None, axis: int = -1, eps: float = LN_EPS
) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` then apply gain and bias.

    Uses the biased variance; zero-variance input maps to ``bias``.
    """
    n = x.shape[axis]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.numel() != n:
            raise ShapeError(f"layer_norm {name} has {p.numel()} entries, axis has {n}")
    if axis in (-1, x.dim() - 1):
        return torch.nn.functional.layer_norm(x, (n,), gain, bias, eps)
    mean = x.mean(dim=axis, keepdim=True)
    centered = x - mean
    var = centered.square().mean(dim=axis, keepdim=True)
    y = centered / torch.sqrt(var + eps)
    if gain is not None or bias is not None:
        shape = [1] * x.dim()
        shape[axis] = n
        if gain is not None:
            y = y * gain.reshape(shape)
        if bias is not None:
            y = y + bias.reshape(shape)
    return y


def check_finite(t: Tensor, what: str = "tensor", step: int | None = None) -> Tensor:
    if not torch.isfinite(t).all():
        where = f" at step {step}" if step is not None else ""
        raise NumericalError(f"non-finite values in {what}{where}", step=step)
    return t


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    dtype: torch.dtype = torch.float64,
) -> float:
    """Max relative error between autograd and centered finite differences.

    ``f`` must map a tensor to a scalar and be polymorphic in dtype; both the
    analytic and the numerical gradient are evaluated at ``dtype``. The error
    per coordinate is ``|g - fd| / (|g| + 1e-8)``.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ContractError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    x0 = x.detach().to(dtype).clone().requires_grad_(True)
    y = f(x0)
    if not isinstance(y, Tensor) or y.numel() != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    (g,) = torch.autograd.grad(y.reshape(()), x0, allow_unused=True)
    if g is None:
        g = torch.zeros_like(x0)
    g = g.detach().reshape(-1)

    base = x0.detach().reshape(-1)
    fd = torch.empty_like(base)
    with torch.no_grad():
        for i in range(base.numel()):
            xp = base.clone()
            xp[i] += eps
            xm = base.clone()
            xm[i] -= eps
            fp = f(xp.reshape(x0.shape)).reshape(())
            fm = f(xm.reshape(x0.shape)).reshape(())
            fd[i] = (fp - fm) / (2 * eps)
    rel = (g - fd).abs() / (g.abs() + 1e-8)
    return float(rel.max()) if rel.numel() else 0.0


def init_weights(module: nn.Module) -> None:
    """Normal(0, 0.02) weights and zero biases for linear/conv/embedding layers."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d, nn.Conv3d, nn.ConvTranspose1d, nn.ConvTranspose3d)):
            nn.init.normal_(m.weight, 0.0, INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, 0.0, INIT_STD)
