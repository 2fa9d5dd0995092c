"""Rectified flow matching: straight-line paths, OT minibatch coupling, the
flow-matching loss, guided Euler sampling and latent-inversion video-to-audio.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Protocol

import numpy as np
import torch
from torch import Tensor

from .errors import ContractError, DomainError, NumericalError, ShapeError
from .model import DualVelocity
from .text import TextBatch

CFG_DEFAULT = 6.0
STEPS_DEFAULT = 50


class Mode(str, enum.Enum):
    T2AV = "t2av"
    V2A_INVERSION = "v2a"
    AUDIO_ONLY = "audio-only"


class VelocityModel(Protocol):
    def __call__(self, zv: Tensor | None, za: Tensor | None, t: Tensor, text: TextBatch) -> DualVelocity: ...


class LatentPair(NamedTuple):
    video: Tensor | None
    audio: Tensor | None


# path ------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _broadcast_t(t: Tensor | float, like: Tensor) -> Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    if torch.any((t < 0) | (t > 1)):
        raise DomainError("t must lie in [0, 1]")
    if t.dim() == 1 and like.dim() > 1:
        t = t.view(-1, *([1] * (like.dim() - 1)))
    return t


def interpolate(x0: Tensor, x1: Tensor, t: Tensor | float) -> Tensor:
    """x_t = (1 - t) x0 + t x1; ``t`` is a scalar or one value per batch item."""
    _same_shape(x0, x1)
    tt = _broadcast_t(t, x0)
    return (1 - tt) * x0 + tt * x1


def velocity_target(x0: Tensor, x1: Tensor) -> Tensor:
    _same_shape(x0, x1)
    return x1 - x0


# OT coupling -------------------------------------------------------------------


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Exact min-cost assignment for a square matrix; returns col index per row.

    Shortest augmenting path with row/column potentials, O(n^3).
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ShapeError(f"cost matrix must be square, got {cost.shape}")
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign


def pairwise_sq_dists(a: Tensor, b: Tensor) -> np.ndarray:
    a64 = a.reshape(a.shape[0], -1).double()
    b64 = b.reshape(b.shape[0], -1).double()
    return torch.cdist(a64, b64).square().numpy()


def ot_pair(noise: Tensor, data: Tensor) -> np.ndarray:
    """Permutation ``pi`` minimizing sum_i ||noise_i - data_pi(i)||^2."""
    if noise.shape[0] != data.shape[0]:
        raise ContractError(f"batch sizes differ: {noise.shape[0]} vs {data.shape[0]}")
    if noise.shape[0] == 1:
        return np.zeros(1, dtype=np.int64)
    cost = pairwise_sq_dists(noise, data)
    if not np.isfinite(cost).all():
        raise NumericalError("non-finite values in OT coupling")
    return hungarian(cost)


def couple(x0v: Tensor | None, x0a: Tensor, x1v: Tensor | None, x1a: Tensor) -> tuple[Tensor | None, Tensor]:
    """Reorder noise so that data item ``j`` is paired with its OT partner.

    Both modalities share one permutation computed on the concatenated pair.
    """
    flat0 = x0a.reshape(x0a.shape[0], -1)
    flat1 = x1a.reshape(x1a.shape[0], -1)
    if x0v is not None:
        flat0 = torch.cat([x0v.reshape(x0v.shape[0], -1), flat0], dim=1)
        flat1 = torch.cat([x1v.reshape(x1v.shape[0], -1), flat1], dim=1)
    pi = ot_pair(flat0, flat1)
    inv = torch.as_tensor(np.argsort(pi))  # inv[j] = noise index paired with data j
    return (None if x0v is None else x0v[inv]), x0a[inv]


# loss ------------------------------------------------------------------------


class FMLoss(NamedTuple):
    total: Tensor  # mean squared error over every element of both fields
    video: Tensor
    audio: Tensor


def fm_loss(
    model: VelocityModel,
    x0v: Tensor | None,
    x0a: Tensor | None,
    x1v: Tensor | None,
    x1a: Tensor | None,
    t: Tensor,
    text: TextBatch,
    compute_audio: bool = True,
) -> FMLoss:
    """Flow-matching MSE for already coupled noise/data and per-item times."""
    zero = torch.zeros(())
    ztv = None if x1v is None else interpolate(x0v, x1v, t)
    zta = None if x1a is None or not compute_audio else interpolate(x0a, x1a, t)
    pred = model(ztv, zta, t, text, compute_audio=compute_audio)
    sq_v = sq_a = zero
    n_v = n_a = 0
    if pred.video is not None and x1v is not None:
        sq_v = (pred.video - velocity_target(x0v, x1v)).square().sum()
        n_v = x1v.numel()
    if pred.audio is not None and zta is not None:
        sq_a = (pred.audio - velocity_target(x0a, x1a)).square().sum()
        n_a = x1a.numel()
    total = (sq_v + sq_a) / max(n_v + n_a, 1)
    return FMLoss(total, sq_v / n_v if n_v else zero, sq_a / n_a if n_a else zero)


# guidance and sampling -------------------------------------------------------


def cfg_velocity(v_cond: DualVelocity, v_uncond: DualVelocity, w: float) -> DualVelocity:
    """u_uncond + w (u_cond - u_uncond) per modality; w == 1 returns u_cond as is."""
    out = []
    for c, u in zip(v_cond, v_uncond):
        if c is None:
            out.append(None)
            continue
        _same_shape(c, u)
        out.append(c if w == 1.0 else u + w * (c - u))
    return DualVelocity(*out)


@dataclass
class SampleRequest:
    caption: str
    guidance: float = CFG_DEFAULT
    steps: int = STEPS_DEFAULT
    seed: int = 0
    mode: Mode = Mode.T2AV
    resolution: tuple[int, int] | None = None  # output frame size (H, W)
    video_latent: Tensor | None = None  # ground truth z_1^V for V2A inversion
    extra: dict = field(default_factory=dict)

    def validate(self) -> "SampleRequest":
        if self.guidance < 0:
            raise ContractError("guidance weight must be >= 0")
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if Mode(self.mode) is Mode.V2A_INVERSION and self.video_latent is None:
            raise ContractError("V2A inversion needs the ground-truth video latent")
        if self.resolution is not None and min(self.resolution) < 1:
            raise ContractError("resolution must be positive")
        return self


def draw_prior(shape_v: tuple | None, shape_a: tuple | None, seed: int) -> tuple[Tensor | None, Tensor | None]:
    """Standard-normal starting points, video drawn first, from a seeded generator."""
    gen = torch.Generator().manual_seed(int(seed))
    x0v = torch.randn(shape_v, generator=gen) if shape_v is not None else None
    x0a = torch.randn(shape_a, generator=gen) if shape_a is not None else None
    return x0v, x0a


Trace = Callable[[int, float, Tensor | None, Tensor | None], None]


def _guided(model: VelocityModel, xv, xa, t: float, text: TextBatch, w: float) -> DualVelocity:
    b = (xa if xv is None else xv).shape[0]
    tt = torch.full((b,), t, dtype=torch.float32)
    cond = model(xv, xa, tt, text)
    if w == 1.0:
        return cond
    uncond = model(xv, xa, tt, text.as_null())
    return cfg_velocity(cond, uncond, w)


def euler_sample(
    model: VelocityModel,
    x0v: Tensor | None,
    x0a: Tensor | None,
    text: TextBatch,
    guidance: float = CFG_DEFAULT,
    steps: int = STEPS_DEFAULT,
    video_target: Tensor | None = None,
    trace: Trace | None = None,
) -> LatentPair:
    """Uniform left-endpoint Euler integration of the guided velocity from t=0 to 1.

    The state is carried as ``x0 + (sum of velocities) / N`` with the sum kept
    in float64, which is algebraically the usual ``x += v / N`` update but is
    exact for state-independent fields. With ``video_target`` set, the video
    state is overwritten by its noisy interpolant before every model call and
    only the audio integrates (latent inversion).
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    acc_v = None if x0v is None else torch.zeros(x0v.shape, dtype=torch.float64)
    acc_a = None if x0a is None else torch.zeros(x0a.shape, dtype=torch.float64)

    def state(x0, acc):
        return None if x0 is None else (x0.double() + acc / steps).to(torch.float32)

    with torch.no_grad():
        for k in range(steps):
            t = k / steps
            xv = state(x0v, acc_v)
            if video_target is not None:
                xv = interpolate(x0v, video_target, t)
            xa = state(x0a, acc_a)
            if trace is not None:
                trace(k, t, xv, xa)
            v = _guided(model, xv, xa, t, text, guidance)
            for name, vel in (("video", v.video), ("audio", v.audio)):
                if vel is not None and not torch.isfinite(vel).all():
                    raise NumericalError(f"non-finite {name} velocity at step {k}", step=k)
            if acc_v is not None and video_target is None and v.video is not None:
                acc_v += v.video.double()
            if acc_a is not None:
                acc_a += v.audio.double()
    out_v = video_target.clone() if video_target is not None else state(x0v, acc_v)
    return LatentPair(out_v, state(x0a, acc_a))


def v2a_inversion_sample(
    model: VelocityModel,
    x0v: Tensor,
    x0a: Tensor,
    video_latent: Tensor,
    text: TextBatch,
    guidance: float = CFG_DEFAULT,
    steps: int = STEPS_DEFAULT,
    trace: Trace | None = None,
) -> LatentPair:
    if video_latent is None:
        raise ContractError("V2A inversion needs the ground-truth video latent")
    _same_shape(x0v, video_latent)
    return euler_sample(model, x0v, x0a, text, guidance, steps, video_target=video_latent, trace=trace)
