"""Video/audio latent codecs.

``lossless`` mode is a pure space-to-depth rearrangement followed by an affine
value map whose scale is a power of two and whose shift is a multiple of 2^-8.
With inputs on the 2^-24 lattice (everything the renderer, the PPM reader and
``torch.rand`` produce) both maps are exact in float32, so the round trip is
the bitwise identity. ``trained-vae`` mode swaps in a small strided
convolutional VAE.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .errors import ConfigError, ContractError, NumericalError, ShapeError
from .numerics import init_weights

LATTICE = 2.0**-24
SHIFT_QUANTUM = 2.0**-8
MODES = ("lossless", "trained-vae")


@dataclass
class CodecConfig:
    r_t: int = 4
    r_s: int = 4
    r_a: int = 160
    d_a: int = 160
    channels: int = 3
    mode: str = "lossless"
    video_shift: float = 0.0
    video_scale: float = 1.0
    audio_scale: float = 1.0
    vae_video_channels: int = 16
    vae_hidden: int = 32
    beta: float = 1e-4

    def validate(self) -> "CodecConfig":
        for name in ("r_t", "r_s", "r_a", "d_a", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"codec.{name} must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"codec.mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "lossless" and self.d_a < self.r_a:
            raise ConfigError("lossless audio codec needs d_a >= r_a")
        for name in ("video_scale", "audio_scale"):
            s = getattr(self, name)
            if s <= 0 or math.frexp(s)[0] != 0.5:
                raise ConfigError(f"codec.{name} must be a positive power of two, got {s}")
        if self.video_shift / SHIFT_QUANTUM != round(self.video_shift / SHIFT_QUANTUM):
            raise ConfigError("codec.video_shift must be a multiple of 2^-8")
        return self

    @property
    def video_latent_channels(self) -> int:
        if self.mode == "lossless":
            return self.channels * self.r_t * self.r_s**2
        return self.vae_video_channels

    def video_latent_shape(self, frames: int, height: int, width: int) -> tuple[int, int, int, int]:
        _check_div("frames", frames, self.r_t)
        _check_div("height", height, self.r_s)
        _check_div("width", width, self.r_s)
        return (frames // self.r_t, self.video_latent_channels, height // self.r_s, width // self.r_s)

    def audio_latent_shape(self, samples: int) -> tuple[int, int]:
        _check_div("samples", samples, self.r_a)
        return (samples // self.r_a, self.d_a)


def full_scale_preset() -> CodecConfig:
    """Factors of the full-scale system (48 kHz audio at a 50 Hz latent rate)."""
    return CodecConfig(r_t=4, r_s=8, r_a=960, d_a=1142, mode="trained-vae")


def _check_div(axis: str, n: int, k: int) -> None:
    if n % k:
        raise ShapeError(f"{axis}={n} is not divisible by factor {k}")


def _pow2(x: float) -> float:
    return 2.0 ** round(math.log2(x))


def snap_to_lattice(y: Tensor) -> Tensor:
    """Round values onto the 2^-24 grid the lossless video codec is exact on."""
    return (torch.round(y.double() / LATTICE) * LATTICE).to(torch.float32)


def fit_affine(cfg: CodecConfig, videos: Tensor, audios: Tensor) -> CodecConfig:
    """Freeze value-normalizing constants computed from a training split."""
    v = videos.double()
    shift = round(float(v.mean()) / SHIFT_QUANTUM) * SHIFT_QUANTUM
    v_std = float((v - shift).std())
    a_std = float(audios.double().std())
    return replace(
        cfg,
        video_shift=shift,
        video_scale=_pow2(1.0 / v_std) if v_std > 0 else 1.0,
        audio_scale=_pow2(1.0 / a_std) if a_std > 0 else 1.0,
    ).validate()


# lossless rearrangements ---------------------------------------------------


def space_to_depth(y: Tensor, r_t: int, r_s: int) -> Tensor:
    """(..., F, C, H, W) -> (..., F/r_t, r_t*C*r_s*r_s, H/r_s, W/r_s)."""
    *lead, f, c, h, w = y.shape
    _check_div("frames", f, r_t)
    _check_div("height", h, r_s)
    _check_div("width", w, r_s)
    n = len(lead)
    x = y.reshape(*lead, f // r_t, r_t, c, h // r_s, r_s, w // r_s, r_s)
    perm = list(range(n)) + [n + i for i in (0, 1, 2, 4, 6, 3, 5)]
    x = x.permute(*perm)
    return x.reshape(*lead, f // r_t, r_t * c * r_s * r_s, h // r_s, w // r_s).contiguous()


def depth_to_space(z: Tensor, r_t: int, r_s: int, channels: int) -> Tensor:
    *lead, fp, cz, hp, wp = z.shape
    if cz != r_t * channels * r_s * r_s:
        raise ShapeError(f"latent has {cz} channels, expected {r_t * channels * r_s * r_s}")
    n = len(lead)
    x = z.reshape(*lead, fp, r_t, channels, r_s, r_s, hp, wp)
    # (fp, rt, c, rs_h, rs_w, hp, wp) -> (fp, rt, c, hp, rs_h, wp, rs_w)
    perm = list(range(n)) + [n + i for i in (0, 1, 2, 5, 3, 6, 4)]
    x = x.permute(*perm)
    return x.reshape(*lead, fp * r_t, channels, hp * r_s, wp * r_s).contiguous()


# trained VAE ---------------------------------------------------------------


class VideoVAE(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        k = (cfg.r_t, cfg.r_s, cfg.r_s)
        h, cz = cfg.vae_hidden, cfg.vae_video_channels
        self.enc = nn.Sequential(
            nn.Conv3d(cfg.channels, h, k, stride=k), nn.SiLU(), nn.Conv3d(h, 2 * cz, 1)
        )
        self.dec = nn.Sequential(
            nn.Conv3d(cz, h, 1), nn.SiLU(), nn.ConvTranspose3d(h, cfg.channels, k, stride=k)
        )

    def encode(self, y: Tensor) -> tuple[Tensor, Tensor]:
        # (B, F, C, H, W) -> mu, logvar each (B, F', Cz, H', W')
        h = self.enc(y.transpose(1, 2)).transpose(1, 2)
        mu, logvar = h.chunk(2, dim=2)
        return mu, logvar

    def decode(self, z: Tensor) -> Tensor:
        return self.dec(z.transpose(1, 2)).transpose(1, 2)


class AudioVAE(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        h = cfg.vae_hidden
        self.enc = nn.Sequential(
            nn.Conv1d(1, h, cfg.r_a, stride=cfg.r_a), nn.SiLU(), nn.Conv1d(h, 2 * cfg.d_a, 1)
        )
        self.dec = nn.Sequential(
            nn.Conv1d(cfg.d_a, h, 1), nn.SiLU(), nn.ConvTranspose1d(h, 1, cfg.r_a, stride=cfg.r_a)
        )

    def encode(self, y: Tensor) -> tuple[Tensor, Tensor]:
        # (B, M) -> (B, T, D_A)
        h = self.enc(y.unsqueeze(1)).transpose(1, 2)
        mu, logvar = h.chunk(2, dim=2)
        return mu, logvar

    def decode(self, z: Tensor) -> Tensor:
        return self.dec(z.transpose(1, 2)).squeeze(1)


def kl_diag_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, 1)) summed over all entries."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {tuple(mu.shape)} and logvar {tuple(logvar.shape)} differ")
    # expm1 keeps exp(lv) - 1 - lv from cancelling below zero for tiny lv
    return 0.5 * (mu.square() + torch.expm1(logvar) - logvar).sum()


def _reparam(mu: Tensor, logvar: Tensor, generator: torch.Generator | None) -> Tensor:
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps


class LatentCodec:
    """Encoder/decoder pair for both modalities; stateless after construction."""

    def __init__(self, cfg: CodecConfig, video_vae: VideoVAE | None = None, audio_vae: AudioVAE | None = None):
        self.cfg = cfg.validate()
        if cfg.mode == "trained-vae":
            self.video_vae = video_vae if video_vae is not None else VideoVAE(cfg)
            self.audio_vae = audio_vae if audio_vae is not None else AudioVAE(cfg)
        else:
            self.video_vae = None
            self.audio_vae = None

    # video
    def encode_video(self, y: Tensor, generator: torch.Generator | None = None, sample: bool = True) -> Tensor:
        cfg = self.cfg
        if y.dim() not in (4, 5) or y.shape[-3] != cfg.channels:
            raise ShapeError(f"video must be (F, {cfg.channels}, H, W) or batched, got {tuple(y.shape)}")
        cfg.video_latent_shape(*y.shape[-4:-3], *y.shape[-2:])
        if cfg.mode == "lossless":
            z = space_to_depth(y.to(torch.float32), cfg.r_t, cfg.r_s)
            return (z - cfg.video_shift) * cfg.video_scale
        batched = y.dim() == 5
        yb = y if batched else y.unsqueeze(0)
        mu, logvar = self.video_vae.encode(yb)
        z = _reparam(mu, logvar, generator) if sample else mu
        return z if batched else z.squeeze(0)

    def decode_video(self, z: Tensor) -> Tensor:
        cfg = self.cfg
        if z.dim() not in (4, 5) or z.shape[-3] != cfg.video_latent_channels:
            raise ShapeError(
                f"video latent must have {cfg.video_latent_channels} channels, got {tuple(z.shape)}"
            )
        if cfg.mode == "lossless":
            y = depth_to_space(z / cfg.video_scale + cfg.video_shift, cfg.r_t, cfg.r_s, cfg.channels)
        else:
            batched = z.dim() == 5
            y = self.video_vae.decode(z if batched else z.unsqueeze(0))
            y = y if batched else y.squeeze(0)
        return y.clamp(0.0, 1.0)

    # audio
    def encode_audio(self, y: Tensor, generator: torch.Generator | None = None, sample: bool = True) -> Tensor:
        cfg = self.cfg
        if y.dim() not in (1, 2):
            raise ShapeError(f"audio must be (M,) or (B, M), got {tuple(y.shape)}")
        t, d = cfg.audio_latent_shape(y.shape[-1])
        if cfg.mode == "lossless":
            frames = y.to(torch.float32).reshape(*y.shape[:-1], t, cfg.r_a) * cfg.audio_scale
            # identity basis: orthonormal and exact; extra dims are zero padding
            return F.pad(frames, (0, d - cfg.r_a)) if d > cfg.r_a else frames
        batched = y.dim() == 2
        mu, logvar = self.audio_vae.encode(y if batched else y.unsqueeze(0))
        z = _reparam(mu, logvar, generator) if sample else mu
        return z if batched else z.squeeze(0)

    def decode_audio(self, z: Tensor) -> Tensor:
        cfg = self.cfg
        if z.dim() not in (2, 3) or z.shape[-1] != cfg.d_a:
            raise ShapeError(f"audio latent must be (T, {cfg.d_a}) or batched, got {tuple(z.shape)}")
        if cfg.mode == "lossless":
            frames = z[..., : cfg.r_a] / cfg.audio_scale
            y = frames.reshape(*z.shape[:-2], z.shape[-2] * cfg.r_a)
        else:
            batched = z.dim() == 3
            y = self.audio_vae.decode(z if batched else z.unsqueeze(0))
            y = y if batched else y.squeeze(0)
        return y.clamp(-1.0, 1.0)

    # persistence helpers
    def state_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.video_vae is not None:
            out.update({f"video_vae.{k}": v for k, v in self.video_vae.state_dict().items()})
            out.update({f"audio_vae.{k}": v for k, v in self.audio_vae.state_dict().items()})
        return out

    def load_state_tensors(self, tensors: dict[str, Tensor]) -> None:
        if self.video_vae is None:
            return
        self.video_vae.load_state_dict({k[10:]: v for k, v in tensors.items() if k.startswith("video_vae.")})
        self.audio_vae.load_state_dict({k[10:]: v for k, v in tensors.items() if k.startswith("audio_vae.")})


def encode_video(y: Tensor, cfg: CodecConfig) -> Tensor:
    return LatentCodec(cfg).encode_video(y)


def decode_video(z: Tensor, cfg: CodecConfig) -> Tensor:
    return LatentCodec(cfg).decode_video(z)


def encode_audio(y: Tensor, cfg: CodecConfig) -> Tensor:
    return LatentCodec(cfg).encode_audio(y)


def decode_audio(z: Tensor, cfg: CodecConfig) -> Tensor:
    return LatentCodec(cfg).decode_audio(z)


# VAE training --------------------------------------------------------------


def vae_loss(codec: LatentCodec, videos: Tensor, audios: Tensor, beta: float, generator: torch.Generator | None = None) -> Tensor:
    """Reconstruction MSE plus beta times the per-sample KL, summed over modalities."""
    total = videos.new_zeros(())
    b = videos.shape[0]
    for vae, y in ((codec.video_vae, videos), (codec.audio_vae, audios)):
        mu, logvar = vae.encode(y)
        z = _reparam(mu, logvar, generator)
        recon = F.mse_loss(vae.decode(z), y)
        total = total + recon + beta * kl_diag_gaussian(mu, logvar) / b
    return total


def train_vae(
    videos: Tensor,
    audios: Tensor,
    cfg: CodecConfig,
    steps: int = 200,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    codec: LatentCodec | None = None,
) -> LatentCodec:
    """Fit the trained-vae codec on (B, F, C, H, W) videos and (B, M) waves.

    On a non-finite loss the parameters are restored to the last finite step
    and NumericalError is raised.
    """
    if cfg.mode != "trained-vae":
        raise ContractError("train_vae requires codec mode 'trained-vae'")
    gen = torch.Generator().manual_seed(seed)
    if codec is None:
        codec = LatentCodec(cfg)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            init_weights(codec.video_vae)
            init_weights(codec.audio_vae)
    params = list(codec.video_vae.parameters()) + list(codec.audio_vae.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    n = videos.shape[0]
    last_good = copy.deepcopy(codec.state_tensors())
    for step in range(steps):
        idx = torch.randint(n, (min(batch_size, n),), generator=gen)
        loss = vae_loss(codec, videos[idx], audios[idx], cfg.beta, gen)
        if not torch.isfinite(loss):
            codec.load_state_tensors(last_good)
            raise NumericalError(f"VAE loss diverged at step {step}", step=step)
        last_good = copy.deepcopy(codec.state_tensors())
        opt.zero_grad()
        loss.backward()
        opt.step()
    return codec
