"""Dual diffusion transformer: a video tower with factorized spatial/temporal
attention and an audio tower conditioned, layer by layer, on adapted video
features plus a timestep token.

Information flows one way only: video features condition the audio tower, the
video tower never sees the audio latent.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .errors import ConfigError, DomainError, ShapeError
from .layers import MLP, Attention, LayerNorm, TimestepEmbedder, modulate
from .numerics import INIT_STD, init_weights
from .text import TextBatch, TextEncoder

GROUPS = ("video_tower", "audio_tower", "adaptors", "text_encoder")


@dataclass
class TowerConfig:
    layers: int = 4
    e_v: int = 64
    e_a: int = 64
    heads: int = 4
    head_dim: int | None = None
    patch: int = 2
    mlp_ratio: int = 4
    freq_dim: int = 64
    latent_channels: int = 192
    latent_frames: int = 4
    latent_height: int = 8
    latent_width: int = 8
    audio_dim: int = 160
    audio_len: int = 100
    vocab_size: int = 12
    use_adaptor: bool = True
    audio_text_cross_attn: bool = False
    audio_only: bool = False

    def validate(self) -> "TowerConfig":
        if self.layers < 1:
            raise ConfigError("tower.layers must be >= 1")
        if self.head_dim is None and (self.e_v % self.heads or self.e_a % self.heads):
            raise ConfigError(f"embedding dims ({self.e_v}, {self.e_a}) must be divisible by heads={self.heads}")
        if self.latent_height % self.patch or self.latent_width % self.patch:
            raise ConfigError("latent grid must be divisible by the patch size")
        if not self.use_adaptor and self.e_v != self.e_a:
            raise ConfigError("running without the modality adaptor requires e_v == e_a")
        return self

    @property
    def grid(self) -> tuple[int, int]:
        return self.latent_height // self.patch, self.latent_width // self.patch


def full_scale_preset() -> TowerConfig:
    """Full-scale tower shape. 1142 is not a multiple of 16, so heads get an
    explicit width of 72 (inner attention width 1152). Not trained here."""
    return TowerConfig(
        layers=28, e_v=1142, e_a=1142, heads=16, head_dim=72, latent_channels=4,
        latent_frames=8, latent_height=32, latent_width=32, audio_dim=1142, audio_len=100,
    )


class DualVelocity(NamedTuple):
    video: Tensor | None
    audio: Tensor | None


# rearrangements --------------------------------------------------------------


def patchify_rearrange(x: Tensor, p: int) -> Tensor:
    """(B, T, C, H, W) -> (B, T*S, C*p*p) with S = (H/p)*(W/p)."""
    b, t, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by patch {p}")
    x = x.reshape(b, t, c, h // p, p, w // p, p).permute(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(b, t * (h // p) * (w // p), c * p * p)


def unpatchify_rearrange(x: Tensor, p: int, t: int, gh: int, gw: int) -> Tensor:
    b, n, d = x.shape
    c = d // (p * p)
    if n != t * gh * gw or c * p * p != d:
        raise ShapeError(f"sequence {tuple(x.shape)} does not match grid {t}x{gh}x{gw}, patch {p}")
    x = x.reshape(b, t, gh, gw, c, p, p).permute(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(b, t, c, gh * p, gw * p)


def _to_frames(h: Tensor, t: int, s: int) -> Tensor:
    b, _, e = h.shape
    return h.reshape(b * t, s, e)


def _from_frames(h: Tensor, b: int) -> Tensor:
    bt, s, e = h.shape
    return h.reshape(b, (bt // b) * s, e)


def _to_tracks(h: Tensor, t: int, s: int) -> Tensor:
    b, _, e = h.shape
    return h.reshape(b, t, s, e).transpose(1, 2).reshape(b * s, t, e)


def _from_tracks(h: Tensor, b: int, t: int) -> Tensor:
    bs, _, e = h.shape
    s = bs // b
    return h.reshape(b, s, t, e).transpose(1, 2).reshape(b, t * s, e)


# video tower ---------------------------------------------------------------


class VideoLayer(nn.Module):
    """One spatial sub-layer, one temporal sub-layer and a feed-forward block.

    Self-attention and MLP are adaLN-modulated pre-norm blocks; text enters
    through plain pre-norm cross-attention in both sub-layers.
    """

    def __init__(self, cfg: TowerConfig):
        super().__init__()
        e, hd = cfg.e_v, cfg.head_dim
        self.mod = nn.Linear(e, 9 * e)
        self.s_norm = LayerNorm(e, affine=False)
        self.s_attn = Attention(e, cfg.heads, head_dim=hd)
        self.s_xnorm = LayerNorm(e)
        self.s_xattn = Attention(e, cfg.heads, head_dim=hd)
        self.t_norm = LayerNorm(e, affine=False)
        self.t_attn = Attention(e, cfg.heads, head_dim=hd)
        self.t_xnorm = LayerNorm(e)
        self.t_xattn = Attention(e, cfg.heads, head_dim=hd)
        self.m_norm = LayerNorm(e, affine=False)
        self.mlp = MLP(e, cfg.mlp_ratio)

    def modulation(self, c: Tensor) -> list[Tensor]:
        return list(self.mod(F.silu(c)).chunk(9, dim=-1))

    def spatial_attention(self, h: Tensor, t: int, s: int, text: Tensor, text_mask: Tensor, mod: list[Tensor]) -> Tensor:
        b = h.shape[0]
        shift, scale, gate = mod[0:3]
        x = _to_frames(modulate(self.s_norm(h), shift, scale), t, s)
        h = h + gate.unsqueeze(1) * _from_frames(self.s_attn(x), b)
        x = _to_frames(self.s_xnorm(h), t, s)
        return h + _from_frames(self.s_xattn(x, text, text_mask, repeat=t), b)

    def temporal_attention(self, h: Tensor, t: int, s: int, text: Tensor, text_mask: Tensor, mod: list[Tensor]) -> tuple[Tensor, Tensor]:
        """Returns the updated sequence and the spatially pooled features (B, T, E)."""
        b, _, e = h.shape
        shift, scale, gate = mod[3:6]
        x = _to_tracks(modulate(self.t_norm(h), shift, scale), t, s)
        h = h + gate.unsqueeze(1) * _from_tracks(self.t_attn(x), b, t)
        x = _to_tracks(self.t_xnorm(h), t, s)
        h = h + _from_tracks(self.t_xattn(x, text, text_mask, repeat=s), b, t)
        feats = h.reshape(b, t, s, e).mean(dim=2)
        return h, feats

    def feed_forward(self, h: Tensor, mod: list[Tensor]) -> Tensor:
        shift, scale, gate = mod[6:9]
        return h + gate.unsqueeze(1) * self.mlp(modulate(self.m_norm(h), shift, scale))

    def forward(self, h, t, s, text, text_mask, c):
        mod = self.modulation(c)
        h = self.spatial_attention(h, t, s, text, text_mask, mod)
        h, feats = self.temporal_attention(h, t, s, text, text_mask, mod)
        return self.feed_forward(h, mod), feats


class VideoTower(nn.Module):
    def __init__(self, cfg: TowerConfig):
        super().__init__()
        self.cfg = cfg
        e, p = cfg.e_v, cfg.patch
        gh, gw = cfg.grid
        self.t_embed = TimestepEmbedder(e, cfg.freq_dim)
        self.pre_conv = nn.Conv3d(cfg.latent_channels, e, kernel_size=3, stride=1, padding=1)
        self.patch_proj = nn.Linear(e * p * p, e)
        self.pos_t = nn.Parameter(torch.zeros(cfg.latent_frames, e))
        self.pos_s = nn.Parameter(torch.zeros(gh, gw, e))
        self.layers = nn.ModuleList([VideoLayer(cfg) for _ in range(cfg.layers)])
        self.final_norm = LayerNorm(e, affine=False)
        self.final_mod = nn.Linear(e, 2 * e)
        self.out = nn.Linear(e, cfg.latent_channels * p * p)

    def spatial_positions(self, gh: int, gw: int) -> Tensor:
        pos = self.pos_s
        if (gh, gw) != tuple(pos.shape[:2]):
            # bilinear resampling of the learned grid for unseen resolutions
            grid = pos.permute(2, 0, 1).unsqueeze(0)
            pos = F.interpolate(grid, size=(gh, gw), mode="bilinear", align_corners=False)[0].permute(1, 2, 0)
        return pos.reshape(gh * gw, -1)

    def patchify(self, z: Tensor) -> tuple[Tensor, int, int, int]:
        """Pre-conv, split into p x p patches, embed; returns (seq, T, gh, gw)."""
        b, t, c, hgt, wid = z.shape
        p = self.cfg.patch
        if hgt % p or wid % p:
            raise ShapeError(f"latent grid {hgt}x{wid} not divisible by patch {p}")
        x = self.pre_conv(z.transpose(1, 2)).transpose(1, 2)  # (B, T, E, H, W)
        seq = self.patch_proj(patchify_rearrange(x, p))
        return seq, t, hgt // p, wid // p

    def forward(self, z: Tensor, t: Tensor, text: Tensor, text_mask: Tensor) -> tuple[Tensor, list[Tensor]]:
        h, frames, gh, gw = self.patchify(z)
        s = gh * gw
        if frames != self.pos_t.shape[0]:
            raise ShapeError(f"video latent has {frames} frames, model expects {self.pos_t.shape[0]}")
        pos = self.pos_t[:, None, :] + self.spatial_positions(gh, gw)[None, :, :]
        h = h + pos.reshape(frames * s, -1)
        c = self.t_embed(t)
        feats = []
        for layer in self.layers:
            h, f = layer(h, frames, s, text, text_mask, c)
            feats.append(f)
        shift, scale = self.final_mod(F.silu(c)).chunk(2, dim=-1)
        h = self.out(modulate(self.final_norm(h), shift, scale))
        return unpatchify_rearrange(h, self.cfg.patch, frames, gh, gw), feats


# audio tower ---------------------------------------------------------------


class AudioLayer(nn.Module):
    """Post-norm block: self-attention, cross-attention, MLP, each followed by layer norm."""

    def __init__(self, cfg: TowerConfig):
        super().__init__()
        e = cfg.e_a
        self.attn = Attention(e, cfg.heads, head_dim=cfg.head_dim)
        self.norm1 = LayerNorm(e)
        self.xattn = Attention(e, cfg.heads, head_dim=cfg.head_dim)
        self.norm2 = LayerNorm(e)
        self.mlp = MLP(e, cfg.mlp_ratio)
        self.norm3 = LayerNorm(e)

    def forward(self, h: Tensor, cond: Tensor, cond_mask: Tensor | None = None) -> Tensor:
        h = self.norm1(h + self.attn(h))
        h = self.norm2(h + self.xattn(h, cond, cond_mask))
        return self.norm3(h + self.mlp(h))


class ModalityAdaptor(nn.Module):
    """Self-attention over time, layer norm, then a linear map E_v -> E_a."""

    def __init__(self, cfg: TowerConfig):
        super().__init__()
        self.attn = Attention(cfg.e_v, cfg.heads, head_dim=cfg.head_dim)
        self.norm = LayerNorm(cfg.e_v)
        self.proj = nn.Linear(cfg.e_v, cfg.e_a)

    def forward(self, f: Tensor) -> Tensor:
        return self.proj(self.norm(self.attn(f)))


class AudioTower(nn.Module):
    def __init__(self, cfg: TowerConfig):
        super().__init__()
        self.cfg = cfg
        e = cfg.e_a
        self.t_embed = TimestepEmbedder(e, cfg.freq_dim)
        self.in_proj = nn.Linear(cfg.audio_dim, e)
        self.pos = nn.Parameter(torch.zeros(cfg.audio_len, e))
        self.layers = nn.ModuleList([AudioLayer(cfg) for _ in range(cfg.layers)])
        self.text_proj = nn.Linear(cfg.e_v, e) if (cfg.audio_only or cfg.audio_text_cross_attn) and cfg.e_v != e else None
        self.final_norm = LayerNorm(e)
        self.out = nn.Linear(e, cfg.audio_dim)

    def forward(self, z: Tensor, t: Tensor, video_conds: list[Tensor] | None, text: Tensor | None, text_mask: Tensor | None) -> Tensor:
        b, length, _ = z.shape
        if length != self.pos.shape[0]:
            raise ShapeError(f"audio latent has {length} frames, model expects {self.pos.shape[0]}")
        h = self.in_proj(z) + self.pos
        t_tok = self.t_embed(t).unsqueeze(1)
        extra, extra_mask = [t_tok], [torch.ones(b, 1, dtype=torch.bool)]
        if text is not None:
            txt = self.text_proj(text) if self.text_proj is not None else text
            extra.insert(0, txt)
            extra_mask.insert(0, text_mask)
        for l, layer in enumerate(self.layers):
            parts, masks = list(extra), list(extra_mask)
            if video_conds is not None:
                v = video_conds[l]
                parts.insert(0, v)
                masks.insert(0, torch.ones(b, v.shape[1], dtype=torch.bool))
            h = layer(h, torch.cat(parts, dim=1), torch.cat(masks, dim=1))
        return self.out(self.final_norm(h))


# full model ----------------------------------------------------------------


class DualDiT(nn.Module):
    """u(z_t^V, z_t^A, t, s) -> (v^V, v^A)."""

    def __init__(self, cfg: TowerConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg.validate()
        self.text_encoder = TextEncoder(cfg.vocab_size, cfg.e_v, cfg.heads)
        self.video_tower = None if cfg.audio_only else VideoTower(cfg)
        self.adaptors = nn.ModuleList(
            [ModalityAdaptor(cfg) for _ in range(cfg.layers)] if cfg.use_adaptor and not cfg.audio_only else []
        )
        self.audio_tower = AudioTower(cfg)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int | None = None) -> None:
        if seed is None:
            self._init()
            return
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self._init()

    def _init(self) -> None:
        init_weights(self)
        for name, p in self.named_parameters():
            if name.endswith(("pos_t", "pos_s", "pos", "text_encoder.null")):
                nn.init.normal_(p, 0.0, INIT_STD)
        zero = [self.audio_tower.out]
        if self.video_tower is not None:
            zero += [self.video_tower.out, self.video_tower.final_mod]
            zero += [layer.mod for layer in self.video_tower.layers]
        for m in zero:
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    # parameter groups
    def group_modules(self) -> dict[str, nn.Module | None]:
        return {
            "video_tower": self.video_tower,
            "audio_tower": self.audio_tower,
            "adaptors": self.adaptors,
            "text_encoder": self.text_encoder,
        }

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out = {}
        for g, m in self.group_modules().items():
            out[g] = [] if m is None else [(f"{g}.{n}", p) for n, p in m.named_parameters()]
        return out

    def group_counts(self) -> dict[str, int]:
        return {g: sum(p.numel() for _, p in ps) for g, ps in self.param_groups().items()}

    def group_hashes(self) -> dict[str, str]:
        """SHA-256 over each group's parameter names and raw bytes."""
        out = {}
        for g, ps in self.param_groups().items():
            h = hashlib.sha256()
            for name, p in ps:
                h.update(name.encode())
                h.update(p.detach().cpu().contiguous().numpy().tobytes())
            out[g] = h.hexdigest()
        return out

    def video_features(self, zv, t, text_emb, text_mask):
        return self.video_tower(zv, t, text_emb, text_mask)

    def forward(
        self,
        zv: Tensor | None,
        za: Tensor | None,
        t: Tensor | float,
        text: TextBatch,
        compute_audio: bool = True,
    ) -> DualVelocity:
        cfg = self.cfg
        ref = za if zv is None else zv
        b = ref.shape[0]
        t = torch.as_tensor(t, dtype=torch.float32)
        if t.dim() == 0:
            t = t.expand(b)
        if torch.any((t < 0) | (t > 1)):
            raise DomainError("t must lie in [0, 1]")
        if zv is not None and zv.shape[2] != cfg.latent_channels:
            raise ConfigError(f"video latent has {zv.shape[2]} channels, model expects {cfg.latent_channels}")
        if za is not None and za.shape[-1] != cfg.audio_dim:
            raise ConfigError(f"audio latent has dim {za.shape[-1]}, model expects {cfg.audio_dim}")
        text_emb, text_mask = self.text_encoder(text)

        v_video, conds = None, None
        if not cfg.audio_only:
            if zv is None:
                raise ConfigError("joint model needs a video latent")
            v_video, feats = self.video_tower(zv, t, text_emb, text_mask)
            if compute_audio:
                conds = [a(f) for a, f in zip(self.adaptors, feats)] if cfg.use_adaptor else feats
        v_audio = None
        if compute_audio and za is not None:
            use_text = cfg.audio_only or cfg.audio_text_cross_attn
            v_audio = self.audio_tower(
                za, t, conds, text_emb if use_text else None, text_mask if use_text else None
            )
        return DualVelocity(v_video, v_audio)

    forward_resolution = forward

    def config_dict(self) -> dict:
        return asdict(self.cfg)
