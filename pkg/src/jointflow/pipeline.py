"""From captions (and optionally a reference video) to decoded frames and audio."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .codec import LatentCodec
from .errors import ConfigError, ContractError
from .model import DualDiT
from .rfm import LatentPair, Mode, SampleRequest, draw_prior, euler_sample
from .synth import DURATION, FRAMES, SAMPLE_RATE, SIZE
from .text import TextBatch, Vocabulary


@dataclass
class Generated:
    video: Tensor | None  # (F, 3, H, W)
    audio: Tensor  # (M,)
    caption: str
    latents: LatentPair


def latent_shapes(codec: LatentCodec, height: int = SIZE, width: int = SIZE) -> tuple[tuple, tuple]:
    shape_v = codec.cfg.video_latent_shape(FRAMES, height, width)
    shape_a = codec.cfg.audio_latent_shape(int(DURATION * SAMPLE_RATE))
    return shape_v, shape_a


def _priors(shape_v, shape_a, seeds: Sequence[int]):
    vs, as_ = [], []
    for s in seeds:
        v, a = draw_prior(shape_v, shape_a, s)
        vs.append(v)
        as_.append(a)
    return (None if shape_v is None else torch.stack(vs)), torch.stack(as_)


def sample_batch(
    model: DualDiT,
    codec: LatentCodec,
    vocab: Vocabulary,
    captions: Sequence[str],
    seeds: Sequence[int],
    mode: Mode | str = Mode.T2AV,
    guidance: float = 6.0,
    steps: int = 50,
    resolution: tuple[int, int] | None = None,
    videos: Tensor | None = None,
    decode: bool = True,
    video_latents: Tensor | None = None,
) -> list[Generated]:
    """Sample one pair per (caption, seed). For latent-inversion video-to-audio
    the known video is given as pixels ``videos`` (B, F, 3, H, W) or directly
    as ``video_latents``."""
    mode = Mode(mode)
    if len(captions) != len(seeds) or not captions:
        raise ContractError("captions and seeds must be nonempty and of equal length")
    if mode is Mode.AUDIO_ONLY and not model.cfg.audio_only:
        raise ConfigError("audio-only sampling needs a model built with audio_only=True")
    if mode is not Mode.AUDIO_ONLY and model.cfg.audio_only:
        raise ConfigError("this model has no video tower; use audio-only mode")
    h, w = resolution if resolution is not None else (SIZE, SIZE)
    shape_v, shape_a = latent_shapes(codec, h, w)
    if mode is Mode.AUDIO_ONLY:
        shape_v = None
    target = None
    if mode is Mode.V2A_INVERSION:
        if video_latents is not None:
            target = video_latents
        elif videos is not None:
            with torch.no_grad():
                target = codec.encode_video(videos, sample=False)
        else:
            raise ContractError("video-to-audio needs the known video")
        shape_v = tuple(target.shape[1:])
    x0v, x0a = _priors(shape_v, shape_a, seeds)
    text = TextBatch.from_captions(vocab, list(captions))
    model.eval()
    out = euler_sample(model, x0v, x0a, text, guidance, steps, video_target=target)
    results = []
    with torch.no_grad():
        vids = codec.decode_video(out.video) if decode and out.video is not None else None
        auds = codec.decode_audio(out.audio) if decode else out.audio
    for i, cap in enumerate(captions):
        lat = LatentPair(None if out.video is None else out.video[i], out.audio[i])
        results.append(Generated(None if vids is None else vids[i], auds[i], cap, lat))
    return results


def run_request(model: DualDiT, codec: LatentCodec, vocab: Vocabulary, req: SampleRequest, video: Tensor | None = None) -> Generated:
    """Single request; for V2A either ``req.video_latent`` or the pixel ``video`` must be set."""
    if Mode(req.mode) is Mode.V2A_INVERSION and req.video_latent is None and video is not None:
        with torch.no_grad():
            req.video_latent = codec.encode_video(video, sample=False)
    req.validate()
    latents = None if req.video_latent is None else req.video_latent[None]
    return sample_batch(
        model, codec, vocab, [req.caption], [req.seed], req.mode, req.guidance, req.steps,
        req.resolution, video_latents=latents,
    )[0]
