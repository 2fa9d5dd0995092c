"""Joint text-to-audio-video generation with rectified flow over a dual
diffusion transformer, at desk scale."""

from .codec import CodecConfig, LatentCodec
from .config import RunConfig
from .model import DualDiT, DualVelocity, TowerConfig
from .rfm import Mode, SampleRequest, cfg_velocity, euler_sample, fm_loss, interpolate, ot_pair, v2a_inversion_sample, velocity_target
from .text import TextBatch, TextEncoder, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "CodecConfig",
    "DualDiT",
    "DualVelocity",
    "LatentCodec",
    "Mode",
    "RunConfig",
    "SampleRequest",
    "TextBatch",
    "TextEncoder",
    "TowerConfig",
    "Vocabulary",
    "cfg_velocity",
    "euler_sample",
    "fm_loss",
    "interpolate",
    "ot_pair",
    "v2a_inversion_sample",
    "velocity_target",
]
