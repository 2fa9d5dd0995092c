"""Deterministic paired video/audio/caption samples: a coloured ball bouncing
on a floor, with a tone burst at every floor contact.

All randomness comes from splitmix64 seeded per sample, so any sample can be
regenerated on its own from ``master_seed + index``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .codec import snap_to_lattice
from .errors import ContractError
from .text import COLORS, SPEEDS

MASK64 = (1 << 64) - 1

FPS = 8
SAMPLE_RATE = 8000
DURATION = 2.0
FRAMES = 16
SIZE = 32
BURST_SECONDS = 0.1
BURST_AMPLITUDE = 0.8

TONE_HZ = {"red": 330.0, "green": 440.0, "blue": 550.0}
RGB = {"red": (0.95, 0.15, 0.1), "green": (0.1, 0.9, 0.15), "blue": (0.15, 0.25, 0.95)}

# gravity (screen heights / s^2), impacts before the ball settles, parameter ranges
PHYSICS = {
    "slow": dict(gravity=3.0, bounces=2, height=(0.6, 0.9), restitution=(0.45, 0.6)),
    "fast": dict(gravity=10.0, bounces=4, height=(0.25, 0.35), restitution=(0.88, 0.95)),
}


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()


@dataclass(frozen=True)
class SceneParams:
    color: str
    speed: str
    height: float
    restitution: float
    x_pos: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.color not in COLORS or self.speed not in SPEEDS:
            raise ContractError(f"unknown color/speed {self.color!r}/{self.speed!r}")
        if not 0.0 <= self.height <= 1.0 or not 0.0 <= self.restitution <= 1.0:
            raise ContractError("height and restitution must lie in [0, 1]")

    @property
    def frequency(self) -> float:
        return TONE_HZ[self.color]

    @property
    def gravity(self) -> float:
        return PHYSICS[self.speed]["gravity"]

    @property
    def max_impacts(self) -> int:
        return PHYSICS[self.speed]["bounces"]

    @property
    def caption(self) -> str:
        return f"a {self.color} ball bouncing {self.speed}"

    @classmethod
    def from_seed(cls, seed: int, color: str | None = None, speed: str | None = None) -> "SceneParams":
        rng = SplitMix64(seed)
        if color is None:
            color = COLORS[rng.next_u64() % len(COLORS)]
        if speed is None:
            speed = SPEEDS[rng.next_u64() % len(SPEEDS)]
        phys = PHYSICS[speed]
        return cls(
            color=color,
            speed=speed,
            height=rng.uniform(*phys["height"]),
            restitution=rng.uniform(*phys["restitution"]),
            x_pos=rng.uniform(0.3, 0.7),
            seed=seed,
        )


def caption_to_attributes(caption: str) -> tuple[str, str]:
    words = caption.lower().split()
    color = next((w for w in words if w in COLORS), "")
    speed = next((w for w in words if w in SPEEDS), "")
    return color, speed


def impact_times(p: SceneParams) -> list[float]:
    """Closed-form floor-contact times; the ball rests after ``max_impacts``."""
    g = p.gravity
    t = math.sqrt(2.0 * p.height / g)
    v = g * t
    times = [t]
    while len(times) < p.max_impacts:
        v *= p.restitution
        flight = 2.0 * v / g
        if flight <= 0.0:
            break
        times.append(times[-1] + flight)
    return [x for x in times if x < DURATION]


def height_at(p: SceneParams, t: np.ndarray) -> np.ndarray:
    g = p.gravity
    times = impact_times(p)
    h = np.zeros_like(t, dtype=np.float64)
    before = t < times[0]
    h[before] = p.height - 0.5 * g * t[before] ** 2
    v = g * times[0]
    for k in range(len(times) - 1):
        v *= p.restitution
        seg = (t >= times[k]) & (t < times[k + 1])
        dt = t[seg] - times[k]
        h[seg] = v * dt - 0.5 * g * dt**2
    return np.clip(h, 0.0, 1.0)


def ball_center(p: SceneParams, t: np.ndarray, size: int = SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-space centre (row, col); rows grow downward, the floor is the bottom edge."""
    r = radius(size)
    rows = (size - r) - height_at(p, t) * (size - 2 * r - 2)
    cols = np.full_like(rows, p.x_pos * size)
    return rows, cols


def radius(size: int) -> float:
    return 3.0 * size / SIZE


def render_video(p: SceneParams, frames: int = FRAMES, size: int = SIZE, fps: int = FPS) -> Tensor:
    t = np.arange(frames) / fps
    rows, cols = ball_center(p, t, size)
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    r = radius(size)
    rgb = np.asarray(RGB[p.color])
    video = np.zeros((frames, 3, size, size))
    for f in range(frames):
        dist = np.hypot(yy - rows[f], xx - cols[f])
        cover = np.clip(r + 0.5 - dist, 0.0, 1.0)
        video[f] = rgb[:, None, None] * cover[None]
    return snap_to_lattice(torch.from_numpy(video))


def tone_burst(freq: float, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    n = int(round(BURST_SECONDS * sample_rate))
    k = np.arange(n)
    window = 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))
    return BURST_AMPLITUDE * window * np.sin(2.0 * np.pi * freq * k / sample_rate)


def render_audio(p: SceneParams, samples: int = int(DURATION * SAMPLE_RATE), sample_rate: int = SAMPLE_RATE) -> Tensor:
    y = np.zeros(samples)
    burst = tone_burst(p.frequency, sample_rate)
    for t in impact_times(p):
        start = int(round(t * sample_rate))
        end = min(samples, start + burst.size)
        y[start:end] += burst[: end - start]
    return torch.from_numpy(y).to(torch.float32)


@dataclass
class MediaPair:
    video: Tensor  # (F, 3, H, W) in [0, 1]
    audio: Tensor  # (M,) in [-1, 1]
    caption: str
    impact_frames: list[int]
    impact_times: list[float] = field(default_factory=list)
    params: SceneParams | None = None


def generate_sample(p: SceneParams, frames: int = FRAMES, size: int = SIZE) -> MediaPair:
    times = impact_times(p)
    return MediaPair(
        video=render_video(p, frames, size),
        audio=render_audio(p),
        caption=p.caption,
        impact_frames=[min(int(round(t * FPS)), frames - 1) for t in times],
        impact_times=times,
        params=p,
    )


COMBOS = [(c, s) for s in SPEEDS for c in COLORS]


class Split(list):
    """A list of MediaPair with stacking helpers."""

    def videos(self) -> Tensor:
        return torch.stack([m.video for m in self])

    def audios(self) -> Tensor:
        return torch.stack([m.audio for m in self])

    def captions(self) -> list[str]:
        return [m.caption for m in self]


@dataclass
class Splits:
    train: Split
    val: Split
    test: Split


def split_seeds(n_train: int, n_val: int, n_test: int, master_seed: int) -> dict[str, list[int]]:
    base = [0, n_train, n_train + n_val]
    return {
        name: [master_seed + off + i for i in range(n)]
        for name, off, n in zip(("train", "val", "test"), base, (n_train, n_val, n_test))
    }


def make_split(seeds: list[int]) -> Split:
    out = Split()
    for i, seed in enumerate(seeds):
        color, speed = COMBOS[i % len(COMBOS)]
        out.append(generate_sample(SceneParams.from_seed(seed, color, speed)))
    return out


def make_splits(n_train: int = 512, n_val: int = 64, n_test: int = 64, master_seed: int = 0) -> Splits:
    """Three disjoint splits; each cycles through all six (color, speed) combos."""
    if min(n_train, n_val, n_test) < 1:
        raise ContractError("split sizes must be >= 1")
    seeds = split_seeds(n_train, n_val, n_test, master_seed)
    return Splits(*(make_split(seeds[k]) for k in ("train", "val", "test")))
