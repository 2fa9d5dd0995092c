"""Rule-based probes and fixed-feature metrics for generated audio/video pairs.

Synchronization is measured between audio onsets (short-time energy) and
visual floor contacts (disc centroid tracking). Distribution similarity is a
Fréchet distance over seeded random projections of hand-made features.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from torch import Tensor

from .errors import ContractError, ShapeError
from .synth import DURATION, FPS, RGB, SAMPLE_RATE, TONE_HZ, caption_to_attributes

HOP_SECONDS = 0.01
ONSET_RATIO = 4.0
ONSET_FLOOR = 1e-5  # absolute energy floor so silence and faint noise yield no onsets
REFRACTORY_SECONDS = 0.05
IMPACT_REFRACTORY = 2
DISC_THRESHOLD = 0.25
HIT_FRAMES = 2
FEATURE_DIM = 16
REGULARIZER = 1e-6
FAST_MIN_IMPACTS = 3


def _np(x: Tensor | np.ndarray) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


# detectors ---------------------------------------------------------------------


def short_time_energy(y, sample_rate: int = SAMPLE_RATE, hop: float = HOP_SECONDS) -> np.ndarray:
    y = _np(y).reshape(-1)
    n = int(round(hop * sample_rate))
    frames = y.size // n
    if frames == 0:
        return np.zeros(0)
    return np.mean(y[: frames * n].reshape(frames, n) ** 2, axis=1)


def detect_audio_onsets(y, sample_rate: int = SAMPLE_RATE) -> list[float]:
    """Onset times (s) where 10 ms energy rises above 4x its median."""
    energy = short_time_energy(y, sample_rate)
    if energy.size == 0:
        return []
    thr = max(ONSET_RATIO * float(np.median(energy)), ONSET_FLOOR)
    above = energy > thr
    refractory = int(round(REFRACTORY_SECONDS / HOP_SECONDS))
    onsets: list[float] = []
    last = -refractory - 1
    for k in range(energy.size):
        rising = above[k] and (k == 0 or not above[k - 1])
        if rising and k - last > refractory:
            onsets.append(k * HOP_SECONDS)
            last = k
    return onsets


def disc_track(video) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame centroid row of bright pixels; returns (rows, valid) with NaN rows skipped."""
    v = _np(video)
    if v.ndim != 4:
        raise ShapeError(f"expected (F, C, H, W) video, got {v.shape}")
    inten = v.max(axis=1)
    weight = np.where(inten > DISC_THRESHOLD, inten, 0.0)
    mass = weight.sum(axis=(1, 2))
    rows_idx = np.arange(v.shape[2]) + 0.5
    valid = mass > 0
    rows = np.full(v.shape[0], np.nan)
    rows[valid] = (weight[valid].sum(axis=2) @ rows_idx) / mass[valid]
    return rows, valid


def detect_visual_impacts(video) -> list[int]:
    """Frames where the disc reaches a local lowest point in the lower half of its range."""
    rows, valid = disc_track(video)
    idx = np.flatnonzero(valid)
    if idx.size < 3:
        return []
    y = rows[idx]
    lo, hi = y.min(), y.max()
    if hi - lo < 1.0:
        return []
    mid = lo + 0.5 * (hi - lo)
    impacts: list[int] = []
    for j in range(1, idx.size - 1):
        if y[j] > y[j - 1] and y[j] >= y[j + 1] and y[j] >= mid:
            f = int(idx[j])
            if not impacts or f - impacts[-1] > IMPACT_REFRACTORY:
                impacts.append(f)
    return impacts


# synchronization ---------------------------------------------------------------


@dataclass
class SyncResult:
    mean_error: float
    hit_rate: float
    matched: int
    unmatched: int
    skipped_frames: int = 0


def match_events(a: Sequence[float], b: Sequence[float]) -> list[tuple[int, int, float]]:
    """Greedy nearest-first one-to-one matching; returns (i, j, |a_i - b_j|)."""
    pairs = sorted((abs(x - y), i, j) for i, x in enumerate(a) for j, y in enumerate(b))
    used_a, used_b, out = set(), set(), []
    for d, i, j in pairs:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            out.append((i, j, d))
    return out


def sync_from_events(
    onsets: Sequence[float], impacts: Sequence[float], penalty: float = DURATION, window: float = HIT_FRAMES / FPS
) -> SyncResult:
    matches = match_events(onsets, impacts)
    unmatched = len(onsets) + len(impacts) - 2 * len(matches)
    total = len(matches) + unmatched
    if total == 0:
        return SyncResult(0.0, 1.0, 0, 0)
    err = (sum(d for _, _, d in matches) + penalty * unmatched) / total
    hits = sum(1 for _, _, d in matches if d <= window + 1e-9)
    return SyncResult(err, hits / total, len(matches), unmatched)


def onset_sync_error(video, audio, fps: int = FPS, sample_rate: int = SAMPLE_RATE) -> SyncResult:
    onsets = detect_audio_onsets(audio, sample_rate)
    frames = detect_visual_impacts(video)
    res = sync_from_events(onsets, [f / fps for f in frames])
    _, valid = disc_track(video)
    res.skipped_frames = int((~valid).sum())
    return res


# Fréchet distance ----------------------------------------------------------------


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_stats(a, b) -> tuple[float, bool]:
    """Fréchet distance between Gaussian fits of two feature sets, plus a flag
    that is True when a covariance was rank-deficient and got regularized."""
    a, b = _np(a), _np(b)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if min(len(a), len(b)) < 2:
        raise ContractError("need at least two samples per set")
    d = a.shape[1]
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    regularized = False
    for c, n in ((cov_a, len(a)), (cov_b, len(b))):
        w = np.linalg.eigvalsh(c)
        if n <= d or w.min() <= 1e-12 * max(w.max(), 1.0):
            regularized = True
    if regularized:
        cov_a = cov_a + REGULARIZER * np.eye(d)
        cov_b = cov_b + REGULARIZER * np.eye(d)
    root_a = _sqrtm_psd(cov_a)
    cross = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    tr_cross = np.sqrt(np.clip(cross, 0.0, None)).sum()
    dist = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(dist, 0.0), regularized


def frechet_distance(a, b) -> float:
    return frechet_stats(a, b)[0]


def _projection(n_in: int, seed: int, d: int = FEATURE_DIM) -> np.ndarray:
    gen = np.random.default_rng(seed)
    return gen.standard_normal((n_in, d)) / math.sqrt(n_in)


def video_raw_features(video, bins: int = 8) -> np.ndarray:
    """Per-frame mean colour plus a histogram of absolute frame-to-frame change."""
    v = _np(video)
    mean_color = v.mean(axis=(2, 3)).reshape(-1)
    diff = np.abs(np.diff(v, axis=0)).max(axis=1).reshape(-1)
    hist, _ = np.histogram(np.clip(diff, 0, 1), bins=bins, range=(0.0, 1.0))
    hist = np.log1p(hist / max(diff.size, 1) * 1000.0)
    return np.concatenate([mean_color, hist])


def audio_raw_features(y, sample_rate: int = SAMPLE_RATE, bands: int = 24, n_fft: int = 256) -> np.ndarray:
    """Mean and std over time of log energies in log-spaced frequency bands."""
    y = _np(y).reshape(-1)
    hop = n_fft // 2
    frames = max(1, 1 + (y.size - n_fft) // hop)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(frames)[:, None]
    padded = np.pad(y, (0, max(0, idx.max() + 1 - y.size)))
    spec = np.abs(np.fft.rfft(padded[idx] * np.hanning(n_fft), axis=1)) ** 2
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = np.geomspace(60.0, sample_rate / 2, bands + 1)
    band_e = np.stack(
        [spec[:, (freqs >= lo) & (freqs < hi)].sum(axis=1) for lo, hi in zip(edges[:-1], edges[1:])], axis=1
    )
    logs = np.log(band_e + 1e-8)
    return np.concatenate([logs.mean(0), logs.std(0)])


def project_features(raw: np.ndarray, seed: int, d: int = FEATURE_DIM) -> np.ndarray:
    raw = np.atleast_2d(raw)
    return raw @ _projection(raw.shape[1], seed, d)


def video_features(videos: Sequence, seed: int = 0) -> np.ndarray:
    return project_features(np.stack([video_raw_features(v) for v in videos]), seed)


def audio_features(audios: Sequence, seed: int = 0) -> np.ndarray:
    return project_features(np.stack([audio_raw_features(a) for a in audios]), seed + 1)


# caption probes -------------------------------------------------------------------


@dataclass
class CaptionMatch:
    color_hit: bool
    speed_hit: bool
    audio_color_hit: bool
    predicted_color: str
    predicted_speed: str
    audio_color: str
    no_color: bool = False


def video_color(video) -> str:
    """Colour whose reference RGB best matches the mean chroma of bright pixels; '' if none."""
    v = _np(video)
    inten = v.max(axis=1, keepdims=True)
    mask = inten > DISC_THRESHOLD
    if not mask.any():
        return ""
    mean = (v * mask).sum(axis=(0, 2, 3)) / mask.sum()
    chroma = mean / (np.linalg.norm(mean) + 1e-12)
    refs = {c: np.asarray(rgb) / np.linalg.norm(rgb) for c, rgb in RGB.items()}
    return max(refs, key=lambda c: float(chroma @ refs[c]))


def audio_color(y, sample_rate: int = SAMPLE_RATE) -> str:
    y = _np(y).reshape(-1)
    if not np.any(np.abs(y) > 1e-6):
        return ""
    spec = np.abs(np.fft.rfft(y))
    freqs = np.fft.rfftfreq(y.size, 1.0 / sample_rate)
    peak = freqs[int(np.argmax(spec[1:])) + 1]
    return min(TONE_HZ, key=lambda c: abs(TONE_HZ[c] - peak))


def caption_match(video, audio, caption: str) -> CaptionMatch:
    want_color, want_speed = caption_to_attributes(caption)
    col = video_color(video)
    speed = "fast" if len(detect_visual_impacts(video)) >= FAST_MIN_IMPACTS else "slow"
    acol = audio_color(audio)
    return CaptionMatch(
        color_hit=bool(col) and col == want_color,
        speed_hit=speed == want_speed,
        audio_color_hit=bool(acol) and acol == want_color,
        predicted_color=col,
        predicted_speed=speed,
        audio_color=acol,
        no_color=not col,
    )


# report -----------------------------------------------------------------------------


@dataclass
class EvalReport:
    onset_sync_error_mean: float
    onset_sync_hit_rate: float
    frechet_audio: float
    frechet_video: float
    caption_color_acc: float
    caption_speed_acc: float
    caption_audio_color_acc: float = 0.0
    frechet_regularized: bool = False
    seed: int = 0
    samples: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def summary(self) -> str:
        return (
            f"sync_err={self.onset_sync_error_mean:.4f}s hit={self.onset_sync_hit_rate:.3f} "
            f"FD_audio={self.frechet_audio:.4f} FD_video={self.frechet_video:.4f} "
            f"color_acc={self.caption_color_acc:.3f} speed_acc={self.caption_speed_acc:.3f}"
        )


def evaluate(
    videos: Sequence,
    audios: Sequence,
    captions: Sequence[str],
    ref_videos: Sequence,
    ref_audios: Sequence,
    seed: int = 0,
) -> EvalReport:
    if not (len(videos) == len(audios) == len(captions)) or not videos:
        raise ContractError("generated videos, audios and captions must be equal-length and nonempty")
    records = []
    for i, (v, a, c) in enumerate(zip(videos, audios, captions)):
        s = onset_sync_error(v, a)
        m = caption_match(v, a, c)
        records.append({"index": i, "caption": c, **asdict(s), **asdict(m)})
    fa, reg_a = frechet_stats(audio_features(audios, seed), audio_features(ref_audios, seed))
    fv, reg_v = frechet_stats(video_features(videos, seed), video_features(ref_videos, seed))
    n = len(records)
    return EvalReport(
        onset_sync_error_mean=sum(r["mean_error"] for r in records) / n,
        onset_sync_hit_rate=sum(r["hit_rate"] for r in records) / n,
        frechet_audio=fa,
        frechet_video=fv,
        caption_color_acc=sum(r["color_hit"] for r in records) / n,
        caption_speed_acc=sum(r["speed_hit"] for r in records) / n,
        caption_audio_color_acc=sum(r["audio_color_hit"] for r in records) / n,
        frechet_regularized=reg_a or reg_v,
        seed=seed,
        samples=records,
    )


def sweep_table(reports: dict[float, EvalReport]) -> str:
    """Plain-text per-guidance table of the headline metrics."""
    head = "w\tsync_err\thit_rate\tfd_audio\tfd_video\tcolor_acc\tspeed_acc"
    rows = [
        f"{w:g}\t{r.onset_sync_error_mean:.4f}\t{r.onset_sync_hit_rate:.3f}\t{r.frechet_audio:.4f}"
        f"\t{r.frechet_video:.4f}\t{r.caption_color_acc:.3f}\t{r.caption_speed_acc:.3f}"
        for w, r in sorted(reports.items())
    ]
    return "\n".join([head, *rows]) + "\n"


def guidance_sweep(
    generate: Callable[[float], tuple[list, list, list[str]]],
    ref_videos: Sequence,
    ref_audios: Sequence,
    weights: Sequence[float] = (1.0, 2.0, 4.0, 6.0, 8.0),
    seed: int = 0,
) -> dict[float, EvalReport]:
    """Evaluate ``generate(w) -> (videos, audios, captions)`` at each guidance weight."""
    return {float(w): evaluate(*generate(float(w)), ref_videos, ref_audios, seed) for w in weights}
