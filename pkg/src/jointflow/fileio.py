"""Bit-exact file formats: tensor files, 16-bit PCM WAV, binary PPM frame
directories, and the on-disk dataset layout. Every writer is write-then-rename.
"""

from __future__ import annotations

import json
import math
import os
import re
import struct
import tempfile
import wave
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import DomainError, FormatError
from .synth import FPS, SAMPLE_RATE, MediaPair, Split

TENSOR_MAGIC = b"SYTF"
TENSOR_VERSION = 1
# code -> (torch dtype, little-endian numpy dtype)
DTYPES = {
    0: (torch.float32, "<f4"),
    1: (torch.float64, "<f8"),
    2: (torch.int64, "<i8"),
    3: (torch.uint8, "u1"),
}
DTYPE_CODES = {t: c for c, (t, _) in DTYPES.items()}
PCM_MAX = 32767


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


# tensor files -------------------------------------------------------------------


def encode_tensor(t: Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    if t.dtype not in DTYPE_CODES:
        raise FormatError(f"unsupported tensor dtype {t.dtype}")
    code = DTYPE_CODES[t.dtype]
    head = TENSOR_MAGIC + struct.pack("<HH", TENSOR_VERSION, t.dim())
    head += struct.pack(f"<{t.dim()}I", *t.shape) + struct.pack("<B", code)
    return head + t.numpy().astype(DTYPES[code][1], copy=False).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one tensor starting at ``offset``; returns (tensor, end offset)."""
    try:
        if buf[offset : offset + 4] != TENSOR_MAGIC:
            raise FormatError("bad tensor magic")
        version, rank = struct.unpack_from("<HH", buf, offset + 4)
        if version != TENSOR_VERSION:
            raise FormatError(f"unsupported tensor file version {version}")
        pos = offset + 8
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (code,) = struct.unpack_from("<B", buf, pos)
        pos += 1
    except struct.error as exc:
        raise FormatError("truncated tensor header") from exc
    if code not in DTYPES:
        raise FormatError(f"unknown tensor dtype code {code}")
    dtype, np_dtype = DTYPES[code]
    nbytes = math.prod(dims) * np.dtype(np_dtype).itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated tensor payload: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=np_dtype, count=math.prod(dims), offset=pos).reshape(dims)
    return torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True)).to(dtype), pos + nbytes


def write_tensor(t: Tensor, path: str | Path) -> None:
    atomic_write(path, encode_tensor(t))


def read_tensor(path: str | Path) -> Tensor:
    buf = Path(path).read_bytes()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor payload")
    return t


# WAV ------------------------------------------------------------------------------


def quantize_pcm16(y) -> np.ndarray:
    """Round-half-away-from-zero to int16 after scaling by 32767."""
    y = np.asarray(y.detach().cpu() if isinstance(y, Tensor) else y, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(y)) or np.any(np.abs(y) > 1.0):
        raise DomainError("audio samples must be finite and lie in [-1, 1]")
    scaled = y * PCM_MAX
    return (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype("<i2")


def write_wav(y, path: str | Path, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = quantize_pcm16(y)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        with wave.open(tmp, "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(sample_rate)
            w.writeframes(pcm.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_wav(path: str | Path, expected_rate: int | None = None) -> Tensor:
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE" or w.getsampwidth() != 2 or w.getnchannels() != 1:
                raise FormatError(f"{path}: only mono 16-bit PCM is supported")
            if expected_rate is not None and w.getframerate() != expected_rate:
                raise FormatError(f"{path}: sample rate {w.getframerate()}, expected {expected_rate}")
            n = w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError, struct.error) as exc:
        raise FormatError(f"{path}: malformed WAV ({exc})") from exc
    if len(raw) != 2 * n:
        raise FormatError(f"{path}: truncated WAV data chunk")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return torch.from_numpy(pcm / PCM_MAX).to(torch.float32)


# PPM frames -------------------------------------------------------------------------


def quantize_u8(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(frame) -> bytes:
    """One (3, H, W) frame in [0, 1] as binary P6 with maxval 255."""
    f = np.asarray(frame.detach().cpu() if isinstance(frame, Tensor) else frame, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] != 3:
        raise FormatError(f"PPM frames must be (3, H, W), got {f.shape}")
    _, h, w = f.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + quantize_u8(f.transpose(1, 2, 0)).tobytes()


def decode_ppm(buf: bytes, name: str = "frame") -> Tensor:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(buf, pos)
        if m is None:
            raise FormatError(f"{name}: malformed PPM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P6":
        raise FormatError(f"{name}: not a binary PPM (P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{name}: malformed PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{name}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    data = buf[pos:]
    if len(data) != 3 * w * h:
        raise FormatError(f"{name}: expected {3 * w * h} pixel bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def frame_name(i: int, total: int) -> str:
    return f"{i:0{max(3, len(str(total - 1)))}d}.ppm"


def write_frames(video, directory: str | Path) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(video):
        p = d / frame_name(i, len(video))
        atomic_write(p, encode_ppm(frame))
        paths.append(p)
    return paths


def read_frames(directory: str | Path) -> Tensor:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d}: frame directory not found")
    found = {}
    for p in d.iterdir():
        if p.suffix == ".ppm" and p.stem.isdigit():
            found[int(p.stem)] = p
    if not found:
        raise FormatError(f"{d}: no PPM frames")
    width = max(3, len(max(found.values(), key=lambda p: len(p.stem)).stem))
    for i in range(max(found) + 1):
        if i not in found:
            raise FormatError(f"missing frame {i:0{width}d}")
    frames = [decode_ppm(found[i].read_bytes(), found[i].name) for i in sorted(found)]
    if len({f.shape for f in frames}) != 1:
        raise FormatError(f"{d}: frames have differing sizes")
    return torch.stack(frames)


# dataset layout -------------------------------------------------------------------


def write_media(pair: MediaPair, directory: str | Path) -> None:
    d = Path(directory)
    write_frames(pair.video, d / "frames")
    write_wav(pair.audio, d / "audio.wav")
    atomic_write_text(d / "caption.txt", pair.caption + "\n")
    sidecar = {"impact_frames": list(pair.impact_frames), "impact_times": list(pair.impact_times), "fps": FPS}
    if pair.params is not None:
        p = pair.params
        sidecar["params"] = {
            "color": p.color, "speed": p.speed, "height": p.height,
            "restitution": p.restitution, "x_pos": p.x_pos, "seed": p.seed,
        }
    atomic_write_text(d / "impacts.json", json.dumps(sidecar, sort_keys=True) + "\n")


def read_media(directory: str | Path) -> MediaPair:
    d = Path(directory)
    try:
        caption = (d / "caption.txt").read_text(encoding="utf-8").strip()
    except OSError as exc:
        raise FormatError(f"{d}: missing caption.txt") from exc
    impacts: dict = {}
    if (d / "impacts.json").exists():
        try:
            impacts = json.loads((d / "impacts.json").read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{d}/impacts.json: {exc}") from exc
        if not isinstance(impacts, dict):
            raise FormatError(f"{d}/impacts.json: expected a JSON object")
    if not (d / "audio.wav").exists():
        raise FormatError(f"{d}: missing audio.wav")
    return MediaPair(
        video=read_frames(d / "frames"),
        audio=read_wav(d / "audio.wav"),
        caption=caption,
        impact_frames=list(impacts.get("impact_frames", [])),
        impact_times=list(impacts.get("impact_times", [])),
    )


def sample_dirs(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d}: directory not found")
    return sorted(p for p in d.iterdir() if p.is_dir() and (p / "caption.txt").exists())


def write_split(split: Split, directory: str | Path) -> None:
    for i, pair in enumerate(split):
        write_media(pair, Path(directory) / f"{i:05d}")


def read_split(directory: str | Path) -> Split:
    dirs = sample_dirs(directory)
    if not dirs:
        raise FormatError(f"{directory}: no samples")
    return Split(read_media(p) for p in dirs)
