"""Checkpoint container.

Layout (little-endian): magic ``SYCK``, u16 version, u32 metadata length,
UTF-8 JSON metadata, u32 tensor count, then per tensor a u16 name length,
the UTF-8 name and one tensor-file record; finally a CRC-32 of all preceding
bytes. Tensors are written in sorted name order and the JSON with sorted keys,
so saving the same state twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import Tensor

from .codec import CodecConfig, LatentCodec
from .errors import ConfigError, FormatError
from .fileio import atomic_write, decode_tensor, encode_tensor
from .model import DualDiT, TowerConfig

MAGIC = b"SYCK"
VERSION = 1


@dataclass
class Checkpoint:
    tower: TowerConfig
    codec: CodecConfig
    model_state: dict[str, Tensor]
    codec_state: dict[str, Tensor] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    trainer: dict | None = None  # optimizer, RNG and step of an in-progress stage
    torch_rng: Tensor | None = None
    extra: dict = field(default_factory=dict)

    def build_model(self) -> DualDiT:
        model = DualDiT(self.tower)
        model.load_state_dict(self.model_state)
        return model

    def build_codec(self) -> LatentCodec:
        codec = LatentCodec(self.codec)
        codec.load_state_tensors(self.codec_state)
        return codec


def from_model(model: DualDiT, codec: LatentCodec, history=None, trainer=None, extra=None) -> Checkpoint:
    return Checkpoint(
        tower=model.cfg,
        codec=codec.cfg,
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        codec_state=codec.state_tensors(),
        history=list(history or []),
        trainer=trainer,
        torch_rng=torch.get_rng_state(),
        extra=dict(extra or {}),
    )


def _split_trainer(trainer: dict | None) -> tuple[dict | None, dict[str, Tensor]]:
    """Move tensors out of the trainer state so the rest is plain JSON."""
    if trainer is None:
        return None, {}
    tensors = {"trainer.generator": trainer["generator"]}
    opt = trainer["optimizer"]
    meta_state = {}
    for pid, st in opt["state"].items():
        keys = []
        for k, v in st.items():
            if isinstance(v, Tensor):
                tensors[f"trainer.optim.{pid}.{k}"] = v
                keys.append(k)
        meta_state[str(pid)] = sorted(keys)
    meta = {k: v for k, v in trainer.items() if k not in ("generator", "optimizer")}
    meta["optimizer"] = {"param_groups": opt["param_groups"], "state_keys": meta_state}
    return meta, tensors


def _join_trainer(meta: dict | None, tensors: dict[str, Tensor]) -> dict | None:
    if meta is None:
        return None
    opt_meta = meta["optimizer"]
    state = {}
    for pid, keys in opt_meta["state_keys"].items():
        state[int(pid)] = {k: tensors[f"trainer.optim.{pid}.{k}"] for k in keys}
    groups = []
    for g in opt_meta["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    out = {k: v for k, v in meta.items() if k != "optimizer"}
    out["optimizer"] = {"state": state, "param_groups": groups}
    out["generator"] = tensors["trainer.generator"]
    return out


def encode_checkpoint(ck: Checkpoint) -> bytes:
    trainer_meta, tensors = _split_trainer(ck.trainer)
    tensors.update({f"model.{k}": v for k, v in ck.model_state.items()})
    tensors.update({f"codec.{k}": v for k, v in ck.codec_state.items()})
    if ck.torch_rng is not None:
        tensors["rng.torch"] = ck.torch_rng
    meta = {
        "tower": asdict(ck.tower),
        "codec": asdict(ck.codec),
        "history": ck.history,
        "trainer": trainer_meta,
        "extra": ck.extra,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, encode_tensor(tensors[name])]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    if len(buf) < 10:
        raise FormatError("truncated checkpoint")
    version, meta_len = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(buf) < 14 + meta_len:
        raise FormatError("truncated checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint is truncated or corrupt (CRC mismatch)")
    pos = 10
    try:
        meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}") from exc
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors: dict[str, Tensor] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            tensors[name], pos = decode_tensor(body, pos)
    except struct.error as exc:
        raise FormatError("truncated checkpoint") from exc
    if pos != len(body):
        raise FormatError("trailing bytes in checkpoint")

    def sub(prefix: str) -> dict[str, Tensor]:
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    try:
        tower = TowerConfig(**meta["tower"])
        codec = CodecConfig(**meta["codec"])
    except TypeError as exc:
        raise FormatError(f"checkpoint config has unexpected fields: {exc}") from exc
    return Checkpoint(
        tower=tower,
        codec=codec,
        model_state=sub("model."),
        codec_state=sub("codec."),
        history=meta["history"],
        trainer=_join_trainer(meta["trainer"], tensors),
        torch_rng=tensors.get("rng.torch"),
        extra=meta.get("extra", {}),
    )


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    atomic_write(path, encode_checkpoint(ck))


def load_checkpoint(path: str | Path, expect_tower: TowerConfig | None = None) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    ck = decode_checkpoint(buf)
    if expect_tower is not None and asdict(expect_tower) != asdict(ck.tower):
        diff = {k: (v, getattr(ck.tower, k)) for k, v in asdict(expect_tower).items() if getattr(ck.tower, k) != v}
        raise ConfigError(f"checkpoint tower config differs from the requested one: {diff}")
    return ck
