"""Three-stage training: video pretraining, audio adaptation with the video
tower frozen, then joint fine-tuning. Each stage runs Adam on its own subset of
parameter groups with per-item text dropout.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
from dataclasses import dataclass, field
from typing import Callable

import torch
from torch import Tensor

from .codec import LatentCodec
from .config import StageConfig
from .errors import ConfigError, ContractError, NumericalError
from .model import GROUPS, DualDiT
from .rfm import couple, fm_loss
from .synth import Split
from .text import TextBatch, Vocabulary

log = logging.getLogger(__name__)

VAL_TIMES = tuple(k / 10 for k in range(1, 10))
VAL_SEED = 1234
VAL_BATCH = 16
CSV_COLUMNS = ("step", "loss_video", "loss_audio", "val_loss_video", "val_loss_audio")


class Stage(str, enum.Enum):
    VIDEO_PRETRAIN = "video"
    AUDIO_ADAPT = "audio"
    JOINT_FINETUNE = "joint"


def default_trainable(stage: Stage, model: DualDiT) -> tuple[str, ...]:
    cfg = model.cfg
    if stage is Stage.VIDEO_PRETRAIN:
        return ("video_tower", "text_encoder")
    if stage is Stage.AUDIO_ADAPT:
        # the text encoder is shared with the (frozen) video tower unless there is none
        return ("audio_tower", "adaptors", "text_encoder") if cfg.audio_only else ("audio_tower", "adaptors")
    return GROUPS


@dataclass
class StageSpec:
    stage: Stage
    steps: int
    batch_size: int = 8
    lr: float = 1e-3
    warmup: int = 100
    text_dropout: float = 0.1
    loss_weights: tuple[float, float] = (1.0, 1.0)
    val_every: int = 250
    ot_coupling: bool = True
    seed: int = 0
    trainable: tuple[str, ...] | None = None

    @classmethod
    def from_config(cls, stage: Stage | str, cfg: StageConfig, **overrides) -> "StageSpec":
        stage = Stage(stage)
        steps = {Stage.VIDEO_PRETRAIN: cfg.steps_video, Stage.AUDIO_ADAPT: cfg.steps_audio}.get(stage, cfg.steps_joint)
        kw = dict(
            stage=stage,
            steps=steps,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            warmup=cfg.warmup,
            text_dropout=cfg.text_dropout,
            loss_weights=(cfg.loss_weight_video, cfg.loss_weight_audio),
            val_every=cfg.val_every,
            ot_coupling=cfg.ot_coupling,
            seed=cfg.seed,
        )
        kw.update(overrides)
        return cls(**kw)

    def trainable_groups(self, model: DualDiT) -> tuple[str, ...]:
        groups = tuple(self.trainable) if self.trainable is not None else default_trainable(self.stage, model)
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}")
        if self.stage is Stage.AUDIO_ADAPT and "video_tower" in groups:
            raise ConfigError("the audio adaptation stage must keep the video tower frozen")
        return groups

    def frozen_groups(self, model: DualDiT) -> tuple[str, ...]:
        train = set(self.trainable_groups(model))
        return tuple(g for g in GROUPS if g not in train)

    def validate(self, model: DualDiT) -> "StageSpec":
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.val_every < 1:
            raise ConfigError("invalid stage spec: steps, batch_size, lr or val_every out of range")
        if not 0.0 <= self.text_dropout <= 1.0:
            raise ConfigError("text_dropout must lie in [0, 1]")
        if model.cfg.audio_only and self.stage is not Stage.AUDIO_ADAPT:
            raise ConfigError("an audio-only model only supports the audio stage")
        if not trainable_parameters(model, self.trainable_groups(model)):
            raise ConfigError(f"stage {self.stage.value} has no trainable parameters")
        return self

    def to_dict(self) -> dict:
        return {
            "stage": self.stage.value, "steps": self.steps, "batch_size": self.batch_size, "lr": self.lr,
            "warmup": self.warmup, "text_dropout": self.text_dropout, "loss_weights": list(self.loss_weights),
            "val_every": self.val_every, "ot_coupling": self.ot_coupling, "seed": self.seed,
            "trainable": None if self.trainable is None else list(self.trainable),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageSpec":
        d = dict(d)
        d["stage"] = Stage(d["stage"])
        d["loss_weights"] = tuple(d["loss_weights"])
        if d.get("trainable") is not None:
            d["trainable"] = tuple(d["trainable"])
        return cls(**d)


def trainable_parameters(model: DualDiT, groups) -> list[tuple[str, torch.nn.Parameter]]:
    pg = model.param_groups()
    return [np for g in groups for np in pg[g]]


def apply_freeze(model: DualDiT, groups) -> None:
    """requires_grad on exactly the parameters of ``groups``."""
    keep = set(groups)
    for g, ps in model.param_groups().items():
        for _, p in ps:
            p.requires_grad_(g in keep)


# data --------------------------------------------------------------------------


@dataclass
class LatentSet:
    video: Tensor | None  # (N, T, C, h, w)
    audio: Tensor  # (N, T_a, D_A)
    text: TextBatch
    captions: list[str]

    def __len__(self) -> int:
        return self.audio.shape[0]


def encode_split(codec: LatentCodec, split: Split, vocab: Vocabulary, with_video: bool = True) -> LatentSet:
    if not split:
        raise ContractError("empty dataset")
    with torch.no_grad():
        audio = codec.encode_audio(split.audios(), sample=False)
        video = codec.encode_video(split.videos(), sample=False) if with_video else None
    caps = split.captions()
    return LatentSet(video, audio, TextBatch.from_captions(vocab, caps), caps)


# validation ---------------------------------------------------------------------


def validate(model: DualDiT, data: LatentSet, seed: int = VAL_SEED, times=VAL_TIMES) -> tuple[float, float]:
    """Mean video/audio FM losses over a fixed t grid with fixed noise per t."""
    sums = [0.0, 0.0]
    counts = [0, 0]
    n = len(data)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for k, t in enumerate(times):
            gen = torch.Generator().manual_seed(seed + k)
            x0a = torch.randn(data.audio.shape, generator=gen)
            x0v = None if data.video is None else torch.randn(data.video.shape, generator=gen)
            for s in range(0, n, VAL_BATCH):
                sl = slice(s, s + VAL_BATCH)
                idx = torch.arange(n)[sl]
                tt = torch.full((len(idx),), t)
                loss = fm_loss(
                    model,
                    None if x0v is None else x0v[sl],
                    x0a[sl],
                    None if data.video is None else data.video[sl],
                    data.audio[sl],
                    tt,
                    data.text.select(idx),
                )
                if data.video is not None and not model.cfg.audio_only:
                    sums[0] += float(loss.video) * data.video[sl].numel()
                    counts[0] += data.video[sl].numel()
                sums[1] += float(loss.audio) * data.audio[sl].numel()
                counts[1] += data.audio[sl].numel()
    model.train(was_training)
    return tuple(s / c if c else 0.0 for s, c in zip(sums, counts))


# trainer ------------------------------------------------------------------------


@dataclass
class LossRecord:
    step: int
    loss_video: float
    loss_audio: float
    val_loss_video: float
    val_loss_audio: float

    def row(self) -> list[str]:
        return [str(self.step)] + [f"{x:.8g}" for x in (self.loss_video, self.loss_audio, self.val_loss_video, self.val_loss_audio)]


def curves_csv(records: list[LossRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


class Trainer:
    """Owns the optimizer and RNG for one stage; ``state()``/``load_state()``
    capture everything needed to resume bit-exactly."""

    def __init__(self, model: DualDiT, spec: StageSpec, train: LatentSet, val: LatentSet | None = None):
        if len(train) == 0:
            raise ContractError("empty training set")
        self.model = model
        self.spec = spec.validate(model)
        self.train_data = train
        self.val_data = val
        self.groups = spec.trainable_groups(model)
        apply_freeze(model, self.groups)
        self.params = trainable_parameters(model, self.groups)
        self.optimizer = torch.optim.Adam(
            [p for _, p in self.params], lr=spec.lr, betas=(0.9, 0.999), eps=1e-8
        )
        self.generator = torch.Generator().manual_seed(spec.seed)
        self.step = 0
        self.records: list[LossRecord] = []
        self.null_draws = 0  # items whose text was replaced by the null condition
        self._acc = [0.0, 0.0, 0]

    def lr_at(self, step: int) -> float:
        if self.spec.warmup <= 0:
            return self.spec.lr
        return self.spec.lr * min(1.0, (step + 1) / self.spec.warmup)

    def draw_batch(self):
        data, spec, gen = self.train_data, self.spec, self.generator
        n = len(data)
        b = min(spec.batch_size, n)
        idx = torch.randperm(n, generator=gen)[:b]
        x1a = data.audio[idx]
        x1v = None if data.video is None or self.model.cfg.audio_only else data.video[idx]
        x0v = None if x1v is None else torch.randn(x1v.shape, generator=gen)
        x0a = torch.randn(x1a.shape, generator=gen)
        t = torch.rand(b, generator=gen)
        null = torch.rand(b, generator=gen) < spec.text_dropout
        if spec.ot_coupling and b > 1:
            x0v, x0a = couple(x0v, x0a, x1v, x1a)
        return x0v, x0a, x1v, x1a, t, data.text.select(idx).with_null(null)

    def objective(self, loss) -> Tensor:
        st = self.spec.stage
        if st is Stage.VIDEO_PRETRAIN:
            return loss.video
        if st is Stage.AUDIO_ADAPT:
            return loss.audio
        lv, la = self.spec.loss_weights
        return lv * loss.video + la * loss.audio

    def train_step(self):
        try:
            x0v, x0a, x1v, x1a, t, text = self.draw_batch()
        except NumericalError as exc:
            raise NumericalError(f"{exc} at step {self.step}", step=self.step) from exc
        self.null_draws += int(text.null.sum())
        self.model.train()
        compute_audio = self.spec.stage is not Stage.VIDEO_PRETRAIN
        loss = fm_loss(self.model, x0v, x0a, x1v, x1a, t, text, compute_audio=compute_audio)
        obj = self.objective(loss)
        if not torch.isfinite(obj):
            raise NumericalError(f"non-finite loss at step {self.step}", step=self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = self.lr_at(self.step)
        self.optimizer.zero_grad(set_to_none=True)
        obj.backward()
        self.optimizer.step()
        self.step += 1
        self._acc[0] += loss.video.item()
        self._acc[1] += loss.audio.item()
        self._acc[2] += 1
        return loss

    def evaluate(self) -> LossRecord:
        n = max(self._acc[2], 1)
        vv, va = validate(self.model, self.val_data) if self.val_data is not None else (float("nan"),) * 2
        rec = LossRecord(self.step, self._acc[0] / n, self._acc[1] / n, vv, va)
        self._acc = [0.0, 0.0, 0]
        self.records.append(rec)
        return rec

    def run(
        self,
        steps: int | None = None,
        on_record: Callable[[LossRecord], None] | None = None,
    ) -> list[LossRecord]:
        """Train until ``steps`` total steps (default: ``spec.steps``), recording
        losses every ``val_every`` steps and at the end."""
        target = self.spec.steps if steps is None else steps
        while self.step < target:
            self.train_step()
            if self.step % self.spec.val_every == 0 or self.step == target:
                rec = self.evaluate()
                log.info(
                    "%s step %d loss_v %.4f loss_a %.4f val_v %.4f val_a %.4f",
                    self.spec.stage.value, rec.step, rec.loss_video, rec.loss_audio, rec.val_loss_video, rec.val_loss_audio,
                )
                if on_record is not None:
                    on_record(rec)
        return self.records

    # persistence
    def state(self) -> dict:
        return {
            "step": self.step,
            "spec": self.spec.to_dict(),
            "optimizer": self.optimizer.state_dict(),
            "param_names": [n for n, _ in self.params],
            "generator": self.generator.get_state(),
            "records": [r.__dict__.copy() for r in self.records],
            "acc": list(self._acc),
            "null_draws": self.null_draws,
        }

    def load_state(self, state: dict) -> None:
        if state["param_names"] != [n for n, _ in self.params]:
            raise ConfigError("checkpoint optimizer state does not match this stage's parameters")
        self.step = int(state["step"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.generator.set_state(state["generator"])
        self.records = [LossRecord(**r) for r in state["records"]]
        self._acc = list(state["acc"])
        self.null_draws = int(state.get("null_draws", 0))


@dataclass
class StageResult:
    model: DualDiT
    records: list[LossRecord]
    history: dict = field(default_factory=dict)


def train_stage(
    spec: StageSpec, train: LatentSet, model: DualDiT, val: LatentSet | None = None
) -> StageResult:
    trainer = Trainer(model, spec, train, val)
    records = trainer.run()
    hist = stage_history_entry(trainer)
    return StageResult(model, records, hist)


def stage_history_entry(trainer: Trainer) -> dict:
    last = trainer.records[-1] if trainer.records else None
    return {
        "stage": trainer.spec.stage.value,
        "steps": trainer.step,
        "trainable": list(trainer.groups),
        "final_val_loss_video": None if last is None else last.val_loss_video,
        "final_val_loss_audio": None if last is None else last.val_loss_audio,
        "group_hashes": trainer.model.group_hashes(),
    }
