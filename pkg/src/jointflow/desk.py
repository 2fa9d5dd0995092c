"""End-to-end desk experiment: data, three training stages, the adaptor
ablation, synchronization comparison of joint sampling versus video-to-audio
inversion, a guidance sweep, and new-resolution sampling.

Run with ``python -m jointflow.desk --out DIR``.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .codec import CodecConfig, LatentCodec, fit_affine
from .evaluation import evaluate, onset_sync_error, sweep_table
from .fileio import atomic_write_text
from .model import DualDiT, TowerConfig
from .pipeline import sample_batch
from .synth import make_splits
from .text import Vocabulary
from .training import Stage, StageSpec, Trainer, curves_csv, encode_split, stage_history_entry, validate

log = logging.getLogger(__name__)


@dataclass
class DeskSettings:
    n_train: int = 512
    n_val: int = 64
    n_test: int = 64
    steps_video: int = 3000
    steps_audio: int = 2000
    steps_joint: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    val_every: int = 250
    eval_captions: int = 60
    sample_steps: int = 50
    guidance: float = 6.0
    sweep: tuple[float, ...] = (1.0, 2.0, 4.0, 6.0, 8.0)
    sweep_captions: int = 24
    seed: int = 0
    tower: TowerConfig = field(default_factory=TowerConfig)


@dataclass
class DeskResults:
    settings: dict
    runtime_seconds: float = 0.0
    stage_seconds: dict = field(default_factory=dict)
    audio_val_zero_init: float = 0.0
    audio_val_final_adaptor: float = 0.0
    audio_val_final_no_adaptor: float = 0.0
    video_hash_unchanged_stage2: bool = False
    video_hash_changed_stage3: bool = False
    sync_error_t2av: float = 0.0
    sync_error_v2a: float = 0.0
    sync_hit_t2av: float = 0.0
    sync_hit_v2a: float = 0.0
    eval_t2av: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    sweep_table: str = ""
    cfg0_vs_cfg6_latent_diff: float = 0.0
    resolution_outputs: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)

    @property
    def audio_val_drop(self) -> float:
        return 1.0 - self.audio_val_final_adaptor / self.audio_val_zero_init


def _stage(model, spec, train, val, name, results, out):
    t0 = time.perf_counter()
    trainer = Trainer(model, spec, train, val)
    records = trainer.run()
    results.stage_seconds[name] = time.perf_counter() - t0
    results.curves[name] = [r.__dict__ for r in records]
    if out is not None:
        atomic_write_text(out / f"loss_{name}.csv", curves_csv(records))
    return trainer


def run(settings: DeskSettings, out: Path | None = None) -> DeskResults:
    start = time.perf_counter()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results = DeskResults(settings=asdict(settings))
    s = settings
    splits = make_splits(s.n_train, s.n_val, s.n_test, s.seed)
    codec = LatentCodec(fit_affine(CodecConfig(), splits.train.videos(), splits.train.audios()))
    vocab = Vocabulary.default()
    train = encode_split(codec, splits.train, vocab)
    val = encode_split(codec, splits.val, vocab)
    common = dict(batch_size=s.batch_size, lr=s.lr, val_every=s.val_every, seed=s.seed)

    model = DualDiT(s.tower, seed=s.seed)
    history = []
    tr = _stage(model, StageSpec(Stage.VIDEO_PRETRAIN, s.steps_video, **common), train, val, "video", results, out)
    history.append(stage_history_entry(tr))
    pretrained = {k: v.clone() for k, v in model.state_dict().items()}

    # audio adaptation, with and without the modality adaptor, same seeds and schedule
    results.audio_val_zero_init = validate(model, val)[1]
    before = model.group_hashes()
    tr = _stage(model, StageSpec(Stage.AUDIO_ADAPT, s.steps_audio, **common), train, val, "audio", results, out)
    history.append(stage_history_entry(tr))
    after = model.group_hashes()
    results.video_hash_unchanged_stage2 = before["video_tower"] == after["video_tower"]
    results.audio_val_final_adaptor = validate(model, val)[1]

    ablation = DualDiT(replace(s.tower, use_adaptor=False), seed=s.seed)
    ablation.load_state_dict(
        {k: v for k, v in pretrained.items() if k.startswith(("video_tower.", "text_encoder."))}, strict=False
    )
    _stage(ablation, StageSpec(Stage.AUDIO_ADAPT, s.steps_audio, **common), train, val, "audio_no_adaptor", results, out)
    results.audio_val_final_no_adaptor = validate(ablation, val)[1]
    del ablation

    tr = _stage(model, StageSpec(Stage.JOINT_FINETUNE, s.steps_joint, **common), train, val, "joint", results, out)
    history.append(stage_history_entry(tr))
    results.video_hash_changed_stage3 = model.group_hashes()["video_tower"] != after["video_tower"]
    if out is not None:
        ckpt.save_checkpoint(ckpt.from_model(model, codec, history), out / "model.ck")

    # synchronization: joint generation vs video-to-audio inversion, paired seeds
    n = min(s.eval_captions, len(splits.test))
    test = splits.test[:n]
    caps = [m.caption for m in test]
    seeds = [10_000 + i for i in range(n)]
    t0 = time.perf_counter()
    gen = sample_batch(model, codec, vocab, caps, seeds, "t2av", s.guidance, s.sample_steps)
    v2a = sample_batch(
        model, codec, vocab, caps, seeds, "v2a", s.guidance, s.sample_steps, videos=torch.stack([m.video for m in test])
    )
    sync_t = [onset_sync_error(g.video, g.audio) for g in gen]
    sync_v = [onset_sync_error(g.video, g.audio) for g in v2a]
    results.sync_error_t2av = sum(r.mean_error for r in sync_t) / n
    results.sync_error_v2a = sum(r.mean_error for r in sync_v) / n
    results.sync_hit_t2av = sum(r.hit_rate for r in sync_t) / n
    results.sync_hit_v2a = sum(r.hit_rate for r in sync_v) / n
    report = evaluate(
        [g.video for g in gen], [g.audio for g in gen], caps,
        list(splits.test.videos()), list(splits.test.audios()), seed=s.seed,
    )
    results.eval_t2av = {k: v for k, v in asdict(report).items() if k != "samples"}

    # guidance sweep on a caption subset
    k = min(s.sweep_captions, n)
    reports = {}
    for w in s.sweep:
        g = sample_batch(model, codec, vocab, caps[:k], seeds[:k], "t2av", w, s.sample_steps)
        reports[w] = evaluate(
            [x.video for x in g], [x.audio for x in g], caps[:k],
            list(splits.test.videos()), list(splits.test.audios()), seed=s.seed,
        )
    results.sweep = {str(w): {kk: vv for kk, vv in asdict(r).items() if kk != "samples"} for w, r in reports.items()}
    results.sweep_table = sweep_table(reports)
    g0 = sample_batch(model, codec, vocab, caps[:4], seeds[:4], "t2av", 0.0, s.sample_steps, decode=False)
    g6 = sample_batch(model, codec, vocab, caps[:4], seeds[:4], "t2av", 6.0, s.sample_steps, decode=False)
    diffs = [(a.latents.video - b.latents.video).abs().mean() for a, b in zip(g0, g6)]
    diffs += [(a.latents.audio - b.latents.audio).abs().mean() for a, b in zip(g0, g6)]
    results.cfg0_vs_cfg6_latent_diff = float(torch.stack(diffs).mean())

    for res in ((16, 16), (64, 64)):
        g = sample_batch(model, codec, vocab, caps[:2], seeds[:2], "t2av", s.guidance, s.sample_steps, res)
        results.resolution_outputs[f"{res[0]}x{res[1]}"] = {
            "video_shape": list(g[0].video.shape),
            "audio_shape": list(g[0].audio.shape),
            "finite": bool(all(torch.isfinite(x.video).all() and torch.isfinite(x.audio).all() for x in g)),
        }
    results.stage_seconds["sampling_eval"] = time.perf_counter() - t0
    results.runtime_seconds = time.perf_counter() - start
    if out is not None:
        d = asdict(results)
        atomic_write_text(out / "results.json", json.dumps(d, indent=2, sort_keys=True, default=str) + "\n")
    return results


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="run the full desk-scale experiment")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    r = run(DeskSettings(seed=args.seed), args.out)
    print(json.dumps({k: v for k, v in asdict(r).items() if k not in ("curves", "sweep", "settings")}, indent=2, default=str))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
