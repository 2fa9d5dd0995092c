"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 configuration, 3 data/format, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path


from . import checkpoint as ckpt
from .codec import LatentCodec, fit_affine
from .config import RunConfig, apply_env_seed, resolve_seed
from .errors import ConfigError, ContractError, FormatError, NumericalError, ShapeError
from .evaluation import evaluate, sweep_table
from .fileio import (
    atomic_write_text,
    read_frames,
    read_media,
    read_split,
    sample_dirs,
    write_frames,
    write_split,
    write_tensor,
    write_wav,
)
from .model import DualDiT
from .pipeline import sample_batch
from .rfm import Mode
from .synth import make_splits
from .text import Vocabulary
from .training import Stage, StageSpec, Trainer, curves_csv, encode_split, stage_history_entry

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"resolution must look like HxW, got {text!r}") from exc
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return h, w


def _weights(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad weight list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointflow", description="joint text-to-audio-video rectified flow (desk scale)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write train/val/test splits with sidecars")
    g.add_argument("--config", type=Path)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", choices=[s.value for s in Stage], required=True)
    t.add_argument("--config", type=Path)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--ckpt-in", type=Path)
    t.add_argument("--ckpt-out", type=Path, required=True)
    t.add_argument("--csv", type=Path, help="loss curve CSV (default: <ckpt-out>.loss.csv)")
    t.add_argument("--steps", type=int, help="override the configured step count")
    t.add_argument("--seed", type=int)

    s = sub.add_parser("sample", help="generate one pair from a caption")
    s.add_argument("--mode", choices=[m.value for m in Mode], default="t2av")
    s.add_argument("--caption", required=True)
    s.add_argument("--guidance", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--video", type=Path, help="frame directory of the known video (v2a)")
    s.add_argument("--resolution", type=_resolution, help="output frame size HxW")
    s.add_argument("--config", type=Path)

    e = sub.add_parser("eval", help="score generated samples, or sweep guidance weights")
    e.add_argument("--gen", type=Path, help="sample directory or directory of samples")
    e.add_argument("--ref", type=Path, required=True, help="reference split directory")
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--ckpt", type=Path, help="checkpoint to sample from for --sweep")
    e.add_argument("--sweep", type=_weights, help="comma-separated guidance weights, e.g. 1,2,4,6,8")
    e.add_argument("--captions", type=int, help="number of reference captions for --sweep")
    e.add_argument("--steps", type=int, help="sampling steps for --sweep")
    e.add_argument("--seed", type=int)
    e.add_argument("--config", type=Path)

    i = sub.add_parser("inspect", help="print checkpoint contents")
    i.add_argument("--ckpt", type=Path, required=True)
    return p


# commands -----------------------------------------------------------------------


def _config(path: Path | None) -> RunConfig:
    return apply_env_seed(RunConfig.load(path))


def cmd_gen_data(args) -> int:
    cfg = _config(args.config)
    seed = resolve_seed(args.seed, cfg.data.master_seed)
    d = cfg.data
    splits = make_splits(d.n_train, d.n_val, d.n_test, seed)
    for name in ("train", "val", "test"):
        write_split(getattr(splits, name), args.out / name)
    Vocabulary.default().save(args.out / "vocab.txt")
    manifest = {"n_train": d.n_train, "n_val": d.n_val, "n_test": d.n_test, "master_seed": seed}
    atomic_write_text(args.out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {d.n_train}/{d.n_val}/{d.n_test} samples to {args.out}")
    return EXIT_OK


def _vocab(data_dir: Path) -> Vocabulary:
    p = data_dir / "vocab.txt"
    return Vocabulary.load(p) if p.exists() else Vocabulary.default()


def cmd_train(args) -> int:
    cfg = _config(args.config)
    seed = resolve_seed(args.seed, cfg.stage.seed)
    stage = Stage(args.stage)
    vocab = _vocab(args.data)
    train_split = read_split(args.data / "train")
    val_split = read_split(args.data / "val") if (args.data / "val").is_dir() else None

    history: list[dict] = []
    resume = None
    if args.ckpt_in is not None:
        ck = ckpt.load_checkpoint(args.ckpt_in, expect_tower=cfg.tower)
        model, codec, history = ck.build_model(), ck.build_codec(), ck.history
        if ck.trainer is not None and ck.trainer["spec"]["stage"] == stage.value:
            resume = ck.trainer
    else:
        codec = LatentCodec(fit_affine(cfg.codec, train_split.videos(), train_split.audios()))
        model = DualDiT(cfg.tower, seed=seed)

    overrides = {"seed": seed}
    if args.steps is not None:
        overrides["steps"] = args.steps
    spec = StageSpec.from_config(stage, cfg.stage, **overrides)
    train = encode_split(codec, train_split, vocab)
    val = encode_split(codec, val_split, vocab) if val_split else None
    trainer = Trainer(model, spec, train, val)
    if resume is not None:
        trainer.load_state(resume)
    csv_path = args.csv or args.ckpt_out.with_name(args.ckpt_out.name + ".loss.csv")

    def on_record(_rec):
        # periodic checkpoint with resumable trainer state
        ckpt.save_checkpoint(ckpt.from_model(model, codec, history, trainer.state()), args.ckpt_out)
        atomic_write_text(csv_path, curves_csv(trainer.records))

    trainer.run(on_record=on_record)
    history = history + [stage_history_entry(trainer)]
    ckpt.save_checkpoint(ckpt.from_model(model, codec, history), args.ckpt_out)
    atomic_write_text(csv_path, curves_csv(trainer.records))
    last = trainer.records[-1] if trainer.records else None
    if last is not None:
        print(f"stage {stage.value}: {trainer.step} steps, val_loss_video={last.val_loss_video:.6g} val_loss_audio={last.val_loss_audio:.6g}")
    return EXIT_OK


def _load_model(path: Path):
    ck = ckpt.load_checkpoint(path)
    return ck.build_model(), ck.build_codec()


def cmd_sample(args) -> int:
    cfg = _config(args.config)
    model, codec = _load_model(args.ckpt)
    guidance = cfg.sample.guidance if args.guidance is None else args.guidance
    steps = cfg.sample.steps if args.steps is None else args.steps
    seed = resolve_seed(args.seed, cfg.sample.seed)
    if guidance < 0 or steps < 1:
        raise ContractError("guidance must be >= 0 and steps >= 1")
    mode = Mode(args.mode)
    videos = None
    if mode is Mode.V2A_INVERSION:
        if args.video is None:
            raise UsageError("--mode v2a requires --video DIR")
        videos = read_frames(args.video)[None]
    gen = sample_batch(
        model, codec, Vocabulary.default(), [args.caption], [seed], mode,
        guidance, steps, args.resolution, videos=videos,
    )[0]
    out = args.out
    if gen.video is not None:
        write_frames(gen.video, out / "frames")
        write_tensor(gen.latents.video, out / "video_latent.sytf")
    write_wav(gen.audio, out / "audio.wav")
    write_tensor(gen.latents.audio, out / "audio_latent.sytf")
    atomic_write_text(out / "caption.txt", args.caption + "\n")
    meta = {"mode": mode.value, "guidance": guidance, "steps": steps, "seed": seed, "caption": args.caption}
    atomic_write_text(out / "sample.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {mode.value} sample to {out}")
    return EXIT_OK


def _gen_samples(path: Path):
    dirs = [path] if (path / "caption.txt").exists() else sample_dirs(path)
    if not dirs:
        raise FormatError(f"{path}: no generated samples")
    return [read_media(d) for d in dirs]


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    seed = resolve_seed(args.seed, cfg.eval.seed)
    ref = read_split(args.ref)
    ref_v, ref_a = list(ref.videos()), list(ref.audios())
    if args.sweep is not None:
        if args.ckpt is None:
            raise UsageError("--sweep requires --ckpt")
        model, codec = _load_model(args.ckpt)
        n = min(args.captions or cfg.eval.num_captions, len(ref))
        caps = ref.captions()[:n]
        seeds = [seed * 100_003 + i for i in range(n)]
        steps = args.steps or cfg.sample.steps
        reports = {}
        for w in args.sweep:
            g = sample_batch(model, codec, Vocabulary.default(), caps, seeds, "t2av", w, steps)
            reports[w] = evaluate([x.video for x in g], [x.audio for x in g], caps, ref_v, ref_a, seed)
        table = sweep_table(reports)
        doc = {f"{w:g}": json.loads(r.to_json()) for w, r in reports.items()}
        atomic_write_text(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        atomic_write_text(args.out.with_suffix(".tsv"), table)
        sys.stdout.write(table)
        return EXIT_OK
    if args.gen is None:
        raise UsageError("eval needs --gen DIR (or --sweep with --ckpt)")
    gen = _gen_samples(args.gen)
    report = evaluate([m.video for m in gen], [m.audio for m in gen], [m.caption for m in gen], ref_v, ref_a, seed)
    atomic_write_text(args.out, report.to_json())
    print(report.summary())
    return EXIT_OK


def cmd_inspect(args) -> int:
    ck = ckpt.load_checkpoint(args.ckpt)
    model = ck.build_model()
    print("tower:", json.dumps(asdict(ck.tower), sort_keys=True))
    print("codec:", json.dumps(asdict(ck.codec), sort_keys=True))
    counts = model.group_counts()
    hashes = model.group_hashes()
    print("parameters:")
    for g in counts:
        print(f"  {g:<13} {counts[g]:>10d}  sha256={hashes[g]}")
    print(f"  {'total':<13} {sum(counts.values()):>10d}")
    print("stage history:")
    if not ck.history:
        print("  (none)")
    for h in ck.history:
        print(
            f"  {h['stage']:<6} steps={h['steps']} trainable={','.join(h['trainable'])} "
            f"val_loss_video={h['final_val_loss_video']} val_loss_audio={h['final_val_loss_audio']}"
        )
    if ck.trainer is not None:
        print(f"in-progress stage {ck.trainer['spec']['stage']} at step {ck.trainer['step']}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ShapeError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
