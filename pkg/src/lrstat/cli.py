"""Command-line entry point (``lrstat``)."""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from .backbone import load_checkpoint
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import load_manifest, load_split
from .degrade import crop_clip
from .pipeline import STAGES, Pipeline, StageError, student_seeds
from .viz import export_embeddings, visualize_attention

log = logging.getLogger("lrstat")

STAGE_COMMANDS = {
    "gen-data": "render the synthetic HR dataset",
    "degrade": "degrade every HR clip to the LR dataset",
    "train-teacher": "train the HR teacher",
    "pretrain": "label-free attention-transfer pretraining of the students",
    "train-student": "train baseline and attention-transfer students",
    "eval": "evaluate teacher and students on the test split",
}


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", type=Path, help="YAML experiment config", **d)
    p.add_argument("--seed", type=int, help="experiment seed (overrides the config)", **d)
    p.add_argument("--threads", type=int, help="cap BLAS threads; 1 guarantees bit-identical output", **d)
    p.add_argument("--out", type=Path, help="working directory for all stage outputs", **d)
    p.add_argument("-v", "--verbose", action="store_true", help="per-epoch logging", **d)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrstat", description="Attention transfer for extreme low-resolution video.")
    _global_flags(parser, suppress=False)
    parser.set_defaults(out=Path("runs/default"))
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    for name, help_ in STAGE_COMMANDS.items():
        add(name, help_)
    p = add("visualize", "write attention overlays and temporal bars")
    p.add_argument("--checkpoint", type=Path, help="model to visualise (default: the pipeline's models)")
    p.add_argument("--dataset", type=Path, help="dataset directory holding manifest.json")
    p.add_argument("--clip", help="clip id (default: first test clip)")
    p.add_argument("--output", type=Path, help="output directory")
    p = add("export-embeddings", "export attention-pooled video features as CSV")
    p.add_argument("--checkpoint", type=Path, help="default: first-seed transfer student")
    p.add_argument("--dataset", type=Path, help="default: the LR dataset")
    p.add_argument("--split", default="test")
    p.add_argument("--output", type=Path, help="default: <out>/embeddings/<model>-<split>.csv")
    add("run-pipeline", "run every stage, skipping those already up to date")
    add("show-config", "print the effective configuration")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        cfg = cfg.with_seed(args.seed)
    return cfg


def _model_clips(ckpt: Path, dataset: Path, split: str, cfg: ExperimentConfig):
    model, meta = load_checkpoint(ckpt)
    clips = load_split(dataset, split, load_manifest(dataset))
    if not clips:
        raise ValueError(f"{dataset}: split {split!r} is empty")
    want = tuple(meta.get("input_hw") or clips[0].resolution)
    if clips[0].resolution != want:
        # HR data for a teacher: apply the teacher's aspect crop
        clips = [crop_clip(c, cfg.degrade.aspect) for c in clips]
    return model, meta, clips


def _visualize(args, cfg: ExperimentConfig, pipe: Pipeline) -> None:
    if args.checkpoint is None:
        pipe.run_stage("visualize", force=True)
        print(f"overlays written under {pipe.lay.viz}")
        return
    dataset = args.dataset or pipe.lay.lr
    model, meta, clips = _model_clips(args.checkpoint, dataset, "test", cfg)
    if args.clip is not None:
        clips = [c for c in clips if c.id == args.clip]
        if not clips:
            raise ValueError(f"clip {args.clip!r} not in the test split of {dataset}")
    clip = clips[0]
    out = args.output or pipe.lay.viz / "adhoc" / clip.id
    paths = visualize_attention(model, clip, out, meta.get("input_hw"))
    print(f"{len(paths)} images written to {out}")


def _export(args, cfg: ExperimentConfig, pipe: Pipeline) -> None:
    seed = student_seeds(cfg)[0]
    ckpt = args.checkpoint or pipe.lay.student_ckpt(seed, "stat")
    dataset = args.dataset or pipe.lay.lr
    model, _, clips = _model_clips(ckpt, dataset, args.split, cfg)
    out = args.output or pipe.lay.root / "embeddings" / f"{Path(ckpt).stem}-{args.split}.csv"
    feats = export_embeddings(model, clips, out)
    print(f"{feats.shape[0]} rows x {feats.shape[1]} features written to {out}")


def run(args) -> int:
    cfg = _config(args)
    pipe = Pipeline(cfg, args.out)
    if args.command == "show-config":
        sys.stdout.write(dump_config(cfg))
    elif args.command in STAGE_COMMANDS:
        pipe.run_stage(args.command, force=True)
        if args.command == "eval":
            pipe.run_stage("report", force=True)
            sys.stdout.write((pipe.lay.report_dir / "report.txt").read_text())
    elif args.command == "visualize":
        _visualize(args, cfg, pipe)
    elif args.command == "export-embeddings":
        _export(args, cfg, pipe)
    elif args.command == "run-pipeline":
        report = pipe.run(STAGES)
        skipped = ", ".join(pipe.skipped) or "none"
        print(f"stages run: {', '.join(pipe.ran) or 'none'}; skipped: {skipped}")
        sys.stdout.write(report.text())
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    limits = threadpool_limits(limits=args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
