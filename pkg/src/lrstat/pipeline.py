"""Stage runner: generate -> degrade -> teacher -> pretrain -> students -> eval -> visualize -> report.

Each stage records a hash of the configuration it depends on (including the
hashes of upstream stages) in ``stages/<name>.json``.  A stage is skipped
when that record matches and all of its outputs still exist.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .backbone import Model, init_model, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, section_dict, stable_hash
from .data import ClipRecord, Manifest, gen_synthetic, load_manifest, load_split, read_clip, save_manifest, write_clip
from .degrade import VideoClip, crop_box, crop_clip, degrade_clip
from .training import (
    Metrics,
    TeacherCache,
    TrainConfig,
    evaluate,
    pretrain_unsupervised,
    train_student_stat,
    train_supervised,
    train_teacher,
)
from .viz import visualize_attention

log = logging.getLogger(__name__)

STAGES = ("gen-data", "degrade", "train-teacher", "pretrain", "train-student", "eval", "visualize", "report")
REPORT_HEADER = ("model", "seed", "resolution", "prec1", "prec5", "count")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Layout:
    root: Path

    @property
    def hr(self) -> Path:
        return self.root / "data" / "hr"

    @property
    def lr(self) -> Path:
        return self.root / "data" / "lr"

    @property
    def teacher_ckpt(self) -> Path:
        return self.root / "teacher" / "teacher.ckpt"

    @property
    def teacher_csv(self) -> Path:
        return self.root / "teacher" / "metrics.csv"

    def student_dir(self, seed: int) -> Path:
        return self.root / "students" / f"seed{seed}"

    def student_ckpt(self, seed: int, regime: str) -> Path:
        return self.student_dir(seed) / f"{regime}.ckpt"

    def student_csv(self, seed: int, regime: str) -> Path:
        return self.student_dir(seed) / f"{regime}.csv"

    @property
    def results_csv(self) -> Path:
        return self.root / "eval" / "results.csv"

    @property
    def viz(self) -> Path:
        return self.root / "viz"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    def stage_record(self, stage: str) -> Path:
        return self.root / "stages" / f"{stage}.json"


def student_seeds(cfg: ExperimentConfig) -> list[int]:
    return list(cfg.student_seeds) or [cfg.seed]


def teacher_hw(cfg: ExperimentConfig) -> tuple[int, int]:
    _, _, h, w = crop_box(cfg.data.height, cfg.data.width, cfg.degrade.aspect)
    return h, w


def stage_hashes(cfg: ExperimentConfig) -> dict[str, str]:
    h = {}
    h["gen-data"] = stable_hash("gen-data", section_dict(cfg.data))
    h["degrade"] = stable_hash("degrade", h["gen-data"], section_dict(cfg.degrade))
    h["train-teacher"] = stable_hash(
        "train-teacher", h["gen-data"], list(cfg.degrade.aspect), section_dict(cfg.teacher), cfg.seed
    )
    seeds = student_seeds(cfg)
    h["pretrain"] = stable_hash(
        "pretrain", h["train-teacher"], h["degrade"], section_dict(cfg.pretrain),
        section_dict(cfg.student), section_dict(cfg.stat), seeds,
    )
    h["train-student"] = stable_hash(
        "train-student", h["train-teacher"], h["degrade"], h["pretrain"],
        section_dict(cfg.student), section_dict(cfg.stat), seeds,
    )
    h["eval"] = stable_hash("eval", h["train-student"])
    h["visualize"] = stable_hash("visualize", h["eval"], section_dict(cfg.report))
    h["report"] = stable_hash("report", h["eval"], section_dict(cfg.report))
    return h


# -- data -------------------------------------------------------------------


def _reset_dir(path: Path) -> None:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)


def run_gen_data(cfg: ExperimentConfig, lay: Layout) -> list[Path]:
    _reset_dir(lay.hr)
    gen_synthetic(cfg.data, lay.hr)
    return [lay.hr / "manifest.json"]


def run_degrade(cfg: ExperimentConfig, lay: Layout) -> list[Path]:
    src = load_manifest(lay.hr)
    _reset_dir(lay.lr)
    out = Manifest(src.name + "-lr", list(src.classes), meta={"source": "hr", "degrade": section_dict(cfg.degrade)})
    for rec in src.clips:
        clip = VideoClip(read_clip(lay.hr / rec.path, rec.frames), rec.label, rec.id)
        low = degrade_clip(clip, cfg.degrade)
        write_clip(low, lay.lr / rec.path)
        out.clips.append(ClipRecord(rec.id, rec.path, rec.label, rec.frames, cfg.degrade.target_h, cfg.degrade.target_w, rec.split))
    save_manifest(out, lay.lr)
    return [lay.lr / "manifest.json"]


@dataclass
class Datasets:
    classes: list[str]
    hr_train: list[VideoClip]  # teacher view: aspect-cropped HR
    hr_test: list[VideoClip]
    lr_train: list[VideoClip]
    lr_test: list[VideoClip]
    hr_unlabeled: list[VideoClip] = field(default_factory=list)
    lr_unlabeled: list[VideoClip] = field(default_factory=list)


def load_datasets(cfg: ExperimentConfig, lay: Layout) -> Datasets:
    hm = load_manifest(lay.hr)
    lm = load_manifest(lay.lr)
    crop = lambda clips: [crop_clip(c, cfg.degrade.aspect) for c in clips]  # noqa: E731
    return Datasets(
        list(hm.classes),
        crop(load_split(lay.hr, "train", hm)),
        crop(load_split(lay.hr, "test", hm)),
        load_split(lay.lr, "train", lm),
        load_split(lay.lr, "test", lm),
        crop(load_split(lay.hr, "unlabeled", hm)),
        load_split(lay.lr, "unlabeled", lm),
    )


# -- training ---------------------------------------------------------------


def _ckpt_meta(regime: str, seed: int, input_hw, digest: str) -> dict:
    return {"regime": regime, "seed": seed, "input_hw": list(input_hw), "config_hash": digest}


def run_train_teacher(cfg: ExperimentConfig, lay: Layout, ds: Datasets, digest: str) -> list[Path]:
    tcfg = cfg.teacher.train_config(cfg.seed)
    model, metrics = train_teacher(ds.hr_train, tcfg, len(ds.classes), widths=cfg.teacher.widths)
    save_checkpoint(lay.teacher_ckpt, model, _ckpt_meta("teacher", cfg.seed, teacher_hw(cfg), digest))
    lay.teacher_csv.write_text(metrics.to_csv())
    return [lay.teacher_ckpt, lay.teacher_csv]


def student_train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    st = cfg.stat
    return cfg.student.train_config(seed, weights=st.loss_weights(), weight_mode=st.weight_mode, distance=st.distance)


def pretrain_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    p, s, st = cfg.pretrain, cfg.student, cfg.stat
    return TrainConfig(
        epochs=p.epochs,
        batch_size=p.batch_size,
        momentum=s.momentum,
        base_lr=p.base_lr,
        warmup_epochs=p.warmup_epochs,
        lr_decay_every=s.lr_decay_every,
        lr_decay_factor=s.lr_decay_factor,
        segments=s.segments,
        weight_mode=st.weight_mode,
        weights=st.loss_weights(),
        distance=st.distance,
        clip_grad=s.clip_grad,
        clip_threshold=s.clip_threshold,
        seed=seed,
    )


def fresh_student(cfg: ExperimentConfig, seed: int, num_classes: int, channels: int) -> Model:
    """Same initialisation the student trainers use for ``seed``."""
    return init_model(ad.make_rng([seed, 0]), num_classes, cfg.student.segments, channels, cfg.student.widths)


class _TeacherCacheHolder:
    """Builds the teacher cache lazily, at most once per process."""

    def __init__(self, teacher: Model, hr: Sequence[VideoClip], lr_hw):
        self.teacher, self.hr, self.lr_hw = teacher, hr, lr_hw
        self._cache: Optional[TeacherCache] = None

    def get(self) -> TeacherCache:
        if self._cache is None:
            self._cache = TeacherCache(self.teacher, self.hr, self.lr_hw)
        return self._cache


def run_pretrain(cfg: ExperimentConfig, lay: Layout, ds: Datasets, digest: str, cache: _TeacherCacheHolder) -> list[Path]:
    outputs = []
    if not cfg.pretrain.enabled:
        return outputs
    hr, low = list(ds.hr_train) + ds.hr_unlabeled, list(ds.lr_train) + ds.lr_unlabeled
    if cfg.pretrain.include_test:
        hr += ds.hr_test
        low += ds.lr_test
    if len(hr) != len(ds.hr_train):
        holder = _TeacherCacheHolder(cache.teacher, hr, cache.lr_hw)
    else:
        holder = cache
    for seed in student_seeds(cfg):
        student = fresh_student(cfg, seed, len(ds.classes), low[0].frames.shape[-1])
        student, metrics = pretrain_unsupervised(cache.teacher, student, hr, low, pretrain_config(cfg, seed), holder.get())
        ck, cv = lay.student_ckpt(seed, "pretrained"), lay.student_csv(seed, "pretrain")
        save_checkpoint(ck, student, _ckpt_meta("pretrain", seed, low[0].resolution, digest))
        cv.write_text(metrics.to_csv())
        outputs += [ck, cv]
    return outputs


def run_train_students(cfg: ExperimentConfig, lay: Layout, ds: Datasets, digest: str, cache: _TeacherCacheHolder) -> list[Path]:
    outputs = []
    hw = ds.lr_train[0].resolution
    for seed in student_seeds(cfg):
        scfg = student_train_config(cfg, seed)
        base, bm = train_supervised(ds.lr_train, scfg, len(ds.classes), widths=cfg.student.widths, regime="baseline")
        init = None
        if cfg.pretrain.enabled:
            init, _ = load_checkpoint(lay.student_ckpt(seed, "pretrained"))
        stat, sm = train_student_stat(
            cache.teacher, ds.hr_train, ds.lr_train, scfg, len(ds.classes),
            student=init, widths=cfg.student.widths, cache=cache.get(),
        )
        for regime, model, metrics in (("baseline", base, bm), ("stat", stat, sm)):
            ck, cv = lay.student_ckpt(seed, regime), lay.student_csv(seed, regime)
            save_checkpoint(ck, model, _ckpt_meta(regime, seed, hw, digest))
            cv.write_text(metrics.to_csv())
            outputs += [ck, cv]
    return outputs


# -- evaluation and reporting -----------------------------------------------


@dataclass
class ResultRow:
    model: str
    seed: int
    resolution: str
    prec1: float
    prec5: float
    count: int


def _res(hw) -> str:
    return f"{hw[0]}x{hw[1]}"


def run_eval(cfg: ExperimentConfig, lay: Layout, ds: Datasets) -> list[Path]:
    rows = []
    teacher, _ = load_checkpoint(lay.teacher_ckpt)
    ev = evaluate(teacher, ds.hr_test)
    rows.append(ResultRow("teacher", cfg.seed, _res(teacher_hw(cfg)), ev.prec1, ev.prec5, ev.count))
    lr_res = _res(ds.lr_test[0].resolution)
    for seed in student_seeds(cfg):
        for regime in ("baseline", "stat"):
            model, _ = load_checkpoint(lay.student_ckpt(seed, regime))
            ev = evaluate(model, ds.lr_test)
            rows.append(ResultRow(regime, seed, lr_res, ev.prec1, ev.prec5, ev.count))
    write_results(rows, lay.results_csv)
    return [lay.results_csv]


def write_results(rows: Sequence[ResultRow], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in rows:
        writer.writerow([r.model, r.seed, r.resolution, repr(r.prec1), repr(r.prec5), r.count])
    path.write_text(buf.getvalue())


def read_results(path: Path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != REPORT_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [ResultRow(m, int(s), res, float(p1), float(p5), int(n)) for m, s, res, p1, p5, n in reader]


def run_visualize(cfg: ExperimentConfig, lay: Layout, ds: Datasets) -> list[Path]:
    if lay.viz.exists():
        shutil.rmtree(lay.viz)
    written = []
    n = cfg.report.visualize_clips
    teacher, tmeta = load_checkpoint(lay.teacher_ckpt)
    for clip in ds.hr_test[:n]:
        written += visualize_attention(teacher, clip, lay.viz / "teacher" / clip.id, tmeta.get("input_hw"))
    seed = student_seeds(cfg)[0]
    for regime in ("baseline", "stat"):
        model, meta = load_checkpoint(lay.student_ckpt(seed, regime))
        for clip in ds.lr_test[:n]:
            written += visualize_attention(model, clip, lay.viz / f"{regime}-seed{seed}" / clip.id, meta.get("input_hw"))
    return written


@dataclass
class Report:
    teacher: ResultRow
    baseline: list[ResultRow]
    stat: list[ResultRow]
    rows: list[ResultRow] = field(default_factory=list)

    @property
    def baseline_mean(self) -> float:
        return float(np.mean([r.prec1 for r in self.baseline]))

    @property
    def stat_mean(self) -> float:
        return float(np.mean([r.prec1 for r in self.stat]))

    @property
    def improved_seeds(self) -> int:
        return sum(s.prec1 > b.prec1 for b, s in zip(self.baseline, self.stat))

    def summary_rows(self) -> list[ResultRow]:
        def mean_row(name, rows):
            return ResultRow(
                name, -1, rows[0].resolution,
                float(np.mean([r.prec1 for r in rows])), float(np.mean([r.prec5 for r in rows])), rows[0].count,
            )

        return [self.teacher, mean_row("baseline-mean", self.baseline), mean_row("stat-mean", self.stat)]

    def text(self) -> str:
        lines = [
            f"teacher   {self.teacher.resolution:>7}  prec@1 {self.teacher.prec1:.4f}  prec@5 {self.teacher.prec5:.4f}",
        ]
        for name, rows in (("baseline", self.baseline), ("stat", self.stat)):
            p1 = np.mean([r.prec1 for r in rows])
            p5 = np.mean([r.prec5 for r in rows])
            per_seed = " ".join(f"{r.prec1:.3f}" for r in rows)
            lines.append(f"{name:<9} {rows[0].resolution:>7}  prec@1 {p1:.4f}  prec@5 {p5:.4f}  per seed [{per_seed}]")
        lines.append(f"transfer better than baseline in {self.improved_seeds}/{len(self.stat)} seeds")
        return "\n".join(lines) + "\n"


def build_report(rows: Sequence[ResultRow]) -> Report:
    teacher = next(r for r in rows if r.model == "teacher")
    base = [r for r in rows if r.model == "baseline"]
    stat = [r for r in rows if r.model == "stat"]
    if [r.seed for r in base] != [r.seed for r in stat]:
        raise ValueError("baseline and transfer students were evaluated on different seeds")
    return Report(teacher, base, stat, list(rows))


def run_report(cfg: ExperimentConfig, lay: Layout) -> list[Path]:
    from . import plotting

    rep = build_report(read_results(lay.results_csv))
    out = lay.report_dir
    out.mkdir(parents=True, exist_ok=True)
    summary = out / "summary.csv"
    write_results(rep.summary_rows(), summary)
    text = out / "report.txt"
    text.write_text(rep.text())
    written = [summary, text]
    if cfg.report.figures:
        seed = rep.stat[0].seed
        runs = {"teacher": Metrics.from_csv(lay.teacher_csv.read_text(), "teacher")}
        for regime in ("baseline", "stat"):
            runs[f"{regime} (seed {seed})"] = Metrics.from_csv(lay.student_csv(seed, regime).read_text(), regime)
        written.append(plotting.plot_training_curves(runs, out / "training_curves.png"))
        written.append(plotting.plot_loss_terms(runs[f"stat (seed {seed})"], out / "stat_loss_terms.png", "transfer student"))
        names = ["teacher", "baseline", "stat"]
        p1 = [rep.teacher.prec1, rep.baseline_mean, rep.stat_mean]
        p5 = [rep.teacher.prec5, float(np.mean([r.prec5 for r in rep.baseline])), float(np.mean([r.prec5 for r in rep.stat]))]
        written.append(plotting.plot_comparison(names, p1, p5, out / "comparison.png"))
        written.append(
            plotting.plot_seed_scatter(
                [r.prec1 for r in rep.baseline], [r.prec1 for r in rep.stat], [r.seed for r in rep.stat], out / "seeds.png"
            )
        )
    return written


# -- driver -----------------------------------------------------------------


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out: str | Path):
        self.cfg = cfg
        self.lay = Layout(Path(out))
        self.hashes = stage_hashes(cfg)
        self._ds: Optional[Datasets] = None
        self._cache: Optional[_TeacherCacheHolder] = None
        self.ran: list[str] = []
        self.skipped: list[str] = []

    def datasets(self) -> Datasets:
        if self._ds is None:
            self._ds = load_datasets(self.cfg, self.lay)
        return self._ds

    def cache(self) -> _TeacherCacheHolder:
        if self._cache is None:
            teacher, _ = load_checkpoint(self.lay.teacher_ckpt)
            ds = self.datasets()
            self._cache = _TeacherCacheHolder(teacher, ds.hr_train, ds.lr_train[0].resolution)
        return self._cache

    def up_to_date(self, stage: str) -> bool:
        rec = self.lay.stage_record(stage)
        if not rec.exists():
            return False
        doc = json.loads(rec.read_text())
        if doc.get("hash") != self.hashes[stage]:
            return False
        return all((self.lay.root / p).exists() for p in doc.get("outputs", []))

    def _body(self, stage: str) -> Callable[[], list[Path]]:
        c, lay, h = self.cfg, self.lay, self.hashes[stage]
        return {
            "gen-data": lambda: run_gen_data(c, lay),
            "degrade": lambda: run_degrade(c, lay),
            "train-teacher": lambda: run_train_teacher(c, lay, self.datasets(), h),
            "pretrain": lambda: run_pretrain(c, lay, self.datasets(), h, self.cache()),
            "train-student": lambda: run_train_students(c, lay, self.datasets(), h, self.cache()),
            "eval": lambda: run_eval(c, lay, self.datasets()),
            "visualize": lambda: run_visualize(c, lay, self.datasets()),
            "report": lambda: run_report(c, lay),
        }[stage]

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Run one stage; returns False when it was skipped as up to date."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        if not force and self.up_to_date(stage):
            log.info("stage %s up to date, skipped", stage)
            self.skipped.append(stage)
            return False
        log.info("stage %s running", stage)
        t0 = time.perf_counter()
        try:
            outputs = self._body(stage)()
        except Exception as exc:
            raise StageError(stage, exc) from exc
        if stage in ("gen-data", "degrade"):
            self._ds = None
        if stage == "train-teacher":
            self._cache = None
        rec = self.lay.stage_record(stage)
        rec.parent.mkdir(parents=True, exist_ok=True)
        rel = sorted(str(Path(p).relative_to(self.lay.root)) for p in outputs)
        rec.write_text(json.dumps({"stage": stage, "hash": self.hashes[stage], "outputs": rel}, indent=1) + "\n")
        self._record_time(stage, time.perf_counter() - t0)
        self.ran.append(stage)
        return True

    def _record_time(self, stage: str, seconds: float) -> None:
        # wall-clock lives apart from the reproducible CSVs and checkpoints
        path = self.lay.root / "timings.json"
        doc = json.loads(path.read_text()) if path.exists() else {}
        doc[stage] = round(seconds, 3)
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def run(self, stages: Sequence[str] = STAGES) -> Report:
        force = False
        for stage in stages:
            # once anything upstream is rebuilt, everything after it is stale too
            force = self.run_stage(stage, force) or force
        return build_report(read_results(self.lay.results_csv))


def run_pipeline(cfg: ExperimentConfig, out: str | Path) -> Report:
    return Pipeline(cfg, out).run()
