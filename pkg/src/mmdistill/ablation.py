"""Experiment pipeline and ablation matrix runner.

A run goes: datasets -> teacher -> stage-1 student -> one stage-2 run per
(row, seed), every run starting from the same stage-1 checkpoint. Teacher
and stage-1 checkpoints are cached under ``<out>/artifacts`` keyed by the
config sections they depend on, so repeated invocations reuse them.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import AblationRow, ExperimentConfig
from .data import Dataset, make_dataset, regenerate_with_student, regenerate_with_teacher
from .errors import ConfigurationError
from .evaluate import EvalReport, eval_qa_accuracy, greedy_answers
from .losses import DistillConfig
from .model import TransformerLM, init_student_from_teacher, load_checkpoint, save_checkpoint
from .train import Trainer, distill_stage2, finetune, train_stage1

log = logging.getLogger(__name__)

BASELINE = "baseline"
METRICS = ("accuracy", "agreement", "heldout_loss")


# -- shared pipeline ------------------------------------------------------------------

@dataclass
class Pipeline:
    """Everything the per-run workers share: datasets, teacher, stage-1 student."""

    config: ExperimentConfig
    train: Dataset
    eval: Dataset
    teacher: TransformerLM
    student_init: TransformerLM
    teacher_answers: list[str]
    teacher_report: EvalReport
    regenerated: dict[str, Dataset] = field(default_factory=dict)


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    d = cfg.data
    patch = cfg.model.student.encoder.patch_size
    train = make_dataset(d.train_size, d.seed, "train", d.grid, d.families, patch_size=patch)
    ev = make_dataset(d.eval_size, d.seed, "eval", d.grid, d.families, patch_size=patch)
    pre = make_dataset(d.pretrain_size, d.seed, "pretrain", d.grid, d.pretrain_families, patch_size=patch)
    return train, ev, pre


def _cached(path: Path, build) -> TransformerLM:
    if path.exists():
        log.info("reusing %s", path)
        return load_checkpoint(path)[0]
    model = build()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    save_checkpoint(tmp, model)
    os.replace(tmp, path)
    return model


def train_teacher(cfg: ExperimentConfig, train: Dataset) -> TransformerLM:
    teacher = TransformerLM(cfg.model.teacher, seed=cfg.model.teacher_seed)
    finetune(teacher, train, cfg.teacher_train)
    return teacher


def stage1_student(cfg: ExperimentConfig, pretrain: Dataset, teacher: TransformerLM) -> TransformerLM:
    if cfg.model.student_init == "every_other":
        student = init_student_from_teacher(teacher, cfg.model.keep_every)
    else:
        student = TransformerLM(cfg.model.student, seed=cfg.model.student_seed)
    train_stage1(student, pretrain, cfg.pretrain)
    return student


def prepare(cfg: ExperimentConfig, out_dir, rows: list[AblationRow] | None = None) -> Pipeline:
    """Build (or reload) the shared artifacts for ``cfg`` under ``out_dir``."""
    art = Path(out_dir) / "artifacts"
    train, ev, pre = build_datasets(cfg)
    t0 = time.time()
    tkey = cfg.digest("model", "data") + "-" + _train_key(cfg.teacher_train)
    teacher = _cached(art / f"teacher-{tkey}.npz", lambda: train_teacher(cfg, train))
    log.info("teacher ready (%.1fs)", time.time() - t0)
    skey = tkey + "-" + _train_key(cfg.pretrain)
    student = _cached(art / f"stage1-{skey}.npz", lambda: stage1_student(cfg, pre, teacher))
    teacher_report = eval_qa_accuracy(teacher, ev)
    teacher_answers = greedy_answers(teacher, ev)
    log.info("teacher eval accuracy %.1f%%", teacher_report.accuracy)
    pipe = Pipeline(cfg, train, ev, teacher, student, teacher_answers, teacher_report)
    modes = {r.regenerate for r in rows or []} | {cfg.data.regenerate}
    if "teacher" in modes:
        pipe.regenerated["teacher"], stats = regenerate_with_teacher(train, teacher)
        log.info("teacher regeneration: %s", stats.to_dict())
    if "student" in modes:
        # the regenerating student is the plain fine-tune of the stage-1 student at the first seed
        warm = student.clone()
        finetune(warm, train, _with_seed(cfg.finetune, cfg.ablation.seeds[0]))
        pipe.regenerated["student"], stats = regenerate_with_student(
            train, warm, cfg.data.student_fraction, cfg.ablation.seeds[0])
        log.info("student regeneration: %s", stats.to_dict())
    return pipe


def _train_key(tc) -> str:
    return "-".join(str(v) for v in tc.to_dict().values()).replace(".", "p")


def _with_seed(tc, seed: int):
    from dataclasses import replace

    return replace(tc, seed=seed)


def run_one(pipe: Pipeline, distill: DistillConfig, seed: int, regenerate: str = "none") -> tuple[EvalReport, TransformerLM]:
    """One stage-2 run from the shared stage-1 student, evaluated on the held-out set."""
    data = pipe.train if regenerate == "none" else pipe.regenerated[regenerate]
    student = pipe.student_init.clone()
    tc = _with_seed(pipe.config.finetune, seed)
    distill_stage2(student, pipe.teacher, data, tc, distill)
    report = eval_qa_accuracy(student, pipe.eval, teacher_answers=pipe.teacher_answers)
    return report, student


# -- report ---------------------------------------------------------------------------

def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


@dataclass
class AblationRowResult:
    name: str
    summary: str
    regenerate: str
    seeds: list[int]
    runs: list[EvalReport]

    def metric(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.runs]

    def stats(self, name: str) -> tuple[float, float]:
        return _mean_std(self.metric(name))

    def avg(self) -> float:
        """Mean of the percentage metrics (accuracy and agreement)."""
        return (self.stats("accuracy")[0] + self.stats("agreement")[0]) / 2.0

    def to_record(self) -> dict:
        rec = {"name": self.name, "summary": self.summary, "regenerate": self.regenerate, "seeds": self.seeds,
               "runs": [r.to_dict() for r in self.runs]}
        for m in METRICS:
            rec[f"{m}_mean"], rec[f"{m}_std"] = self.stats(m)
        rec["avg"] = self.avg()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> AblationRowResult:
        return cls(rec["name"], rec["summary"], rec["regenerate"], list(rec["seeds"]),
                   [EvalReport.from_dict(r) for r in rec["runs"]])


@dataclass
class AblationReport:
    rows: list[AblationRowResult]
    teacher: EvalReport | None = None
    eval_size: int = 0

    def row(self, name: str) -> AblationRowResult:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def baseline(self) -> AblationRowResult:
        return self.row(BASELINE)

    @property
    def num_runs(self) -> int:
        return sum(len(r.runs) for r in self.rows)

    @property
    def num_distill_runs(self) -> int:
        return sum(len(r.runs) for r in self.rows if r.name != BASELINE)

    def to_records(self) -> list[dict]:
        head = {"kind": "meta", "eval_size": self.eval_size,
                "teacher": self.teacher.to_dict() if self.teacher else None}
        return [head] + [{"kind": "row", **r.to_record()} for r in self.rows]

    @classmethod
    def from_records(cls, records: list[dict]) -> AblationReport:
        meta = next(r for r in records if r["kind"] == "meta")
        rows = [AblationRowResult.from_record(r) for r in records if r["kind"] == "row"]
        teacher = EvalReport.from_dict(meta["teacher"]) if meta["teacher"] else None
        return cls(rows, teacher, meta["eval_size"])

    def __eq__(self, other) -> bool:
        return isinstance(other, AblationReport) and self.to_records() == other.to_records()


def _fmt(mean: float, std: float, nd: int) -> str:
    return f"{mean:.{nd}f} ± {std:.{nd}f}"


def format_table(report: AblationReport) -> str:
    """Markdown table: config, accuracy, agreement, held-out loss, Avg."""
    header = ["config", "accuracy (%)", "agreement (%)", "held-out loss", "Avg"]
    lines = []
    for r in report.rows:
        lines.append([r.name, _fmt(*r.stats("accuracy"), 2), _fmt(*r.stats("agreement"), 2),
                      _fmt(*r.stats("heldout_loss"), 4), f"{r.avg():.2f}"])
    widths = [max(len(h), *(len(line[i]) for line in lines)) for i, h in enumerate(header)]

    def row(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    out = [row(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out += [row(line) for line in lines]
    if report.teacher is not None:
        out.append("")
        out.append(f"teacher accuracy: {report.teacher.accuracy:.2f}% on {report.eval_size} held-out questions")
    return "\n".join(out) + "\n"


def emit_report(report: AblationReport, path, fmt: str = "table") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "table":
        path.write_text(format_table(report))
    elif fmt == "records":
        with open(path, "w") as fh:
            for rec in report.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    else:
        raise ConfigurationError(f"unknown report format {fmt!r}")
    return path


def read_records(path) -> AblationReport:
    with open(path) as fh:
        return AblationReport.from_records([json.loads(line) for line in fh if line.strip()])


# -- runner ---------------------------------------------------------------------------

_WORKER_PIPE: Pipeline | None = None


def _init_worker(cfg: ExperimentConfig, out_dir: str, rows: list[AblationRow]) -> None:
    global _WORKER_PIPE
    _WORKER_PIPE = prepare(cfg, out_dir, rows)


def _worker_run(job: tuple[str, dict, int, str]) -> dict:
    name, distill, seed, regen = job
    report, _ = run_one(_WORKER_PIPE, DistillConfig(**distill), seed, regen)
    return report.to_dict()


def matrix_rows(cfg: ExperimentConfig, rows: list[AblationRow] | None = None) -> list[AblationRow]:
    """Matrix rows with the baseline (plain autoregressive loss) prepended when absent."""
    rows = list(cfg.ablation.rows if rows is None else rows)
    names = [r.name for r in rows]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigurationError(f"duplicate ablation row names: {', '.join(dupes)}")
    if BASELINE not in names:
        rows.insert(0, AblationRow(BASELINE, DistillConfig()))
    return rows


def run_ablation(cfg: ExperimentConfig, out_dir, seeds=None, rows: list[AblationRow] | None = None,
                 workers: int = 1, pipeline: Pipeline | None = None) -> AblationReport:
    """Train and evaluate every (row, seed) pair and aggregate mean ± std per row."""
    rows = matrix_rows(cfg, rows)
    seeds = list(cfg.ablation.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigurationError("ablation needs at least one seed")
    jobs = [(r.name, r.distill.to_dict(), s, r.regenerate) for r in rows for s in seeds]
    log.info("ablation: %d rows x %d seeds = %d runs", len(rows), len(seeds), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(cfg, str(out_dir), rows)) as pool:
            results = list(pool.map(_worker_run, jobs))
    else:
        pipe = pipeline or prepare(cfg, out_dir, rows)
        results = []
        for name, distill, seed, regen in jobs:
            t0 = time.time()
            rep, _ = run_one(pipe, DistillConfig(**distill), seed, regen)
            log.info("%s seed %d: acc %.1f agree %.1f (%.1fs)", name, seed, rep.accuracy, rep.agreement,
                     time.time() - t0)
            results.append(rep.to_dict())
    teacher = pipeline.teacher_report if pipeline else None
    if teacher is None:
        pipe_t = prepare(cfg, out_dir, []) if workers > 1 else pipe
        teacher = pipe_t.teacher_report
    out_rows = []
    for i, r in enumerate(rows):
        chunk = results[i * len(seeds):(i + 1) * len(seeds)]
        out_rows.append(AblationRowResult(r.name, r.distill.summary(), r.regenerate, seeds,
                                          [EvalReport.from_dict(c) for c in chunk]))
    return AblationReport(out_rows, teacher, cfg.data.eval_size)


def directional_checks(report: AblationReport) -> dict[str, bool]:
    """Mean-over-seeds comparisons of each row against the baseline."""
    base = report.baseline
    out = {}
    for r in report.rows:
        if r.name == BASELINE:
            continue
        out[f"{r.name}:accuracy>baseline"] = r.stats("accuracy")[0] > base.stats("accuracy")[0]
        out[f"{r.name}:agreement>baseline"] = r.stats("agreement")[0] > base.stats("agreement")[0]
    return out


def within_one_std(row: AblationRowResult, base: AblationRowResult, metric: str = "accuracy") -> bool:
    """True unless ``row`` trails ``base`` by more than one baseline standard deviation."""
    m, _ = row.stats(metric)
    bm, bs = base.stats(metric)
    return m >= bm - bs or math.isclose(m, bm)
