"""Command-line entry point: ``mmdistill <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .ablation import BASELINE, emit_report, run_ablation
from .config import ExperimentConfig, build_config, dump_config, load_config
from .data import Dataset, make_dataset, regenerate_with_student, regenerate_with_teacher
from .errors import ConfigurationError, MMDistillError
from .evaluate import eval_qa_accuracy
from .gradsuite import format_results, run_suite
from .model import TransformerLM, init_student_from_teacher, load_checkpoint
from .train import Trainer

log = logging.getLogger("mmdistill")


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else build_config()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, cfg: ExperimentConfig, split: str) -> Dataset:
    path = getattr(args, "data", None)
    if path:
        return Dataset.load(path, patch_size=cfg.model.student.encoder.patch_size)
    d = cfg.data
    n = {"train": d.train_size, "eval": d.eval_size, "pretrain": d.pretrain_size}[split]
    fams = d.pretrain_families if split == "pretrain" else d.families
    return make_dataset(n, d.seed, split, d.grid, fams, patch_size=cfg.model.student.encoder.patch_size)


def _finish(trainer: Trainer, out: Path, name: str) -> None:
    ckpt = trainer.save(out / f"{name}.npz")
    trainer.log.checkpoint = str(ckpt)
    trainer.log.write(out / f"{name}.runlog.jsonl")
    print(f"checkpoint: {ckpt}")


def cmd_gen_data(args) -> None:
    cfg, out = _config(args), _out(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    for split in ("train", "eval", "pretrain"):
        ds = _dataset(args, cfg, split)
        path = ds.save(out / f"{split}.jsonl")
        print(f"{split}: {len(ds)} conversations -> {path}")


def cmd_pretrain(args) -> None:
    cfg, out = _config(args), _out(args)
    data = _dataset(args, cfg, "pretrain")
    if args.init_from:
        teacher = load_checkpoint(args.init_from)[0]
        student = init_student_from_teacher(teacher, cfg.model.keep_every)
    else:
        student = TransformerLM(cfg.model.student, seed=cfg.model.student_seed)
    tc = replace(cfg.pretrain, seed=args.seed if args.seed is not None else cfg.pretrain.seed)
    trainer = Trainer(student, data, tc)
    before = trainer.frozen_digest()
    trainer.run()
    if trainer.frozen_digest() != before:
        raise MMDistillError("stage 1 modified frozen parameters")
    _finish(trainer, out, "stage1")


def _resume_or_new(args, cfg, data, distill, teacher, eval_data, tc) -> Trainer:
    if args.resume:
        trainer = Trainer.resume(args.resume, data, teacher, eval_data)
        if trainer.config.stage != "finetune":
            raise ConfigurationError(f"{args.resume} holds a {trainer.config.stage} run; use it with --init instead")
        return trainer
    if args.init:
        student = load_checkpoint(args.init)[0]
    elif args.role == "teacher":
        student = TransformerLM(cfg.model.teacher, seed=cfg.model.teacher_seed)
    else:
        student = TransformerLM(cfg.model.student, seed=cfg.model.student_seed)
    return Trainer(student, data, tc, distill, teacher, eval_data)


def _regenerated(args, cfg, data: Dataset, teacher) -> Dataset:
    mode = cfg.data.regenerate
    if mode == "teacher":
        data, stats = regenerate_with_teacher(data, teacher)
    elif mode == "student":
        if not args.init:
            raise MMDistillError("student regeneration needs --init <student checkpoint>")
        data, stats = regenerate_with_student(data, load_checkpoint(args.init)[0], cfg.data.student_fraction,
                                              cfg.finetune.seed)
    else:
        return data
    print(f"regeneration ({mode}): {stats.to_dict()}")
    return data


def cmd_train(args) -> None:
    cfg, out = _config(args), _out(args)
    data, ev = _dataset(args, cfg, "train"), _dataset(argparse.Namespace(), cfg, "eval")
    tc = cfg.teacher_train if args.role == "teacher" else cfg.finetune
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    trainer = _resume_or_new(args, cfg, data, None, None, ev, tc)
    trainer.run(until=args.steps)
    _finish(trainer, out, args.role if args.role == "teacher" else "finetune")


def cmd_distill(args) -> None:
    cfg, out = _config(args), _out(args)
    if not args.teacher:
        raise MMDistillError("distill needs --teacher <checkpoint>")
    teacher = load_checkpoint(args.teacher)[0]
    data = _regenerated(args, cfg, _dataset(args, cfg, "train"), teacher)
    ev = _dataset(argparse.Namespace(), cfg, "eval")
    tc = cfg.finetune if args.seed is None else replace(cfg.finetune, seed=args.seed)
    trainer = _resume_or_new(args, cfg, data, cfg.distill, teacher, ev, tc)
    teacher_before = teacher.state_arrays()
    trainer.run(until=args.steps)
    if any((teacher.state_arrays()[k] != v).any() for k, v in teacher_before.items()):
        raise MMDistillError("teacher parameters changed during distillation")
    _finish(trainer, out, "distill")


def cmd_eval(args) -> None:
    cfg, out = _config(args), _out(args)
    model = load_checkpoint(args.checkpoint)[0]
    ev = _dataset(args, cfg, "eval")
    teacher = load_checkpoint(args.teacher)[0] if args.teacher else None
    report = eval_qa_accuracy(model, ev, teacher)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    (out / "eval.json").write_text(text + "\n")
    print(text)


def cmd_ablate(args) -> None:
    cfg, out = _config(args), _out(args)
    seeds = args.seeds if args.seeds else None
    t0 = time.time()
    report = run_ablation(cfg, out, seeds=seeds, workers=args.workers)
    table = emit_report(report, out / "ablation.md", "table")
    records = emit_report(report, out / "ablation.jsonl", "records")
    print(table.read_text(), end="")
    print(f"{report.num_distill_runs} distillation runs + {len(report.baseline.runs)} {BASELINE} runs "
          f"in {time.time() - t0:.0f}s -> {table}, {records}")


def cmd_gradcheck(args) -> None:
    t0 = time.time()
    results = run_suite(seed=args.seed or 0)
    print(format_results(results))
    print(f"elapsed {time.time() - t0:.1f}s")
    if not all(r.passed for r in results):
        raise MMDistillError("gradient check failed")


def cmd_show_config(args) -> None:
    print(dump_config(_config(args)), end="")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML file (defaults built in)")
    common.add_argument("--seed", type=int, default=None, help="override the run / data seed")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mmdistill", description="Teacher-to-student distillation for toy visual-prefix LMs.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write train/eval/pretrain JSONL datasets")
    g.set_defaults(func=cmd_gen_data)

    pre = sub.add_parser("pretrain", parents=[common], help="stage 1: train the visual projector only")
    pre.add_argument("--data", help="pretrain dataset JSONL")
    pre.add_argument("--init-from", help="teacher checkpoint for every-other-layer student initialization")
    pre.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (("train", cmd_train, "plain fine-tune (autoregressive loss only)"),
                                 ("distill", cmd_distill, "stage 2 with the configured distillation losses")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--data", help="training dataset JSONL")
        sp.add_argument("--init", help="start from this model checkpoint (e.g. stage-1 output)")
        sp.add_argument("--resume", help="resume a run from a trainer checkpoint")
        sp.add_argument("--steps", type=int, default=None, help="stop after this many total steps")
        if name == "train":
            sp.add_argument("--role", choices=("student", "teacher"), default="student")
        else:
            sp.add_argument("--teacher", help="teacher checkpoint")
            sp.set_defaults(role="student")
        sp.set_defaults(func=func)

    e = sub.add_parser("eval", parents=[common], help="accuracy, agreement and held-out loss")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="evaluation dataset JSONL")
    e.add_argument("--teacher", help="teacher checkpoint for the agreement rate")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="run the configured ablation matrix")
    a.add_argument("--seeds", type=int, nargs="+", help="override the matrix seeds")
    a.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.set_defaults(func=cmd_gradcheck)

    sc = sub.add_parser("show-config", parents=[common], help="print the fully resolved config")
    sc.set_defaults(func=cmd_show_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except MMDistillError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 9
    return 0


if __name__ == "__main__":
    sys.exit(main())
