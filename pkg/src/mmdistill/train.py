"""Two-stage training: projector pretraining, then (distillation) fine-tuning."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .data import Batch, Dataset
from .errors import ConfigurationError, ContractError
from .losses import DistillConfig, FeatureProjector
from .model import TransformerLM, check_pair, params_digest

log = logging.getLogger(__name__)

_STAGE_DEFAULTS = {"pretrain": (256, 1e-3), "finetune": (128, 2e-5)}


@dataclass
class TrainConfig:
    stage: str = "finetune"
    batch_size: int = 0  # 0 -> stage default
    learning_rate: float = 0.0  # 0 -> stage default
    warmup_ratio: float = 0.03
    schedule: str = "cosine"
    epochs: int = 1
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # 0 -> off; 1.0 is the usual setting
    seed: int = 0
    eval_samples: int = 256

    def __post_init__(self):
        if self.stage not in _STAGE_DEFAULTS:
            raise ConfigurationError(f"stage must be pretrain or finetune, got {self.stage!r}")
        bs, lr = _STAGE_DEFAULTS[self.stage]
        self.batch_size = int(self.batch_size or bs)
        self.learning_rate = float(self.learning_rate or lr)
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.schedule != "cosine":
            raise ConfigurationError(f"only the cosine schedule is supported, got {self.schedule!r}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigurationError("warmup_ratio must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigurationError("weight_decay and grad_clip must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


def warmup_steps(total_steps: int, warmup_ratio: float = 0.03) -> int:
    return int(math.ceil(warmup_ratio * total_steps))


def lr_schedule(step: int, total_steps: int, peak_lr: float, warmup_ratio: float = 0.03) -> float:
    """Linear warmup to ``peak_lr`` over ``ceil(warmup_ratio*total)`` steps, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, warmup_ratio)
    if step <= w:
        return peak_lr * step / w if w else peak_lr
    progress = (step - w) / (total_steps - w)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One bias-corrected AdamW update, in place on ``params`` and ``state``."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ContractError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= lr * update


# -- run log -------------------------------------------------------------------------

@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    checkpoint: str = ""

    def add_step(self, record: dict) -> None:
        if self.steps and record["step"] <= self.steps[-1]["step"]:
            raise ContractError("step ids must increase")
        self.steps.append(record)

    def records(self) -> list[dict]:
        out = [{"kind": "step", **r} for r in self.steps]
        out += [{"kind": "eval", **r} for r in self.evals]
        if self.checkpoint:
            out.append({"kind": "checkpoint", "path": self.checkpoint})
        return out

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records():
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> RunLog:
        out = cls()
        with open(path) as fh:
            for line in fh:
                r = json.loads(line)
                kind = r.pop("kind")
                if kind == "step":
                    out.steps.append(r)
                elif kind == "eval":
                    out.evals.append(r)
                else:
                    out.checkpoint = r["path"]
        return out

    def to_json(self) -> str:
        return json.dumps({"steps": self.steps, "evals": self.evals, "checkpoint": self.checkpoint}, sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> RunLog:
        d = json.loads(s)
        return cls(d["steps"], d["evals"], d["checkpoint"])


# -- trainer -------------------------------------------------------------------------

def _mask_for(policy: str, batch: Batch) -> np.ndarray:
    return batch.answer_mask if policy == "answer_only" else batch.all_mask


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


class Trainer:
    """Owns one training run: model(s), optimizer state, data order and log.

    The stage decides what trains: ``pretrain`` updates only the visual
    projector; ``finetune`` updates projector, LM and any feature projectors.
    Teacher and visual encoder are never updated.
    """

    def __init__(self, model: TransformerLM, dataset: Dataset, config: TrainConfig,
                 distill: DistillConfig | None = None, teacher: TransformerLM | None = None,
                 eval_dataset: Dataset | None = None):
        if len(dataset) == 0:
            raise ContractError("training dataset is empty")
        self.model = model
        self.dataset = dataset
        self.config = config
        self.distill = distill or DistillConfig()
        self.teacher = teacher
        self.eval_dataset = eval_dataset
        if config.stage == "pretrain" and self.distill.is_distilling:
            raise ConfigurationError("distillation components are only allowed in the fine-tuning stage")
        if self.distill.is_distilling:
            if teacher is None:
                raise ConfigurationError("distillation needs a teacher model")
        if teacher is not None:
            check_pair(teacher.spec, model.spec)
        if dataset.provenance_counts()["student_regenerated"] and self.distill.logit_loss == "none":
            raise ConfigurationError("student-regenerated samples need a logit distillation loss for supervision")

        self.projectors: dict[int, FeatureProjector] = {}
        if self.distill.feature_loss != "none":
            pairs = L.align_layers(self.distill.feature_layers, model.spec.num_layers, teacher.spec.num_layers)
            for k, (si, _) in enumerate(pairs):
                seed = int(np.random.SeedSequence([config.seed, 7, k]).generate_state(1)[0])
                self.projectors[si] = FeatureProjector(model.spec.hidden_dim, teacher.spec.hidden_dim,
                                                       self.distill.projector_hidden, seed)

        names = model.projector_names() if config.stage == "pretrain" else list(model.params)
        self.trainable: dict[str, Tensor] = {f"model/{n}": model.params[n] for n in names}
        for si, proj in self.projectors.items():
            for n, t in proj.params.items():
                self.trainable[f"featproj/{si}/{n}"] = t
        self.frozen_names = [n for n in model.params if n not in names]
        self.opt_state = AdamState()
        self.step = 0
        self.steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
        self.total_steps = self.steps_per_epoch * config.epochs
        self.log = RunLog()
        self._eval_batch: Batch | None = None

    # -- data order ---------------------------------------------------------------
    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.dataset))
        bs = self.config.batch_size
        return perm[k * bs:(k + 1) * bs]

    # -- losses -----------------------------------------------------------------
    def compute_components(self, batch: Batch) -> dict[str, Tensor]:
        d = self.distill
        out = self.model(batch.images, batch.ids)
        comps: dict[str, Tensor] = {}
        targets = L.next_token_targets(batch.ids, self.dataset.vocab.pad_id)
        ce_mask = L.prediction_mask(batch.answer_mask & batch.ce_rows[:, None])
        comps["ce"] = L.autoregressive_ce(out.logits, targets, ce_mask) if ce_mask.any() else Tensor(0.0)
        if not d.is_distilling:
            return comps
        with ad.no_grad():
            t_out = self.teacher(batch.images, batch.ids)
        if d.logit_loss != "none":
            mask = L.prediction_mask(_mask_for(d.logit_mask, batch))
            comps["logit"] = L.logit_loss(d, t_out.logits, out.logits, mask)
        if d.feature_loss != "none":
            comps["feature"] = L.feature_align_loss(out.hidden_states, t_out.hidden_states, self.projectors,
                                                    d.feature_loss, _mask_for(d.feature_mask, batch),
                                                    d.feature_layers)
        if d.affinity_loss == "attention":
            comps["affinity"] = L.attention_affinity_loss(out.attention_scores[-1], t_out.attention_scores[-1],
                                                          d.attention_group, batch.all_mask, batch.image_mask,
                                                          batch.answer_mask)
        elif d.affinity_loss == "similarity":
            comps["affinity"] = L.similarity_affinity_loss(out.hidden_states[-1], t_out.hidden_states[-1],
                                                           batch.image_mask, batch.text_mask)
        return comps

    def train_step(self) -> dict:
        if self.step >= self.total_steps:
            raise ContractError("training already finished")
        batch = self.dataset.batch(self.batch_indices(self.step))
        total, values = L.compose(self.distill, self.compute_components(batch))
        if total.requires_grad:
            ad.backward(total)
        grads = {n: t.grad for n, t in self.trainable.items()}
        if self.config.grad_clip:
            norm = global_grad_norm([g for g in grads.values() if g is not None])
            if norm > self.config.grad_clip:
                scale = self.config.grad_clip / norm
                grads = {n: None if g is None else g * scale for n, g in grads.items()}
        lr = lr_schedule(self.step + 1, self.total_steps, self.config.learning_rate, self.config.warmup_ratio)
        adamw_step({n: t.data for n, t in self.trainable.items()}, grads, self.opt_state, lr,
                   self.config.beta1, self.config.beta2, self.config.adam_eps, self.config.weight_decay)
        for t in self.model.params.values():
            t.grad = None
        for proj in self.projectors.values():
            for t in proj.params.values():
                t.grad = None
        self.step += 1
        record = {"step": self.step, "lr": lr, "loss": values.pop("total"), "components": values}
        self.log.add_step(record)
        if self.eval_dataset is not None and self.step % self.steps_per_epoch == 0:
            self.log.evals.append({"epoch": self.step // self.steps_per_epoch, **self.heldout_metrics()})
        return record

    def run(self, until: int | None = None) -> RunLog:
        stop = self.total_steps if until is None else min(until, self.total_steps)
        t0 = time.time()
        while self.step < stop:
            rec = self.train_step()
            if self.step % 20 == 0 or self.step == stop:
                log.info("step %d/%d loss %.4f lr %.2e (%.1fs)", self.step, self.total_steps, rec["loss"],
                         rec["lr"], time.time() - t0)
        return self.log

    # -- held-out metrics ---------------------------------------------------------
    def heldout_metrics(self) -> dict:
        """Teacher-forced CE (and forward KL to the teacher, if any) on a fixed held-out batch."""
        if self._eval_batch is None:
            n = min(self.config.eval_samples, len(self.eval_dataset))
            self._eval_batch = self.eval_dataset.batch(np.arange(n))
        return heldout_losses(self.model, self._eval_batch, self.teacher, self.distill.temperature,
                              self.eval_dataset.vocab.pad_id)

    # -- persistence --------------------------------------------------------------
    def frozen_digest(self) -> str:
        arrays = {n: self.model.params[n].data for n in self.frozen_names}
        arrays.update(self.model.frozen_arrays())
        return params_digest(arrays)

    def save(self, path) -> Path:
        from .model import save_checkpoint

        extra = {}
        for n, t in self.trainable.items():
            if n.startswith("featproj/"):
                extra[f"param:{n}"] = t.data
        for n, m in self.opt_state.m.items():
            extra[f"adam_m:{n}"] = m
            extra[f"adam_v:{n}"] = self.opt_state.v[n]
        meta = {
            "trainer": {
                "step": self.step,
                "adam_t": self.opt_state.t,
                "train": self.config.to_dict(),
                "distill": self.distill.to_dict(),
                "log": self.log.to_json(),
            }
        }
        return save_checkpoint(path, self.model, extra, meta)

    def load_state(self, extra: dict[str, np.ndarray], meta: dict) -> None:
        """Restore optimizer, feature projectors, step counter and log from a checkpoint."""
        tr = meta["trainer"]
        for n, t in self.trainable.items():
            if n.startswith("featproj/"):
                t.data[...] = extra[f"param:{n}"]
        self.opt_state = AdamState(
            m={k.split(":", 1)[1]: np.array(v) for k, v in extra.items() if k.startswith("adam_m:")},
            v={k.split(":", 1)[1]: np.array(v) for k, v in extra.items() if k.startswith("adam_v:")},
            t=int(tr["adam_t"]),
        )
        self.step = int(tr["step"])
        self.log = RunLog.from_json(tr["log"])

    @classmethod
    def resume(cls, path, dataset: Dataset, teacher: TransformerLM | None = None,
               eval_dataset: Dataset | None = None) -> Trainer:
        from .model import load_checkpoint

        model, extra, meta = load_checkpoint(path)
        tr = meta.get("trainer")
        if tr is None:
            raise ConfigurationError(f"{path} is a model checkpoint without trainer state")
        distill = L.DistillConfig(**tr["distill"])
        trainer = cls(model, dataset, TrainConfig(**tr["train"]), distill, teacher, eval_dataset)
        trainer.load_state(extra, meta)
        return trainer


def heldout_losses(model: TransformerLM, batch: Batch, teacher: TransformerLM | None = None,
                   temperature: float = 0.7, pad_id: int = 0) -> dict:
    with ad.no_grad():
        out = model(batch.images, batch.ids)
        targets = L.next_token_targets(batch.ids, pad_id)
        mask = L.prediction_mask(batch.answer_mask)
        res = {"heldout_ce": L.autoregressive_ce(out.logits, targets, mask).item()}
        if teacher is not None:
            t_out = teacher(batch.images, batch.ids)
            res["heldout_forward_kl"] = L.kl_logit_loss(t_out.logits, out.logits, temperature, "forward", mask).item()
    return res


# -- stage entry points ---------------------------------------------------------------

def train_stage1(model: TransformerLM, dataset: Dataset, config: TrainConfig,
                 distill: DistillConfig | None = None) -> tuple[TransformerLM, RunLog]:
    """Projector-only pretraining with the autoregressive loss on answer tokens."""
    if config.stage != "pretrain":
        raise ConfigurationError("train_stage1 needs a TrainConfig with stage='pretrain'")
    trainer = Trainer(model, dataset, config, distill)
    before = trainer.frozen_digest()
    trainer.run()
    if trainer.frozen_digest() != before:
        raise ContractError("stage 1 modified parameters outside the projector")
    return model, trainer.log


def finetune(model: TransformerLM, dataset: Dataset, config: TrainConfig,
             eval_dataset: Dataset | None = None) -> tuple[TransformerLM, RunLog]:
    """Plain fine-tuning baseline: autoregressive loss only, no teacher."""
    if config.stage != "finetune":
        raise ConfigurationError("finetune needs a TrainConfig with stage='finetune'")
    trainer = Trainer(model, dataset, config, None, None, eval_dataset)
    before = trainer.frozen_digest()
    trainer.run()
    if trainer.frozen_digest() != before:
        raise ContractError("fine-tuning modified the frozen visual encoder")
    return model, trainer.log


def distill_stage2(student: TransformerLM, teacher: TransformerLM, dataset: Dataset, config: TrainConfig,
                   distill: DistillConfig, eval_dataset: Dataset | None = None) -> tuple[TransformerLM, RunLog]:
    """Fine-tune the student with the configured distillation losses; the teacher stays frozen."""
    if config.stage != "finetune":
        raise ConfigurationError("distill_stage2 needs a TrainConfig with stage='finetune'")
    check_pair(teacher.spec, student.spec)
    teacher_before = params_digest({**teacher.state_arrays(), **teacher.frozen_arrays()})
    trainer = Trainer(student, dataset, config, distill, teacher, eval_dataset)
    before = trainer.frozen_digest()
    trainer.run()
    if trainer.frozen_digest() != before:
        raise ContractError("distillation modified the frozen visual encoder")
    if params_digest({**teacher.state_arrays(), **teacher.frozen_arrays()}) != teacher_before:
        raise ContractError("distillation modified teacher parameters")
    return student, trainer.log
