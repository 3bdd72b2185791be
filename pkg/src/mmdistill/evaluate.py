"""Exact-match QA accuracy, teacher agreement and held-out loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, decode_answers
from .errors import ConfigurationError, ContractError
from .model import TransformerLM, check_pair
from .train import heldout_losses

_EVAL_BATCH = 256


@dataclass
class EvalReport:
    accuracy: float
    per_family: dict[str, float] = field(default_factory=dict)
    agreement: float | None = None
    heldout_loss: float = float("nan")
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(**d)


def greedy_answers(model: TransformerLM, dataset: Dataset) -> list[str]:
    """Greedy answer text per sample; unfinished decodes keep whatever was produced."""
    return [dataset.vocab.decode(tokens) for tokens, _ in decode_answers(model, dataset, batch_size=_EVAL_BATCH)]


def mean_heldout_ce(model: TransformerLM, dataset: Dataset) -> float:
    """Teacher-forced answer-token CE averaged over all answer positions of the set."""
    total, count = 0.0, 0
    for start in range(0, len(dataset), _EVAL_BATCH):
        batch = dataset.batch(np.arange(start, min(start + _EVAL_BATCH, len(dataset))))
        k = int(batch.answer_mask.sum())
        total += heldout_losses(model, batch, pad_id=dataset.vocab.pad_id)["heldout_ce"] * k
        count += k
    return total / count


def _rate(hits: list[bool]) -> float:
    return 100.0 * sum(hits) / len(hits)


def eval_qa_accuracy(model: TransformerLM, dataset: Dataset, teacher: TransformerLM | None = None,
                     teacher_answers: list[str] | None = None) -> EvalReport:
    """Score greedy decodes against each conversation's stored answer.

    With a teacher (or its precomputed answers) the report also carries
    the agreement rate.
    """
    if len(dataset) == 0:
        raise ContractError("evaluation set is empty")
    preds = greedy_answers(model, dataset)
    hits = [p == c.answer for p, c in zip(preds, dataset.conversations)]
    fams: dict[str, list[bool]] = {}
    for h, c in zip(hits, dataset.conversations):
        fams.setdefault(c.family, []).append(h)
    report = EvalReport(
        accuracy=_rate(hits),
        per_family={f: _rate(v) for f, v in sorted(fams.items())},
        heldout_loss=mean_heldout_ce(model, dataset),
        n=len(dataset),
    )
    if teacher is not None and teacher_answers is None:
        check_pair(teacher.spec, model.spec)
        teacher_answers = greedy_answers(teacher, dataset)
    if teacher_answers is not None:
        report.agreement = _rate([a == b for a, b in zip(preds, teacher_answers)])
    return report


def teacher_agreement(student: TransformerLM, teacher: TransformerLM, dataset: Dataset) -> float:
    """Percentage of prompts on which both models decode the same answer."""
    if len(dataset) == 0:
        raise ContractError("evaluation set is empty")
    if student.spec.vocab_size != teacher.spec.vocab_size:
        raise ConfigurationError(
            f"vocabulary sizes differ: {student.spec.vocab_size} vs {teacher.spec.vocab_size}")
    a, b = greedy_answers(student, dataset), greedy_answers(teacher, dataset)
    return _rate([x == y for x, y in zip(a, b)])
