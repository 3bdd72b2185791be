"""Procedural grid-world VQA data, tokenization and answer regeneration.

Each image is a small grid of cells; a cell is empty or holds one
``(color, shape)`` object.  Questions come from four families (count,
presence, position, describe) and their answers are read off the grid, so
every original sample is noise-free.  All randomness is integer draws from
seeded numpy generators, which keeps generated datasets identical across
runs and platforms.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, ParameterError, TokenizationError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

PAD, BOS, EOS, IMG, SEP = "<pad>", "<bos>", "<eos>", "<img>", "<sep>"
SPECIALS = (PAD, BOS, EOS, IMG, SEP)
COLORS = ("red", "green", "blue")
SHAPES = ("circle", "square")
EMPTY = "empty"
FAMILIES = ("count", "presence", "position", "describe")
PROVENANCES = ("original", "teacher_regenerated", "student_regenerated")
NOWHERE, NONE = "nowhere", "none"
_WORDS = (
    "how", "many", "objects", "are", "there", "is", "a", "where", "the", "row", "column",
    "describe", "?", ".", "yes", "no", NOWHERE, NONE,
)

_SHAPE_MASKS = {
    "circle": np.array([[0, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 1, 1, 0]]),
    "square": np.array([[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]]),
}
_COLOR_RGB = {"red": (1, 0, 0), "green": (0, 1, 0), "blue": (0, 0, 1)}


class Vocabulary:
    """Bijective id <-> symbol table of fixed size ``C``.

    Ids 0..4 are the special tokens; unused ids are filled with ``<unused_k>``.
    """

    def __init__(self, size: int = 512, max_count: int = 16):
        words = list(SPECIALS) + list(COLORS) + list(SHAPES) + [EMPTY] + list(_WORDS)
        words += [str(i) for i in range(max_count + 1)]
        if size < len(words):
            raise ConfigurationError(f"vocabulary size {size} < {len(words)} required symbols")
        words += [f"<unused_{i}>" for i in range(size - len(words))]
        self.symbols: tuple[str, ...] = tuple(words)
        self.index = {w: i for i, w in enumerate(self.symbols)}
        self.content_ids = frozenset(
            i for i, w in enumerate(self.symbols) if not (w.startswith("<") and w.endswith(">"))
        )

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def img_id(self) -> int:
        return self.index[IMG]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split(" "):
            if word not in self.index:
                raise TokenizationError(f"out-of-vocabulary word {word!r}")
            ids.append(self.index[word])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.symbols[int(i)] for i in ids)


# -- worlds -------------------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    rows: int = 4
    cols: int = 4
    fill_percent: int = 40

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or not 0 <= self.fill_percent <= 100:
            raise ConfigurationError(f"invalid grid config {self}")

    @property
    def num_codes(self) -> int:
        return len(COLORS) * len(SHAPES)


def code_of(color: str, shape: str) -> int:
    return 1 + COLORS.index(color) * len(SHAPES) + SHAPES.index(shape)


def describe_code(code: int) -> str:
    if code == 0:
        return EMPTY
    c, s = divmod(int(code) - 1, len(SHAPES))
    return f"{COLORS[c]} {SHAPES[s]}"


@dataclass(frozen=True)
class ToyImage:
    cells: tuple[tuple[int, ...], ...]

    @property
    def array(self) -> np.ndarray:
        return np.array(self.cells, dtype=np.int64)

    def to_pixels(self, patch_size: int = 4) -> np.ndarray:
        """Render to an ``(rows*P, cols*P, 3)`` float image, one patch per cell."""
        return render_cells(self.array, patch_size)


def render_cells(cells: np.ndarray, patch_size: int = 4) -> np.ndarray:
    cells = np.asarray(cells)
    rows, cols = cells.shape
    P = patch_size
    img = np.zeros((rows * P, cols * P, 3))
    for r in range(rows):
        for c in range(cols):
            code = int(cells[r, c])
            if code == 0:
                continue
            ci, si = divmod(code - 1, len(SHAPES))
            mask = _SHAPE_MASKS[SHAPES[si]]
            if P != 4:
                idx = (np.arange(P) * 4) // P
                mask = mask[np.ix_(idx, idx)]
            img[r * P:(r + 1) * P, c * P:(c + 1) * P] = mask[:, :, None] * np.array(_COLOR_RGB[COLORS[ci]])
    return img


@dataclass(frozen=True)
class Facts:
    """Ground truth about one grid, from an exhaustive scan."""

    cells: np.ndarray = field(compare=False)

    def count_code(self, code: int) -> int:
        return int((self.cells == code).sum())

    def count(self, attribute: str) -> int:
        if attribute in COLORS:
            codes = [code_of(attribute, s) for s in SHAPES]
        elif attribute in SHAPES:
            codes = [code_of(c, attribute) for c in COLORS]
        else:
            raise ParameterError(f"unknown attribute {attribute!r}")
        return int(np.isin(self.cells, codes).sum())

    def present(self, color: str, shape: str) -> bool:
        return self.count_code(code_of(color, shape)) > 0

    def at(self, row: int, col: int) -> str:
        return describe_code(self.cells[row, col])

    def locate(self, color: str, shape: str) -> str:
        """1-based ``row r column c`` of the first such object in raster order."""
        hits = np.argwhere(self.cells == code_of(color, shape))
        if len(hits) == 0:
            return NOWHERE
        r, c = hits[0]
        return f"row {r + 1} column {c + 1}"

    def shapes_of(self, color: str) -> str:
        shapes = [s for s in SHAPES if self.present(color, s)]
        return " ".join(shapes) if shapes else NONE

    def counts(self) -> dict[str, int]:
        out = {a: self.count(a) for a in COLORS + SHAPES}
        out[EMPTY] = self.count_code(0)
        return out


def make_world(rng_seed: int, grid: GridConfig = GridConfig()) -> tuple[ToyImage, Facts]:
    rng = np.random.default_rng(rng_seed)
    shape = (grid.rows, grid.cols)
    filled = rng.integers(0, 100, size=shape) < grid.fill_percent
    codes = rng.integers(1, grid.num_codes + 1, size=shape)
    cells = np.where(filled, codes, 0).astype(np.int64)
    return ToyImage(tuple(tuple(int(v) for v in row) for row in cells)), Facts(cells)


# -- conversations ----------------------------------------------------------

@dataclass
class Conversation:
    """A single-turn conversation about one image."""

    image: ToyImage
    turns: list[dict]
    family: str = "count"
    provenance: str = "original"
    uid: str = ""

    def __post_init__(self):
        roles = [t["role"] for t in self.turns]
        if roles != ["instruction", "answer"] or not self.turns[1]["text"].strip():
            raise ContractError(f"conversation {self.uid!r} must be one instruction followed by a non-empty answer")
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")

    @property
    def instruction(self) -> str:
        return self.turns[0]["text"]

    @property
    def answer(self) -> str:
        return self.turns[1]["text"]

    def with_answer(self, answer: str, provenance: str) -> Conversation:
        turns = [dict(self.turns[0]), {"role": "answer", "text": answer}]
        return Conversation(self.image, turns, self.family, provenance, self.uid)

    def to_record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "uid": self.uid,
            "family": self.family,
            "cells": [list(r) for r in self.image.cells],
            "turns": [dict(t) for t in self.turns],
            "provenance": self.provenance,
        }

    @classmethod
    def from_record(cls, rec: dict) -> Conversation:
        if rec.get("schema_version") != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported dataset schema version {rec.get('schema_version')}")
        image = ToyImage(tuple(tuple(int(v) for v in row) for row in rec["cells"]))
        return cls(image, [dict(t) for t in rec["turns"]], rec["family"], rec["provenance"], rec["uid"])


def make_conversation(facts: Facts, rng_seed: int, template_set: Sequence[str] = FAMILIES,
                      image: ToyImage | None = None, uid: str = "") -> Conversation:
    if not template_set:
        raise ConfigurationError("template set is empty")
    unknown = set(template_set) - set(FAMILIES)
    if unknown:
        raise ConfigurationError(f"unknown question families {sorted(unknown)}")
    rng = np.random.default_rng(rng_seed)
    family = template_set[int(rng.integers(len(template_set)))]
    if family == "count":
        attr = (COLORS + SHAPES)[int(rng.integers(len(COLORS) + len(SHAPES)))]
        q, a = f"how many {attr} objects are there ?", str(facts.count(attr))
    elif family == "presence":
        color = COLORS[int(rng.integers(len(COLORS)))]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        q, a = f"is there a {color} {shape} ?", "yes" if facts.present(color, shape) else "no"
    elif family == "position":
        # prefer objects with at most one instance so the location is unambiguous
        codes = [k for k in range(1, len(COLORS) * len(SHAPES) + 1) if facts.count_code(k) <= 1]
        codes = codes or list(range(1, len(COLORS) * len(SHAPES) + 1))
        color, shape = describe_code(codes[int(rng.integers(len(codes)))]).split(" ")
        q, a = f"where is the {color} {shape} ?", facts.locate(color, shape)
    else:
        color = COLORS[int(rng.integers(len(COLORS)))]
        q, a = f"describe the {color} objects .", facts.shapes_of(color)
    if image is None:
        image = ToyImage(tuple(tuple(int(v) for v in row) for row in facts.cells))
    turns = [{"role": "instruction", "text": q}, {"role": "answer", "text": a}]
    return Conversation(image, turns, family, "original", uid)


def oracle_answer(conv: Conversation) -> str:
    """Re-derive the ground-truth answer of a conversation from its grid."""
    facts = Facts(conv.image.array)
    w = conv.instruction.split(" ")
    if conv.family == "count":
        return str(facts.count(w[2]))
    if conv.family == "presence":
        return "yes" if facts.present(w[3], w[4]) else "no"
    if conv.family == "position":
        return facts.locate(w[3], w[4])
    return facts.shapes_of(w[2])


# -- tokenization --------------------------------------------------------------

@dataclass
class TokenizedSample:
    ids: np.ndarray
    answer_mask: np.ndarray
    all_mask: np.ndarray
    image_mask: np.ndarray
    instruction_mask: np.ndarray
    prompt_len: int

    @property
    def prompt(self) -> np.ndarray:
        return self.ids[: self.prompt_len]


def tokenize(conv: Conversation, vocab: Vocabulary, num_visual: int) -> TokenizedSample:
    """Layout ``[BOS, IMG*n, instruction, SEP, answer, EOS]``; answer mask covers answer and EOS."""
    instr = vocab.encode(conv.instruction)
    ans = vocab.encode(conv.answer)
    ids = [vocab.bos_id] + [vocab.img_id] * num_visual + instr + [vocab.sep_id] + ans + [vocab.eos_id]
    n = len(ids)
    ids = np.array(ids, dtype=np.int64)
    prompt_len = 1 + num_visual + len(instr) + 1
    answer = np.zeros(n, dtype=bool)
    answer[prompt_len:] = True
    image = np.zeros(n, dtype=bool)
    image[1:1 + num_visual] = True
    instruction = np.zeros(n, dtype=bool)
    instruction[1 + num_visual:1 + num_visual + len(instr)] = True
    return TokenizedSample(ids, answer, np.ones(n, dtype=bool), image, instruction, prompt_len)


def detokenize(sample: TokenizedSample, vocab: Vocabulary) -> tuple[str, str]:
    instr = vocab.decode(sample.ids[sample.instruction_mask])
    ans_ids = sample.ids[sample.answer_mask]
    return instr, vocab.decode(ans_ids[:-1])


@dataclass
class Batch:
    """Right-padded batch; PAD positions are excluded from every mask."""

    ids: np.ndarray
    images: np.ndarray
    answer_mask: np.ndarray
    all_mask: np.ndarray
    image_mask: np.ndarray
    instruction_mask: np.ndarray
    ce_rows: np.ndarray  # rows that contribute to the autoregressive loss
    indices: np.ndarray

    @property
    def text_mask(self) -> np.ndarray:
        return self.all_mask & ~self.image_mask

    def __len__(self) -> int:
        return self.ids.shape[0]


# -- datasets -------------------------------------------------------------------

_SPLITS = {"train": 0, "eval": 1, "pretrain": 2}


def _sample_seeds(seed: int, split: str, index: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence([seed, _SPLITS[split], index]).generate_state(2)
    return int(a), int(b)


class Dataset:
    """An ordered list of conversations plus cached tokenization and pixels."""

    def __init__(self, conversations: Sequence[Conversation], vocab: Vocabulary | None = None, patch_size: int = 4):
        self.conversations = list(conversations)
        self.vocab = vocab or Vocabulary()
        self.patch_size = patch_size
        self._tok: list[TokenizedSample] | None = None
        self._pix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.conversations)

    def __getitem__(self, i: int) -> Conversation:
        return self.conversations[i]

    @property
    def num_visual(self) -> int:
        if not self.conversations:
            return 0
        cells = self.conversations[0].image.cells
        return len(cells) * len(cells[0])

    def tokenized(self) -> list[TokenizedSample]:
        if self._tok is None:
            self._tok = [tokenize(c, self.vocab, self.num_visual) for c in self.conversations]
        return self._tok

    def pixels(self) -> np.ndarray:
        if self._pix is None:
            self._pix = np.stack([c.image.to_pixels(self.patch_size) for c in self.conversations])
        return self._pix

    def batch(self, indices: Sequence[int]) -> Batch:
        toks = self.tokenized()
        idx = np.asarray(indices, dtype=np.int64)
        width = max(len(toks[i].ids) for i in idx)
        B = len(idx)
        ids = np.full((B, width), self.vocab.pad_id, dtype=np.int64)
        masks = {k: np.zeros((B, width), dtype=bool) for k in ("answer", "all", "image", "instruction")}
        for r, i in enumerate(idx):
            t = toks[i]
            n = len(t.ids)
            ids[r, :n] = t.ids
            masks["answer"][r, :n] = t.answer_mask
            masks["all"][r, :n] = t.all_mask
            masks["image"][r, :n] = t.image_mask
            masks["instruction"][r, :n] = t.instruction_mask
        ce_rows = np.array([self.conversations[i].provenance != "student_regenerated" for i in idx], dtype=bool)
        return Batch(ids, self.pixels()[idx], masks["answer"], masks["all"], masks["image"],
                     masks["instruction"], ce_rows, idx)

    def provenance_counts(self) -> dict[str, int]:
        out = {p: 0 for p in PROVENANCES}
        for c in self.conversations:
            out[c.provenance] += 1
        return out

    # -- persistence ---------------------------------------------------------
    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for c in self.conversations:
                fh.write(json.dumps(c.to_record(), sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path, vocab: Vocabulary | None = None, patch_size: int = 4) -> Dataset:
        with open(path) as fh:
            convs = [Conversation.from_record(json.loads(line)) for line in fh if line.strip()]
        return cls(convs, vocab, patch_size)


def make_dataset(n: int, seed: int, split: str = "train", grid: GridConfig = GridConfig(),
                 families: Sequence[str] = FAMILIES, vocab: Vocabulary | None = None,
                 patch_size: int = 4) -> Dataset:
    """``n`` conversations; train/eval/pretrain use disjoint seed streams."""
    if split not in _SPLITS:
        raise ConfigurationError(f"unknown split {split!r}")
    convs = []
    for i in range(n):
        world_seed, conv_seed = _sample_seeds(seed, split, i)
        image, facts = make_world(world_seed, grid)
        convs.append(make_conversation(facts, conv_seed, families, image=image, uid=f"{split}-{i}"))
    return Dataset(convs, vocab, patch_size)


# -- regeneration ---------------------------------------------------------------

MAX_ANSWER_TOKENS = 4  # "row r column c"


def decode_answers(model, dataset: Dataset, indices: Sequence[int] | None = None,
                   batch_size: int = 256, max_new: int | None = None) -> list[tuple[list[int], bool]]:
    """Greedy answers for each prompt: ``(token ids without EOS, finished)``."""
    from .model import generate

    toks = dataset.tokenized()
    idx = list(range(len(dataset))) if indices is None else list(indices)
    if max_new is None:
        max_new = MAX_ANSWER_TOKENS + 1
    pix = dataset.pixels()
    out: list[tuple[list[int], bool]] = []
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        prompts = [toks[i].prompt.tolist() for i in chunk]
        seqs, done = generate(model, pix[chunk], prompts, max_new, dataset.vocab.eos_id, dataset.vocab.pad_id)
        out.extend(zip(seqs, done))
    return out


def _valid_answer(tokens: list[int], finished: bool, vocab: Vocabulary) -> bool:
    return finished and len(tokens) > 0 and all(t in vocab.content_ids for t in tokens)


@dataclass
class RegenerationStats:
    regenerated: int = 0
    flagged: int = 0
    untouched: int = 0

    def to_dict(self) -> dict:
        return {"regenerated": self.regenerated, "flagged": self.flagged, "untouched": self.untouched}


def _regenerate(dataset: Dataset, model, indices: list[int], provenance: str,
                batch_size: int) -> tuple[Dataset, RegenerationStats]:
    decoded = decode_answers(model, dataset, indices, batch_size=batch_size)
    convs = list(dataset.conversations)
    stats = RegenerationStats(untouched=len(dataset) - len(indices))
    for i, (tokens, finished) in zip(indices, decoded):
        if not _valid_answer(tokens, finished, dataset.vocab):
            stats.flagged += 1
            continue
        convs[i] = convs[i].with_answer(dataset.vocab.decode(tokens), provenance)
        stats.regenerated += 1
    if stats.flagged:
        log.warning("%d of %d regenerations exceeded the length budget or were malformed; originals kept",
                    stats.flagged, len(indices))
    return Dataset(convs, dataset.vocab, dataset.patch_size), stats


def regenerate_with_teacher(dataset: Dataset, teacher, batch_size: int = 256) -> tuple[Dataset, RegenerationStats]:
    """Replace every answer with the teacher's greedy answer; images and questions stay."""
    return _regenerate(dataset, teacher, list(range(len(dataset))), "teacher_regenerated", batch_size)


def regenerate_with_student(dataset: Dataset, student, fraction: float = 0.5, rng_seed: int = 0,
                            batch_size: int = 256) -> tuple[Dataset, RegenerationStats]:
    """Regenerate a seeded random ``floor(fraction * N)`` subset with the student.

    Those samples are later supervised by teacher logits only (see
    ``Batch.ce_rows``).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError(f"fraction must be in [0, 1], got {fraction}")
    k = int(np.floor(fraction * len(dataset)))
    chosen = np.sort(np.random.default_rng(rng_seed).permutation(len(dataset))[:k]).tolist()
    return _regenerate(dataset, student, chosen, "student_regenerated", batch_size)
