"""Visual-prefix decoder-only language model used for teacher and student.

A frozen linear patch embedder turns an image into patch features, a
trainable projector maps them into the LM's embedding space, and a pre-LN
causal transformer runs over ``[BOS, visual tokens, text tokens]``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError, LengthError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class VisualEncoderSpec:
    image_height: int = 16
    image_width: int = 16
    patch_size: int = 4
    channels: int = 3
    visual_dim: int = 32
    seed: int = 1234

    def __post_init__(self):
        if self.patch_size < 1 or self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigurationError(
                f"image {self.image_height}x{self.image_width} is not divisible by patch size {self.patch_size}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class ModelSpec:
    vocab_size: int = 512
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 2
    max_seq_len: int = 128
    role: str = "student"
    mlp_ratio: int = 4
    image_token_id: int = 3
    encoder: VisualEncoderSpec = field(default_factory=VisualEncoderSpec)

    def __post_init__(self):
        if self.role not in ("teacher", "student"):
            raise ConfigurationError(f"role must be teacher or student, got {self.role!r}")
        if self.num_layers < 1 or self.hidden_dim < 2 or self.num_heads < 1:
            raise ConfigurationError(f"invalid model size in {self}")
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.max_seq_len <= self.encoder.num_patches + 1:
            raise ConfigurationError("max_seq_len leaves no room for text after the visual prefix")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        d = dict(d)
        enc = VisualEncoderSpec(**d.pop("encoder", {}))
        return cls(encoder=enc, **d)


def check_pair(teacher: ModelSpec, student: ModelSpec) -> None:
    """Teacher/student compatibility: shared vocabulary, student no larger."""
    if teacher.vocab_size != student.vocab_size:
        raise ConfigurationError(
            f"teacher and student must share a vocabulary (teacher C={teacher.vocab_size}, student C={student.vocab_size})"
        )
    if student.num_layers > teacher.num_layers or student.hidden_dim > teacher.hidden_dim:
        raise ConfigurationError("student must not be deeper or wider than the teacher")
    if teacher.encoder != student.encoder:
        raise ConfigurationError("teacher and student must use the same frozen visual encoder")


@dataclass
class LMOutputs:
    logits: Tensor  # (B, S, C)
    hidden_states: list[Tensor]  # per layer, (B, S, d)
    attention_scores: list[Tensor]  # per layer, (B, heads, S, S), post-softmax


def patchify(images: np.ndarray, spec: VisualEncoderSpec) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    expect = (spec.image_height, spec.image_width, spec.channels)
    if images.ndim != 4 or images.shape[1:] != expect:
        raise DimensionError(f"image shape {images.shape[1:] if images.ndim == 4 else images.shape} != expected {expect}")
    B = images.shape[0]
    P = spec.patch_size
    rows, cols = spec.grid
    x = images.reshape(B, rows, P, cols, P, spec.channels).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(B, rows * cols, spec.patch_dim)
    return x[0] if single else x


class VisualEncoder:
    """Frozen random linear patch embedder; never receives gradients."""

    def __init__(self, spec: VisualEncoderSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.weight = Tensor(rng.normal(0.0, 1.0 / math.sqrt(spec.patch_dim), (spec.patch_dim, spec.visual_dim)))
        self.bias = Tensor(rng.normal(0.0, 0.1, spec.visual_dim))

    def __call__(self, images: np.ndarray) -> Tensor:
        patches = patchify(images, self.spec)
        return Tensor(patches @ self.weight.data + self.bias.data)


def _layer_names(i: int) -> list[str]:
    p = f"layers.{i}."
    return [p + n for n in (
        "ln1.gain", "ln1.bias", "attn.q.weight", "attn.q.bias", "attn.k.weight", "attn.k.bias",
        "attn.v.weight", "attn.v.bias", "attn.out.weight", "attn.out.bias",
        "ln2.gain", "ln2.bias", "mlp.fc.weight", "mlp.fc.bias", "mlp.proj.weight", "mlp.proj.bias",
    )]


class TransformerLM:
    def __init__(self, spec: ModelSpec, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.spec = spec
        self.encoder = VisualEncoder(spec.encoder)
        self.params: dict[str, Tensor] = {}
        arrays = self._init_arrays(seed) if params is None else params
        for name, shape in self.param_shapes().items():
            if name not in arrays:
                raise ContractError(f"missing parameter {name}")
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr, requires_grad=True)

    # -- construction -----------------------------------------------------
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        s = self.spec
        d, C, dv, m = s.hidden_dim, s.vocab_size, s.encoder.visual_dim, s.mlp_ratio * s.hidden_dim
        shapes: dict[str, tuple[int, ...]] = {
            "projector.weight": (dv, d),
            "tok_emb": (C, d),
            "pos_emb": (s.max_seq_len, d),
        }
        for i in range(s.num_layers):
            n = _layer_names(i)
            for name, shp in zip(n, [(d,), (d,), (d, d), (d,), (d, d), (d,), (d, d), (d,), (d, d), (d,),
                                     (d,), (d,), (d, m), (m,), (m, d), (d,)]):
                shapes[name] = shp
        shapes["ln_f.gain"] = (d,)
        shapes["ln_f.bias"] = (d,)
        shapes["head.weight"] = (d, C)
        return shapes

    def _init_arrays(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        resid = 0.02 / math.sqrt(2 * self.spec.num_layers)
        out = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".bias"):
                out[name] = np.zeros(shape)
            elif name.endswith(".gain"):
                out[name] = np.ones(shape)
            elif name.endswith("attn.out.weight") or name.endswith("mlp.proj.weight"):
                out[name] = rng.normal(0.0, resid, shape)
            else:
                out[name] = rng.normal(0.0, 0.02, shape)
        return out

    # -- parameter views ----------------------------------------------------
    def projector_names(self) -> list[str]:
        return ["projector.weight"]

    def lm_names(self) -> list[str]:
        return [n for n in self.params if n != "projector.weight"]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        return {"encoder.weight": self.encoder.weight.data, "encoder.bias": self.encoder.bias.data}

    def clone(self) -> TransformerLM:
        return TransformerLM(self.spec, params=self.state_arrays())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward ------------------------------------------------------------
    def encode_visual(self, images: np.ndarray) -> Tensor:
        return self.encoder(images)

    def project_visual(self, z_v: Tensor) -> Tensor:
        z_v = ad.as_tensor(z_v)
        if z_v.shape[-1] != self.spec.encoder.visual_dim:
            raise DimensionError(
                f"visual feature width {z_v.shape[-1]} != projector input {self.spec.encoder.visual_dim}"
            )
        return ad.matmul(z_v, self.params["projector.weight"])

    def forward(self, h_v: Tensor, token_ids) -> LMOutputs:
        """Run the LM over token ids whose image placeholders are filled with ``h_v``.

        ``token_ids`` is ``(S,)`` or ``(B, S)``; ``h_v`` is ``(n, d)`` or ``(B, n, d)``.
        The placeholder block must be contiguous and identically placed in every row.
        """
        s = self.spec
        ids = np.asarray(token_ids, dtype=np.int64)
        h_v = ad.as_tensor(h_v)
        if ids.ndim == 1:
            ids = ids[None]
        if h_v.ndim == 2:
            h_v = ad.reshape(h_v, (1,) + h_v.shape)
        B, S = ids.shape
        if S > s.max_seq_len:
            raise LengthError(f"sequence length {S} exceeds max_seq_len {s.max_seq_len}")
        if h_v.shape[0] != B or h_v.shape[2] != s.hidden_dim:
            raise DimensionError(f"visual tokens {h_v.shape} do not match batch {B} / hidden {s.hidden_dim}")
        n = h_v.shape[1]
        img = np.flatnonzero(ids[0] == s.image_token_id)
        if len(img) != n or (n and (img[-1] - img[0] != n - 1)) or not (ids[:, img] == s.image_token_id).all():
            raise DimensionError(f"expected one contiguous block of {n} image placeholders")
        if ((ids == s.image_token_id).sum(axis=1) != n).any():
            raise DimensionError("image placeholder count differs between rows")
        if ids.min() < 0 or ids.max() >= s.vocab_size:
            raise DimensionError(f"token id outside vocabulary of size {s.vocab_size}")

        p = self.params
        tok = ad.getitem(p["tok_emb"], ids)
        if n:
            start = int(img[0])
            x = ad.concat([tok[:, :start], h_v, tok[:, start + n:]], axis=1)
        else:
            x = tok
        x = x + p["pos_emb"][:S]

        causal = np.tril(np.ones((S, S), dtype=bool))
        H, dh = s.num_heads, s.head_dim
        scale = 1.0 / math.sqrt(dh)
        hidden, attn = [], []
        for i in range(s.num_layers):
            pre = f"layers.{i}."
            a = ad.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])

            def heads(name):
                y = ad.linear(a, p[pre + name + ".weight"], p[pre + name + ".bias"])
                return ad.transpose(ad.reshape(y, (B, S, H, dh)), (0, 2, 1, 3))

            q, k, v = heads("attn.q"), heads("attn.k"), heads("attn.v")
            scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * scale
            probs = ad.softmax_t(scores, 1.0, visible=causal)
            o = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (B, S, s.hidden_dim))
            x = x + ad.linear(o, p[pre + "attn.out.weight"], p[pre + "attn.out.bias"])
            m = ad.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            m = ad.relu(ad.linear(m, p[pre + "mlp.fc.weight"], p[pre + "mlp.fc.bias"]))
            x = x + ad.linear(m, p[pre + "mlp.proj.weight"], p[pre + "mlp.proj.bias"])
            hidden.append(x)
            attn.append(probs)
        logits = ad.matmul(ad.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"]), p["head.weight"])
        return LMOutputs(logits=logits, hidden_states=hidden, attention_scores=attn)

    def __call__(self, images: np.ndarray, token_ids) -> LMOutputs:
        return self.forward(self.project_visual(self.encode_visual(images)), token_ids)


def generate(
    model: TransformerLM,
    images: np.ndarray,
    prompts: Sequence[Sequence[int]],
    max_new: int,
    eos_id: int,
    pad_id: int = 0,
) -> tuple[list[list[int]], list[bool]]:
    """Greedy decoding for a batch of prompts.

    Returns the continuation of each prompt (EOS excluded) and whether EOS was
    produced within ``max_new`` steps.
    """
    if len(prompts) == 0 or any(len(pr) == 0 for pr in prompts):
        raise ContractError("generate needs a non-empty prompt")
    if max_new < 0:
        raise ContractError("max_new must be >= 0")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    B = len(prompts)
    lengths = np.array([len(pr) for pr in prompts])
    budget = min(int(lengths.max()) + max_new, model.spec.max_seq_len)
    if int(lengths.max()) > model.spec.max_seq_len:
        raise LengthError(f"prompt longer than max_seq_len {model.spec.max_seq_len}")
    buf = np.full((B, budget), pad_id, dtype=np.int64)
    for b, pr in enumerate(prompts):
        buf[b, : len(pr)] = pr
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with ad.no_grad():
        h_v = model.project_visual(model.encode_visual(images))
        cur = lengths.copy()
        for _ in range(max_new):
            active = ~done & (cur < budget)
            if not active.any():
                break
            width = int(cur[active].max())
            logits = model.forward(h_v, buf[:, :width]).logits.data
            for b in np.flatnonzero(active):
                tok = int(np.argmax(logits[b, cur[b] - 1]))
                if tok == eos_id:
                    done[b] = True
                else:
                    out[b].append(tok)
                    buf[b, cur[b]] = tok
                    cur[b] += 1
    return out, done.tolist()


def init_student_from_teacher(teacher: TransformerLM, keep_every: int) -> TransformerLM:
    """Student built from teacher layers 0, k, 2k, ... plus copied embeddings, projector and head."""
    N = teacher.spec.num_layers
    if keep_every < 1 or N % keep_every:
        raise ConfigurationError(f"teacher has {N} layers, not divisible by keep_every={keep_every}")
    spec = replace(teacher.spec, num_layers=N // keep_every, role="student")
    src = teacher.state_arrays()
    arrays = {}
    for name, arr in src.items():
        if not name.startswith("layers."):
            arrays[name] = arr
    for j, i in enumerate(range(0, N, keep_every)):
        for src_name, dst_name in zip(_layer_names(i), _layer_names(j)):
            arrays[dst_name] = src[src_name]
    return TransformerLM(spec, params=arrays)


def params_digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: TransformerLM, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> Path:
    """Write spec and named parameter arrays to an ``.npz`` container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"version": CHECKPOINT_VERSION, "spec": model.spec.to_dict(), "meta": meta or {}}
    payload = {"__header__": np.array(json.dumps(header, sort_keys=True))}
    payload.update({f"param/{n}": t.data for n, t in model.params.items()})
    for k, v in (extra or {}).items():
        payload[f"extra/{k}"] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path) -> tuple[TransformerLM, dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {header.get('version')}")
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        extra = {k[len("extra/"):]: z[k] for k in z.files if k.startswith("extra/")}
    model = TransformerLM(ModelSpec.from_dict(header["spec"]), params=params)
    return model, extra, header.get("meta", {})
