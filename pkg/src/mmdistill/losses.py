"""Distillation objectives over teacher and student outputs.

Teacher-side inputs are always treated as constants: they are read through
``.data`` and never enter the student's graph.  Every loss reduces by a mean
over the selected positions so its scale does not depend on batch length.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError, ParameterError

LOGIT_LOSSES = ("none", "forward_kl", "reverse_kl", "jsd", "mse")
FEATURE_LOSSES = ("none", "cosine", "mse")
AFFINITY_LOSSES = ("none", "attention", "similarity")
MASK_POLICIES = ("answer_only", "all_tokens")
ATTENTION_GROUPS = ("all", "image_to_answer")
COMPONENTS = ("ce", "logit", "feature", "affinity")
COS_EPS = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 0.7
    jsd_beta: float = 0.5
    logit_loss: str = "none"
    standardize_logits: bool = False
    scale_by_t2: bool = True
    logit_mask: str = "answer_only"
    feature_loss: str = "none"
    feature_layers: tuple[int, ...] = (-1,)
    feature_mask: str = "answer_only"
    projector_hidden: int = 0  # 0 -> teacher hidden_dim
    affinity_loss: str = "none"
    attention_group: str = "all"
    ce_weight: float = 1.0
    logit_weight: float = 1.0
    feature_weight: float = 1.0
    affinity_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "feature_layers", tuple(int(i) for i in self.feature_layers))
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 < self.jsd_beta < 1.0:
            raise ParameterError(f"jsd_beta must lie in (0, 1), got {self.jsd_beta}")
        for name, value, allowed in (
            ("logit_loss", self.logit_loss, LOGIT_LOSSES),
            ("feature_loss", self.feature_loss, FEATURE_LOSSES),
            ("affinity_loss", self.affinity_loss, AFFINITY_LOSSES),
            ("logit_mask", self.logit_mask, MASK_POLICIES),
            ("feature_mask", self.feature_mask, MASK_POLICIES),
            ("attention_group", self.attention_group, ATTENTION_GROUPS),
        ):
            if value not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {value!r}")
        for w in ("ce_weight", "logit_weight", "feature_weight", "affinity_weight"):
            if getattr(self, w) < 0:
                raise ConfigurationError(f"{w} must be >= 0")
        if self.feature_loss != "none" and not self.feature_layers:
            raise ConfigurationError("feature_layers is empty")

    @property
    def is_distilling(self) -> bool:
        return (self.logit_loss, self.feature_loss, self.affinity_loss) != ("none", "none", "none")

    def active_components(self) -> list[str]:
        out = ["ce"]
        if self.logit_loss != "none":
            out.append("logit")
        if self.feature_loss != "none":
            out.append("feature")
        if self.affinity_loss != "none":
            out.append("affinity")
        return out

    def weight(self, component: str) -> float:
        return getattr(self, f"{component}_weight")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_layers"] = list(self.feature_layers)
        return d

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    def summary(self) -> str:
        parts = []
        if self.logit_loss != "none":
            s = f"{self.logit_loss}(T={self.temperature:g}"
            if self.logit_loss == "jsd":
                s += f",beta={self.jsd_beta:g}"
            if self.standardize_logits:
                s += ",std"
            parts.append(s + f",{self.logit_mask})")
        if self.feature_loss != "none":
            layers = ",".join(str(i) for i in self.feature_layers)
            parts.append(f"feature-{self.feature_loss}[{layers}]({self.feature_mask})")
        if self.affinity_loss != "none":
            grp = f",{self.attention_group}" if self.affinity_loss == "attention" else ""
            parts.append(f"affinity-{self.affinity_loss}{grp}")
        return " + ".join(parts) if parts else "ce only"


# -- masks ---------------------------------------------------------------------

def prediction_mask(target_mask: np.ndarray) -> np.ndarray:
    """Logit positions whose next token is selected by ``target_mask``."""
    target_mask = np.asarray(target_mask, dtype=bool)
    out = np.zeros_like(target_mask)
    out[..., :-1] = target_mask[..., 1:]
    return out


def next_token_targets(ids: np.ndarray, pad_id: int = 0) -> np.ndarray:
    ids = np.asarray(ids)
    out = np.full_like(ids, pad_id)
    out[..., :-1] = ids[..., 1:]
    return out


def _check_mask(mask: np.ndarray, shape: tuple[int, ...], what: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise DimensionError(f"{what}: mask shape {mask.shape} != positions {shape}")
    if not mask.any():
        raise ContractError(f"{what}: mask selects no positions")
    return mask


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _pair_shapes(teacher_logits, student_logits, what: str):
    t = _const(teacher_logits)
    if t.shape != student_logits.shape:
        raise DimensionError(f"{what}: teacher shape {t.shape} != student shape {student_logits.shape}")
    return t


# -- logit losses --------------------------------------------------------------

def autoregressive_ce(student_logits: Tensor, target_ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood over the selected positions.

    ``target_ids[..., i]`` is the token that logits at position ``i`` should predict.
    """
    student_logits = ad.as_tensor(student_logits)
    mask = _check_mask(mask, student_logits.shape[:-1], "autoregressive_ce")
    targets = np.asarray(target_ids)[mask]
    logp = ad.log_softmax_t(student_logits[mask], 1.0)
    picked = logp[np.arange(len(targets)), targets]
    return -ad.mean(picked)


def logit_standardize(z) -> Tensor:
    return ad.standardize(z)


def _prepare(teacher_logits, student_logits, mask, standardize: bool, what: str):
    student_logits = ad.as_tensor(student_logits)
    t = _pair_shapes(teacher_logits, student_logits, what)
    mask = _check_mask(mask, student_logits.shape[:-1], what)
    t_sel = t[mask]
    s_sel = student_logits[mask]
    if standardize:
        with ad.no_grad():
            t_sel = ad.standardize(t_sel).data
        s_sel = ad.standardize(s_sel)
    return t_sel, s_sel


def _log_softmax_np(z: np.ndarray, T: float) -> np.ndarray:
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def kl_logit_loss(teacher_logits, student_logits, T: float = 0.7, direction: str = "forward",
                  mask: np.ndarray | None = None, standardize: bool = False,
                  scale_by_t2: bool = True) -> Tensor:
    """KL between temperature-softened teacher and student distributions.

    ``forward`` is KL(P_t || P_s), ``reverse`` is KL(P_s || P_t).
    """
    if direction not in ("forward", "reverse"):
        raise ParameterError(f"direction must be forward or reverse, got {direction!r}")
    T = ad._check_temperature(T)
    if mask is None:
        mask = np.ones(ad.as_tensor(student_logits).shape[:-1], dtype=bool)
    t, s = _prepare(teacher_logits, student_logits, mask, standardize, "kl_logit_loss")
    log_pt = _log_softmax_np(t, T)
    log_ps = ad.log_softmax_t(s, T)
    if direction == "forward":
        per_row = ad.tsum(Tensor(np.exp(log_pt)) * (Tensor(log_pt) - log_ps), axis=-1)
    else:
        per_row = ad.tsum(ad.exp(log_ps) * (log_ps - Tensor(log_pt)), axis=-1)
    loss = ad.mean(per_row)
    return loss * (T * T) if scale_by_t2 else loss


def generalized_jsd(teacher_logits, student_logits, beta: float = 0.5, T: float = 0.7,
                    mask: np.ndarray | None = None, standardize: bool = False,
                    scale_by_t2: bool = True) -> Tensor:
    """``beta*KL(P_t||M) + (1-beta)*KL(P_s||M)`` with ``M = beta*P_t + (1-beta)*P_s``."""
    if not 0.0 < beta < 1.0:
        raise ParameterError(f"beta must lie in (0, 1), got {beta}")
    T = ad._check_temperature(T)
    if mask is None:
        mask = np.ones(ad.as_tensor(student_logits).shape[:-1], dtype=bool)
    t, s = _prepare(teacher_logits, student_logits, mask, standardize, "generalized_jsd")
    log_pt = _log_softmax_np(t, T)
    pt = np.exp(log_pt)
    log_ps = ad.log_softmax_t(s, T)
    ps = ad.exp(log_ps)
    log_m = ad.log(Tensor(beta * pt) + ps * (1.0 - beta))
    kl_t = ad.tsum(Tensor(pt) * (Tensor(log_pt) - log_m), axis=-1)
    kl_s = ad.tsum(ps * (log_ps - log_m), axis=-1)
    loss = ad.mean(kl_t * beta + kl_s * (1.0 - beta))
    return loss * (T * T) if scale_by_t2 else loss


def mse_logit_loss(teacher_logits, student_logits, mask: np.ndarray | None = None) -> Tensor:
    student_logits = ad.as_tensor(student_logits)
    if mask is None:
        mask = np.ones(student_logits.shape[:-1], dtype=bool)
    t, s = _prepare(teacher_logits, student_logits, mask, False, "mse_logit_loss")
    diff = s - Tensor(t)
    return ad.mean(diff * diff)


def logit_loss(config: DistillConfig, teacher_logits, student_logits, mask: np.ndarray) -> Tensor:
    kind = config.logit_loss
    if kind in ("forward_kl", "reverse_kl"):
        return kl_logit_loss(teacher_logits, student_logits, config.temperature, kind.split("_")[0], mask,
                             config.standardize_logits, config.scale_by_t2)
    if kind == "jsd":
        return generalized_jsd(teacher_logits, student_logits, config.jsd_beta, config.temperature, mask,
                               config.standardize_logits, config.scale_by_t2)
    if kind == "mse":
        return mse_logit_loss(teacher_logits, student_logits, mask)
    raise ConfigurationError(f"no logit loss configured ({kind!r})")


# -- feature alignment -----------------------------------------------------------

class FeatureProjector:
    """Student-to-teacher width MLP with one hidden GELU layer; training-only."""

    def __init__(self, d_in: int, d_out: int, hidden: int = 0, seed: int = 0):
        hidden = hidden or d_out
        rng = np.random.default_rng(seed)
        self.params = {
            "fc.weight": Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, hidden)), requires_grad=True),
            "fc.bias": Tensor(np.zeros(hidden), requires_grad=True),
            "proj.weight": Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, d_out)), requires_grad=True),
            "proj.bias": Tensor(np.zeros(d_out), requires_grad=True),
        }

    def __call__(self, h: Tensor) -> Tensor:
        p = self.params
        return ad.linear(ad.gelu(ad.linear(h, p["fc.weight"], p["fc.bias"])), p["proj.weight"], p["proj.bias"])


def align_layers(layer_set: Sequence[int], n_student: int, n_teacher: int) -> list[tuple[int, int]]:
    """Map student layer indices to teacher layers counting from the end."""
    pairs = []
    for i in layer_set:
        offset = i - n_student if i >= 0 else i
        if not -min(n_student, n_teacher) <= offset < 0:
            raise ConfigurationError(
                f"feature layer {i} out of range for student depth {n_student} / teacher depth {n_teacher}"
            )
        pairs.append((n_student + offset, n_teacher + offset))
    return pairs


def _row_norm(x: Tensor) -> Tensor:
    return ad.sqrt(ad.tsum(x * x, axis=-1, keepdims=True) + COS_EPS)


def cosine_rows(a: Tensor, b) -> Tensor:
    b = ad.as_tensor(b)
    return ad.tsum(a * b, axis=-1) / (ad.reshape(_row_norm(a), a.shape[:-1]) * ad.reshape(_row_norm(b), b.shape[:-1]))


def feature_align_loss(student_hidden: Sequence[Tensor], teacher_hidden: Sequence, projectors,
                       metric: str = "cosine", mask: np.ndarray | None = None,
                       layer_set: Sequence[int] = (-1,)) -> Tensor:
    """Sum over aligned layers of the per-position alignment loss.

    ``projectors`` maps student layer index -> callable, or is ``None`` for the
    identity (equal widths only).
    """
    if metric not in ("cosine", "mse"):
        raise ConfigurationError(f"feature metric must be cosine or mse, got {metric!r}")
    pairs = align_layers(layer_set, len(student_hidden), len(teacher_hidden))
    total = None
    for si, ti in pairs:
        hs = ad.as_tensor(student_hidden[si])
        ht = _const(teacher_hidden[ti])
        sel = _check_mask(mask if mask is not None else np.ones(hs.shape[:-1], bool), hs.shape[:-1], "feature_align_loss")
        if ht.shape[:-1] != hs.shape[:-1]:
            raise DimensionError(f"feature_align_loss: position shapes {hs.shape[:-1]} vs {ht.shape[:-1]}")
        proj = hs[sel]
        if projectors is not None:
            proj = projectors[si](proj)
        target = ht[sel]
        if proj.shape != target.shape:
            raise DimensionError(f"projected student width {proj.shape[-1]} != teacher width {target.shape[-1]}")
        if metric == "cosine":
            term = ad.mean(1.0 - cosine_rows(proj, target))
        else:
            diff = proj - Tensor(target)
            term = ad.mean(diff * diff)
        total = term if total is None else total + term
    return total


# -- affinity alignment ------------------------------------------------------------

def affinity_pairs(group: str, valid: np.ndarray, image: np.ndarray, answer: np.ndarray) -> np.ndarray:
    """``(B, S, S)`` boolean selection of (query, key) attention entries."""
    valid, image, answer = (np.asarray(m, dtype=bool) for m in (valid, image, answer))
    S = valid.shape[-1]
    if group == "all":
        causal = np.tril(np.ones((S, S), dtype=bool))
        return valid[:, :, None] & valid[:, None, :] & causal
    if group == "image_to_answer":
        return answer[:, :, None] & image[:, None, :]
    raise ConfigurationError(f"attention group must be one of {ATTENTION_GROUPS}, got {group!r}")


def attention_affinity_loss(student_attn: Tensor, teacher_attn, group: str = "all",
                            valid: np.ndarray | None = None, image: np.ndarray | None = None,
                            answer: np.ndarray | None = None) -> Tensor:
    """MSE between head-averaged post-softmax attention maps of shape ``(B, heads, S, S)``."""
    student_attn = ad.as_tensor(student_attn)
    t = _const(teacher_attn)
    if t.shape[0] != student_attn.shape[0] or t.shape[2:] != student_attn.shape[2:]:
        raise ContractError(
            f"attention maps differ in batch/sequence length: teacher {t.shape}, student {student_attn.shape}"
        )
    B, _, S, _ = student_attn.shape
    valid = np.ones((B, S), bool) if valid is None else valid
    image = np.zeros((B, S), bool) if image is None else image
    answer = np.zeros((B, S), bool) if answer is None else answer
    sel = affinity_pairs(group, valid, image, answer)
    if not sel.any():
        raise ContractError(f"attention group {group!r} selects no entries")
    s_avg = ad.mean(student_attn, axis=1)
    t_avg = t.mean(axis=1)
    diff = s_avg[sel] - Tensor(t_avg[sel])
    return ad.mean(diff * diff)


def cosine_matrix(h_v, h_q) -> Tensor:
    """``S[..., i, j] = cos(h_v[..., i, :], h_q[..., j, :])``."""
    h_v, h_q = ad.as_tensor(h_v), ad.as_tensor(h_q)
    nv = h_v / _row_norm(h_v)
    nq = h_q / _row_norm(h_q)
    return ad.matmul(nv, ad.swapaxes(nq, -1, -2))


def matrix_mse(a: Tensor, b) -> Tensor:
    diff = ad.as_tensor(a) - ad.as_tensor(b)
    return ad.mean(diff * diff)


def similarity_affinity_loss(student_hidden: Tensor, teacher_hidden, image: np.ndarray,
                             text: np.ndarray) -> Tensor:
    """MSE between image-to-text cosine-similarity matrices of student and teacher.

    Hidden states are ``(B, S, d)``; ``image``/``text`` mark visual and text
    positions, which must coincide between the two models.
    """
    student_hidden = ad.as_tensor(student_hidden)
    t = _const(teacher_hidden)
    if t.shape[:-1] != student_hidden.shape[:-1]:
        raise ContractError(
            f"visual/text token counts differ: teacher {t.shape[:-1]}, student {student_hidden.shape[:-1]}"
        )
    image, text = np.asarray(image, bool), np.asarray(text, bool)
    sel = image[:, :, None] & text[:, None, :]
    if not sel.any():
        raise ContractError("similarity affinity needs at least one image and one text token")
    with ad.no_grad():
        s_t = cosine_matrix(t, t).data
    s_s = cosine_matrix(student_hidden, student_hidden)
    return matrix_mse(s_s[sel], s_t[sel])


# -- composition -----------------------------------------------------------------

def compose(config: DistillConfig, components: Mapping[str, Tensor]) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the active components; returns the total and per-component values."""
    active = config.active_components()
    missing = [c for c in active if c not in components]
    if missing:
        raise ContractError(f"missing active loss components: {missing}")
    total = None
    values: dict[str, float] = {}
    for name in active:
        comp = ad.as_tensor(components[name])
        values[name] = comp.item()
        term = comp * config.weight(name)
        total = term if total is None else total + term
    values["total"] = total.item()
    return total, values
