"""Finite-difference gradient checks for every differentiable op and loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor, finite_diff_gradcheck
from .model import ModelSpec, TransformerLM, VisualEncoderSpec

TOLERANCE = 1e-5


@dataclass
class GradCase:
    name: str
    fn: Callable[[Tensor], Tensor]
    x: np.ndarray


@dataclass
class GradResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _scalar(t: Tensor, rng_w: np.ndarray) -> Tensor:
    """Contract an arbitrary tensor to a scalar with fixed random weights."""
    return ad.tsum(t * Tensor(rng_w))


def op_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    w34 = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    m45 = rng.normal(size=(4, 5))
    w35 = rng.normal(size=(3, 5))
    batched = rng.normal(size=(2, 3, 4))
    b_rhs = rng.normal(size=(2, 4, 5))
    w235 = rng.normal(size=(2, 3, 5))
    cond = rng.random((3, 4)) > 0.5
    vis = np.tril(np.ones((4, 4), dtype=bool))
    w44 = rng.normal(size=(2, 4, 4))
    gain = rng.uniform(0.5, 1.5, 4)
    bias = rng.normal(size=4)
    bool_idx = np.array([True, False, True])

    def s(t, w=w34):
        return _scalar(t, w)

    return [
        GradCase("add", lambda x: s(x + Tensor(b)), a),
        GradCase("add_broadcast", lambda x: s(Tensor(a) + x), b[0]),
        GradCase("sub", lambda x: s(Tensor(b) - x), a),
        GradCase("mul", lambda x: s(x * Tensor(b)), a),
        GradCase("mul_self", lambda x: s(x * x), a),
        GradCase("div_numerator", lambda x: s(x / Tensor(pos)), a),
        GradCase("div_denominator", lambda x: s(Tensor(a) / x), pos),
        GradCase("neg", lambda x: s(-x), a),
        GradCase("power", lambda x: s(x ** 3), a),
        GradCase("exp", lambda x: s(ad.exp(x)), a),
        GradCase("log", lambda x: s(ad.log(x)), pos),
        GradCase("sqrt", lambda x: s(ad.sqrt(x)), pos),
        GradCase("tanh", lambda x: s(ad.tanh(x)), a),
        GradCase("relu", lambda x: s(ad.relu(x)), _away_from_zero(rng, (3, 4))),
        GradCase("gelu", lambda x: s(ad.gelu(x)), a),
        GradCase("sum_axis", lambda x: _scalar(ad.tsum(x, axis=0), w34[0]), a),
        GradCase("mean_keepdims", lambda x: _scalar(ad.mean(x, axis=-1, keepdims=True), w34[:, :1]), a),
        GradCase("reshape", lambda x: _scalar(ad.reshape(x, (4, 3)), w34.reshape(4, 3)), a),
        GradCase("transpose", lambda x: _scalar(ad.transpose(x), w34.T), a),
        GradCase("swapaxes", lambda x: _scalar(ad.swapaxes(x, 1, 2), w44), w44 + 0.1),
        GradCase("getitem_slice", lambda x: _scalar(x[1:, :2], w34[1:, :2]), a),
        GradCase("getitem_bool", lambda x: _scalar(x[bool_idx], w34[bool_idx]), a),
        GradCase("getitem_fancy", lambda x: _scalar(x[np.array([0, 2, 0]), np.array([1, 1, 3])], w34[0, :3]), a),
        GradCase("concat", lambda x: s(ad.concat([x[:, :2], Tensor(b[:, 2:])], axis=1)), a),
        GradCase("where", lambda x: s(ad.where(cond, x, Tensor(b))), a),
        GradCase("matmul_left", lambda x: _scalar(ad.matmul(x, Tensor(m45)), w35), a),
        GradCase("matmul_right", lambda x: _scalar(ad.matmul(Tensor(a), x), w35), m45),
        GradCase("matmul_batched", lambda x: _scalar(ad.matmul(x, Tensor(b_rhs)), w235), batched),
        GradCase("matmul_batched_rhs", lambda x: _scalar(ad.matmul(Tensor(batched), x), w235), b_rhs),
        GradCase("matmul_3d_by_2d", lambda x: _scalar(ad.matmul(Tensor(batched), x), w235), m45),
        GradCase("linear", lambda x: _scalar(ad.linear(x, Tensor(m45), Tensor(w35[0])), w35), a),
        GradCase("softmax_t", lambda x: s(ad.softmax_t(x, 0.7)), a),
        GradCase("softmax_t_causal", lambda x: _scalar(ad.softmax_t(x, 1.0, visible=vis), w44),
                 rng.normal(size=(2, 4, 4))),
        GradCase("log_softmax_t", lambda x: s(ad.log_softmax_t(x, 1.3)), a),
        GradCase("layer_norm_input", lambda x: s(ad.layer_norm(x, Tensor(gain), Tensor(bias))), a),
        GradCase("layer_norm_gain", lambda x: s(ad.layer_norm(Tensor(a), x, Tensor(bias))), gain),
        GradCase("layer_norm_bias", lambda x: s(ad.layer_norm(Tensor(a), Tensor(gain), x)), bias),
        GradCase("standardize", lambda x: s(ad.standardize(x)), a),
    ]


def loss_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed + 1)
    B, S, C = 2, 5, 7
    t_logits = rng.normal(size=(B, S, C)) * 2.0
    s_logits = rng.normal(size=(B, S, C)) * 2.0
    mask = rng.random((B, S)) > 0.4
    mask[0, 0] = True
    targets = rng.integers(C, size=(B, S))

    d_s, d_t = 4, 6
    hs = rng.normal(size=(B, S, d_s))
    ht = rng.normal(size=(B, S, d_t))
    ht_same = rng.normal(size=(B, S, d_s))
    proj = L.FeatureProjector(d_s, d_t, 5, seed=seed)

    H = 2
    scores_s = rng.normal(size=(B, H, S, S))
    causal = np.tril(np.ones((S, S), dtype=bool))
    with ad.no_grad():
        attn_t = ad.softmax_t(Tensor(rng.normal(size=(B, 3, S, S))), 1.0, visible=causal).data
    image = np.zeros((B, S), bool)
    image[:, 1:3] = True
    answer = np.zeros((B, S), bool)
    answer[:, 3:] = True
    valid = np.ones((B, S), bool)
    valid[1, -1] = False
    text = ~image & valid

    def kl(direction, standardize=False):
        return lambda x: L.kl_logit_loss(t_logits, x, 0.7, direction, mask, standardize)

    def feature_proj_weight(x):
        p = L.FeatureProjector(d_s, d_t, 5, seed=seed)
        p.params["fc.weight"] = x
        return L.feature_align_loss([Tensor(hs)], [ht], {0: p}, "cosine", mask)

    cases = [
        GradCase("autoregressive_ce", lambda x: L.autoregressive_ce(x, targets, mask), s_logits),
        GradCase("forward_kl", kl("forward"), s_logits),
        GradCase("reverse_kl", kl("reverse"), s_logits),
        GradCase("forward_kl_standardized", kl("forward", True), s_logits),
        GradCase("mse_logit", lambda x: L.mse_logit_loss(t_logits, x, mask), s_logits),
        GradCase("feature_cosine", lambda x: L.feature_align_loss([x], [ht], {0: proj}, "cosine", mask), hs),
        GradCase("feature_mse", lambda x: L.feature_align_loss([x], [ht], {0: proj}, "mse", mask), hs),
        GradCase("feature_cosine_identity", lambda x: L.feature_align_loss([x], [ht_same], None, "cosine", mask), hs),
        GradCase("feature_projector_weight", feature_proj_weight, proj.params["fc.weight"].data.copy()),
        GradCase("attention_affinity_all",
                 lambda x: L.attention_affinity_loss(ad.softmax_t(x, 1.0, visible=causal), attn_t, "all",
                                                     valid, image, answer), scores_s),
        GradCase("attention_affinity_image_to_answer",
                 lambda x: L.attention_affinity_loss(ad.softmax_t(x, 1.0, visible=causal), attn_t,
                                                     "image_to_answer", valid, image, answer), scores_s),
        GradCase("similarity_affinity", lambda x: L.similarity_affinity_loss(x, ht, image, text), hs),
    ]
    for beta in (0.1, 0.5, 0.9):
        cases.append(GradCase(f"jsd_beta_{beta}",
                              lambda x, b=beta: L.generalized_jsd(t_logits, x, b, 0.7, mask), s_logits))
    return cases


def model_cases(seed: int = 0) -> list[GradCase]:
    """End-to-end checks through a tiny visual-prefix transformer."""
    enc = VisualEncoderSpec(image_height=4, image_width=4, patch_size=2, channels=1, visual_dim=3, seed=seed)
    spec = ModelSpec(vocab_size=11, num_layers=2, hidden_dim=4, num_heads=2, max_seq_len=16, encoder=enc)
    model = TransformerLM(spec, seed=seed)
    rng = np.random.default_rng(seed + 2)
    for name in model.params:
        if name.endswith(".bias") or name.endswith(".gain"):
            model.params[name].data += rng.normal(0.0, 0.1, model.params[name].shape)
    for name in model.params:
        model.params[name].data += rng.normal(0.0, 0.3, model.params[name].shape)
    images = rng.uniform(size=(2, 4, 4, 1))
    ids = np.array([[1, 3, 3, 3, 3, 5, 6, 4, 7, 2], [1, 3, 3, 3, 3, 8, 4, 9, 2, 0]])
    targets = L.next_token_targets(ids)
    mask = np.zeros(ids.shape, bool)
    mask[:, 7:9] = True
    t_logits = rng.normal(size=(2, ids.shape[1], 11))

    def with_param(name: str, loss: str):
        def f(x):
            saved = model.params[name]
            model.params[name] = x
            try:
                out = model(images, ids)
                if loss == "ce":
                    return L.autoregressive_ce(out.logits, targets, mask)
                return L.kl_logit_loss(t_logits, out.logits, 0.7, "forward", mask)
            finally:
                model.params[name] = saved
        return f

    picks = [("projector.weight", "ce"), ("tok_emb", "ce"), ("layers.0.attn.q.weight", "ce"),
             ("layers.1.mlp.fc.weight", "kl"), ("layers.0.ln1.gain", "kl"), ("head.weight", "kl")]
    return [GradCase(f"model_{loss}_{name}", with_param(name, loss), model.params[name].data.copy())
            for name, loss in picks]


def all_cases(seed: int = 0) -> list[GradCase]:
    return op_cases(seed) + loss_cases(seed) + model_cases(seed)


def run_suite(seed: int = 0, eps: float = 1e-5) -> list[GradResult]:
    results = []
    for case in all_cases(seed):
        t0 = time.perf_counter()
        err = finite_diff_gradcheck(case.fn, case.x, eps)
        results.append(GradResult(case.name, err, time.perf_counter() - t0))
    return results


def format_results(results: list[GradResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name.ljust(width)}  {r.error:.3e}  {'ok' if r.passed else 'FAIL'}" for r in results]
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} passed (tolerance {TOLERANCE:g})")
    return "\n".join(lines)
