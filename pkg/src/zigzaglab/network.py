"""Forward and backward passes of the toy conditional transformer denoiser.

Each block runs text-image cross-attention, image self-attention, and a
feed-forward net, all pre-norm with residual connections. Timestep and
position conditioning are learned embeddings added to the projected input
tokens.

Two forward paths exist: a fused-kernel path for single-item inference (the
sampling hot loop) and a numpy einsum path that can record a tape for the
manual backward pass used in training. Identity key/value injection, when
present, prepends cached rows to the self-attention keys and values of the
chosen layers; queries are never touched.
"""

from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

from . import _kernels as kernels
from .errors import CacheError, ConfigError
from .weights import ToyDenoiserWeights

LN_EPS = 1e-5
_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_K * (u + _GELU_C * u * u * u)))


def _gelu_inner(u):
    return np.tanh(_GELU_K * (u + _GELU_C * u * u * u))


def gelu_grad(u, inner=None):
    t = _gelu_inner(u) if inner is None else inner
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * u * u)


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    istd = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * istd
    return xhat * g + b, (xhat, istd)


def layer_norm_backward(dy, cache, g):
    xhat, istd = cache
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = istd * (dxhat - m1 - xhat * m2)
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _split_heads(x, num_heads):
    b, m, d = x.shape
    return x.reshape(b, m, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, m, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, m, h * dh)


def _softmax(logits):
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w


def _attend_numpy(q, k, v, scale):
    """Batched multi-head attention: q [B,H,n,dh], k/v [B,H,m,dh]."""
    logits = (q @ k.swapaxes(-1, -2)) * scale
    aw = _softmax(logits)
    return aw @ v, aw


def _attend_kernel(q, k, v, scale):
    """Single-item path through the active fused kernel, one call per head."""
    h = q.shape[1]
    ctx = np.empty((1, h, q.shape[2], v.shape[3]))
    aw = np.empty((1, h, q.shape[2], k.shape[2]))
    for i in range(h):
        ctx[0, i], aw[0, i] = kernels.ACTIVE.attention(q[0, i], k[0, i], v[0, i], scale)
    return ctx, aw


def forward(
    weights: ToyDenoiserWeights,
    x: np.ndarray,
    t: np.ndarray,
    text: np.ndarray,
    injection: Optional[Mapping[int, Tuple[np.ndarray, np.ndarray]]] = None,
    record_attention: bool = False,
    tape: Optional[dict] = None,
):
    """Run the denoiser.

    x: [B, tokens, channels]; t: [B] integer timesteps; text: [B, S, model_dim].
    injection maps layer index to (cached_keys, cached_values), each
    [k_count, model_dim], prepended to that layer's self-attention keys and
    values. Returns (eps [B, tokens, channels], records) where records is a
    list of (layer, text_scores, self_keys, self_values) tuples for batch
    size 1 when requested.
    """
    b, n, c = x.shape
    d = weights.model_dim
    heads = weights.num_heads
    scale = 1.0 / math.sqrt(weights.head_dim)
    if n != weights.tokens or c != weights.channels:
        raise ConfigError(f"latent shape {(n, c)} does not match model {(weights.tokens, weights.channels)}")
    if text.ndim != 3 or text.shape[0] != b or text.shape[2] != d:
        raise ConfigError(f"text embedding shape {text.shape} invalid for batch {b}, dim {d}")
    t = np.asarray(t)
    if t.shape != (b,) or t.min() < 0 or t.max() > weights.num_steps:
        raise ConfigError(f"timesteps must be [batch] ints within [0, {weights.num_steps}]")
    if record_attention and b != 1:
        raise ConfigError("attention recording supports batch size 1 only")
    if tape is not None and injection:
        raise ConfigError("training tape and key/value injection cannot be combined")
    injection = injection or {}
    for l in injection:
        if not (0 <= l < weights.num_layers):
            raise CacheError(f"injection targets layer {l}, model has {weights.num_layers}")

    use_kernel = tape is None and b == 1
    attend = _attend_kernel if use_kernel else _attend_numpy

    h = x @ weights.w_in + weights.b_in + weights.pos_embedding[None] + weights.time_embedding[t][:, None, :]
    records = [] if record_attention else None
    if tape is not None:
        tape["x_in"] = x
        tape["t"] = t
        tape["text"] = text
        tape["layers"] = []

    for l, lw in enumerate(weights.layers):
        h1, c1 = layer_norm(h, lw.ln1_g, lw.ln1_b)
        qc = _split_heads(h1 @ lw.wq_cross, heads)
        kc = _split_heads(text @ lw.wk_cross, heads)
        vc = _split_heads(text @ lw.wv_cross, heads)
        ctx_c, aw_c = attend(qc, kc, vc, scale)
        oc = _merge_heads(ctx_c) @ lw.wo_cross
        h2_in = h + oc

        h2, c2 = layer_norm(h2_in, lw.ln2_g, lw.ln2_b)
        ks_full = h2 @ lw.wk_self
        vs_full = h2 @ lw.wv_self
        qs = _split_heads(h2 @ lw.wq_self, heads)
        if l in injection:
            cached_k, cached_v = injection[l]
            if cached_k.shape[1] != d or cached_v.shape != cached_k.shape:
                raise CacheError(
                    f"cache entry for layer {l} has shapes {cached_k.shape}/{cached_v.shape}, expected [*, {d}]"
                )
            ka = np.concatenate([np.broadcast_to(cached_k, (b,) + cached_k.shape), ks_full], axis=1)
            va = np.concatenate([np.broadcast_to(cached_v, (b,) + cached_v.shape), vs_full], axis=1)
        else:
            ka, va = ks_full, vs_full
        ctx_s, aw_s = attend(qs, _split_heads(ka, heads), _split_heads(va, heads), scale)
        os_ = _merge_heads(ctx_s) @ lw.wo_self
        h3_in = h2_in + os_

        h3, c3 = layer_norm(h3_in, lw.ln3_g, lw.ln3_b)
        u = h3 @ lw.w_ff1 + lw.b_ff1
        inner = _gelu_inner(u)
        act = 0.5 * u * (1.0 + inner)
        f = act @ lw.w_ff2 + lw.b_ff2
        h_out = h3_in + f

        if records is not None:
            records.append((l, aw_c.mean(axis=1)[0], ks_full[0].copy(), vs_full[0].copy()))
        if tape is not None:
            tape["layers"].append(
                {
                    "h_in": h, "c1": c1, "h1": h1, "qc": qc, "kc": kc, "vc": vc,
                    "aw_c": aw_c, "ctx_c": ctx_c, "h2_in": h2_in, "c2": c2, "h2": h2,
                    "qs": qs, "ks": _split_heads(ks_full, heads), "vs": _split_heads(vs_full, heads),
                    "aw_s": aw_s, "ctx_s": ctx_s, "h3_in": h3_in, "c3": c3, "h3": h3,
                    "u": u, "act": act, "gelu_inner": inner,
                }
            )
        h = h_out

    hf, cf = layer_norm(h, weights.ln_out_g, weights.ln_out_b)
    eps = hf @ weights.w_out + weights.b_out
    if tape is not None:
        tape["hf"] = hf
        tape["cf"] = cf
    return eps, records


def zero_grads(weights: ToyDenoiserWeights) -> dict:
    return {name: np.zeros_like(arr) for name, arr in weights.named_arrays()}


def backward(weights: ToyDenoiserWeights, tape: dict, d_eps: np.ndarray):
    """Gradients of a scalar loss through the taped forward pass.

    Returns (grads keyed like named_arrays, d_text [B, S, model_dim]). The
    token-embedding entry stays zero here; the caller scatters d_text into it
    using each prompt's token provenance.
    """
    grads = zero_grads(weights)
    scale = 1.0 / math.sqrt(weights.head_dim)
    x_in, t, text = tape["x_in"], tape["t"], tape["text"]
    d_text = np.zeros_like(text)

    def outer(x, dy):  # sum over batch and token axes: [B,M,p] x [B,M,q] -> [p,q]
        return np.tensordot(x, dy, axes=([0, 1], [0, 1]))

    grads["w_out"] += outer(tape["hf"], d_eps)
    grads["b_out"] += d_eps.sum(axis=(0, 1))
    d_hf = d_eps @ weights.w_out.T
    dh, dg, db = layer_norm_backward(d_hf, tape["cf"], weights.ln_out_g)
    grads["ln_out_g"] += dg
    grads["ln_out_b"] += db

    for l in reversed(range(weights.num_layers)):
        lw = weights.layers[l]
        tp = tape["layers"][l]
        pre = f"layers.{l}."

        # feed-forward: h_out = h3_in + gelu(h3 @ w1 + b1) @ w2 + b2
        df = dh
        grads[pre + "w_ff2"] += outer(tp["act"], df)
        grads[pre + "b_ff2"] += df.sum(axis=(0, 1))
        du = (df @ lw.w_ff2.T) * gelu_grad(tp["u"], tp["gelu_inner"])
        grads[pre + "w_ff1"] += outer(tp["h3"], du)
        grads[pre + "b_ff1"] += du.sum(axis=(0, 1))
        dx3, dg, db = layer_norm_backward(du @ lw.w_ff1.T, tp["c3"], lw.ln3_g)
        grads[pre + "ln3_g"] += dg
        grads[pre + "ln3_b"] += db
        dh3_in = dh + dx3

        # self-attention: h3_in = h2_in + merge(ctx_s) @ wo_self
        dos = dh3_in
        grads[pre + "wo_self"] += outer(_merge_heads(tp["ctx_s"]), dos)
        dctx = _split_heads(dos @ lw.wo_self.T, weights.num_heads)
        daw = dctx @ tp["vs"].swapaxes(-1, -2)
        dvs = tp["aw_s"].swapaxes(-1, -2) @ dctx
        dlog = tp["aw_s"] * (daw - (daw * tp["aw_s"]).sum(axis=-1, keepdims=True))
        dqs = (dlog @ tp["ks"]) * scale
        dks = (dlog.swapaxes(-1, -2) @ tp["qs"]) * scale
        dqs, dks, dvs = _merge_heads(dqs), _merge_heads(dks), _merge_heads(dvs)
        grads[pre + "wq_self"] += outer(tp["h2"], dqs)
        grads[pre + "wk_self"] += outer(tp["h2"], dks)
        grads[pre + "wv_self"] += outer(tp["h2"], dvs)
        dh2 = dqs @ lw.wq_self.T + dks @ lw.wk_self.T + dvs @ lw.wv_self.T
        dx2, dg, db = layer_norm_backward(dh2, tp["c2"], lw.ln2_g)
        grads[pre + "ln2_g"] += dg
        grads[pre + "ln2_b"] += db
        dh2_in = dh3_in + dx2

        # cross-attention: h2_in = h_in + merge(ctx_c) @ wo_cross
        doc = dh2_in
        grads[pre + "wo_cross"] += outer(_merge_heads(tp["ctx_c"]), doc)
        dctx = _split_heads(doc @ lw.wo_cross.T, weights.num_heads)
        daw = dctx @ tp["vc"].swapaxes(-1, -2)
        dvc = tp["aw_c"].swapaxes(-1, -2) @ dctx
        dlog = tp["aw_c"] * (daw - (daw * tp["aw_c"]).sum(axis=-1, keepdims=True))
        dqc = (dlog @ tp["kc"]) * scale
        dkc = (dlog.swapaxes(-1, -2) @ tp["qc"]) * scale
        dqc, dkc, dvc = _merge_heads(dqc), _merge_heads(dkc), _merge_heads(dvc)
        grads[pre + "wq_cross"] += outer(tp["h1"], dqc)
        grads[pre + "wk_cross"] += outer(text, dkc)
        grads[pre + "wv_cross"] += outer(text, dvc)
        d_text += dkc @ lw.wk_cross.T + dvc @ lw.wv_cross.T
        dx1, dg, db = layer_norm_backward(dqc @ lw.wq_cross.T, tp["c1"], lw.ln1_g)
        grads[pre + "ln1_g"] += dg
        grads[pre + "ln1_b"] += db
        dh = dh2_in + dx1

    grads["w_in"] += outer(x_in, dh)
    grads["b_in"] += dh.sum(axis=(0, 1))
    grads["pos_embedding"] += dh.sum(axis=0)
    np.add.at(grads["time_embedding"], t, dh.sum(axis=1))
    return grads, d_text
