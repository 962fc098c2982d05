"""Multi-aspect learnable prompts with context injection and bi-level attention.

Shapes use B for batch, P aspects, M prompt rows, N_p patches, D width.  Every
function also accepts unbatched inputs (no leading B axis).
"""

import math

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .layers import attend

CLASS_POSITIONS = ("start", "middle", "end")


def init_prompts(rng, aspects, prompt_len, dim, std=0.02):
    return {"prompt.w": rng.normal(0, std, (aspects, prompt_len, dim))}


def init_cross_modal(rng, aspects, dim):
    s = 1.0 / math.sqrt(dim)
    return {f"cm.{n}": rng.normal(0, s, (aspects, dim, dim)) for n in ("wq", "wk", "wv", "wo")}


def init_cross_aspect(rng, aspects, dim):
    return {"ca.w": rng.normal(0, 1.0 / math.sqrt(dim), (aspects, aspects, dim, dim))}


def inject_context(prompts, r):
    """Ṽ = W + r on every row of every aspect.

    ``prompts`` is (P, M, D) or (M, D); ``r`` is (D,) or (B, D).
    """
    if prompts.shape[-1] != r.shape[-1]:
        raise ShapeError(f"inject_context: incompatible shapes {prompts.shape} and {r.shape}")
    if r.ndim == 1:
        return prompts + r
    lead = (1,) * (prompts.ndim - 1)
    return prompts + r.reshape(r.shape[0], *lead, r.shape[-1])


def cross_modal_attention(v_tilde, patches, wq, wk, wv, wo, heads, return_weights=False):
    """Prompt rows attend over patch rows: MHA(ṼW_q, F W_k, F W_v) W_o, no residual.

    ``v_tilde`` (..., P, M, D) with per-aspect weights (P, D, D), or (M, D) with
    (D, D) weights.  ``patches`` is (..., N_p, D) and is shared across aspects.
    """
    if patches.shape[-1] != v_tilde.shape[-1]:
        raise ShapeError(f"cross_modal_attention: incompatible shapes {v_tilde.shape} and {patches.shape}")
    f = patches
    if wq.ndim == 3:
        f = ad.as_tensor(patches).reshape(*patches.shape[:-2], 1, *patches.shape[-2:])
    q = v_tilde @ wq
    k = f @ wk
    v = f @ wv
    out, weights = attend(q, k, v, heads)
    out = out @ wo
    return (out, weights) if return_weights else out


def cross_aspect_attention(v_hat, wa, return_weights=False):
    """ATT_{p,q} = softmax_rows(V̂_p W_A^{pq} V̂_qᵀ / √D);  V_p = Σ_q ATT_{p,q} V̂_q.

    ``v_hat`` is (..., P, M, D), ``wa`` is (P, P, D, D).  Returned weights are
    (..., P, P, M, M).
    """
    p, d = v_hat.shape[-3], v_hat.shape[-1]
    if wa.shape != (p, p, d, d):
        raise ShapeError(f"cross_aspect_attention: incompatible shapes {v_hat.shape} and {wa.shape}")
    lead = v_hat.shape[:-3]
    vp = v_hat.reshape(*lead, p, 1, *v_hat.shape[-2:])
    vq = v_hat.reshape(*lead, 1, p, *v_hat.shape[-2:])
    scores = (vp @ wa) @ vq.swapaxes(-1, -2)
    att = ad.softmax(scores * (1.0 / math.sqrt(d)))
    out = (att @ vq).sum(axis=-3)
    return (out, att) if return_weights else out


def class_slot(prompt_len, position):
    if position == "end":
        return prompt_len
    if position == "start":
        return 0
    if position == "middle":
        return prompt_len // 2
    raise ConfigError(f"class word position must be one of {CLASS_POSITIONS}, got {position!r}")


def build_class_text_input(v, class_emb, position="end"):
    """Insert the class-word row into the prompt rows: (..., M, D) -> (..., M+1, D).

    ``class_emb`` is (..., D) and must broadcast against ``v``'s leading axes.
    """
    m, d = v.shape[-2], v.shape[-1]
    if class_emb.shape[-1] != d:
        raise ShapeError(f"build_class_text_input: incompatible shapes {v.shape} and {class_emb.shape}")
    lead = np.broadcast_shapes(v.shape[:-2], class_emb.shape[:-1])
    v = _expand(v, lead + (m, d))
    c = _expand(ad.as_tensor(class_emb).reshape(*class_emb.shape[:-1], 1, d), lead + (1, d))
    s = class_slot(m, position)
    parts = [v[..., :s, :], c, v[..., s:, :]]
    return ad.concat([t for t in parts if t.shape[-2]], axis=-2)


def _expand(t, shape):
    t = ad.as_tensor(t)
    if t.shape == tuple(shape):
        return t
    return t + ad.Tensor(np.zeros(shape))


def aspect_row_aggregate(att):
    """P×P summary of the (P, P, M, M) cross-aspect weights: subregion sums, rows normalised."""
    att = np.asarray(att.data if isinstance(att, ad.Tensor) else att)
    sums = att.sum(axis=(-1, -2))
    return sums / sums.sum(axis=-1, keepdims=True)
