"""Functional building blocks shared by the tracklet encoder and the text stub.

Parameters live in flat dicts of Tensors keyed ``"<prefix>.<name>"`` so the
model state can partition and serialise them by name.
"""

import math

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

BLOCK_PARAMS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b",
                "ff_w1", "ff_b1", "ff_w2", "ff_b2")


def sinusoidal_positions(length, dim):
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def split_heads(x, heads):
    *lead, n, d = x.shape
    if d % heads:
        raise ConfigError(f"head count {heads} does not divide width {d}")
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def merge_heads(x):
    *lead, h, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def attend(q, k, v, heads, key_mask=None):
    """Multi-head scaled dot-product attention on projected q, k, v.

    ``key_mask`` (True = valid) has the keys' leading shape ``(..., Lk)``.
    Returns the merged output and the per-head weights ``(..., H, Lq, Lk)``.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(qh.shape[-1]))
    if key_mask is None:
        weights = ad.softmax(scores)
    else:
        m = np.asarray(key_mask, dtype=bool)
        weights = ad.masked_softmax(scores, m[..., None, None, :])
    return merge_heads(weights @ vh), weights


def transformer_block(x, params, prefix, heads, key_mask=None):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""
    p = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    h = ad.layer_norm(x, p("ln1_g"), p("ln1_b"))
    out, weights = attend(h @ p("wq"), h @ p("wk"), h @ p("wv"), heads, key_mask)
    x = x + out @ p("wo")
    h = ad.layer_norm(x, p("ln2_g"), p("ln2_b"))
    x = x + (ad.gelu(h @ p("ff_w1") + p("ff_b1")) @ p("ff_w2") + p("ff_b2"))
    return x, weights


def init_block(rng, prefix, dim, ffn_mult=4):
    hidden = ffn_mult * dim
    s = 1.0 / math.sqrt(dim)
    return {
        f"{prefix}.ln1_g": np.ones(dim), f"{prefix}.ln1_b": np.zeros(dim),
        f"{prefix}.wq": rng.normal(0, s, (dim, dim)), f"{prefix}.wk": rng.normal(0, s, (dim, dim)),
        f"{prefix}.wv": rng.normal(0, s, (dim, dim)), f"{prefix}.wo": rng.normal(0, s, (dim, dim)),
        f"{prefix}.ln2_g": np.ones(dim), f"{prefix}.ln2_b": np.zeros(dim),
        f"{prefix}.ff_w1": rng.normal(0, s, (dim, hidden)), f"{prefix}.ff_b1": np.zeros(hidden),
        f"{prefix}.ff_w2": rng.normal(0, 1.0 / math.sqrt(hidden), (hidden, dim)), f"{prefix}.ff_b2": np.zeros(dim),
    }
