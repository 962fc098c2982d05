"""Frozen stand-ins for the pretrained image and text towers.

Both stubs are fully determined by a seed and never receive gradients.  The
image stub maps a scene latent to patch features and a global feature; the
text stub is a small bidirectional Transformer that reads the embedding
sequence out at the class-word slot.
"""

import math

import numpy as np

from . import autodiff as ad
from .aspects import ASPECTS, CLASS_WORDS
from .errors import ShapeError
from .layers import init_block, sinusoidal_positions, transformer_block


def init_image_stub(rng, latent_dim, dim, patches, bias_std=0.5):
    """Distinct frozen affine projection per patch: F_j = z A_j + b_j."""
    return {
        "img.w": rng.normal(0, 1.0 / math.sqrt(latent_dim), (patches, latent_dim, dim)),
        "img.b": rng.normal(0, bias_std, (patches, dim)),
    }


def encode_image_stub(latent, params):
    """Returns (F_p, i): patch rows (..., N_p, D) and the global vector (..., D).

    ``i`` is the layer-normalised mean patch row (no affine).  Works on a single
    latent or a batch; plain numpy since nothing upstream is trainable.
    """
    w = _np(params["img.w"])
    b = _np(params["img.b"])
    z = np.asarray(latent, dtype=np.float64)
    if z.shape[-1] != w.shape[1]:
        raise ShapeError(f"image stub expects latent width {w.shape[1]}, got shape {z.shape}")
    patches = np.einsum("...l,pld->...pd", z, w) + b
    g = patches.mean(axis=-2)
    g = g - g.mean(axis=-1, keepdims=True)
    g = g / np.sqrt((g * g).mean(axis=-1, keepdims=True) + ad.LAYER_NORM_EPS)
    return patches, g


def init_text_stub(rng, dim, layers, ffn_mult=4):
    params = {}
    for l in range(layers):
        params.update(init_block(rng, f"txt.{l}", dim, ffn_mult))
    params["txt.lnf_g"] = np.ones(dim)
    params["txt.lnf_b"] = np.zeros(dim)
    params["txt.proj"] = rng.normal(0, 1.0 / math.sqrt(dim), (dim, dim))
    return params


def init_class_words(rng, dim, aspects=ASPECTS):
    """One frozen embedding per (aspect, class word), stored as a (K_p, D) table."""
    return {f"cw.{a}": rng.normal(0, 1.0, (len(CLASS_WORDS[a]), dim)) for a in aspects}


def encode_text(tokens, params, heads, slot=-1):
    """Frozen Transformer over (..., M+1, D) token rows; projection of row ``slot``.

    Gradients reach ``tokens`` but never the stub parameters (they are built
    with ``requires_grad=False``).
    """
    d = params["txt.proj"].shape[0]
    if tokens.shape[-1] != d:
        raise ShapeError(f"text stub expects width {d}, got shape {tokens.shape}")
    layers = sum(1 for k in params if k.startswith("txt.") and k.endswith(".wq"))
    n = tokens.shape[-2]
    x = tokens + ad.Tensor(sinusoidal_positions(n, d))
    for l in range(layers):
        x, _ = transformer_block(x, params, f"txt.{l}", heads)
    x = ad.layer_norm(x, params["txt.lnf_g"], params["txt.lnf_b"])
    out = x[..., slot % n : slot % n + 1, :] @ params["txt.proj"]
    return out.reshape(*out.shape[:-2], d)


def _np(x):
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x)
