"""Model configuration, parameter partitions, batched forward pass and checkpoints."""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .aspects import ASPECTS, CLASS_WORDS
from .context import FeatureVocab, embed_properties, encode_tracklet, fuse, init_property_tables, init_tracklet_encoder
from .errors import ConfigError, DataError, ShapeError
from .scamp import (build_class_text_input, class_slot, cross_aspect_attention, cross_modal_attention,
                    init_cross_aspect, init_cross_modal, init_prompts, inject_context)
from .seeding import substream
from .stubs import encode_image_stub, encode_text, init_class_words, init_image_stub, init_text_stub

ABLATIONS = ("nst", "nsf", "ndf", "nt", "ncm", "nca")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 512
    prompt_len: int = 16
    prop_dim: int = 64
    patches: int = 16
    latent_dim: int = 64
    n_w: int = 1
    layers: int = 2
    heads: int = 8
    cm_heads: int = 8
    text_layers: int = 2
    text_heads: int = 8
    mu: float = 0.01
    class_pos: str = "end"
    ablations: tuple = ()
    stub_seed: int = 0
    context_gain: float = 0.02
    image_bias: float = 0.5
    residual: bool = False  # add the input back around both attention steps
    aspects: tuple = ASPECTS

    def validate(self):
        for name in ("dim", "prompt_len", "prop_dim", "patches", "latent_dim", "heads", "cm_heads",
                     "text_layers", "text_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_w < 0 or self.layers < 0:
            raise ConfigError("n_w and layers must be non-negative")
        if not self.mu > 0:
            raise ConfigError("temperature mu must be positive")
        for h in (self.heads, self.cm_heads, self.text_heads):
            if self.dim % h:
                raise ConfigError(f"head count {h} does not divide width {self.dim}")
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ConfigError(f"unknown ablation flag(s) {sorted(bad)}; choose from {ABLATIONS}")
        unknown = set(self.aspects) - set(ASPECTS)
        if unknown:
            raise ConfigError(f"unknown aspect(s) {sorted(unknown)}")
        class_slot(self.prompt_len, self.class_pos)
        return self

    def has(self, flag):
        return flag in self.ablations

    def to_dict(self):
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        d["aspects"] = list(self.aspects)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        for k in ("ablations", "aspects"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# small enough for a laptop CPU while keeping every structural piece
DESK_CONFIG = ModelConfig(dim=32, prompt_len=8, prop_dim=8, patches=8, latent_dim=16, heads=2, cm_heads=2,
                          text_layers=1, text_heads=2)


@dataclass
class ModelState:
    """Named parameters split into a trainable and a frozen partition."""

    config: ModelConfig
    vocab: FeatureVocab
    params: dict
    frozen: frozenset = field(default_factory=frozenset)

    def trainable(self):
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def frozen_params(self):
        return {k: v for k, v in self.params.items() if k in self.frozen}

    def frozen_hash(self):
        return param_hash(self.frozen_params())

    def full_hash(self):
        return param_hash(self.params)

    def copy(self):
        params = {k: ad.Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return ModelState(self.config, self.vocab, params, self.frozen)

    def with_config(self, **changes):
        return ModelState(replace(self.config, **changes).validate(), self.vocab, self.params, self.frozen)


def param_hash(params):
    h = hashlib.sha256()
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        h.update(name.encode())
        h.update(repr(data.shape).encode())
        h.update(data.tobytes())
    return h.hexdigest()


def init_model(config, vocab, seed=0):
    """Trainable parameters come from the ``init`` substream of ``seed``; the
    frozen stubs from ``config.stub_seed`` so they stay fixed across runs."""
    config.validate()
    p, d = len(config.aspects), config.dim
    rng = substream(seed, "init")
    trainable = {}
    trainable.update(init_property_tables(rng, vocab, config.prop_dim))
    trainable["fuse.w"] = rng.normal(0, 1.0 / np.sqrt(8 * config.prop_dim), (8 * config.prop_dim, d))
    trainable["fuse.b"] = np.zeros(d)
    trainable.update(init_tracklet_encoder(rng, d, config.layers, out_gain=config.context_gain))
    trainable.update(init_prompts(rng, p, config.prompt_len, d))
    trainable.update(init_cross_modal(rng, p, d))
    trainable.update(init_cross_aspect(rng, p, d))
    srng = substream(config.stub_seed, "stub")
    frozen = {}
    frozen.update(init_image_stub(srng, config.latent_dim, d, config.patches, config.image_bias))
    frozen.update(init_text_stub(srng, d, config.text_layers))
    frozen.update(init_class_words(srng, d, config.aspects))
    params = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in trainable.items()}
    params.update({k: ad.Tensor(v, requires_grad=False, name=k) for k, v in frozen.items()})
    return ModelState(config, vocab, params, frozen=frozenset(frozen))


@dataclass
class Batch:
    """Model-ready arrays for B samples."""

    indices: np.ndarray   # (B, 2N_w+1, 8) property category indices
    mask: np.ndarray      # (B, 2N_w+1) valid tracklet rows
    patches: np.ndarray   # (B, N_p, D) image stub patch rows
    image: np.ndarray     # (B, D) image stub global feature
    labels: np.ndarray = None  # (B, P) class indices

    def __len__(self):
        return len(self.indices)

    def take(self, rows):
        return Batch(self.indices[rows], self.mask[rows], self.patches[rows], self.image[rows],
                     None if self.labels is None else self.labels[rows])


def image_features(state, latents):
    return encode_image_stub(latents, state.params)


def class_table(state):
    """Padded (P, K_max, D) class-word embeddings and the (P, K_max) validity mask."""
    cfg = state.config
    ks = [len(CLASS_WORDS[a]) for a in cfg.aspects]
    kmax = max(ks)
    table = np.zeros((len(ks), kmax, cfg.dim))
    mask = np.zeros((len(ks), kmax), dtype=bool)
    for p, a in enumerate(cfg.aspects):
        table[p, :ks[p]] = state.params[f"cw.{a}"].data
        mask[p, :ks[p]] = True
    return table, mask


def context_vectors(state, batch, return_weights=False):
    """ST-context r for every sample, honouring the nst/nsf/ndf/nt flags."""
    cfg, prm = state.config, state.params
    b = len(batch)
    if batch.indices.shape[-2] != 2 * cfg.n_w + 1:
        raise ShapeError(f"tracklet width {batch.indices.shape[-2]} does not match N_w={cfg.n_w}")
    if cfg.has("nst"):
        r = ad.Tensor(np.zeros((b, cfg.dim)))
        return (r, []) if return_weights else r
    x = embed_properties(batch.indices, prm, drop_static=cfg.has("nsf"), drop_dynamic=cfg.has("ndf"))
    h0 = fuse(x, prm) * ad.Tensor(batch.mask[..., None].astype(np.float64))
    if cfg.has("nt"):
        r, weights = h0[:, cfg.n_w, :], []
    else:
        r, weights = encode_tracklet(h0, batch.mask, prm, cfg.heads, cfg.layers, return_weights=True)
    return (r, weights) if return_weights else r


def text_features(state, r, patches, return_attention=False):
    """Prompt pipeline for every (sample, aspect, class): returns (B, P, K_max, D).

    inject context -> cross-modal attention -> cross-aspect attention ->
    class-word insertion -> frozen text encoder.
    """
    cfg, prm = state.config, state.params
    att = {}
    v = inject_context(prm["prompt.w"], r)
    if not cfg.has("ncm"):
        out, att["cross_modal"] = cross_modal_attention(v, ad.Tensor(patches), prm["cm.wq"], prm["cm.wk"],
                                                        prm["cm.wv"], prm["cm.wo"], cfg.cm_heads,
                                                        return_weights=True)
        v = v + out if cfg.residual else out
    if not cfg.has("nca"):
        out, att["cross_aspect"] = cross_aspect_attention(v, prm["ca.w"], return_weights=True)
        v = v + out if cfg.residual else out
    table, _ = class_table(state)
    v = v.reshape(*v.shape[:-2], 1, *v.shape[-2:])
    tokens = build_class_text_input(v, ad.Tensor(table), cfg.class_pos)
    t = encode_text(tokens, prm, cfg.text_heads, slot=class_slot(cfg.prompt_len, cfg.class_pos))
    return (t, att) if return_attention else t


def logits(state, batch, return_attention=False):
    """cos(i, t_k) / mu for every aspect and padded class slot: (B, P, K_max)."""
    r = context_vectors(state, batch)
    t, att = text_features(state, r, batch.patches, return_attention=True)
    img = ad.Tensor(batch.image[:, None, None, :])
    out = ad.cosine_similarity(t, img) * (1.0 / state.config.mu)
    return (out, att) if return_attention else out


def probabilities(state, batch):
    _, mask = class_table(state)
    return ad.masked_softmax(logits(state, batch), mask[None])


def batch_loss(state, batch, return_logits=False):
    """Mean over samples of the per-sample sum of aspect cross-entropies."""
    if batch.labels is None:
        raise DataError("batch has no labels")
    _, mask = class_table(state)
    lg = logits(state, batch)
    logp = ad.log_softmax(lg, mask[None])
    onehot = one_hot(batch.labels, mask)
    loss = -(logp * ad.Tensor(onehot)).sum() * (1.0 / len(batch))
    return (loss, lg) if return_logits else loss


def one_hot(labels, mask):
    labels = np.asarray(labels)
    b, p = labels.shape
    if np.any(labels < 0) or np.any(labels >= mask.sum(axis=1)[None, :]):
        raise DataError("label index out of range for its aspect")
    out = np.zeros((b, p, mask.shape[1]))
    out[np.arange(b)[:, None], np.arange(p)[None, :], labels] = 1.0
    return out


# checkpoints --------------------------------------------------------------------

MAGIC = b"STCLIPCK"
VERSION = 1


def save_checkpoint(path, state, extra=None):
    """Deterministic binary container: magic, version, JSON header, float64 payload.

    Each named block records shape, frozen flag and byte offset into the payload.
    """
    blocks, offset, payload = [], 0, []
    for name in sorted(state.params):
        data = np.ascontiguousarray(state.params[name].data, dtype="<f8")
        blocks.append({"name": name, "shape": list(data.shape), "frozen": name in state.frozen, "offset": offset})
        payload.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"config": state.config.to_dict(), "vocab": state.vocab.to_dict(), "blocks": blocks,
                         "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for chunk in payload:
            f.write(chunk)


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen])
    body = memoryview(raw)[start + hlen:]
    params, frozen = {}, set()
    for blk in header["blocks"]:
        n = int(np.prod(blk["shape"])) if blk["shape"] else 1
        data = np.frombuffer(body, dtype="<f8", count=n, offset=blk["offset"]).reshape(blk["shape"]).copy()
        params[blk["name"]] = ad.Tensor(data, requires_grad=not blk["frozen"], name=blk["name"])
        if blk["frozen"]:
            frozen.add(blk["name"])
    state = ModelState(ModelConfig.from_dict(header["config"]).validate(), FeatureVocab.from_dict(header["vocab"]),
                       params, frozenset(frozen))
    return state, header.get("extra", {})
