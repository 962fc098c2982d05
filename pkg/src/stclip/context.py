"""Dynamic spatio-temporal context: segment property embeddings, feature fusion,
tracklet windows and the tracklet Transformer that yields the context vector r.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .layers import init_block, sinusoidal_positions, transformer_block

PROPERTIES = ("id", "fc", "ln", "sc", "rl", "od", "tc", "ms")
STATIC_PROPERTIES = PROPERTIES[:6]
DYNAMIC_PROPERTIES = PROPERTIES[6:]

# 16 equal-width bins over log10(road_length) in [0.5, 4.0]
RL_BINS = tuple(np.linspace(0.5, 4.0, 17).tolist())
# trajectory count strata {0, 1-5, 6-20, 21-50, 51+}
TC_BINS = (0.0, 1.0, 6.0, 21.0, 51.0, math.inf)
# 10 km/h strata from 0 to 100 plus an overflow bin
MS_BINS = tuple(float(v) for v in range(0, 101, 10)) + (math.inf,)


def discretize(value, bins):
    """Index of the half-open bin [b_i, b_{i+1}) holding ``value``.

    ``len(bins) - 1`` bins; values outside the range clamp to the first or last.
    """
    if len(bins) < 2:
        raise ConfigError("discretize needs at least two boundaries")
    b = np.asarray(bins, dtype=np.float64)
    if np.any(np.diff(b) <= 0):
        raise ConfigError("bin boundaries must be strictly increasing")
    idx = np.searchsorted(b, value, side="right") - 1
    return np.clip(idx, 0, len(b) - 2) if np.ndim(idx) else int(min(max(idx, 0), len(b) - 2))


class FeatureVocab:
    """Category-to-row mappings for every segment property table."""

    def __init__(self, segment_ids, fc_values, ln_values, sc_values, max_out_degree):
        self.segment_ids = [int(v) for v in segment_ids]
        self.fc_values = sorted(int(v) for v in fc_values)
        self.ln_values = sorted(int(v) for v in ln_values)
        self.sc_values = sorted(int(v) for v in sc_values)
        self.max_out_degree = int(max_out_degree)
        self._maps = {
            "id": {v: i for i, v in enumerate(self.segment_ids)},
            "fc": {v: i for i, v in enumerate(self.fc_values)},
            "ln": {v: i for i, v in enumerate(self.ln_values)},
            "sc": {v: i for i, v in enumerate(self.sc_values)},
        }

    @classmethod
    def from_network(cls, network):
        segs = network.segments
        return cls([p.segment_id for p in segs], {p.function_class for p in segs},
                   {p.lane_number for p in segs}, {p.speed_class for p in segs},
                   max((p.out_degree or 0) for p in segs) if segs else 0)

    def table_sizes(self):
        return {
            "id": len(self.segment_ids), "fc": len(self.fc_values), "ln": len(self.ln_values),
            "sc": len(self.sc_values), "rl": len(RL_BINS) - 1, "od": self.max_out_degree + 1,
            "tc": len(TC_BINS) - 1, "ms": len(MS_BINS) - 1,
        }

    def to_dict(self):
        return {"segment_ids": self.segment_ids, "fc_values": self.fc_values, "ln_values": self.ln_values,
                "sc_values": self.sc_values, "max_out_degree": self.max_out_degree}

    @classmethod
    def from_dict(cls, d):
        return cls(d["segment_ids"], d["fc_values"], d["ln_values"], d["sc_values"], d["max_out_degree"])

    def _lookup(self, prop, value):
        try:
            return self._maps[prop][int(value)]
        except KeyError:
            raise IndexError(f"{prop} category {value!r} is not in the embedding table") from None

    def static_indices(self, profile):
        od = profile.out_degree or 0
        if not 0 <= od <= self.max_out_degree:
            raise IndexError(f"out_degree {od} is not in the embedding table")
        return [self._lookup("id", profile.segment_id), self._lookup("fc", profile.function_class),
                self._lookup("ln", profile.lane_number), self._lookup("sc", profile.speed_class),
                discretize(math.log10(profile.road_length), RL_BINS), od]

    @staticmethod
    def dynamic_indices(trajectory_count, medium_speed):
        return [discretize(trajectory_count, TC_BINS), discretize(medium_speed, MS_BINS)]


def init_property_tables(rng, vocab, prop_dim, std=1.0):
    return {f"emb.{k}": rng.normal(0, std, (n, prop_dim)) for k, n in vocab.table_sizes().items()}


def _gather(tables, names, indices):
    indices = np.asarray(indices)
    return ad.concat([ad.take_rows(tables[f"emb.{n}"], indices[..., i]) for i, n in enumerate(names)], axis=-1)


def embed_static(profile, tables, vocab):
    """h_ID || h_FC || h_LN || h_SC || h_RL || h_OD for one segment."""
    return _gather(tables, STATIC_PROPERTIES, vocab.static_indices(profile))


def embed_dynamic(stats, tables):
    """h_TC || h_MS for one (trajectory_count, medium_speed) pair."""
    return _gather(tables, DYNAMIC_PROPERTIES, FeatureVocab.dynamic_indices(*stats))


def embed_properties(indices, tables, drop_static=False, drop_dynamic=False):
    """Batched concatenation of all eight property embeddings.

    ``indices`` has shape (..., 8) in PROPERTIES order.  Dropped groups are
    replaced by zeros of the same width.
    """
    indices = np.asarray(indices)
    parts = []
    for names, drop, lo in ((STATIC_PROPERTIES, drop_static, 0), (DYNAMIC_PROPERTIES, drop_dynamic, 6)):
        width = sum(tables[f"emb.{n}"].shape[1] for n in names)
        if drop:
            parts.append(ad.Tensor(np.zeros(indices.shape[:-1] + (width,))))
        else:
            parts.append(_gather(tables, names, indices[..., lo:lo + len(names)]))
    return ad.concat(parts, axis=-1)


def fuse_segment_features(h_static, h_dynamic, fusion):
    """tanh(W [h_static || h_dynamic] + b): one affine layer and a tanh."""
    x = ad.concat([h_static, h_dynamic], axis=-1) if h_dynamic is not None else h_static
    return fuse(x, fusion)


def fuse(x, fusion):
    w, b = fusion["fuse.w"], fusion["fuse.b"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"fusion expects input width {w.shape[0]}, got shape {x.shape}")
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
    out = ad.tanh(x2 @ w + b)
    return out.reshape(*lead, w.shape[1]) if x.ndim != 2 else out


@dataclass
class Tracklet:
    matrix: object  # Tensor (2*N_w+1, D)
    mask: np.ndarray
    center: int


def tracklet_window(length, image_index, n_w):
    """Positions e_{i-N_w}..e_{i+N_w}; ``None`` past either end."""
    if not 0 <= image_index < length:
        raise IndexError(f"image index {image_index} outside trajectory of length {length}")
    return [j if 0 <= j < length else None for j in range(image_index - n_w, image_index + n_w + 1)]


def build_tracklet(seg_traj, image_index, n_w, feature_fn):
    """Fixed-width window of segment features centred on the image sample.

    ``feature_fn(position)`` returns the feature vector of sample ``position``.
    Out-of-range rows are zero and masked invalid.
    """
    window = tracklet_window(len(seg_traj), image_index, n_w)
    rows, dim = [], None
    for j in window:
        if j is not None:
            row = ad.as_tensor(feature_fn(j))
            dim = row.shape[-1]
            rows.append(row)
        else:
            rows.append(None)
    rows = [ad.Tensor(np.zeros(dim)) if r is None else r for r in rows]
    matrix = ad.stack(rows, axis=0)
    mask = np.array([j is not None for j in window])
    return Tracklet(matrix, mask, n_w)


def init_tracklet_encoder(rng, dim, layers, ffn_mult=4, out_gain=1.0):
    """``out_gain`` initialises the final layer-norm gain, i.e. the scale of r."""
    params = {}
    for l in range(layers):
        params.update(init_block(rng, f"trk.{l}", dim, ffn_mult))
    params["trk.lnf_g"] = np.full(dim, float(out_gain))
    params["trk.lnf_b"] = np.zeros(dim)
    return params


def encode_tracklet(matrix, mask, params, heads, layers=None, return_weights=False):
    """Pre-norm Transformer over tracklet rows; returns the centre row of H^(L).

    ``matrix`` is (..., W, D) with W = 2*N_w+1; masked rows never act as keys,
    so perturbing them cannot change the output.
    """
    n = matrix.shape[-2]
    d = matrix.shape[-1]
    if d % heads:
        raise ConfigError(f"head count {heads} does not divide width {d}")
    if layers is None:
        layers = sum(1 for k in params if k.startswith("trk.") and k.endswith(".wq"))
    x = matrix + ad.Tensor(sinusoidal_positions(n, d))
    weights = []
    for l in range(layers):
        x, w = transformer_block(x, params, f"trk.{l}", heads, key_mask=mask)
        weights.append(w)
    x = ad.layer_norm(x, params["trk.lnf_g"], params["trk.lnf_b"])
    r = x[..., n // 2, :]
    return (r, weights) if return_weights else r
