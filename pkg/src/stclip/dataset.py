"""Join scene records, the road network and dynamic statistics into model-ready arrays."""

import os
from dataclasses import dataclass

import numpy as np

from .aspects import ASPECTS
from .context import PROPERTIES, FeatureVocab, tracklet_window
from .errors import IntegrityError
from .mapmatch import DYNAMIC_STATS_FILE, read_dynamic_stats_csv
from .model import Batch, image_features
from .records import load_latents, load_scene_records
from .roadnet import load_road_network


@dataclass
class SceneDataset:
    paths: list
    indices: np.ndarray   # (N, 2N_w+1, 8)
    mask: np.ndarray      # (N, 2N_w+1)
    latents: np.ndarray   # (N, D_lat)
    labels: np.ndarray    # (N, P)

    def __len__(self):
        return len(self.paths)

    def subset(self, rows):
        rows = np.asarray(rows, dtype=int)
        return SceneDataset([self.paths[i] for i in rows], self.indices[rows], self.mask[rows],
                            self.latents[rows], self.labels[rows])

    def batch(self, state, rows=None):
        ds = self if rows is None else self.subset(rows)
        patches, image = image_features(state, ds.latents)
        return Batch(ds.indices, ds.mask, patches, image, ds.labels)


def segment_indices(network, vocab, stats, segment_id, timestamp):
    """All eight category indices of one trajectory sample, in PROPERTIES order."""
    profile = network.profile(segment_id)
    if stats is not None and timestamp is not None:
        tc, ms = stats.lookup(segment_id, timestamp)
    else:
        tc, ms = profile.trajectory_count, profile.medium_speed
    return vocab.static_indices(profile) + FeatureVocab.dynamic_indices(tc, ms)


def build_dataset(records, network, stats, latents, n_w, vocab=None, aspects=ASPECTS):
    vocab = vocab or FeatureVocab.from_network(network)
    width = 2 * n_w + 1
    n = len(records)
    indices = np.zeros((n, width, len(PROPERTIES)), dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    labels = np.zeros((n, len(aspects)), dtype=np.int64)
    lat = []
    for s, rec in enumerate(records):
        if rec.image_path not in latents:
            raise IntegrityError(f"{rec.image_path}: no scene latent")
        lat.append(latents[rec.image_path])
        segs, ts = rec.trajectory_segments, rec.trajectory_timestamps
        for row, j in enumerate(tracklet_window(len(segs), rec.image_index, n_w)):
            if j is None:
                continue
            indices[s, row] = segment_indices(network, vocab, stats, segs[j], None if ts is None else ts[j])
            mask[s, row] = True
        labels[s] = rec.label_indices[:len(aspects)]
    lat = np.array(lat, dtype=np.float64) if lat else np.zeros((0, 0))
    return SceneDataset([r.image_path for r in records], indices, mask, lat, labels), vocab


def load_dataset(directory, n_w, vocab=None, stats_path=None):
    """Read a dataset directory written by ``synth`` (or laid out the same way).

    Dynamic statistics come from ``stats_path`` when given, else from the
    directory's own stats file, else from the profile columns.
    """
    network = load_road_network(directory)
    stats_path = stats_path or os.path.join(directory, DYNAMIC_STATS_FILE)
    stats = read_dynamic_stats_csv(stats_path, network) if os.path.exists(stats_path) else None
    records = load_scene_records(directory)
    latents = load_latents(directory)
    ds, vocab = build_dataset(records, network, stats, latents, n_w, vocab)
    return ds, vocab, network
