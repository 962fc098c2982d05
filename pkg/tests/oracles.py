"""Independent reference computations shared by the unit and acceptance tests."""

import itertools
import math

import numpy as np

from stclip.mapmatch import LocalProjection
from stclip.roadnet import SegmentProfile, build_road_network

ORIGIN = (116.30, 39.90)


def lattice_brute_force(log_emissions, log_transitions):
    """Best total log probability over every candidate path (enumerates them all)."""
    best = -math.inf
    for path in itertools.product(*[range(len(e)) for e in log_emissions]):
        total = sum(log_emissions[t][j] for t, j in enumerate(path))
        total += sum(log_transitions[t][path[t], path[t + 1]] for t in range(len(path) - 1))
        best = max(best, total)
    return best


def metric_network(polylines, edges, lengths=None):
    """Network from polylines in local meters around ORIGIN; road_length = polyline length."""
    proj = LocalProjection(*ORIGIN)
    profiles, geometry = [], {}
    for sid, poly in polylines.items():
        poly = np.asarray(poly, dtype=np.float64)
        length = lengths[sid] if lengths else float(np.hypot(*np.diff(poly, axis=0).T).sum())
        profiles.append(SegmentProfile(sid, 1, 1, 30, length))
        lon, lat = proj.inverse(poly[:, 0], poly[:, 1])
        geometry[sid] = np.column_stack([lon, lat])
    return build_road_network(profiles, edges, geometry), proj


def macro_f1_by_hand(true, pred, k):
    """Per-class precision/recall by counting, F1 := 0 when undefined."""
    f1s = []
    for c in range(k):
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(true, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(true, pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(f1s) / k
