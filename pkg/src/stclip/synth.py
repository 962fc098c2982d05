"""Synthetic world: grid road network, simulated GPS trips and labelled scene samples.

Label signal is planted in two places.  Scene, surface and (weakly) width shift
the scene latent through per-class centroids; width also fixes the lane count
of the image segment; accessibility only sets the speed band and traffic
volume of the trips around the image, so it is recoverable from the
trajectory context and not from the latent.

Geometry lives in local meters and is mapped to lon/lat by a fixed
equirectangular projection.
"""

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .aspects import ASPECTS, CLASS_WORDS
from .errors import SamplingError
from .mapmatch import (DYNAMIC_STATS_FILE, GPS_FILE, GpsTrajectory, LocalProjection, SegmentTrajectory,
                       compute_dynamic_stats, write_dynamic_stats_csv, write_gps_csv)
from .records import SceneSampleRecord, write_latents, write_scene_records
from .roadnet import SegmentProfile, build_road_network, write_road_network
from .seeding import substream

WIDTH_LANES = {"normal": 3, "narrow": 2, "extremely narrow": 1, "unknown": 4}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    grid: int = 8
    spacing: float = 150.0
    jitter: float = 15.0
    per_class: int = 72            # samples per class of the aspect with the most classes
    latent_dim: int = 16
    latent_noise: float = 0.6
    # how far each aspect's class centroids sit from the origin of latent space
    latent_strength: dict = field(default_factory=lambda: {
        "scene": 1.0, "surface": 1.0, "width": 0.35, "accessibility": 0.0})
    # km/h bands per accessibility class
    speed_bands: dict = field(default_factory=lambda: {
        "easy": (50.0, 70.0), "hard": (20.0, 35.0), "extremely hard": (3.0, 9.0)})
    # inclusive range of extra trips around the image segment in its time window
    traffic: dict = field(default_factory=lambda: {
        "easy": (0, 2), "hard": (5, 9), "extremely hard": (8, 14)})
    route_len: int = 7
    gps_spacing: float = 40.0
    gps_sigma: float = 0.0
    window: float = 1800.0
    origin: tuple = (116.30, 39.90)

    @property
    def n_samples(self):
        return self.per_class * max(len(w) for w in CLASS_WORDS.values())


@dataclass
class Trip:
    """One simulated drive: ground-truth route, segment entry times and GPS points."""

    route: list
    entry_times: list
    gps: GpsTrajectory

    def segment_trajectory(self):
        return SegmentTrajectory(tuple(zip(self.route, self.entry_times)))


class SynthWorld:
    """Network plus the metric geometry needed to render trips."""

    def __init__(self, network, polylines, twin, projection):
        self.network = network
        self.polylines = polylines      # segment id -> (n, 2) meters
        self.twin = twin                # segment id -> opposite direction id
        self.projection = projection
        self.pred = {sid: [] for sid in network.segment_ids}
        for a, b in network.edges():
            self.pred[b].append(a)


def generate_network(config):
    """Grid of ``grid`` x ``grid`` intersections; every street is a pair of
    opposite directed segments sharing one geometry.  U-turns are allowed, so
    the graph is strongly connected."""
    g = config.grid
    if g < 2:
        raise ValueError("grid size must be at least 2")
    rng = substream(config.seed, "network")
    xy = np.stack(np.meshgrid(np.arange(g), np.arange(g), indexing="ij"), -1).reshape(-1, 2) * config.spacing
    xy = xy + rng.uniform(-config.jitter, config.jitter, xy.shape)
    node = lambda i, j: i * g + j  # noqa: E731
    streets = []
    for i in range(g):
        for j in range(g):
            if i + 1 < g:
                streets.append((node(i, j), node(i + 1, j)))
            if j + 1 < g:
                streets.append((node(i, j), node(i, j + 1)))
    proj = LocalProjection(*config.origin)
    profiles, polylines, twin, ends = [], {}, {}, {}
    sid = 1
    for u, v in streets:
        lanes = int(rng.integers(1, 5))
        fc = int(rng.integers(1, 6))
        sc = lanes + int(rng.integers(0, 2))
        length = float(np.hypot(*(xy[v] - xy[u])))
        length = float(format(length, ".6g"))
        for a, b in ((u, v), (v, u)):
            profiles.append(SegmentProfile(sid, fc, lanes, sc, length))
            polylines[sid] = np.array([xy[a], xy[b]])
            ends[sid] = (a, b)
            sid += 1
        twin[sid - 2], twin[sid - 1] = sid - 1, sid - 2
    starts = {}
    for s, (a, _) in ends.items():
        starts.setdefault(a, []).append(s)
    edges = [(s, t) for s, (_, b) in sorted(ends.items()) for t in sorted(starts[b])]
    geometry = {}
    for s, poly in polylines.items():
        lon, lat = proj.inverse(poly[:, 0], poly[:, 1])
        geometry[s] = np.column_stack([lon, lat])
    network = build_road_network(profiles, edges, geometry)
    return SynthWorld(network, polylines, twin, proj)


def random_route(world, rng, length, through=None, before=0, tries=200):
    """Simple route of ``length`` segments with no U-turns or repeats.

    With ``through`` set, that segment sits at position ``before``.
    """
    ids = world.network.segment_ids
    for _ in range(tries):
        start = through if through is not None else ids[int(rng.integers(len(ids)))]
        route = [start]
        ok = True
        for _ in range(before if through is not None else 0):
            opts = [p for p in world.pred[route[0]] if p != world.twin[route[0]] and p not in route]
            if not opts:
                ok = False
                break
            route.insert(0, opts[int(rng.integers(len(opts)))])
        while ok and len(route) < length:
            opts = [s for s in world.network.successors(route[-1]) if s != world.twin[route[-1]] and s not in route]
            if not opts:
                ok = False
                break
            route.append(opts[int(rng.integers(len(opts)))])
        if ok:
            return route
    raise SamplingError(f"could not build a {length}-segment route")


def render_trip(world, route, speeds, t0, rng, spacing=40.0, sigma=0.0, start_frac=None, end_frac=None):
    """GPS points every ``spacing`` meters along ``route``; ``speeds`` in km/h per segment.

    The trip starts and ends part-way along the first and last segments.
    Entry times are the ground-truth times each segment is entered (the first
    one is the trip start).
    """
    net = world.network
    start_frac = rng.uniform(0.2, 0.5) if start_frac is None else start_frac
    end_frac = rng.uniform(0.5, 0.8) if end_frac is None else end_frac
    lengths = [net.profile(s).road_length for s in route]
    begin = start_frac * lengths[0]
    finish = sum(lengths[:-1]) + end_frac * lengths[-1]
    bounds = np.concatenate(([0.0], np.cumsum(lengths)))
    # time at each segment boundary
    tb = [t0]
    for k, s in enumerate(route):
        lo = max(bounds[k], begin)
        tb.append(tb[-1] + (bounds[k + 1] - lo) / (speeds[k] / 3.6))
    entry = [t0] + tb[1:len(route)]
    pts = []
    d = begin
    while d <= finish + 1e-9:
        k = min(int(np.searchsorted(bounds, d, side="right")) - 1, len(route) - 1)
        frac = (d - bounds[k]) / lengths[k]
        poly = world.polylines[route[k]]
        x, y = poly[0] + frac * (poly[-1] - poly[0])
        if sigma > 0:
            x, y = x + rng.normal(0, sigma), y + rng.normal(0, sigma)
        seg_start = max(bounds[k], begin)
        t = tb[k] + (d - seg_start) / (speeds[k] / 3.6)
        lon, lat = world.projection.inverse(x, y)
        pts.append((float(lon), float(lat), float(t)))
        d += spacing
    return Trip(list(route), [float(t) for t in entry], GpsTrajectory(tuple(pts)))


def generate_trajectories(world, config, count=100, rng=None, speed_band=(20.0, 60.0)):
    """Random-walk trips over the network, one per start window."""
    rng = rng or substream(config.seed, "trips")
    trips = {}
    for n in range(count):
        route = random_route(world, rng, config.route_len)
        speeds = rng.uniform(*speed_band, size=len(route))
        trips[f"t{n:05d}"] = render_trip(world, route, speeds, n * config.window + 60.0, rng,
                                         config.gps_spacing, config.gps_sigma)
    return trips


def balanced_labels(n, aspects, rng):
    """Each aspect's classes repeated as evenly as possible, independently shuffled."""
    cols = []
    for a in aspects:
        k = len(CLASS_WORDS[a])
        col = np.arange(n) % k
        rng.shuffle(col)
        cols.append(col)
    return np.stack(cols, axis=1)


def label_centroids(config, rng, aspects=ASPECTS):
    return {a: rng.normal(0, 1, (len(CLASS_WORDS[a]), config.latent_dim)) * config.latent_strength.get(a, 0.0)
            for a in aspects}


def scene_latent(labels, centroids, noise, rng, aspects=ASPECTS):
    z = sum(centroids[a][k] for a, k in zip(aspects, labels))
    return z + (rng.normal(0, noise, z.shape) if noise > 0 else 0.0)


@dataclass
class SynthDataset:
    world: SynthWorld
    records: list
    latents: dict
    trips: dict           # trip id -> Trip (own trips and background traffic)
    labels: np.ndarray


def generate_scene_samples(world, config, aspects=ASPECTS):
    """Labelled scene samples with their own trips and label-driven background traffic."""
    rng = substream(config.seed, "data")
    n = config.n_samples
    labels = balanced_labels(n, aspects, rng)
    centroids = label_centroids(config, rng, aspects)
    net = world.network
    by_lanes = {}
    for p in net.segments:
        by_lanes.setdefault(p.lane_number, []).append(p.segment_id)
    half = config.route_len // 2
    records, latents, trips = [], {}, {}
    for s in range(n):
        names = tuple(CLASS_WORDS[a][k] for a, k in zip(aspects, labels[s]))
        lab = dict(zip(aspects, names))
        pool = by_lanes.get(WIDTH_LANES[lab["width"]]) if "width" in lab else net.segment_ids
        if not pool:
            raise SamplingError(f"no segment with {WIDTH_LANES[lab['width']]} lanes for width={lab['width']!r}")
        access = lab.get("accessibility", "easy")
        band = config.speed_bands[access]
        for _ in range(50):
            image_seg = pool[int(rng.integers(len(pool)))]
            try:
                route = random_route(world, rng, config.route_len, through=image_seg, before=half, tries=20)
                break
            except SamplingError:
                continue
        else:
            raise SamplingError(f"sample {s}: no route through a segment with the requested width")
        t_window = s * config.window
        own = render_trip(world, route, rng.uniform(*band, size=len(route)), t_window + rng.uniform(30, 120),
                          rng, config.gps_spacing, config.gps_sigma)
        path = f"img_{s:05d}.jpg"
        trips[f"s{s:05d}"] = own
        lo, hi = config.traffic[access]
        for b in range(int(rng.integers(lo, hi + 1))):
            sub = route[max(0, half - 2):half + 3]
            trip = render_trip(world, sub, rng.uniform(*band, size=len(sub)), t_window + rng.uniform(0, 600),
                               rng, config.gps_spacing, config.gps_sigma)
            trips[f"s{s:05d}_b{b:02d}"] = trip
        records.append(SceneSampleRecord(path, names, tuple(int(k) for k in labels[s]), tuple(route), image_seg,
                                         tuple(own.entry_times)))
        latents[path] = scene_latent(labels[s], centroids, config.latent_noise, rng, aspects)
    return SynthDataset(world, records, latents, trips, labels)


def generate_dataset(config):
    world = generate_network(config)
    return generate_scene_samples(world, config)


def write_dataset(directory, data, config):
    """Write every file the pipeline reads: road network, scene records,
    latents, GPS trips and ground-truth dynamic statistics."""
    os.makedirs(directory, exist_ok=True)
    truth = [t.segment_trajectory() for _, t in sorted(data.trips.items())]
    stats = compute_dynamic_stats(truth, data.world.network, config.window)
    totals = {}
    for (sid, _), (count, ms) in stats.cells.items():
        c, speeds = totals.get(sid, (0, []))
        totals[sid] = (c + count, speeds + [ms])
    profiles = []
    for p in data.world.network.segments:
        c, speeds = totals.get(p.segment_id, (0, []))
        profiles.append(replace(p, trajectory_count=c, medium_speed=float(format(np.median(speeds), ".6g"))
                                if speeds else 0.0))
    net = build_road_network(profiles, data.world.network.edges(), data.world.network.geometry)
    write_road_network(net, directory)
    write_scene_records(directory, data.records)
    write_latents(directory, data.latents)
    write_gps_csv(os.path.join(directory, GPS_FILE), {k: t.gps for k, t in data.trips.items()})
    write_dynamic_stats_csv(os.path.join(directory, DYNAMIC_STATS_FILE), stats)
    return stats
