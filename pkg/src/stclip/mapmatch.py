"""HMM map matching (candidate search, transition scoring, Viterbi inference)
and per-window dynamic segment statistics.

Coordinates are projected to local equirectangular meters around the network
centre.  Ties anywhere resolve toward the smallest segment id.
"""

import csv
import math
import statistics
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, MatchError, ParseError, SchemaError

EARTH_RADIUS = 6371008.8
DEFAULT_WINDOW = 1800.0
GPS_FILE = "gps.csv"
MATCHED_FILE = "matched.csv"
DYNAMIC_STATS_FILE = "dynamic_stats.csv"
SPEED_CAP_KMH = 200.0


@dataclass(frozen=True)
class GpsTrajectory:
    points: tuple  # ((lon, lat, timestamp), ...)

    def __post_init__(self):
        if not self.points:
            raise IntegrityError("a GPS trajectory needs at least one point")
        ts = [p[2] for p in self.points]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise IntegrityError("GPS timestamps must be strictly increasing")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class Candidate:
    segment_id: int
    projected_point: tuple
    perpendicular_distance: float
    offset_along_segment: float


@dataclass(frozen=True)
class SegmentTrajectory:
    samples: tuple  # ((segment_id, timestamp), ...)

    @property
    def segments(self):
        return [s for s, _ in self.samples]

    @property
    def timestamps(self):
        return [t for _, t in self.samples]

    def __len__(self):
        return len(self.samples)


@dataclass
class MatchParams:
    radius: float = 100.0
    k: int = 8
    sigma: float = 20.0
    max_route: float = 3000.0
    # backward jitter along one segment below this is treated as standing still
    reverse_tolerance: float = 10.0


class LocalProjection:
    def __init__(self, lon0, lat0):
        self.lon0, self.lat0 = lon0, lat0
        self.kx = math.radians(1.0) * EARTH_RADIUS * math.cos(math.radians(lat0))
        self.ky = math.radians(1.0) * EARTH_RADIUS

    def forward(self, lon, lat):
        return (np.asarray(lon) - self.lon0) * self.kx, (np.asarray(lat) - self.lat0) * self.ky

    def inverse(self, x, y):
        return self.lon0 + np.asarray(x) / self.kx, self.lat0 + np.asarray(y) / self.ky


def haversine(lon1, lat1, lon2, lat2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS * math.asin(min(1.0, math.sqrt(a)))


def project_onto_polyline(x, y, poly):
    """Closest point on a polyline (n x 2 array, meters).

    Returns (distance, px, py, arclength of the foot point).
    """
    a = poly[:-1]
    d = poly[1:] - a
    seg_len2 = (d * d).sum(axis=1)
    t = np.divide(((x - a[:, 0]) * d[:, 0] + (y - a[:, 1]) * d[:, 1]), seg_len2,
                  out=np.zeros_like(seg_len2), where=seg_len2 > 0)
    t = np.clip(t, 0.0, 1.0)
    px = a[:, 0] + t * d[:, 0]
    py = a[:, 1] + t * d[:, 1]
    dist = np.hypot(x - px, y - py)
    i = int(np.argmin(dist))
    cum = np.concatenate(([0.0], np.cumsum(np.sqrt(seg_len2))))
    return float(dist[i]), float(px[i]), float(py[i]), float(cum[i] + t[i] * math.sqrt(seg_len2[i]))


class GridIndex:
    """Uniform grid over the network bounding box; cell size = search radius."""

    def __init__(self, network, cell_size=100.0, projection=None):
        if not network.geometry:
            raise IntegrityError("spatial index needs segment geometry")
        self.network = network
        self.cell = float(cell_size)
        if projection is None:
            allpts = np.concatenate(list(network.geometry.values()))
            lon0, lat0 = allpts.mean(axis=0)
            projection = LocalProjection(lon0, lat0)
        self.projection = projection
        self.polylines = {}
        self.geo_length = {}
        self.cells = defaultdict(list)
        for sid in sorted(network.geometry):
            pts = network.geometry[sid]
            x, y = projection.forward(pts[:, 0], pts[:, 1])
            poly = np.column_stack([x, y])
            self.polylines[sid] = poly
            self.geo_length[sid] = float(np.hypot(*np.diff(poly, axis=0).T).sum())
            keys = set()
            for (x0, y0), (x1, y1) in zip(poly[:-1], poly[1:]):
                for cx in range(self._c(min(x0, x1)), self._c(max(x0, x1)) + 1):
                    for cy in range(self._c(min(y0, y1)), self._c(max(y0, y1)) + 1):
                        keys.add((cx, cy))
            for key in keys:
                self.cells[key].append(sid)

    def _c(self, v):
        return int(math.floor(v / self.cell))

    def nearby(self, x, y, radius):
        sids = set()
        for cx in range(self._c(x - radius), self._c(x + radius) + 1):
            for cy in range(self._c(y - radius), self._c(y + radius) + 1):
                sids.update(self.cells.get((cx, cy), ()))
        return sids

    def candidate(self, sid, x, y):
        dist, px, py, arc = project_onto_polyline(x, y, self.polylines[sid])
        road_length = self.network.profile(sid).road_length
        geo = self.geo_length[sid]
        offset = road_length * (arc / geo) if geo > 0 else 0.0
        lon, lat = self.projection.inverse(px, py)
        return Candidate(sid, (float(lon), float(lat)), dist, min(max(offset, 0.0), road_length))


def candidate_segments(index, point, radius=100.0, k=8):
    """Up to ``k`` candidates within ``radius`` meters of ``point`` (lon, lat),
    nearest first."""
    if radius <= 0 or k < 1:
        raise ValueError("radius must be positive and k >= 1")
    x, y = index.projection.forward(point[0], point[1])
    x, y = float(x), float(y)
    found = []
    for sid in index.nearby(x, y, radius):
        c = index.candidate(sid, x, y)
        if c.perpendicular_distance <= radius:
            found.append(c)
    # distances equal to the micrometre tie on segment id (twin segments share reversed geometry)
    found.sort(key=lambda c: (round(c.perpendicular_distance, 6), c.segment_id))
    return found[:k]


def emission_log_prob(candidate, sigma=20.0):
    d = candidate.perpendicular_distance
    return -d * d / (2.0 * sigma * sigma)


def emission_prob(candidate, sigma=20.0):
    return math.exp(emission_log_prob(candidate, sigma))


def distance_ratio(great_circle, route):
    if route == math.inf:
        return 0.0
    hi = max(great_circle, route)
    if hi == 0:
        return 1.0
    return min(great_circle, route) / hi


class Router:
    """Network route distances between projected points, with cached searches."""

    def __init__(self, network, max_route=3000.0, reverse_tolerance=10.0):
        self.network = network
        self.max_route = max_route
        self.reverse_tolerance = reverse_tolerance
        self._cache = {}

    def _search(self, sid):
        hit = self._cache.get(sid)
        if hit is None:
            hit = self._cache[sid] = self.network.search(sid, self.max_route)
        return hit

    def _gap(self, a, b):
        """Cheapest summed length of the segments strictly between a and b."""
        dist, _ = self._search(a)
        d = dist.get(self.network.index_of(b))
        if d is None:
            return math.inf
        return d - self.network.profile(b).road_length

    def same_traversal(self, prev, nxt):
        return (prev.segment_id == nxt.segment_id
                and nxt.offset_along_segment >= prev.offset_along_segment - self.reverse_tolerance)

    def route_distance(self, prev, nxt):
        if self.same_traversal(prev, nxt):
            return abs(nxt.offset_along_segment - prev.offset_along_segment)
        gap = self._gap(prev.segment_id, nxt.segment_id)
        if gap == math.inf:
            return math.inf
        la = self.network.profile(prev.segment_id).road_length
        return (la - prev.offset_along_segment) + gap + nxt.offset_along_segment

    def route_path(self, a, b):
        """Segment ids strictly between a and b on the cheapest route (a != b or a loop)."""
        dist, pred = self._search(a)
        net = self.network
        src, cur = net.index_of(a), net.index_of(b)
        if cur not in dist:
            raise MatchError(f"no route from segment {a} to {b}")
        path = []
        cur = pred[cur]
        while cur != src:
            path.append(net.segments[cur].segment_id)
            cur = pred[cur]
        path.reverse()
        return path


def transition_prob(prev, nxt, great_circle, router):
    """Distance-ratio transition probability in [0, 1]; unreachable -> 0."""
    return distance_ratio(great_circle, router.route_distance(prev, nxt))


def _pick(scores, keys):
    """Index of the max score; ties go to the smallest key."""
    order = np.argsort(np.asarray(keys), kind="stable")
    return int(order[int(np.argmax(np.asarray(scores)[order]))])


def viterbi_decode(log_emissions, log_transitions, tie_keys=None):
    """Most probable path through a candidate lattice.

    ``log_emissions[t]`` has one entry per candidate at step t and
    ``log_transitions[t-1]`` is (n_{t-1} x n_t).  Returns ``(path, log_prob)``.
    Raises MatchError (with the step index) when no candidate of a step is
    reachable.
    """
    if tie_keys is None:
        tie_keys = [np.arange(len(e)) for e in log_emissions]
    score = np.asarray(log_emissions[0], dtype=np.float64)
    back = []
    for t in range(1, len(log_emissions)):
        total = score[:, None] + np.asarray(log_transitions[t - 1], dtype=np.float64)
        order = np.argsort(np.asarray(tie_keys[t - 1]), kind="stable")
        best_rows = order[np.argmax(total[order], axis=0)]
        best = total[best_rows, np.arange(total.shape[1])]
        if not np.any(np.isfinite(best)):
            raise MatchError(f"broken trajectory: no feasible transition into point {t}", point_index=t)
        back.append(best_rows)
        score = best + np.asarray(log_emissions[t], dtype=np.float64)
    last = _pick(score, tie_keys[-1])
    path = [last]
    for rows in reversed(back):
        path.append(int(rows[path[-1]]))
    path.reverse()
    return path, float(score[last])


class MapMatcher:
    """Holds the spatial index and router for one network (read-only, shareable)."""

    def __init__(self, network, params=None, projection=None):
        self.network = network
        self.params = params or MatchParams()
        self.index = GridIndex(network, self.params.radius, projection)
        self.router = Router(network, self.params.max_route, self.params.reverse_tolerance)

    def lattice(self, traj):
        p = self.params
        cands = []
        for i, (lon, lat, _) in enumerate(traj.points):
            c = candidate_segments(self.index, (lon, lat), p.radius, p.k)
            if not c:
                raise MatchError(f"point {i} has no candidate within {p.radius} m", point_index=i)
            cands.append(c)
        emis = [np.array([emission_log_prob(c, p.sigma) for c in cs]) for cs in cands]
        trans = []
        for i in range(1, len(cands)):
            (lo1, la1, _), (lo2, la2, _) = traj.points[i - 1], traj.points[i]
            gc = haversine(lo1, la1, lo2, la2)
            m = np.empty((len(cands[i - 1]), len(cands[i])))
            for a, ca in enumerate(cands[i - 1]):
                for b, cb in enumerate(cands[i]):
                    pr = transition_prob(ca, cb, gc, self.router)
                    m[a, b] = math.log(pr) if pr > 0 else -math.inf
            trans.append(m)
        return cands, emis, trans

    def match(self, traj):
        cands, emis, trans = self.lattice(traj)
        keys = [[c.segment_id for c in cs] for cs in cands]
        path, _ = viterbi_decode(emis, trans, keys)
        chosen = [cands[t][j] for t, j in enumerate(path)]
        return self._assemble(chosen, [p[2] for p in traj.points])

    def _assemble(self, chosen, times):
        net, router = self.network, self.router
        samples = [(chosen[0].segment_id, float(times[0]))]
        for (ca, ta), (cb, tb) in zip(zip(chosen, times), zip(chosen[1:], times[1:])):
            if router.same_traversal(ca, cb):
                continue
            total = router.route_distance(ca, cb)
            between = router.route_path(ca.segment_id, cb.segment_id)
            d = net.profile(ca.segment_id).road_length - ca.offset_along_segment
            for sid in between + [cb.segment_id]:
                frac = d / total if total > 0 else 1.0
                samples.append((sid, float(ta + (tb - ta) * min(max(frac, 0.0), 1.0))))
                d += net.profile(sid).road_length
        return SegmentTrajectory(tuple(samples))


def viterbi_match(traj, network, params=None, matcher=None):
    """Match one GPS trajectory to a connected, timestamped segment sequence."""
    matcher = matcher or MapMatcher(network, params)
    return matcher.match(traj)


_worker = None


def _init_worker(network, params):
    global _worker
    _worker = MapMatcher(network, params)


def _match_one(item):
    tid, traj = item
    try:
        return tid, _worker.match(traj), None
    except MatchError as exc:
        return tid, None, str(exc)


def match_trajectories(trajectories, network, params=None, threads=1):
    """Match many trajectories; returns ``(matched, failures)`` dicts keyed by id,
    in sorted id order regardless of worker count."""
    items = sorted(trajectories.items())
    if threads <= 1 or len(items) < 2:
        _init_worker(network, params)
        results = [_match_one(it) for it in items]
    else:
        with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(network, params)) as pool:
            results = list(pool.map(_match_one, items, chunksize=16))
    matched, failures = {}, {}
    for tid, res, err in sorted(results, key=lambda r: r[0]):
        if err is None:
            matched[tid] = res
        else:
            failures[tid] = err
    return matched, failures


@dataclass
class DynamicStatsTable:
    """(segment_id, window index) -> (trajectory_count, medium_speed km/h)."""

    window: float = DEFAULT_WINDOW
    cells: dict = field(default_factory=dict)
    fallback_speed: dict = field(default_factory=dict)

    def window_index(self, timestamp):
        return int(math.floor(timestamp / self.window))

    def lookup(self, segment_id, timestamp):
        return self.lookup_window(segment_id, self.window_index(timestamp))

    def lookup_window(self, segment_id, widx):
        hit = self.cells.get((segment_id, widx))
        if hit is not None:
            return hit
        return 0, float(self.fallback_speed.get(segment_id, 0.0))


def compute_dynamic_stats(matched, network, window=DEFAULT_WINDOW):
    """Trajectory counts and median traversal speeds per (segment, time window)."""
    if window <= 0:
        raise ValueError("window must be positive")
    trajs = matched.values() if isinstance(matched, dict) else matched
    touched = defaultdict(set)
    speeds = defaultdict(list)
    for n, traj in enumerate(trajs):
        samples = traj.samples
        for i, (sid, ts) in enumerate(samples):
            key = (sid, int(math.floor(ts / window)))
            touched[key].add(n)
            if i + 1 < len(samples):
                dwell = samples[i + 1][1] - ts
                if dwell > 0:
                    v = network.profile(sid).road_length / dwell * 3.6
                    speeds[key].append(min(v, SPEED_CAP_KMH))
    fallback = {p.segment_id: float(p.speed_class) for p in network.segments}
    cells = {}
    for key, ids in touched.items():
        vs = speeds.get(key)
        ms = float(statistics.median(vs)) if vs else fallback[key[0]]
        cells[key] = (len(ids), ms)
    return DynamicStatsTable(float(window), cells, fallback)


# CSV surfaces -----------------------------------------------------------------

def read_gps_csv(path):
    """``traj_id,lon,lat,timestamp`` rows -> {traj_id: GpsTrajectory}."""
    pts = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for col in ("traj_id", "lon", "lat", "timestamp"):
            if col not in (reader.fieldnames or []):
                raise SchemaError(f"gps csv: missing column {col!r}")
        for row_no, row in enumerate(reader, start=2):
            try:
                pts[row["traj_id"]].append((float(row["lon"]), float(row["lat"]), float(row["timestamp"])))
            except ValueError:
                raise ParseError(f"row {row_no}: non-numeric GPS field") from None
    return {tid: GpsTrajectory(tuple(sorted(p, key=lambda q: q[2]))) for tid, p in pts.items()}


def write_gps_csv(path, trajectories):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("traj_id", "lon", "lat", "timestamp"))
        for tid in sorted(trajectories):
            for lon, lat, ts in trajectories[tid].points:
                w.writerow((tid, repr(float(lon)), repr(float(lat)), f"{ts:.3f}"))


def write_matched_csv(path, matched):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("traj_id", "segment_id", "timestamp"))
        for tid in sorted(matched):
            for sid, ts in matched[tid].samples:
                w.writerow((tid, sid, f"{ts:.3f}"))


def read_matched_csv(path):
    out = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out[row["traj_id"]].append((int(row["segment_id"]), float(row["timestamp"])))
    return {tid: SegmentTrajectory(tuple(s)) for tid, s in out.items()}


def write_dynamic_stats_csv(path, table):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("segment_id", "window_start", "trajectory_count", "medium_speed"))
        for (sid, widx) in sorted(table.cells):
            count, ms = table.cells[(sid, widx)]
            w.writerow((sid, f"{widx * table.window:.0f}", count, format(ms, ".6g")))


def read_dynamic_stats_csv(path, network, window=DEFAULT_WINDOW):
    cells = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for col in ("segment_id", "window_start", "trajectory_count", "medium_speed"):
            if col not in (reader.fieldnames or []):
                raise SchemaError(f"dynamic stats csv: missing column {col!r}")
        for row_no, row in enumerate(reader, start=2):
            try:
                widx = int(math.floor(float(row["window_start"]) / window))
                cells[(int(row["segment_id"]), widx)] = (int(row["trajectory_count"]), float(row["medium_speed"]))
            except ValueError:
                raise ParseError(f"row {row_no}: non-numeric dynamic stats field") from None
    fallback = {p.segment_id: float(p.speed_class) for p in network.segments}
    return DynamicStatsTable(float(window), cells, fallback)
