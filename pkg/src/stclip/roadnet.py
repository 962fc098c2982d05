"""Road network model: segment profiles, adjacency, geometry and CSV ingestion.

Files (comma-delimited, UTF-8, header row):

* ``segment_profile.csv``  - one row per segment
* ``edges.csv``            - ``from_id,to_id`` directed connections
* ``segment_geometry.csv`` - ``segment_id,geometry`` with a WKT LINESTRING of lon/lat

Profile floats are written with 6 significant digits; geometry coordinates are
written at full precision because 6 digits of a longitude is ~100 m.
"""

import csv
import heapq
import logging
import math
import os
import re
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from .errors import IntegrityError, ParseError, SchemaError, UnknownSegmentError

log = logging.getLogger(__name__)

UNREACHABLE = math.inf

PROFILE_FILE = "segment_profile.csv"
EDGES_FILE = "edges.csv"
GEOMETRY_FILE = "segment_geometry.csv"

PROFILE_COLUMNS = (
    "segment_id", "function_class", "lane_number", "speed_class", "road_length",
    "out_degree", "trajectory_count", "medium_speed", "other_attrs_json",
)


@dataclass(frozen=True)
class SegmentProfile:
    segment_id: int
    function_class: int
    lane_number: int
    speed_class: int
    road_length: float
    out_degree: int = None
    trajectory_count: int = 0
    medium_speed: float = 0.0
    extra_attrs: str = "/"

    def validate(self):
        if not self.road_length > 0:
            raise IntegrityError(f"segment {self.segment_id}: road_length must be positive, got {self.road_length}")
        if self.lane_number < 1:
            raise IntegrityError(f"segment {self.segment_id}: lane_number must be >= 1")
        if self.trajectory_count < 0 or (self.out_degree is not None and self.out_degree < 0):
            raise IntegrityError(f"segment {self.segment_id}: counts must be non-negative")
        if not self.medium_speed >= 0:
            raise IntegrityError(f"segment {self.segment_id}: medium_speed must be non-negative")


def fmt_float(x):
    return format(float(x), ".6g")


def _parse(value, kind, column, row):
    try:
        if kind is int:
            f = float(value)
            if not f.is_integer():
                raise ValueError
            return int(f)
        return float(value)
    except (TypeError, ValueError):
        raise ParseError(f"row {row}: column {column!r} is not numeric: {value!r}") from None


def _reader(path, required):
    f = open(path, newline="", encoding="utf-8")
    reader = csv.DictReader(f)
    header = reader.fieldnames or []
    for col in required:
        if col not in header:
            f.close()
            raise SchemaError(f"{os.path.basename(path)}: missing column {col!r}")
    return f, reader


def load_segment_profiles(path):
    """Parse ``segment_profile.csv`` into a list of validated profiles."""
    f, reader = _reader(path, PROFILE_COLUMNS)
    profiles, seen = [], set()
    with f:
        # row numbers count the header as row 1
        for row_no, row in enumerate(reader, start=2):
            od = row["out_degree"].strip()
            p = SegmentProfile(
                segment_id=_parse(row["segment_id"], int, "segment_id", row_no),
                function_class=_parse(row["function_class"], int, "function_class", row_no),
                lane_number=_parse(row["lane_number"], int, "lane_number", row_no),
                speed_class=_parse(row["speed_class"], int, "speed_class", row_no),
                road_length=_parse(row["road_length"], float, "road_length", row_no),
                out_degree=None if od == "" else _parse(od, int, "out_degree", row_no),
                trajectory_count=_parse(row["trajectory_count"], int, "trajectory_count", row_no),
                medium_speed=_parse(row["medium_speed"], float, "medium_speed", row_no),
                extra_attrs=row["other_attrs_json"] or "",
            )
            p.validate()
            if p.segment_id in seen:
                raise IntegrityError(f"row {row_no}: duplicate segment_id {p.segment_id}")
            seen.add(p.segment_id)
            profiles.append(p)
    return profiles


def write_segment_profiles(path, profiles):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PROFILE_COLUMNS)
        for p in profiles:
            w.writerow([
                p.segment_id, p.function_class, p.lane_number, p.speed_class,
                fmt_float(p.road_length), "" if p.out_degree is None else p.out_degree,
                p.trajectory_count, fmt_float(p.medium_speed), p.extra_attrs,
            ])


def load_edges(path):
    f, reader = _reader(path, ("from_id", "to_id"))
    with f:
        return [(_parse(r["from_id"], int, "from_id", i), _parse(r["to_id"], int, "to_id", i))
                for i, r in enumerate(reader, start=2)]


def write_edges(path, edges):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("from_id", "to_id"))
        w.writerows(edges)


_WKT = re.compile(r"^\s*LINESTRING\s*\((.*)\)\s*$", re.IGNORECASE)


def parse_linestring(text):
    m = _WKT.match(text)
    if not m:
        raise ValueError(f"not a WKT LINESTRING: {text[:40]!r}")
    pts = [tuple(float(v) for v in pair.split()) for pair in m.group(1).split(",")]
    if any(len(p) != 2 for p in pts):
        raise ValueError("LINESTRING points must have two coordinates")
    return np.array(pts, dtype=np.float64)


def format_linestring(points):
    return "LINESTRING (" + ", ".join(f"{lon!r} {lat!r}" for lon, lat in np.asarray(points).tolist()) + ")"


def load_geometry(path):
    f, reader = _reader(path, ("segment_id", "geometry"))
    out = {}
    with f:
        for row_no, row in enumerate(reader, start=2):
            sid = _parse(row["segment_id"], int, "segment_id", row_no)
            try:
                out[sid] = parse_linestring(row["geometry"])
            except ValueError as exc:
                raise ParseError(f"row {row_no}: {exc}") from None
    return out


def write_geometry(path, geometry):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("segment_id", "geometry"))
        for sid in sorted(geometry):
            w.writerow((sid, format_linestring(geometry[sid])))


class RoadNetwork:
    """Directed graph of road segments. Immutable after construction.

    Segments are addressed by ``segment_id``; ``index_of`` gives the row/column
    of a segment in ``adjacency``.
    """

    def __init__(self, profiles, adjacency, geometry, warnings=()):
        self._profiles = tuple(profiles)
        self._index = {p.segment_id: i for i, p in enumerate(self._profiles)}
        self._adjacency = adjacency
        self._geometry = dict(geometry)
        for g in self._geometry.values():
            g.setflags(write=False)
        self._succ = tuple(tuple(int(j) for j in adjacency.indices[adjacency.indptr[i]:adjacency.indptr[i + 1]])
                           for i in range(len(self._profiles)))
        self._lengths = np.array([p.road_length for p in self._profiles])
        self._lengths.setflags(write=False)
        self.warnings = tuple(warnings)

    def __len__(self):
        return len(self._profiles)

    @property
    def segments(self):
        return self._profiles

    @property
    def segment_ids(self):
        return [p.segment_id for p in self._profiles]

    @property
    def adjacency(self):
        return self._adjacency

    @property
    def geometry(self):
        return self._geometry

    @property
    def lengths(self):
        return self._lengths

    def index_of(self, segment_id):
        try:
            return self._index[segment_id]
        except KeyError:
            raise UnknownSegmentError(f"unknown segment id {segment_id}") from None

    def __contains__(self, segment_id):
        return segment_id in self._index

    def profile(self, segment_id):
        return self._profiles[self.index_of(segment_id)]

    def successors(self, segment_id):
        return [self._profiles[j].segment_id for j in self._succ[self.index_of(segment_id)]]

    def successor_positions(self, pos):
        return self._succ[pos]

    def is_adjacent(self, a, b):
        return self.index_of(b) in self._succ[self.index_of(a)]

    def out_degree(self, segment_id):
        return len(self._succ[self.index_of(segment_id)])

    def edges(self):
        return [(p.segment_id, self._profiles[j].segment_id)
                for p, succ in zip(self._profiles, self._succ) for j in succ]

    def search(self, segment_id, bound=math.inf):
        """Dijkstra from the end of ``segment_id``.

        Returns ``(dist, pred)`` keyed by position: ``dist[j]`` is the cheapest
        total road_length of a path source -> ... -> j counting every segment
        after the source, including j.  The source itself can reappear via a
        loop.  Ties resolve toward smaller segment ids.
        """
        src = self.index_of(segment_id)
        ids = [p.segment_id for p in self._profiles]
        dist, pred, done = {}, {}, set()
        heap = []
        for j in self._succ[src]:
            d = self._lengths[j]
            if d <= bound and d < dist.get(j, math.inf):
                dist[j] = d
                pred[j] = src
                heapq.heappush(heap, (d, ids[j], j))
        while heap:
            d, _, u = heapq.heappop(heap)
            if u in done:
                continue
            done.add(u)
            for v in self._succ[u]:
                nd = d + self._lengths[v]
                if nd > bound or v in done:
                    continue
                old = dist.get(v, math.inf)
                if nd < old or (nd == old and ids[u] < ids[pred[v]]):
                    dist[v] = nd
                    pred[v] = u
                    heapq.heappush(heap, (nd, ids[v], v))
        return dist, pred


def build_road_network(profiles, edges, geometries=None):
    """Assemble a RoadNetwork; out_degree is recomputed from the edge list."""
    profiles = list(profiles)
    index = {}
    for p in profiles:
        if p.segment_id in index:
            raise IntegrityError(f"duplicate segment_id {p.segment_id}")
        index[p.segment_id] = len(index)
    n = len(profiles)
    rows, cols = [], []
    for a, b in edges:
        if a not in index or b not in index:
            raise IntegrityError(f"edge ({a}, {b}) references an unknown segment")
        rows.append(index[a])
        cols.append(index[b])
    adj = sparse.csr_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(n, n), dtype=bool)
    adj.sum_duplicates()
    adj.sort_indices()
    degrees = np.diff(adj.indptr)
    warnings, fixed = [], []
    for p, deg in zip(profiles, degrees):
        deg = int(deg)
        if p.out_degree is not None and p.out_degree != deg:
            msg = f"segment {p.segment_id}: out_degree {p.out_degree} disagrees with adjacency ({deg})"
            log.warning(msg)
            warnings.append(msg)
        fixed.append(replace(p, out_degree=deg))
    geometry = {}
    for sid, pts in (geometries or {}).items():
        if sid not in index:
            raise IntegrityError(f"geometry for unknown segment {sid}")
        pts = np.array(pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise IntegrityError(f"segment {sid}: geometry needs at least 2 (lon, lat) points")
        geometry[sid] = pts
    return RoadNetwork(fixed, adj, geometry, warnings)


def shortest_path_length(network, from_id, to_id):
    """Route cost from ``from_id`` to ``to_id``: sum of road_length of every
    segment entered after the origin (0 when from == to)."""
    network.index_of(from_id)
    target = network.index_of(to_id)
    if from_id == to_id:
        return 0.0
    dist, _ = network.search(from_id)
    return float(dist.get(target, UNREACHABLE))


def load_road_network(directory):
    profiles = load_segment_profiles(os.path.join(directory, PROFILE_FILE))
    edges = load_edges(os.path.join(directory, EDGES_FILE))
    gpath = os.path.join(directory, GEOMETRY_FILE)
    geometry = load_geometry(gpath) if os.path.exists(gpath) else {}
    return build_road_network(profiles, edges, geometry)


def write_road_network(network, directory):
    os.makedirs(directory, exist_ok=True)
    write_segment_profiles(os.path.join(directory, PROFILE_FILE), network.segments)
    write_edges(os.path.join(directory, EDGES_FILE), network.edges())
    write_geometry(os.path.join(directory, GEOMETRY_FILE), network.geometry)
