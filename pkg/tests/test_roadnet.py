import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stclip.errors import IntegrityError, ParseError, SchemaError, UnknownSegmentError
from stclip.roadnet import (PROFILE_COLUMNS, SegmentProfile, build_road_network, load_road_network,
                            load_segment_profiles, shortest_path_length, write_road_network)

HEADER = ",".join(PROFILE_COLUMNS)


def write(tmp_path, text, name="segment_profile.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def chain(lengths, edges=None):
    profiles = [SegmentProfile(i, 1, 1, 30, float(l)) for i, l in enumerate(lengths)]
    edges = edges if edges is not None else [(i, i + 1) for i in range(len(lengths) - 1)]
    return build_road_network(profiles, edges)


def test_schema_example_row(tmp_path):
    # example column of the profile schema table
    (prof,) = load_segment_profiles(write(tmp_path, HEADER + "\n0,4,2,60,114.6,3,23,34.3,/\n"))
    assert prof.segment_id == 0 and prof.function_class == 4 and prof.lane_number == 2
    assert prof.speed_class == 60 and prof.road_length == 114.6 and prof.out_degree == 3
    assert prof.trajectory_count == 23 and prof.medium_speed == 34.3 and prof.extra_attrs == "/"


def test_empty_file_with_header(tmp_path):
    assert load_segment_profiles(write(tmp_path, HEADER + "\n")) == []


def test_negative_length_rejected(tmp_path):
    with pytest.raises(IntegrityError):
        load_segment_profiles(write(tmp_path, HEADER + "\n0,4,2,60,-5,3,23,34.3,/\n"))


def test_missing_column_named(tmp_path):
    with pytest.raises(SchemaError, match="medium_speed"):
        load_segment_profiles(write(tmp_path, HEADER.replace(",medium_speed", "") + "\n"))


def test_non_numeric_reports_row(tmp_path):
    with pytest.raises(ParseError, match="row 3"):
        load_segment_profiles(write(tmp_path, HEADER + "\n0,4,2,60,10,3,23,34.3,/\n1,4,x,60,10,3,23,34.3,/\n"))


def test_duplicate_id(tmp_path):
    with pytest.raises(IntegrityError, match="duplicate"):
        load_segment_profiles(write(tmp_path, HEADER + "\n0,4,2,60,10,,0,0,/\n0,4,2,60,10,,0,0,/\n"))


def test_minimal_graph():
    net = chain([10, 10])
    assert net.adjacency.toarray().astype(int).tolist() == [[0, 1], [0, 0]]
    assert net.out_degree(0) == 1


def test_no_edges():
    net = chain([10, 10, 10], edges=[])
    assert not net.adjacency.toarray().any()
    assert [p.out_degree for p in net.segments] == [0, 0, 0]


def test_out_degree_counts_edges():
    net = chain([10, 10, 10], edges=[(0, 1), (0, 2)])
    assert net.out_degree(0) == sum(1 for a, _ in [(0, 1), (0, 2)] if a == 0)


def test_out_degree_mismatch_warns_and_adjacency_wins():
    profiles = [SegmentProfile(0, 1, 1, 30, 5.0, out_degree=4), SegmentProfile(1, 1, 1, 30, 5.0)]
    net = build_road_network(profiles, [(0, 1)])
    assert net.profile(0).out_degree == 1
    assert net.warnings


def test_dangling_edge():
    with pytest.raises(IntegrityError):
        chain([10, 10], edges=[(0, 7)])


def test_short_geometry_rejected():
    with pytest.raises(IntegrityError):
        build_road_network([SegmentProfile(0, 1, 1, 30, 5.0)], [], {0: [(0.0, 0.0)]})


def brute_force_distance(lengths, edges, a, b):
    """Cheapest over every simple path a -> ... -> b of the summed lengths after a."""
    if a == b:
        return 0.0
    succ = {}
    for u, v in edges:
        succ.setdefault(u, set()).add(v)
    best = math.inf
    nodes = [n for n in range(len(lengths)) if n not in (a, b)]
    for r in range(len(nodes) + 1):
        for mid in itertools.permutations(nodes, r):
            path = (a,) + mid + (b,)
            if all(v in succ.get(u, ()) for u, v in zip(path, path[1:])):
                best = min(best, sum(lengths[n] for n in path[1:]))
    return best


def test_shortest_identity_and_chain():
    net = chain([100, 100, 100])
    assert shortest_path_length(net, 1, 1) == 0.0
    assert shortest_path_length(net, 0, 2) == brute_force_distance([100] * 3, [(0, 1), (1, 2)], 0, 2)


def test_shortest_unreachable():
    assert shortest_path_length(chain([5, 5]), 1, 0) == math.inf


def test_shortest_unknown_id():
    with pytest.raises(UnknownSegmentError):
        shortest_path_length(chain([5, 5]), 0, 9)


graphs = st.integers(2, 5).flatmap(lambda n: st.tuples(
    st.lists(st.integers(1, 50), min_size=n, max_size=n),
    st.sets(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=n * n)))


@settings(max_examples=60, deadline=None)
@given(graphs)
def test_shortest_matches_enumeration(g):
    lengths, edges = g
    edges = sorted(e for e in edges if e[0] != e[1])
    net = chain(lengths, edges)
    for a in range(len(lengths)):
        for b in range(len(lengths)):
            assert shortest_path_length(net, a, b) == brute_force_distance(lengths, edges, a, b)


def random_network(seed, n=20, p=0.15):
    rng = np.random.default_rng(seed)
    lengths = rng.uniform(10, 200, n)
    edges = [(a, b) for a in range(n) for b in range(n) if a != b and rng.random() < p]
    return chain(lengths, edges), edges


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_triangle_inequality(seed):
    net, _ = random_network(seed)
    rng = np.random.default_rng(seed + 1)
    for a, b, c in rng.integers(0, 20, (30, 3)):
        ab = shortest_path_length(net, int(a), int(b))
        bc = shortest_path_length(net, int(b), int(c))
        assert shortest_path_length(net, int(a), int(c)) <= ab + bc + 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_out_degree_brute_force(seed):
    net, edges = random_network(seed)
    for p in net.segments:
        assert p.out_degree == sum(1 for a, _ in edges if a == p.segment_id)


def test_round_trip(tmp_path):
    profiles = [SegmentProfile(i, i % 3 + 1, 2, 40, 10.5 + i, trajectory_count=i, medium_speed=12.25,
                               extra_attrs='{"k": 1}') for i in range(4)]
    geom = {i: np.array([[116.0 + i * 1e-3, 39.9], [116.0 + i * 1e-3, 39.901]]) for i in range(4)}
    net = build_road_network(profiles, [(0, 1), (1, 2), (2, 3), (3, 0)], geom)
    write_road_network(net, tmp_path)
    back = load_road_network(tmp_path)
    assert back.segments == net.segments
    assert (back.adjacency != net.adjacency).nnz == 0
    assert set(back.geometry) == set(net.geometry)
    for sid in geom:
        np.testing.assert_array_equal(back.geometry[sid], net.geometry[sid])
