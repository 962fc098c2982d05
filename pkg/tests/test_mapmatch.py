import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ORIGIN, lattice_brute_force, metric_network
from stclip.errors import MatchError
from stclip.mapmatch import (Candidate, GpsTrajectory, GridIndex, MapMatcher, MatchParams, Router, SegmentTrajectory,
                             candidate_segments, compute_dynamic_stats, emission_prob, haversine, match_trajectories,
                             project_onto_polyline, read_dynamic_stats_csv, read_gps_csv, read_matched_csv,
                             transition_prob, viterbi_decode, viterbi_match, write_dynamic_stats_csv, write_gps_csv,
                             write_matched_csv)
from stclip.synth import SynthConfig, generate_network, generate_trajectories


def line_network():
    # three collinear 100 m segments west to east plus a parallel twin line 30 m north
    polys = {0: [(0, 0), (100, 0)], 1: [(100, 0), (200, 0)], 2: [(200, 0), (300, 0)],
             3: [(0, 30), (100, 30)]}
    return metric_network(polys, [(0, 1), (1, 2)])


def gps(proj, xy, t0=0.0, dt=10.0):
    pts = []
    for i, (x, y) in enumerate(xy):
        lon, lat = proj.inverse(x, y)
        pts.append((float(lon), float(lat), t0 + i * dt))
    return GpsTrajectory(tuple(pts))


def test_candidate_on_polyline():
    net, proj = line_network()
    index = GridIndex(net, 100.0, proj)
    c = candidate_segments(index, proj.inverse(50.0, 0.0), radius=100, k=8)
    assert c[0].segment_id == 0 and c[0].perpendicular_distance == pytest.approx(0, abs=1e-6)
    assert c[0].offset_along_segment == pytest.approx(50, abs=1e-6)


def test_equidistant_tie_goes_to_smaller_id():
    net, proj = metric_network({5: [(0, 0), (100, 0)], 2: [(0, 20), (100, 20)]}, [])
    index = GridIndex(net, 100.0, proj)
    c = candidate_segments(index, proj.inverse(50.0, 10.0), radius=50, k=8)
    assert [x.segment_id for x in c] == [2, 5]
    assert c[0].perpendicular_distance == pytest.approx(c[1].perpendicular_distance, abs=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_candidates_equal_linear_scan(seed):
    world = generate_network(SynthConfig(seed=seed, grid=5))
    index = GridIndex(world.network, 100.0, world.projection)
    rng = np.random.default_rng(seed)
    for x, y in rng.uniform(-50, 650, (20, 2)):
        got = candidate_segments(index, world.projection.inverse(x, y), radius=100, k=100)
        # exhaustive scan over the metric polylines; equal distances tie on segment id
        scan = []
        for sid, poly in world.polylines.items():
            d = project_onto_polyline(x, y, poly)[0]
            if d <= 100:
                scan.append((round(d, 6), sid))
        scan.sort()
        assert [c.segment_id for c in got] == [s for _, s in scan]
        assert [c.perpendicular_distance for c in got] == pytest.approx([d for d, _ in scan], abs=1e-6)


def test_emission_values():
    c = lambda d: Candidate(0, (0, 0), d, 0)  # noqa: E731
    assert emission_prob(c(0.0)) == 1.0
    assert emission_prob(c(20.0), sigma=20.0) == pytest.approx(math.exp(-0.5))
    assert emission_prob(c(3.0)) > emission_prob(c(4.0))


@given(st.floats(0, 500), st.floats(0.5, 100), st.floats(0, 100))
def test_emission_monotone_in_sigma(d, sigma, extra):
    c = Candidate(0, (0, 0), d, 0)
    assert emission_prob(c, sigma + extra) >= emission_prob(c, sigma)


def test_transition_cases():
    net, proj = line_network()
    router = Router(net)
    a = Candidate(0, proj.inverse(50, 0), 0.0, 50.0)
    assert transition_prob(a, a, 0.0, router) == 1.0
    b = Candidate(3, proj.inverse(50, 30), 0.0, 50.0)
    assert transition_prob(a, b, 30.0, router) == 0.0
    c = Candidate(2, proj.inverse(250, 0), 0.0, 50.0)
    # route 50 + 100 + 50 = 200 m (0 -> 1 -> 2 is the only path); straight line is the same 200 m
    assert router.route_distance(a, c) == pytest.approx(200.0)
    gc = haversine(*a.projected_point, *c.projected_point)
    assert transition_prob(a, c, gc, router) == pytest.approx(1.0, abs=1e-6)


def test_single_point_single_candidate():
    net, proj = metric_network({0: [(0, 0), (100, 0)]}, [])
    out = viterbi_match(gps(proj, [(40, 3)]), net)
    assert out.samples == ((0, 0.0),)


def test_points_on_chain_match_chain():
    net, proj = line_network()
    out = viterbi_match(gps(proj, [(10, 0), (90, 0), (150, 0), (290, 0)]), net)
    assert [s for i, s in enumerate(out.segments) if i == 0 or s != out.segments[i - 1]] == [0, 1, 2]


def test_gap_filled_with_interpolated_times():
    net, proj = line_network()
    out = viterbi_match(gps(proj, [(50, 0), (250, 0)], dt=20.0), net)
    assert out.segments == [0, 1, 2]
    # entry into 1 after 50 of 200 m, into 2 after 150 of 200 m
    assert out.timestamps == pytest.approx([0.0, 5.0, 15.0])


def test_no_candidate_carries_index():
    net, proj = line_network()
    with pytest.raises(MatchError) as err:
        viterbi_match(gps(proj, [(50, 0), (50, 900)]), net)
    assert err.value.point_index == 1


def test_broken_trajectory():
    net, proj = line_network()
    with pytest.raises(MatchError):
        # from the far end of the chain back to segment 0: unreachable
        viterbi_match(gps(proj, [(290, 0), (10, 0)]), net, MatchParams(radius=10))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5).flatmap(lambda n: st.lists(st.integers(1, 4), min_size=n, max_size=n)),
       st.integers(0, 2 ** 31))
def test_decode_matches_enumeration(sizes, seed):
    rng = np.random.default_rng(seed)
    emis = [rng.normal(-3, 2, k) for k in sizes]
    trans = []
    for a, b in zip(sizes, sizes[1:]):
        m = np.log(rng.uniform(0, 1, (a, b)))
        m[rng.random((a, b)) < 0.2] = -math.inf
        m[:, rng.integers(b)] = np.log(rng.uniform(0.1, 1, a))  # keep every step feasible
        trans.append(m)
    path, score = viterbi_decode(emis, trans)
    best = lattice_brute_force(emis, trans)
    assert abs(score - best) <= 1e-9
    replay = sum(emis[t][j] for t, j in enumerate(path)) + sum(trans[t][path[t], path[t + 1]]
                                                                for t in range(len(path) - 1))
    assert abs(replay - best) <= 1e-9


def test_decode_ties_pick_smallest_key():
    path, _ = viterbi_decode([np.zeros(2), np.zeros(2)], [np.zeros((2, 2))], tie_keys=[[7, 3], [9, 4]])
    assert path == [1, 1]


@pytest.fixture(scope="module")
def world():
    return generate_network(SynthConfig(seed=3, grid=5))


def test_matched_routes_are_connected(world):
    trips = generate_trajectories(world, SynthConfig(seed=3, grid=5, gps_sigma=5.0), count=15)
    matched, failures = match_trajectories({k: t.gps for k, t in trips.items()}, world.network)
    assert not failures
    for traj in matched.values():
        segs = traj.segments
        for a, b in zip(segs, segs[1:]):
            assert a == b or world.network.is_adjacent(a, b)
        assert all(t1 >= t0 for t0, t1 in zip(traj.timestamps, traj.timestamps[1:]))


def test_thread_count_does_not_change_output(world, tmp_path):
    trips = generate_trajectories(world, SynthConfig(seed=4, grid=5, gps_sigma=5.0), count=6)
    g = {k: t.gps for k, t in trips.items()}
    one, _ = match_trajectories(g, world.network, threads=1)
    two, _ = match_trajectories(g, world.network, threads=2)
    write_matched_csv(tmp_path / "a.csv", one)
    write_matched_csv(tmp_path / "b.csv", two)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_noiseless_round_trip(world):
    cfg = SynthConfig(seed=5, grid=5)
    trips = generate_trajectories(world, cfg, count=20)
    matcher = MapMatcher(world.network)
    for t in trips.values():
        assert matcher.match(t.gps).segments == t.route


def stats_network():
    return metric_network({0: [(0, 0), (100, 0)], 1: [(100, 0), (200, 0)]}, [(0, 1)])[0]


def test_stats_empty_falls_back_to_speed_class():
    table = compute_dynamic_stats([], stats_network())
    assert table.lookup(0, 10.0) == (0, 30.0)


def test_stats_unit_conversion():
    table = compute_dynamic_stats([SegmentTrajectory(((0, 0.0), (1, 10.0)))], stats_network())
    assert table.lookup(0, 5.0) == (1, pytest.approx(36.0))


def test_stats_median():
    trajs = [SegmentTrajectory(((0, 0.0), (1, 100.0 / (v / 3.6)))) for v in (10, 50, 30, 20, 40)]
    count, ms = compute_dynamic_stats(trajs, stats_network()).lookup(0, 0.0)
    assert count == 5 and ms == pytest.approx(sorted([10, 20, 30, 40, 50])[2])


def test_stats_speed_cap_and_windows():
    table = compute_dynamic_stats([SegmentTrajectory(((0, 0.0), (1, 0.5))),
                                   SegmentTrajectory(((0, 1900.0), (1, 1910.0)))], stats_network())
    assert table.lookup(0, 0.0)[1] == 200.0
    assert table.lookup(0, 1800.0) == (1, pytest.approx(36.0))


def test_csv_round_trips(tmp_path):
    net = stats_network()
    _, proj = line_network()
    g = {"b": gps(proj, [(1, 2), (3, 4)]), "a": gps(proj, [(5, 0)], t0=7.0)}
    write_gps_csv(tmp_path / "g.csv", g)
    back = read_gps_csv(tmp_path / "g.csv")
    assert set(back) == {"a", "b"} and back["b"].points[1][2] == 10.0
    m = {"x": SegmentTrajectory(((0, 0.0), (1, 10.0)))}
    write_matched_csv(tmp_path / "m.csv", m)
    assert read_matched_csv(tmp_path / "m.csv") == m
    table = compute_dynamic_stats(m.values(), net)
    write_dynamic_stats_csv(tmp_path / "s.csv", table)
    assert read_dynamic_stats_csv(tmp_path / "s.csv", net).cells == table.cells


def test_gps_timestamps_strict():
    with pytest.raises(Exception):
        GpsTrajectory(((ORIGIN[0], ORIGIN[1], 1.0), (ORIGIN[0], ORIGIN[1], 1.0)))
