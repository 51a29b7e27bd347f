import json

import numpy as np
import pytest

from grapetrack.association import (FrameDetections, TrackGraph, build_graph,
                                    count_and_annotate, extract_tracks, filter_edges,
                                    labels_csv, parse_manifest, track_clusters, tracks_json,
                                    write_manifest)
from grapetrack.errors import ContractError, FormatError, ValidationError
from grapetrack.masks import InstanceMask
from grapetrack.synth import SceneConfig, generate_scene

from helpers import random_mask

W = H = 10


def square(x0, y0, size=3, confidence=1.0):
    bits = np.zeros((H, W), bool)
    bits[y0:y0 + size, x0:x0 + size] = True
    return InstanceMask.from_array(bits, confidence=confidence)


def frames_of(*per_frame):
    return [FrameDetections(i, f"f{i}", masks) for i, masks in enumerate(per_frame)]


def identity_map(frames):
    return {f.frame_name: f.frame_index for f in frames}


def test_single_shared_point():
    frames = frames_of([square(0, 0)], [square(0, 0)])
    obs = {0: [(1, 1.5, 1.5)], 1: [(1, 1.2, 1.7)]}
    g = build_graph(frames, obs, identity_map(frames))
    assert g.edges == {((0, 0), (1, 0)): 1}


def test_weight_counts_points():
    frames = frames_of([square(0, 0)], [square(5, 5)])
    obs = {0: [(p, 1.5, 1.5) for p in range(4)], 1: [(p, 6.5, 6.5) for p in range(3)]}
    assert build_graph(frames, obs, identity_map(frames)).edges == {((0, 0), (1, 0)): 3}


def test_point_on_boundary_pixel_and_outside():
    frames = frames_of([square(0, 0)], [square(0, 0)])
    # (3.0, 0.5) is pixel column 3, outside the 3x3 square
    obs = {0: [(1, 2.999, 0.5), (2, 3.0, 0.5)], 1: [(1, 0.5, 0.5), (2, 0.5, 0.5)]}
    assert build_graph(frames, obs, identity_map(frames)).edges == {((0, 0), (1, 0)): 1}


def test_near_edge_clamped_far_ignored():
    frames = frames_of([square(7, 7)], [square(7, 7)])
    obs = {0: [(1, 10.5, 9.5)] + [(100 + k, 5, 5) for k in range(40)],
           1: [(1, 9.5, 9.5)] + [(100 + k, 5, 5) for k in range(40)]}
    assert build_graph(frames, obs, identity_map(frames)).edges == {((0, 0), (1, 0)): 1}
    obs[0].append((2, 12.0, 5.0))
    obs[1].append((2, 8.5, 8.5))
    assert build_graph(frames, obs, identity_map(frames)).edges == {((0, 0), (1, 0)): 1}


def test_resolution_mismatch_detected():
    frames = frames_of([square(0, 0)], [square(0, 0)])
    obs = {0: [(p, 20.0 * p, 20.0) for p in range(10)], 1: [(p, 1.0, 1.0) for p in range(10)]}
    with pytest.raises(ValidationError, match="resolution"):
        build_graph(frames, obs, identity_map(frames))


def test_missing_frame_in_model():
    frames = frames_of([square(0, 0)])
    with pytest.raises(ValidationError):
        build_graph(frames, {}, {})


def test_window_limits_gap():
    frames = frames_of([square(0, 0)], [], [square(0, 0)])
    obs = {0: [(1, 1, 1)], 2: [(1, 1, 1)]}
    assert build_graph(frames, obs, identity_map(frames)).edges == {((0, 0), (2, 0)): 1}
    assert build_graph(frames, obs, identity_map(frames), window=1).edges == {}


def test_low_confidence_instances_excluded_but_indexed():
    frames = frames_of([square(0, 0, confidence=0.5), square(5, 5)], [square(5, 5)])
    obs = {0: [(1, 1, 1), (2, 6, 6)], 1: [(2, 6, 6), (1, 6, 6)]}
    g = build_graph(frames, obs, identity_map(frames), min_confidence=0.9)
    assert g.edges == {((0, 1), (1, 0)): 1}


def brute_force_edges(frames, obs):
    inside = {}
    for f in frames:
        for j, m in enumerate(f.instances):
            inside[(f.frame_index, j)] = {
                pid for pid, x, y in obs.get(f.frame_index, [])
                if 0 <= x < W and 0 <= y < H and m.bits[int(np.floor(y)), int(np.floor(x))]}
    edges = {}
    for u, pu in inside.items():
        for v, pv in inside.items():
            if u[0] < v[0] and pu & pv:
                edges[(u, v)] = len(pu & pv)
    return edges


def random_frames(rng):
    n_frames = int(rng.integers(2, 6))
    frames = frames_of(*[[InstanceMask.from_array(random_mask(rng, H, W, 0.2))
                          for _ in range(rng.integers(0, 4))] for _ in range(n_frames)])
    obs = {i: [(int(p), float(x), float(y)) for p, x, y in
               zip(rng.choice(30, size=12, replace=False), rng.uniform(0, W, 12),
                   rng.uniform(0, H, 12))]
           for i in range(n_frames)}
    return frames, obs


def test_weights_match_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(100):
        frames, obs = random_frames(rng)
        assert build_graph(frames, obs, identity_map(frames)).edges == brute_force_edges(frames, obs)


def test_filter_prefers_weight_then_short_gap():
    a, b, c = (0, 0), (1, 0), (2, 0)
    g = TrackGraph((1, 1, 1), {(a, b): 2, (a, c): 5, (b, c): 2})
    assert filter_edges(g).edges == {(a, c): 5}
    g = TrackGraph((1, 1, 1), {(a, b): 2, (a, c): 2, (b, c): 2})
    assert filter_edges(g).edges == {(a, b): 2, (b, c): 2}


def test_filter_idempotent_and_degree_bounded():
    rng = np.random.default_rng(9)
    for _ in range(50):
        frames, obs = random_frames(rng)
        f = filter_edges(build_graph(frames, obs, identity_map(frames)))
        assert filter_edges(f) == f
        assert max(f.in_degree().values(), default=0) <= 1
        assert max(f.out_degree().values(), default=0) <= 1


def test_extract_requires_filtered_graph():
    g = TrackGraph((1, 2), {((0, 0), (1, 0)): 1, ((0, 0), (1, 1)): 1})
    with pytest.raises(ContractError):
        extract_tracks(g, 1)


def chain_graph(n, skip_at=None):
    nodes = [(i, 0) for i in range(n) if i != skip_at]
    return TrackGraph(tuple(0 if i == skip_at else 1 for i in range(n)),
                      {(u, v): 3 for u, v in zip(nodes, nodes[1:])})


def test_min_edges_counts_edges():
    assert len(extract_tracks(chain_graph(6), 5)) == 1
    assert len(extract_tracks(chain_graph(5), 5)) == 0


def test_skip_edge_keeps_one_track():
    # detection missing in frame 3; a point seen in frames 2 and 4 bridges the gap
    masks = [[square(2, 2)] if i != 3 else [] for i in range(8)]
    frames = frames_of(*masks)
    obs = {i: [(i, 3.5, 3.5), (i + 1, 3.5, 3.5)] for i in range(8)}
    obs[2].append((99, 3.0, 3.0))
    obs[4].append((99, 3.0, 3.0))
    g = filter_edges(build_graph(frames, obs, identity_map(frames)))
    tracks = extract_tracks(g, 5)
    assert len(tracks) == 1
    assert tracks.tracks[0] == tuple((i, 0) for i in range(8) if i != 3)
    broken = {k: [o for o in v if o[0] != 99] for k, v in obs.items()}
    g = filter_edges(build_graph(frames, broken, identity_map(frames)))
    assert len(extract_tracks(g, 2)) == 2


def test_annotation_ids():
    frames = frames_of([square(0, 0), square(5, 5)], [square(0, 0)])
    g = TrackGraph((2, 1), {((0, 1), (1, 0)): 1})
    count, labels = count_and_annotate(extract_tracks(g, 1), frames)
    assert count == 1
    assert labels == {"f0": [None, 0], "f1": [0]}
    assert labels_csv(labels).splitlines() == [
        "frame_name,instance_index,track_id", "f0,0,", "f0,1,0", "f1,0,0"]


def test_manifest_round_trip():
    frames = frames_of([square(0, 0, confidence=0.95), square(5, 5)], [])
    again = parse_manifest(write_manifest(frames))
    assert [f.frame_name for f in again] == ["f0", "f1"]
    assert again[0].instances == frames[0].instances
    assert again[0].instances[0].confidence == 0.95
    with pytest.raises(FormatError):
        parse_manifest('{"frame_name": "a", "masks": ["RLE v1 1 1\\n0,1"], "confidences": []}')
    with pytest.raises(FormatError):
        parse_manifest("not json")


def test_tracking_on_synthetic_scene_is_thread_independent():
    scene = generate_scene(SceneConfig(n_clusters=6, n_frames=25, seed=3, dropout_p=0.2))
    one = track_clusters(scene.model, scene.frames, workers=1)
    many = track_clusters(scene.model, scene.frames, workers=4)
    assert tracks_json(one, scene.frames) == tracks_json(many, scene.frames)
    assert json.loads(tracks_json(one, scene.frames))["count"] == one.count


def test_reprojected_mode_agrees_on_exact_scene():
    scene = generate_scene(SceneConfig(n_clusters=5, n_frames=20, seed=1))
    a = track_clusters(scene.model, scene.frames)
    b = track_clusters(scene.model, scene.frames, projection="reprojected")
    assert a.graph == b.graph
