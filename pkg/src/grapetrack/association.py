"""Multi-frame instance association through shared sparse 3-D points.

Nodes are ``(frame_index, instance_index)`` pairs.  A directed edge joins
two detections in different frames when some 3-D point is observed inside
both masks; its weight is the number of such points.  After keeping at
most one incoming and one outgoing edge per node (heaviest first), the
graph is a union of simple chains, and each chain of at least
``min_edges`` edges is counted as one cluster.
"""
import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ContractError, FormatError, ValidationError
from .masks import decode_rle, encode_rle, read_mask_file
from .sfm import observations_by_image, reprojected_observations

DEFAULT_MIN_EDGES = 5
DEFAULT_MIN_CONFIDENCE = 0.9
# share of observations allowed to fall more than 1 px outside the raster
MAX_OUTSIDE_FRACTION = 0.05


@dataclass(frozen=True)
class FrameDetections:
    frame_index: int
    frame_name: str
    instances: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        dims = {(m.width, m.height) for m in self.instances}
        if len(dims) > 1:
            raise ValidationError(f"frame {self.frame_name!r}: masks disagree on raster size")

    @property
    def dims(self):
        if not self.instances:
            return None
        return self.instances[0].width, self.instances[0].height


@dataclass(frozen=True)
class TrackGraph:
    """Edges map ``((i, j), (i2, j2))`` to an integer weight, always with ``i < i2``."""

    instance_counts: tuple
    edges: dict = field(default_factory=dict)

    def nodes(self):
        return [(i, j) for i, n in enumerate(self.instance_counts) for j in range(n)]

    def in_degree(self):
        deg = {}
        for _, v in self.edges:
            deg[v] = deg.get(v, 0) + 1
        return deg

    def out_degree(self):
        deg = {}
        for u, _ in self.edges:
            deg[u] = deg.get(u, 0) + 1
        return deg

    def total_weight(self):
        return sum(self.edges.values())


@dataclass(frozen=True)
class TrackSet:
    tracks: tuple
    min_edges: int

    def __len__(self):
        return len(self.tracks)


def _check_frames(frames):
    for pos, fr in enumerate(frames):
        if fr.frame_index != pos:
            raise ValidationError(
                f"frame indices must run 0..n-1 in order; got {fr.frame_index} at {pos}")


def _frame_hits(frame, obs, min_confidence, node_offset):
    """Hits of one frame as arrays (point_id, node), plus (n_obs, n_far_outside)."""
    if not obs:
        return None, 0, 0
    keep = [j for j, m in enumerate(frame.instances) if m.confidence >= min_confidence]
    if not frame.instances:
        return None, len(obs), 0
    w, h = frame.dims
    arr = np.asarray(obs, dtype=np.float64)
    pid = arr[:, 0].astype(np.int64)
    x, y = arr[:, 1], arr[:, 2]
    far = (x < -1) | (y < -1) | (x > w + 1) | (y > h + 1)
    near = ~far
    px = np.clip(np.floor(x[near]), 0, w - 1).astype(np.int64)
    py = np.clip(np.floor(y[near]), 0, h - 1).astype(np.int64)
    if not keep:
        return None, len(obs), int(far.sum())
    bits = np.stack([frame.instances[j].bits for j in keep])
    inside = bits[:, py, px]  # (n_kept, n_near)
    inst_k, obs_k = np.nonzero(inside)
    nodes = node_offset + np.asarray(keep, dtype=np.int64)[inst_k]
    return (pid[near][obs_k], nodes), len(obs), int(far.sum())


def build_graph(frames, observations, frame_map, window=None, min_confidence=0.0,
                workers=1):
    """Weighted co-observation graph over all detections.

    ``observations`` maps SfM image ids to ``[(point_id, x, y), ...]`` and
    ``frame_map`` maps frame names to image ids.  A point counts as inside
    a mask at pixel ``(floor(x), floor(y))``; observations up to one pixel
    outside the raster are clamped onto it, farther ones are ignored.
    ``window`` caps the frame gap of an edge (None = unbounded).
    """
    frames = list(frames)
    _check_frames(frames)
    unmatched = [f.frame_name for f in frames if f.frame_name not in frame_map]
    if unmatched:
        raise ValidationError(f"frames missing from the sparse model: {unmatched}")
    counts = tuple(len(f.instances) for f in frames)
    offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    n_nodes = int(offsets[-1])

    point_parts, frame_parts, node_parts = [], [], []
    n_obs = n_far = 0
    for fr in frames:
        hits, total, far = _frame_hits(fr, observations.get(frame_map[fr.frame_name], []),
                                       min_confidence, offsets[fr.frame_index])
        n_obs += total
        n_far += far
        if hits is not None:
            point_parts.append(hits[0])
            node_parts.append(hits[1])
            frame_parts.append(np.full(hits[0].size, fr.frame_index, dtype=np.int64))
    if n_obs and n_far > MAX_OUTSIDE_FRACTION * n_obs:
        raise ValidationError(
            f"{n_far} of {n_obs} observations fall outside the detection raster; "
            "the masks and the sparse model probably use different resolutions")

    edges = {}
    if point_parts and n_nodes:
        point = np.concatenate(point_parts)
        frame = np.concatenate(frame_parts)
        node = np.concatenate(node_parts)
        order = np.lexsort((node, frame, point))
        point, frame, node = point[order], frame[order], node[order]
        starts = np.flatnonzero(np.r_[True, point[1:] != point[:-1]])
        ptr = np.r_[starts, point.size].astype(np.int64)
        win = -1 if window is None else int(window)
        keys = _pair_keys_parallel(ptr, frame, node, win, n_nodes, workers)
        uniq, weight = np.unique(keys, return_counts=True)
        frame_of = np.repeat(np.arange(len(counts)), counts)
        for key, w in zip(uniq.tolist(), weight.tolist()):
            u, v = divmod(key, n_nodes)
            edges[((int(frame_of[u]), u - int(offsets[frame_of[u]])),
                   (int(frame_of[v]), v - int(offsets[frame_of[v]])))] = w
    return TrackGraph(counts, dict(sorted(edges.items())))


def _pair_keys_parallel(ptr, frame, node, window, n_nodes, workers):
    n_points = ptr.size - 1
    if workers <= 1 or n_points < 2 * workers:
        return _kernels.pair_keys(ptr, frame, node, window, n_nodes)
    bounds = np.linspace(0, n_points, workers + 1).astype(np.int64)

    def chunk(k):
        lo, hi = bounds[k], bounds[k + 1]
        sub = ptr[lo:hi + 1]
        a, b = sub[0], sub[-1]
        return _kernels.pair_keys(sub - a, frame[a:b], node[a:b], window, n_nodes)

    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(chunk, range(workers)))
    # integer counts merge by addition, so chunk order cannot matter
    return np.concatenate(parts)


def _filter_order(item):
    (u, v), w = item
    return (-w, v[0] - u[0], u[0], u[1], v[0], v[1])


def filter_edges(graph):
    """Keep at most one incoming and one outgoing edge per node.

    Edges are admitted greedily by descending weight, then by smaller
    frame gap, then by node order.
    """
    has_out, has_in = set(), set()
    kept = {}
    for (u, v), w in sorted(graph.edges.items(), key=_filter_order):
        if u in has_out or v in has_in:
            continue
        has_out.add(u)
        has_in.add(v)
        kept[(u, v)] = w
    return TrackGraph(graph.instance_counts, dict(sorted(kept.items())))


def extract_tracks(graph, min_edges=DEFAULT_MIN_EDGES):
    """Maximal chains of the filtered graph with at least ``min_edges`` edges.

    Chains are walked from their heads in ascending node order.
    """
    if any(d > 1 for d in graph.in_degree().values()) or \
            any(d > 1 for d in graph.out_degree().values()):
        raise ContractError("extract_tracks needs in/out degree <= 1; run filter_edges first")
    succ = {u: v for u, v in graph.edges}
    has_pred = {v for _, v in graph.edges}
    visited = set()
    tracks = []
    for start in graph.nodes():
        if start in visited or start in has_pred:
            continue
        path = [start]
        visited.add(start)
        while path[-1] in succ:
            nxt = succ[path[-1]]
            path.append(nxt)
            visited.add(nxt)
        if len(path) - 1 >= min_edges:
            tracks.append(tuple(path))
    return TrackSet(tuple(tracks), min_edges)


def count_and_annotate(tracks, frames):
    """Return ``(count, labels)``; labels maps frame name to per-instance track ids (or None)."""
    labels = {f.frame_name: [None] * len(f.instances) for f in frames}
    names = [f.frame_name for f in frames]
    for track_id, path in enumerate(tracks.tracks):
        for i, j in path:
            labels[names[i]][j] = track_id
    return len(tracks.tracks), labels


# ---------------------------------------------------------------------------
# pipeline

def frame_map_for(frames, model):
    """Match frame names to SfM images by file-name stem."""
    by_stem = {}
    for img in model.images.values():
        by_stem.setdefault(Path(img.name).stem, img.image_id)
        by_stem.setdefault(img.name, img.image_id)
    out, missing = {}, []
    for f in frames:
        key = f.frame_name if f.frame_name in by_stem else Path(f.frame_name).stem
        if key in by_stem:
            out[f.frame_name] = by_stem[key]
        else:
            missing.append(f.frame_name)
    if missing:
        raise ValidationError(f"frames missing from the sparse model: {missing}")
    return out


@dataclass(frozen=True)
class TrackingResult:
    graph: TrackGraph
    filtered: TrackGraph
    tracks: TrackSet
    count: int
    labels: dict


def track_clusters(model, frames, min_edges=DEFAULT_MIN_EDGES, window=None,
                   projection="observed", min_confidence=DEFAULT_MIN_CONFIDENCE, workers=1):
    frames = list(frames)
    if projection == "observed":
        obs = observations_by_image(model)
    elif projection == "reprojected":
        obs = reprojected_observations(model)
    else:
        raise ValueError(f"unknown projection mode {projection!r}")
    graph = build_graph(frames, obs, frame_map_for(frames, model), window=window,
                        min_confidence=min_confidence, workers=workers)
    filtered = filter_edges(graph)
    tracks = extract_tracks(filtered, min_edges)
    count, labels = count_and_annotate(tracks, frames)
    return TrackingResult(graph, filtered, tracks, count, labels)


# ---------------------------------------------------------------------------
# file formats

def format_manifest_line(frame):
    rec = {
        "frame_name": frame.frame_name,
        "masks": [encode_rle(m) for m in frame.instances],
        "confidences": [float(m.confidence) for m in frame.instances],
    }
    return json.dumps(rec) + "\n"


def write_manifest(frames):
    return "".join(format_manifest_line(f) for f in frames)


def parse_manifest(text, base_dir="."):
    """Read the JSON-lines detections manifest; frame order is line order.

    ``masks`` is a list of RLE records or a path (relative to ``base_dir``)
    to an npy/npz/rle stack.
    """
    frames = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            name = rec["frame_name"]
            masks = rec.get("masks", [])
            confs = rec.get("confidences")
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
            raise FormatError(f"detections line {lineno}: {exc}") from None
        if isinstance(masks, str):
            stack = read_mask_file(os.path.join(base_dir, masks), confidences=confs)
            instances = list(stack.masks)
        else:
            if confs is None:
                confs = [1.0] * len(masks)
            if len(confs) != len(masks):
                raise FormatError(
                    f"detections line {lineno}: {len(confs)} confidences for {len(masks)} masks")
            instances = [decode_rle(m, confidence=c) for m, c in zip(masks, confs)]
        frames.append(FrameDetections(len(frames), name, instances))
    return frames


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


def tracks_json(result, frames):
    names = [f.frame_name for f in frames]
    doc = {
        "count": result.count,
        "min_edges": result.tracks.min_edges,
        "tracks": [
            {"track_id": k,
             "nodes": [{"frame_name": names[i], "instance_index": j} for i, j in path]}
            for k, path in enumerate(result.tracks.tracks)
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def labels_csv(labels):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("frame_name", "instance_index", "track_id"))
    for name, per_instance in labels.items():
        for j, tid in enumerate(per_instance):
            writer.writerow((name, j, "" if tid is None else tid))
    return buf.getvalue()
