"""Deterministic synthetic vineyard rows for testing the tracker end to end.

Clusters are disks lying on a plane parallel to the image plane; a pinhole
camera slides sideways by a fixed step per frame.  Every coordinate is a
dyadic rational, so projections are exact in floating point and scenes
regenerate bit-for-bit from the seed.

Random numbers come from a 64-bit linear congruential generator
(Knuth's MMIX constants)::

    state = (state * 6364136223846793005 + 1442695040888963407) mod 2**64

and each draw uses the high 32 bits of the new state.  The seed is mixed
into the initial state as ``seed XOR 0x853C49E6748FEA9B``.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .association import FrameDetections, write_manifest
from .dataset import format_yolo_boxes
from .errors import ValidationError
from .masks import InstanceMask, MaskStack, encode_rle_stack
from .sfm import CameraIntrinsics, ImageRecord, Point3D, build_model, write_model_dir

LCG_MULT = 6364136223846793005
LCG_INC = 1442695040888963407
LCG_MASK = (1 << 64) - 1
SEED_MIX = 0x853C49E6748FEA9B

PX_PER_UNIT = 16   # focal length / depth
FOCAL = 64.0
DEPTH = 4.0


class Lcg64:
    def __init__(self, seed):
        self.state = (int(seed) ^ SEED_MIX) & LCG_MASK

    def next_u32(self):
        self.state = (self.state * LCG_MULT + LCG_INC) & LCG_MASK
        return self.state >> 32

    def below(self, n):
        """Integer in ``[0, n)``."""
        return self.next_u32() % n

    def uniform(self):
        return self.next_u32() / 2.0 ** 32

    def chance(self, p):
        return self.uniform() < p


@dataclass(frozen=True)
class SceneConfig:
    n_clusters: int = 9
    n_frames: int = 20
    points_per_cluster: int = 12
    width: int = 320
    height: int = 240
    camera_step: float = 0.25   # scene units per frame; times 16 must be an integer
    dropout_p: float = 0.0
    occlusion_p: float = 0.0
    seed: int = 0
    disk_radius: int = 10
    n_background: int = 20

    def __post_init__(self):
        for name in ("n_clusters", "n_frames", "points_per_cluster"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")
        for name in ("dropout_p", "occlusion_p"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must be in [0, 1)")
        step_px = self.camera_step * PX_PER_UNIT
        if step_px != int(step_px) or step_px < 0:
            raise ValidationError(f"camera_step * {PX_PER_UNIT} must be a non-negative integer")
        if self.width < 2 * self.disk_radius + 1 or self.height < 2 * self.disk_radius + 1:
            raise ValidationError("raster too small for the cluster disks")
        if self.n_background < 0:
            raise ValidationError("n_background must be non-negative")

    @property
    def step_px(self):
        return int(self.camera_step * PX_PER_UNIT)


@dataclass(frozen=True)
class ClusterTruth:
    cluster_id: int
    center: tuple           # (column, row) of the centre pixel in frame 0
    point_ids: tuple
    visible_frames: tuple   # frames where the whole disk is in the raster
    detected_frames: tuple  # frames where it has a detection of its own


@dataclass(frozen=True)
class SyntheticScene:
    config: SceneConfig
    clusters: tuple
    model: object
    frames: tuple                # FrameDetections, what a detector would report
    detection_clusters: tuple    # per frame, per detection: covered cluster ids
    gt_frames: tuple             # FrameDetections holding one true mask per visible cluster
    point_observations: dict = field(compare=False, default=None)

    @property
    def truth_tracks(self):
        return {c.cluster_id: c.visible_frames for c in self.clusters}


def frame_name(i):
    return f"frame_{i:04d}"


def disk_mask(width, height, cx, cy, radius):
    """Pixels whose centres lie within ``radius`` of ``(cx, cy)``."""
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    return ((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2) <= radius * radius


def _point_offsets(rng, count, radius):
    # integer offsets inside 0.6 * radius, by rejection on the squared norm
    reach = max(int(0.6 * radius), 0)
    limit = (6 * radius) ** 2  # (0.6 r)^2 scaled by 100
    out = []
    while len(out) < count:
        dx = rng.below(2 * reach + 1) - reach
        dy = rng.below(2 * reach + 1) - reach
        if 100 * (dx * dx + dy * dy) <= limit:
            out.append((dx, dy))
    return out


def generate_scene(cfg):
    rng = Lcg64(cfg.seed)
    W, H, R = cfg.width, cfg.height, cfg.disk_radius
    px, py = W // 2, H // 2
    sweep = (cfg.n_frames - 1) * cfg.step_px
    lo, hi = R, W - 1 - R + sweep
    min_gap = 2 * R + 3
    slot = max((hi - lo) // cfg.n_clusters, min_gap)

    centers = []
    for c in range(cfg.n_clusters):
        k = lo + c * slot + rng.below(slot - min_gap + 1)
        v = R + rng.below(H - 2 * R)
        centers.append((k, v))

    def column(k, i):
        return k - i * cfg.step_px

    def visible(k, i):
        return R <= column(k, i) <= W - 1 - R

    # 3-D points, numbered from 1
    points_xyz = {}
    owner = {}
    next_id = 1
    cluster_points = []
    for c, (k, v) in enumerate(centers):
        ids = []
        for dx, dy in _point_offsets(rng, cfg.points_per_cluster, R):
            points_xyz[next_id] = ((k + dx + 0.5 - px) / PX_PER_UNIT,
                                   (v + dy + 0.5 - py) / PX_PER_UNIT, DEPTH)
            owner[next_id] = c
            ids.append(next_id)
            next_id += 1
        cluster_points.append(ids)
    span_w = W + sweep
    placed = 0
    while placed < cfg.n_background:
        bk, bv = rng.below(span_w), rng.below(H)
        if any((bk - k) ** 2 + (bv - v) ** 2 <= (R + 2) ** 2 for k, v in centers):
            continue
        points_xyz[next_id] = ((bk + 0.5 - px) / PX_PER_UNIT, (bv + 0.5 - py) / PX_PER_UNIT,
                               DEPTH)
        owner[next_id] = None
        next_id += 1
        placed += 1

    vis = [[i for i in range(cfg.n_frames) if visible(k, i)] for k, _ in centers]
    if not any(vis):
        raise ValidationError("configuration leaves every cluster out of view")

    # detections: dropout first, then pairwise merging of neighbouring survivors
    frames, covers, gt_frames = [], [], []
    detected = [[] for _ in centers]
    for i in range(cfg.n_frames):
        in_view = [c for c in range(cfg.n_clusters) if visible(centers[c][0], i)]
        disks = {c: disk_mask(W, H, column(centers[c][0], i) + 0.5, centers[c][1] + 0.5, R)
                 for c in in_view}
        survivors = [c for c in in_view if not rng.chance(cfg.dropout_p)]
        groups = []
        pos = 0
        while pos < len(survivors):
            if pos + 1 < len(survivors) and rng.chance(cfg.occlusion_p):
                groups.append((survivors[pos], survivors[pos + 1]))
                pos += 2
            else:
                groups.append((survivors[pos],))
                pos += 1
        masks = []
        for g in groups:
            bits = np.zeros((H, W), dtype=bool)
            for c in g:
                bits |= disks[c]
            conf = (901 + rng.below(100)) / 1000
            masks.append(InstanceMask(W, H, bits, confidence=conf))
            if len(g) == 1:
                detected[g[0]].append(i)
        frames.append(FrameDetections(i, frame_name(i), masks))
        covers.append(tuple(groups))
        gt_frames.append(FrameDetections(i, frame_name(i),
                                         [InstanceMask(W, H, disks[c]) for c in in_view]))

    # sparse model: identity rotation, camera centre moves along +x
    camera = CameraIntrinsics(1, "PINHOLE", W, H, (FOCAL, FOCAL, float(px), float(py)))
    images, tracks = {}, {pid: [] for pid in points_xyz}
    point_obs = {}
    for i in range(cfg.n_frames):
        cam_x = i * cfg.camera_step
        obs = []
        for pid, (x, y, _) in points_xyz.items():
            u = (x - cam_x) * PX_PER_UNIT + px
            w = y * PX_PER_UNIT + py
            c = owner[pid]
            seen = visible(centers[c][0], i) if c is not None else (0 <= u < W and 0 <= w < H)
            if seen:
                tracks[pid].append((i + 1, len(obs)))
                obs.append((u, w, pid))
        point_obs[i] = [(pid, u, w) for u, w, pid in obs]
        images[i + 1] = ImageRecord(i + 1, frame_name(i) + ".jpg", (1.0, 0.0, 0.0, 0.0),
                                    (-cam_x, 0.0, 0.0), 1, tuple(obs))
    points = {pid: Point3D(pid, xyz, (96, 32, 128) if owner[pid] is not None else (60, 90, 40),
                           0.0, tuple(tracks[pid]))
              for pid, xyz in points_xyz.items() if tracks[pid]}
    model = build_model({1: camera}, images, points)

    clusters = tuple(
        ClusterTruth(c, centers[c], tuple(cluster_points[c]), tuple(vis[c]), tuple(detected[c]))
        for c in range(cfg.n_clusters))
    return SyntheticScene(cfg, clusters, model, tuple(frames), tuple(covers), tuple(gt_frames),
                          point_obs)


def oracle_expected_count(scene, min_edges=5, window=None):
    """Clusters expected to survive tracking, from ground truth alone.

    Consecutive frames in which a cluster has its own detection are linked
    when at least one of its points is observed in both (and the gap fits
    the window).  A cluster counts when its longest linked run covers at
    least ``min_edges + 1`` frames.
    """
    count = 0
    for cl in scene.clusters:
        members = set(cl.point_ids)
        seen = {i: {pid for pid, _, _ in scene.point_observations[i] if pid in members}
                for i in cl.detected_frames}
        best = run = 0
        prev = None
        for i in cl.detected_frames:
            linked = (prev is not None and (window is None or i - prev <= window)
                      and seen[prev] & seen[i])
            run = run + 1 if linked else 1
            best = max(best, run)
            prev = i
        if best >= min_edges + 1:
            count += 1
    return count


def perturb_detections(scene, jitter_px, seed):
    """Detections manifest with every detection's disks shifted by up to ``jitter_px`` per axis."""
    if jitter_px < 0:
        raise ValueError("jitter must be non-negative")
    if jitter_px == 0:
        return write_manifest(scene.frames)
    cfg = scene.config
    rng = Lcg64(seed)
    frames = []
    for fr, groups in zip(scene.frames, scene.detection_clusters):
        masks = []
        for det, group in zip(fr.instances, groups):
            dx = jitter_px * (2 * rng.uniform() - 1)
            dy = jitter_px * (2 * rng.uniform() - 1)
            bits = np.zeros((cfg.height, cfg.width), dtype=bool)
            for c in group:
                k, v = scene.clusters[c].center
                cx = k - fr.frame_index * cfg.step_px + 0.5 + dx
                bits |= disk_mask(cfg.width, cfg.height, cx, v + 0.5 + dy, cfg.disk_radius)
            masks.append(InstanceMask(cfg.width, cfg.height, bits, confidence=det.confidence))
        frames.append(FrameDetections(fr.frame_index, fr.frame_name, masks))
    return write_manifest(frames)


def truth_json(scene, min_edges=5):
    doc = {
        "min_edges": min_edges,
        "expected_count": oracle_expected_count(scene, min_edges),
        "clusters": [{"id": c.cluster_id, "frames": list(c.visible_frames),
                      "detected_frames": list(c.detected_frames)} for c in scene.clusters],
    }
    return json.dumps(doc, indent=2) + "\n"


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def export_scene(scene, out_dir, manifest=None, min_edges=5):
    """Write the sparse model, detections, truth and per-frame eval sets under ``out_dir``."""
    out = Path(out_dir)
    write_model_dir(scene.model, out / "sparse")
    _write(out / "detections.jsonl", manifest or write_manifest(scene.frames))
    _write(out / "truth.json", truth_json(scene, min_edges))
    for sub, frames, scored in (("gt", scene.gt_frames, False), ("pred", scene.frames, True)):
        (out / sub).mkdir(parents=True, exist_ok=True)
        for fr in frames:
            _write(out / sub / f"{fr.frame_name}.txt",
                   format_yolo_boxes([m.box for m in fr.instances], scored))
            rle = encode_rle_stack(MaskStack(scene.config.width, scene.config.height,
                                             fr.instances)) if fr.instances else ""
            _write(out / sub / f"{fr.frame_name}.rle", rle)
    return out
