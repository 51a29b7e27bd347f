"""Shared fixture generators and independently written reference implementations."""
import numpy as np

from grapetrack.masks import InstanceMask
from grapetrack.sfm import CameraIntrinsics, ImageRecord, Point3D, build_model


def random_mask(rng, h, w, p=0.3):
    bits = rng.random((h, w)) < p
    if not bits.any():
        bits[rng.integers(h), rng.integers(w)] = True
    return bits


def make_mask(rows, confidence=1.0):
    return InstanceMask.from_array(np.array(rows), confidence=confidence)


def naive_mask_iou(a, b):
    inter = union = 0
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            inter += bool(a[y, x] and b[y, x])
            union += bool(a[y, x] or b[y, x])
    return inter / union if union else 0.0


def naive_match(pred_bits, scores, gt_bits, thr):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    used = set()
    pairs = []
    for i in order:
        best = None
        for j in range(len(gt_bits)):
            if j in used:
                continue
            v = naive_mask_iou(pred_bits[i], gt_bits[j])
            if v >= thr and (best is None or v > best[1]):
                best = (j, v)
        if best is not None:
            used.add(best[0])
            pairs.append((i, best[0]))
    return pairs


def naive_semantic(p, g):
    tp = fp = fn = 0
    for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
        tp += a and b
        fp += a and not b
        fn += b and not a
    return tp, fp, fn


def random_fixture(rng):
    gts = [random_mask(rng, 16, 16, 0.25) for _ in range(rng.integers(0, 9))]
    preds = []
    for _ in range(rng.integers(0, 9)):
        if gts and rng.random() < 0.6:
            base = gts[rng.integers(len(gts))].copy()
            flip = rng.random((16, 16)) < 0.1
            base ^= flip
            if not base.any():
                base[0, 0] = True
            preds.append(base)
        else:
            preds.append(random_mask(rng, 16, 16, 0.25))
    scores = [float(s) for s in rng.choice([0.5, 0.7, 0.9, 0.95], size=len(preds))]
    return preds, scores, gts


def naive_ap(hits, n_gt):
    total = 0.0
    for level in range(11):
        best = 0.0
        tp = 0
        for k, h in enumerate(hits, start=1):
            tp += h
            if tp / n_gt >= level / 10 - 1e-12:
                best = max(best, tp / k)
        total += best
    return total / 11


def random_unit_quaternion(rng):
    q = rng.normal(size=4)
    return tuple(q / np.linalg.norm(q))


def random_model(rng):
    cams = {}
    for cid in range(1, rng.integers(1, 4) + 1):
        model = ["SIMPLE_PINHOLE", "PINHOLE", "SIMPLE_RADIAL"][rng.integers(3)]
        w, h = int(rng.integers(50, 4000)), int(rng.integers(50, 4000))
        f = float(rng.uniform(10, 5000))
        params = {"SIMPLE_PINHOLE": (f, w / 2, h / 2), "PINHOLE": (f, f * 1.01, w / 3, h / 3),
                  "SIMPLE_RADIAL": (f, w / 2, h / 2, float(rng.normal()) * 1e-3)}[model]
        cams[cid] = CameraIntrinsics(cid, model, w, h, params)
    n_img = int(rng.integers(1, 6))
    n_pts = int(rng.integers(0, 15))
    obs = {i: [] for i in range(1, n_img + 1)}
    tracks = {p: [] for p in range(1, n_pts + 1)}
    for i in obs:
        for _ in range(int(rng.integers(0, 10))):
            pid = int(rng.integers(0, n_pts + 1)) if n_pts else 0
            xy = tuple(float(v) for v in rng.uniform(0, 1000, 2))
            if pid and all(img != i for img, _ in tracks[pid]):
                tracks[pid].append((i, len(obs[i])))
                obs[i].append((*xy, pid))
            else:
                obs[i].append((*xy, None))
    images = {i: ImageRecord(i, f"img_{rng.integers(1e6)}_{i}.png", random_unit_quaternion(rng),
                             tuple(float(v) for v in rng.normal(size=3)),
                             int(rng.integers(1, len(cams) + 1)), tuple(o))
              for i, o in obs.items()}
    points = {p: Point3D(p, tuple(float(v) for v in rng.normal(size=3) * 10),
                         tuple(int(v) for v in rng.integers(0, 256, 3)),
                         float(rng.exponential()), tuple(t))
              for p, t in tracks.items()}
    return build_model(cams, images, points)
