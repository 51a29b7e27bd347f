"""COLMAP text-format sparse models: parsing, serialisation and reprojection.

Only the text format (``cameras.txt``, ``images.txt``, ``points3D.txt``) is
handled.  Quaternions are ``(qw, qx, qy, qz)`` and, together with the
translation, map world to camera coordinates.
"""
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParseError, ValidationError

# model name -> parameter names, in file order
CAMERA_MODELS = {
    "SIMPLE_PINHOLE": ("f", "cx", "cy"),
    "PINHOLE": ("fx", "fy", "cx", "cy"),
    "SIMPLE_RADIAL": ("f", "cx", "cy", "k"),
}

CAMERAS_HEADER = (
    "# Camera list with one line of data per camera:\n"
    "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n"
)
IMAGES_HEADER = (
    "# Image list with two lines of data per image:\n"
    "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n"
    "#   POINTS2D[] as (X, Y, POINT3D_ID)\n"
)
POINTS_HEADER = (
    "# 3D point list with one line of data per point:\n"
    "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n"
)


@dataclass(frozen=True)
class CameraIntrinsics:
    camera_id: int
    model: str
    width: int
    height: int
    params: tuple

    def __post_init__(self):
        if self.model not in CAMERA_MODELS:
            raise ValidationError(f"unsupported camera model {self.model!r}")
        if len(self.params) != len(CAMERA_MODELS[self.model]):
            raise ValidationError(
                f"camera {self.camera_id}: {self.model} takes "
                f"{len(CAMERA_MODELS[self.model])} parameters, got {len(self.params)}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"camera {self.camera_id}: focal length must be positive")
        if not (0 <= self.px < self.width and 0 <= self.py < self.height):
            raise ValidationError(f"camera {self.camera_id}: principal point outside the image")

    @property
    def fx(self):
        return self.params[0]

    @property
    def fy(self):
        return self.params[1] if self.model == "PINHOLE" else self.params[0]

    @property
    def px(self):
        return self.params[2] if self.model == "PINHOLE" else self.params[1]

    @property
    def py(self):
        return self.params[3] if self.model == "PINHOLE" else self.params[2]

    @property
    def k(self):
        return self.params[3] if self.model == "SIMPLE_RADIAL" else 0.0


@dataclass(frozen=True)
class ImageRecord:
    """A registered frame; ``observations`` holds ``(x, y, point3d_id or None)``."""

    image_id: int
    name: str
    qvec: tuple
    tvec: tuple
    camera_id: int
    observations: tuple

    def __post_init__(self):
        norm = math.sqrt(sum(q * q for q in self.qvec))
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError(f"image {self.image_id}: quaternion norm {norm} is not 1")

    def rotation(self):
        return qvec_to_rotmat(self.qvec)


@dataclass(frozen=True)
class Point3D:
    point_id: int
    xyz: tuple
    rgb: tuple
    error: float
    track: tuple  # of (image_id, observation_index)


@dataclass(frozen=True)
class SparseModel:
    cameras: dict
    images: dict  # image_id -> ImageRecord, in name order
    points: dict

    def image_by_name(self, name):
        for img in self.images.values():
            if img.name == name:
                return img
        raise KeyError(name)


def qvec_to_rotmat(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def _data_lines(text):
    """Yield ``(lineno, line)`` for non-comment lines, keeping blank ones."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        yield lineno, line


def _ints(fields, lineno, what):
    try:
        return [int(f) for f in fields]
    except ValueError:
        raise ParseError(f"non-integer {what}", line=lineno) from None


def _floats(fields, lineno, what):
    try:
        return [float(f) for f in fields]
    except ValueError:
        raise ParseError(f"non-numeric {what}", line=lineno) from None


def parse_cameras(text):
    cameras = {}
    for lineno, line in _data_lines(text):
        if not line:
            continue
        f = line.split()
        if len(f) < 4:
            raise ParseError("camera line needs at least 4 fields", line=lineno)
        cam_id, width, height = _ints([f[0], f[2], f[3]], lineno, "camera field")
        if f[1] not in CAMERA_MODELS:
            raise ParseError(f"unknown camera model {f[1]!r}", line=lineno)
        if cam_id in cameras:
            raise ParseError(f"duplicate camera id {cam_id}", line=lineno)
        cameras[cam_id] = CameraIntrinsics(
            cam_id, f[1], width, height, tuple(_floats(f[4:], lineno, "camera parameter")))
    return cameras


def parse_images(text):
    images = {}
    lines = list(_data_lines(text))
    i = 0
    while i < len(lines):
        lineno, line = lines[i]
        if not line:
            i += 1
            continue
        if i + 1 >= len(lines):
            raise ParseError("image header without a points line (odd image-line count)",
                             line=lineno)
        f = line.split()
        if len(f) < 10:
            raise ParseError("image line needs 10 fields", line=lineno)
        image_id = _ints([f[0]], lineno, "image id")[0]
        qvec = tuple(_floats(f[1:5], lineno, "quaternion"))
        tvec = tuple(_floats(f[5:8], lineno, "translation"))
        camera_id = _ints([f[8]], lineno, "camera id")[0]
        name = " ".join(f[9:])
        obs_lineno, obs_line = lines[i + 1]
        tokens = obs_line.split()
        if len(tokens) % 3:
            raise ParseError("points line must hold (X, Y, POINT3D_ID) triples", line=obs_lineno)
        xs = _floats(tokens[0::3], obs_lineno, "x")
        ys = _floats(tokens[1::3], obs_lineno, "y")
        pids = _ints(tokens[2::3], obs_lineno, "point id")
        observations = tuple((x, y, None if p == -1 else p) for x, y, p in zip(xs, ys, pids))
        if image_id in images:
            raise ParseError(f"duplicate image id {image_id}", line=lineno)
        images[image_id] = ImageRecord(image_id, name, qvec, tvec, camera_id, observations)
        i += 2
    return images


def parse_points(text):
    points = {}
    for lineno, line in _data_lines(text):
        if not line:
            continue
        f = line.split()
        if len(f) < 8 or (len(f) - 8) % 2:
            raise ParseError("point line needs 8 fields plus (IMAGE_ID, POINT2D_IDX) pairs",
                             line=lineno)
        point_id = _ints([f[0]], lineno, "point id")[0]
        xyz = tuple(_floats(f[1:4], lineno, "coordinate"))
        rgb = tuple(_ints(f[4:7], lineno, "colour"))
        error = _floats([f[7]], lineno, "error")[0]
        track_ints = _ints(f[8:], lineno, "track entry")
        track = tuple(zip(track_ints[0::2], track_ints[1::2]))
        if point_id in points:
            raise ParseError(f"duplicate point id {point_id}", line=lineno)
        points[point_id] = Point3D(point_id, xyz, rgb, error, track)
    return points


def check_integrity(model):
    """Raise IntegrityError unless cameras, images and points cross-reference cleanly."""
    names = set()
    for img in model.images.values():
        if img.camera_id not in model.cameras:
            raise IntegrityError(f"image {img.image_id} uses missing camera {img.camera_id}")
        if img.name in names:
            raise IntegrityError(f"duplicate image name {img.name!r}")
        names.add(img.name)
    for pt in model.points.values():
        for image_id, idx in pt.track:
            img = model.images.get(image_id)
            if img is None:
                raise IntegrityError(f"point {pt.point_id} references missing image {image_id}")
            if not 0 <= idx < len(img.observations):
                raise IntegrityError(
                    f"point {pt.point_id} references observation {idx} of image {image_id}, "
                    f"which has {len(img.observations)}")
            if img.observations[idx][2] != pt.point_id:
                raise IntegrityError(
                    f"point {pt.point_id}: observation {idx} of image {image_id} "
                    f"belongs to point {img.observations[idx][2]}")
    for img in model.images.values():
        for idx, (_, _, pid) in enumerate(img.observations):
            if pid is None:
                continue
            pt = model.points.get(pid)
            if pt is None:
                raise IntegrityError(
                    f"image {img.image_id} observation {idx} references missing point {pid}")
            if (img.image_id, idx) not in pt.track:
                raise IntegrityError(
                    f"point {pid} track lacks image {img.image_id} observation {idx}")


def build_model(cameras, images, points):
    ordered = dict(sorted(images.items(), key=lambda kv: (kv[1].name, kv[0])))
    model = SparseModel(dict(sorted(cameras.items())), ordered, dict(sorted(points.items())))
    check_integrity(model)
    return model


def parse_sparse_model(cameras_text, images_text, points_text):
    return build_model(parse_cameras(cameras_text), parse_images(images_text),
                       parse_points(points_text))


def read_model_dir(path):
    path = Path(path)
    texts = []
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        with open(path / name, encoding="utf-8") as fh:
            texts.append(fh.read())
    return parse_sparse_model(*texts)


def _num(v):
    return repr(float(v))


def serialize_sparse_model(model):
    """Return ``(cameras_text, images_text, points_text)``; floats are written with repr."""
    cams = [CAMERAS_HEADER, f"# Number of cameras: {len(model.cameras)}\n"]
    for cam in model.cameras.values():
        params = " ".join(_num(p) for p in cam.params)
        cams.append(f"{cam.camera_id} {cam.model} {cam.width} {cam.height} {params}\n")

    imgs = [IMAGES_HEADER, f"# Number of images: {len(model.images)}\n"]
    for img in model.images.values():
        pose = " ".join(_num(v) for v in (*img.qvec, *img.tvec))
        imgs.append(f"{img.image_id} {pose} {img.camera_id} {img.name}\n")
        imgs.append(" ".join(f"{_num(x)} {_num(y)} {-1 if p is None else p}"
                             for x, y, p in img.observations) + "\n")

    pts = [POINTS_HEADER, f"# Number of points: {len(model.points)}\n"]
    for pt in model.points.values():
        track = "".join(f" {i} {j}" for i, j in pt.track)
        xyz = " ".join(_num(v) for v in pt.xyz)
        rgb = " ".join(str(int(c)) for c in pt.rgb)
        pts.append(f"{pt.point_id} {xyz} {rgb} {_num(pt.error)}{track}\n")
    return "".join(cams), "".join(imgs), "".join(pts)


def write_model_dir(model, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, text in zip(("cameras.txt", "images.txt", "points3D.txt"),
                          serialize_sparse_model(model)):
        with open(path / name, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def observations_by_image(model):
    """Map image_id -> ``[(point_id, x, y), ...]`` ordered by observation index.

    One entry per track element; images observing no points are absent.
    """
    out = {}
    for image_id, img in model.images.items():
        rows = [(pid, x, y) for x, y, pid in img.observations if pid is not None]
        if rows:
            out[image_id] = rows
    return out


def reproject_point(point, image, camera):
    """Project ``point`` into ``image``; returns ``(x, y)`` or None when behind the camera."""
    xyz = np.asarray(point.xyz if isinstance(point, Point3D) else point, dtype=float)
    q = np.asarray(image.qvec, dtype=float)
    t = np.asarray(image.tvec, dtype=float)
    if not (np.isfinite(xyz).all() and np.isfinite(q).all() and np.isfinite(t).all()):
        raise ValueError("non-finite coordinates in reprojection")
    xc, yc, zc = qvec_to_rotmat(q) @ xyz + t
    if zc <= 0:
        return None
    u, v = xc / zc, yc / zc
    d = 1.0 + camera.k * (u * u + v * v)
    return camera.fx * u * d + camera.px, camera.fy * v * d + camera.py


def reprojected_observations(model):
    """Like observations_by_image, but coordinates come from pose + intrinsics.

    Visibility still follows the stored tracks; points behind the camera
    are dropped.
    """
    out = {}
    for pt in model.points.values():
        for image_id, _ in pt.track:
            img = model.images[image_id]
            uv = reproject_point(pt, img, model.cameras[img.camera_id])
            if uv is not None:
                out.setdefault(image_id, []).append((pt.point_id, uv[0], uv[1]))
    return {k: out[k] for k in model.images if k in out}
