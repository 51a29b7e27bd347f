"""Scribble-driven cluster segmentation on a bounding-box crop.

The crop is over-segmented by a marker watershed, each region becomes a
vertex of a region adjacency graph carrying mean colour, centroid and
size, and regions the annotator did not touch inherit the label of the
closest scribbled region under a colour + position cost.
"""
import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import local_minima, reconstruction

from . import _kernels
from .errors import FormatError, ValidationError
from .masks import InstanceMask

GRAPE = "grape"
BACKGROUND = "background"
DEFAULT_H_MIN = 8.0
DEFAULT_LAMBDA = 0.5

_SHIFTS = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True, eq=False)
class RegionMap:
    labels: np.ndarray  # (height, width) int64, ids dense from 0

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def n_regions(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def sizes(self):
        return np.bincount(self.labels.ravel(), minlength=self.n_regions)


@dataclass(frozen=True, eq=False)
class RegionGraph:
    colors: np.ndarray      # (R, 3) mean RGB
    centroids: np.ndarray   # (R, 2) mean (x, y)
    sizes: np.ndarray       # (R,)
    edges: tuple            # (a, b) with a < b
    relations: np.ndarray   # (E, 2) centroid displacement a -> b over the crop diagonal
    diagonal: float

    @property
    def n_vertices(self):
        return len(self.sizes)


@dataclass(frozen=True)
class Stroke:
    label: str
    pixels: tuple


@dataclass(frozen=True)
class ScribbleSet:
    strokes: tuple


def luminance(crop):
    crop = np.asarray(crop, dtype=np.float64)
    if crop.ndim == 2:
        return crop
    return 0.299 * crop[..., 0] + 0.587 * crop[..., 1] + 0.114 * crop[..., 2]


def morphological_gradient(lum):
    return (ndimage.grey_dilation(lum, size=(3, 3))
            - ndimage.grey_erosion(lum, size=(3, 3)))


def _markers(gradient, h_min):
    if h_min > 0:
        filled = reconstruction(gradient + h_min, gradient, method="erosion")
    else:
        filled = gradient
    minima = local_minima(filled, connectivity=1, allow_borders=True)
    markers, count = ndimage.label(minima)
    if count == 0:
        # a flat image is one plateau with no higher neighbour: a single minimum
        markers = np.ones(filled.shape, dtype=np.int32)
    return markers


def _absorb_ridges(labels, lum):
    """Give every ridge or unreached pixel the adjacent region of closest mean luminance."""
    labels = labels.copy()
    flooded = labels > 0
    n = labels.max() + 1
    means = (np.bincount(labels[flooded], weights=lum[flooded], minlength=n)
             / np.maximum(np.bincount(labels[flooded], minlength=n), 1))
    h, w = labels.shape
    while True:
        todo = labels <= 0
        if not todo.any():
            return labels
        best = np.full(labels.shape, np.inf)
        choice = np.zeros(labels.shape, dtype=labels.dtype)
        padded = np.pad(labels, 1, constant_values=0)
        for dy, dx in _SHIFTS:
            nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            ok = todo & (nb > 0)
            dist = np.where(ok, np.abs(lum - means[np.maximum(nb, 0)]), np.inf)
            better = (dist < best) | ((dist == best) & ok & (nb < choice))
            best = np.where(better, dist, best)
            choice = np.where(better, nb, choice)
        assign = todo & (choice > 0)
        if not assign.any():
            raise ValidationError("watershed produced no regions")
        labels[assign] = choice[assign]


def _densify(labels):
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    order = flat[np.sort(first)]
    remap = np.zeros(flat.max() + 1, dtype=np.int64)
    remap[order] = np.arange(order.size)
    return remap[labels]


def watershed_oversegment(crop, h_min=DEFAULT_H_MIN):
    """Region map of a crop (luminance or RGB) via marker watershed on its gradient.

    Minima shallower than ``h_min`` are suppressed first.  Region ids are
    numbered in raster order of first appearance.
    """
    lum = luminance(crop)
    if lum.size == 0:
        raise ValidationError("empty crop")
    if h_min < 0:
        raise ValueError("h_min must be non-negative")
    gradient = morphological_gradient(lum)
    flooded = _kernels.flood(gradient, _markers(gradient, h_min))
    return RegionMap(_densify(_absorb_ridges(flooded, lum)))


def build_arg(regions, crop):
    """Attributed region adjacency graph (4-neighbour adjacency)."""
    labels = regions.labels
    crop = np.asarray(crop, dtype=np.float64)
    if crop.ndim == 2:
        crop = np.repeat(crop[:, :, None], 3, axis=2)
    if crop.shape[:2] != labels.shape:
        raise ValidationError(f"crop {crop.shape[:2]} and region map {labels.shape} differ")
    n = regions.n_regions
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n)
    colors = np.stack([np.bincount(flat, weights=crop[..., c].ravel(), minlength=n)
                       for c in range(3)], axis=1) / sizes[:, None]
    ys, xs = np.indices(labels.shape)
    centroids = np.stack([np.bincount(flat, weights=xs.ravel(), minlength=n),
                          np.bincount(flat, weights=ys.ravel(), minlength=n)], axis=1)
    centroids /= sizes[:, None]
    pairs = []
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        pairs.append(np.stack([np.minimum(a[diff], b[diff]), np.maximum(a[diff], b[diff])], 1))
    pairs = np.unique(np.concatenate(pairs), axis=0) if pairs else np.empty((0, 2), int)
    diagonal = float(np.hypot(*labels.shape))
    relations = (centroids[pairs[:, 1]] - centroids[pairs[:, 0]]) / diagonal
    edges = tuple((int(a), int(b)) for a, b in pairs)
    return RegionGraph(colors, centroids, sizes, edges, relations.reshape(-1, 2), diagonal)


def parse_scribbles(text):
    try:
        doc = json.loads(text)
        strokes = tuple(
            Stroke(s["label"], tuple((int(x), int(y)) for x, y in s["pixels"]))
            for s in doc["strokes"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad scribble file: {exc}") from None
    for s in strokes:
        if s.label not in (GRAPE, BACKGROUND):
            raise FormatError(f"unknown scribble label {s.label!r}")
    return ScribbleSet(strokes)


def scribble_votes(scribbles, regions):
    """Per-region counts of (grape, background) scribble pixels."""
    n = regions.n_regions
    votes = np.zeros((n, 2), dtype=np.int64)
    for stroke in scribbles.strokes:
        col = 0 if stroke.label == GRAPE else 1
        for x, y in stroke.pixels:
            if not (0 <= x < regions.width and 0 <= y < regions.height):
                raise ValidationError(f"scribble pixel ({x}, {y}) outside the crop")
            votes[regions.labels[y, x], col] += 1
    return votes


def propagate_labels(arg, scribbles, regions, lambda_spatial=DEFAULT_LAMBDA):
    """Grape/background decision per region, returned as a bool array (True = grape).

    Scribbled regions take their majority label (ties go to background).
    Every other region copies the scribbled region minimising
    ``|colour difference| / 255 + lambda_spatial * |centroid offset| / diagonal``,
    lowest region id first on ties.
    """
    votes = scribble_votes(scribbles, regions)
    scribbled = votes.sum(axis=1) > 0
    is_grape = votes[:, 0] > votes[:, 1]
    if not (scribbled & is_grape).any():
        raise ValidationError("no region is marked as grape by the scribbles")
    if not (scribbled & ~is_grape).any():
        raise ValidationError("no region is marked as background by the scribbles")
    model = np.flatnonzero(scribbled)
    free = np.flatnonzero(~scribbled)
    if free.size:
        color = np.linalg.norm(arg.colors[free, None, :] - arg.colors[None, model, :],
                               axis=2) / 255.0
        offset = np.linalg.norm(arg.centroids[free, None, :] - arg.centroids[None, model, :],
                                axis=2) / arg.diagonal
        nearest = model[np.argmin(color + lambda_spatial * offset, axis=1)]
        is_grape[free] = is_grape[nearest]
    return is_grape


def extract_instance_mask(is_grape, regions, bbox=None, confidence=1.0):
    """Union of grape regions, optionally clipped to a pixel box ``(x, y, w, h)``."""
    bits = np.asarray(is_grape, dtype=bool)[regions.labels]
    if bbox is not None:
        x, y, w, h = (int(v) for v in bbox)
        clip = np.zeros_like(bits)
        clip[max(y, 0):max(y + h, 0), max(x, 0):max(x + w, 0)] = True
        bits &= clip
    if not bits.any():
        raise ValidationError("annotation rejected: no grape pixels")
    return InstanceMask.from_array(bits, confidence=confidence)


def segment_crop(crop, scribbles, h_min=DEFAULT_H_MIN, lambda_spatial=DEFAULT_LAMBDA,
                 bbox=None):
    regions = watershed_oversegment(crop, h_min)
    arg = build_arg(regions, crop)
    labels = propagate_labels(arg, scribbles, regions, lambda_spatial)
    return extract_instance_mask(labels, regions, bbox)
