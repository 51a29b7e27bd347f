"""WGISD-style annotations: YOLO box files, split lists and the dataset index."""
import json
import math
import os
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import AnnotationWarning, ParseError, ValidationError

# identifying prefixes of the five grape varieties in WGISD
VARIETIES = {
    "CDY": "Chardonnay",
    "CFR": "Cabernet Franc",
    "CSV": "Cabernet Sauvignon",
    "SVB": "Sauvignon Blanc",
    "SYH": "Syrah",
}

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".ppm")
MASK_SUFFIXES = (".npz", ".npy", ".rle")
DIMS_SIDECAR = "image_dims.json"

# normalised values may overshoot [0, 1] by this much before it is an error
CLAMP_TOLERANCE = 0.01


@dataclass(frozen=True)
class BoundingBox:
    """A box in normalised YOLO coordinates (centre and extent in [0, 1])."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    confidence: float = 1.0

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h", "confidence"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(f"box {name} is not finite")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValidationError(f"box centre ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValidationError(f"box extent ({self.w}, {self.h}) outside (0, 1]")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")

    def to_pixels(self, dims):
        """Centre and extent in pixels: ``(cx, cy, w, h)``."""
        width, height = dims
        return self.cx * width, self.cy * height, self.w * width, self.h * height

    def to_xywh(self, dims):
        """Top-left corner and extent in pixels."""
        cx, cy, w, h = self.to_pixels(dims)
        return cx - w / 2, cy - h / 2, w, h

    @classmethod
    def from_pixels(cls, cx, cy, w, h, dims, class_id=0, confidence=1.0):
        width, height = dims
        return cls(class_id, cx / width, cy / height, w / width, h / height, confidence)


def _clamp(value, lo, hi, what, lineno):
    if lo <= value <= hi:
        return value
    if lo - CLAMP_TOLERANCE <= value <= hi + CLAMP_TOLERANCE:
        warnings.warn(f"line {lineno}: {what}={value} clamped to [{lo}, {hi}]",
                      AnnotationWarning, stacklevel=3)
        return min(max(value, lo), hi)
    raise ParseError(f"{what}={value} outside [{lo}, {hi}]", line=lineno)


def parse_yolo_boxes(text, image_dims=None):
    """Parse a YOLO box file (``CLASS CX CY W H`` per line) preserving line order.

    A sixth column, when present, is read as the detection confidence.
    With ``image_dims`` given, boxes sticking out of the image by more
    than one pixel are clipped to it (with a warning).
    """
    if image_dims is not None and (image_dims[0] <= 0 or image_dims[1] <= 0):
        raise ValueError(f"image dimensions must be positive, got {image_dims}")
    boxes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (5, 6):
            raise ParseError(f"expected 5 fields, got {len(fields)}", line=lineno)
        try:
            class_id = int(fields[0])
        except ValueError:
            raise ParseError(f"class {fields[0]!r} is not an integer", line=lineno) from None
        try:
            cx, cy, w, h = (float(f) for f in fields[1:5])
            conf = float(fields[5]) if len(fields) == 6 else 1.0
        except ValueError:
            raise ParseError("non-numeric box field", line=lineno) from None
        if not all(math.isfinite(v) for v in (cx, cy, w, h, conf)):
            raise ParseError("non-finite box field", line=lineno)
        if w <= 0 or h <= 0:
            raise ParseError(f"zero-extent box (w={w}, h={h})", line=lineno)
        cx = _clamp(cx, 0.0, 1.0, "cx", lineno)
        cy = _clamp(cy, 0.0, 1.0, "cy", lineno)
        w = _clamp(w, 0.0, 1.0, "w", lineno)
        h = _clamp(h, 0.0, 1.0, "h", lineno)
        conf = _clamp(conf, 0.0, 1.0, "confidence", lineno)
        if image_dims is not None:
            cx, cy, w, h = _clip_to_image(cx, cy, w, h, image_dims, lineno)
        boxes.append(BoundingBox(class_id, cx, cy, w, h, conf))
    return boxes


def _clip_to_image(cx, cy, w, h, dims, lineno):
    width, height = dims
    x0, x1 = (cx - w / 2) * width, (cx + w / 2) * width
    y0, y1 = (cy - h / 2) * height, (cy + h / 2) * height
    if x0 >= -1 and y0 >= -1 and x1 <= width + 1 and y1 <= height + 1:
        return cx, cy, w, h
    warnings.warn(f"line {lineno}: box exceeds the image by more than 1 px, clipped",
                  AnnotationWarning, stacklevel=3)
    x0, x1 = max(x0, 0.0), min(x1, float(width))
    y0, y1 = max(y0, 0.0), min(y1, float(height))
    if x1 <= x0 or y1 <= y0:
        raise ParseError("box lies entirely outside the image", line=lineno)
    return ((x0 + x1) / 2 / width, (y0 + y1) / 2 / height,
            (x1 - x0) / width, (y1 - y0) / height)


def format_yolo_boxes(boxes, with_confidence=False):
    lines = []
    for b in boxes:
        fields = [str(b.class_id)] + [repr(float(v)) for v in (b.cx, b.cy, b.w, b.h)]
        if with_confidence:
            fields.append(repr(float(b.confidence)))
        lines.append(" ".join(fields))
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# dataset index

@dataclass(frozen=True)
class DatasetEntry:
    image_id: str
    variety_prefix: str
    has_boxes: bool
    has_masks: bool
    split: str = None


@dataclass(frozen=True)
class DatasetIndex:
    entries: tuple
    image_dims: dict

    def variety_counts(self):
        return dict(sorted(Counter(e.variety_prefix for e in self.entries).items()))

    def split_counts(self):
        return dict(sorted(Counter(e.split for e in self.entries if e.split).items()))

    def ids(self, split=None, masked=None):
        return [e.image_id for e in self.entries
                if (split is None or e.split == split)
                and (masked is None or e.has_masks == masked)]

    def __getitem__(self, image_id):
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)


def variety_of(image_id):
    return image_id.split("_", 1)[0]


def parse_split_list(text, name="split"):
    ids = [ln.strip() for ln in text.splitlines() if ln.strip()]
    dup = [k for k, n in Counter(ids).items() if n > 1]
    if dup:
        raise ValidationError(f"duplicate ids in {name} list: {dup}")
    return ids


def load_image_dims(path):
    """Read the ``{image_id: [width, height]}`` sidecar."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    dims = {}
    for key, value in raw.items():
        w, h = (int(v) for v in value)
        if w <= 0 or h <= 0:
            raise ValidationError(f"non-positive dimensions for {key}")
        dims[key] = (w, h)
    return dims


def load_dataset_index(root, splits, image_dims=None):
    """Index a WGISD-style directory.

    ``root`` is a directory or an iterable of file names; ``splits`` maps a
    split name (``train``/``test``) to the text of its id list.  Varieties
    come from the file name prefix (``CDY_2015`` -> ``CDY``).
    """
    if isinstance(root, (str, os.PathLike)):
        root = Path(root)
        names = sorted(p.name for p in root.iterdir() if p.is_file())
        if image_dims is None and (root / DIMS_SIDECAR).exists():
            image_dims = load_image_dims(root / DIMS_SIDECAR)
    else:
        names = sorted(root)
    images, boxes, masks = {}, set(), set()
    for name in names:
        stem, suffix = os.path.splitext(name)
        suffix = suffix.lower()
        if suffix in IMAGE_SUFFIXES:
            if stem in images:
                raise ValidationError(f"duplicate image id {stem!r} ({images[stem]}, {name})")
            images[stem] = name
        elif suffix == ".txt":
            boxes.add(stem)
        elif suffix in MASK_SUFFIXES:
            masks.add(stem)

    assigned = {}
    for split_name, text in (splits or {}).items():
        for image_id in parse_split_list(text, split_name):
            if image_id not in images:
                raise ValidationError(f"{split_name} list references missing image {image_id!r}")
            if image_id in assigned:
                raise ValidationError(
                    f"{image_id!r} is in both {assigned[image_id]} and {split_name} lists")
            assigned[image_id] = split_name

    entries = []
    for image_id in sorted(images):
        has_masks = image_id in masks
        has_boxes = image_id in boxes
        if has_masks and not has_boxes:
            raise ValidationError(f"{image_id!r} has masks but no box file")
        entries.append(DatasetEntry(image_id, variety_of(image_id), has_boxes, has_masks,
                                    assigned.get(image_id)))
    dims = {k: v for k, v in (image_dims or {}).items() if k in images}
    return DatasetIndex(tuple(entries), dims)
