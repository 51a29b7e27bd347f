"""Binary instance masks, mask stacks and their file formats.

Three on-disk forms are supported for an H x W x n stack:

* ``npy``: a single NumPy array (C order, bool or uint8)
* ``npz``: a zip archive holding one such array (the WGISD layout)
* ``rle``: the native text format, one record per mask::

      RLE v1 <width> <height>
      <run>,<run>,...

  Runs alternate 0/1 in row-major order and always start with a 0-run,
  which may have length 0.
"""
import io
import warnings
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .dataset import BoundingBox
from .errors import AnnotationWarning, FormatError, ValidationError

RLE_MAGIC = "RLE v1"
NPY_MAGIC = b"\x93NUMPY"
FORMATS = ("npy", "npz", "rle")


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """One cluster's pixels. ``bits`` is a read-only (height, width) bool array."""

    width: int
    height: int
    bits: np.ndarray
    box: BoundingBox = None
    confidence: float = 1.0

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.shape != (self.height, self.width):
            raise ValidationError(
                f"mask bits have shape {bits.shape}, expected {(self.height, self.width)}")
        if not bits.any():
            raise ValidationError("mask has no set pixels")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)
        tight = _tight_box(bits, self.confidence)
        if self.box is None:
            object.__setattr__(self, "box", tight)
        else:
            x0, y0, x1, y1 = self.pixel_box
            bx0, by0, bx1, by1 = _box_pixels(self.box, self.width, self.height)
            if bx0 > x0 or by0 > y0 or bx1 < x1 or by1 < y1:
                raise ValidationError("bounding box does not contain every set pixel")

    @classmethod
    def from_array(cls, array, confidence=1.0):
        array = np.asarray(array)
        if array.ndim != 2:
            raise ValidationError(f"expected a 2-D mask, got shape {array.shape}")
        h, w = array.shape
        return cls(width=w, height=h, bits=array != 0, confidence=float(confidence))

    @property
    def area(self):
        return int(np.count_nonzero(self.bits))

    @property
    def pixel_box(self):
        """Tight half-open pixel box ``(x0, y0, x1, y1)``."""
        ys = np.flatnonzero(self.bits.any(axis=1))
        xs = np.flatnonzero(self.bits.any(axis=0))
        return int(xs[0]), int(ys[0]), int(xs[-1]) + 1, int(ys[-1]) + 1

    def with_confidence(self, confidence):
        return InstanceMask(self.width, self.height, self.bits, confidence=float(confidence))

    def __eq__(self, other):
        if not isinstance(other, InstanceMask):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and self.confidence == other.confidence
                and np.array_equal(self.bits, other.bits))

    __hash__ = None


def _tight_box(bits, confidence):
    h, w = bits.shape
    ys = np.flatnonzero(bits.any(axis=1))
    xs = np.flatnonzero(bits.any(axis=0))
    x0, x1 = xs[0], xs[-1] + 1
    y0, y1 = ys[0], ys[-1] + 1
    return BoundingBox(
        class_id=0,
        cx=(x0 + x1) / 2 / w,
        cy=(y0 + y1) / 2 / h,
        w=(x1 - x0) / w,
        h=(y1 - y0) / h,
        confidence=min(max(float(confidence), 0.0), 1.0),
    )


def _box_pixels(box, width, height):
    # the 1e-6 slack absorbs round-off from normalising integer pixel boxes
    x, y, bw, bh = box.to_xywh((width, height))
    return (int(np.floor(x + 1e-6)), int(np.floor(y + 1e-6)),
            int(np.ceil(x + bw - 1e-6)), int(np.ceil(y + bh - 1e-6)))


@dataclass(frozen=True)
class MaskStack:
    width: int
    height: int
    masks: tuple
    overlap_pixels: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(self.masks))
        for i, m in enumerate(self.masks):
            if (m.width, m.height) != (self.width, self.height):
                raise ValidationError(
                    f"mask {i} is {m.width}x{m.height}, stack is {self.width}x{self.height}")

    @property
    def n_clusters(self):
        return len(self.masks)

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, i):
        return self.masks[i]

    def to_array(self, dtype=np.uint8):
        """H x W x n array, slice ``i`` is mask ``i``."""
        out = np.zeros((self.height, self.width, len(self.masks)), dtype=dtype)
        for i, m in enumerate(self.masks):
            out[:, :, i] = m.bits
        return out

    def union(self):
        out = np.zeros((self.height, self.width), dtype=bool)
        for m in self.masks:
            out |= m.bits
        return out


def stack_from_array(array, confidences=None, dims=None):
    """Build a MaskStack from an H x W x n (or H x W) array.

    Empty slices are rejected; overlapping pixels between slices are only
    counted and reported as a warning.
    """
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ValidationError(f"mask stack must be 3-D, got shape {array.shape}")
    h, w, n = array.shape
    if dims is not None and tuple(dims) != (w, h):
        raise ValidationError(f"mask stack is {w}x{h}, declared dims are {dims[0]}x{dims[1]}")
    if confidences is None:
        confidences = [1.0] * n
    elif len(confidences) != n:
        raise ValidationError(f"{len(confidences)} confidences for {n} masks")
    nonzero = array != 0
    empty = [i for i in range(n) if not nonzero[:, :, i].any()]
    if empty:
        raise ValidationError(f"empty mask slices at index {empty}")
    overlap = int(np.count_nonzero(nonzero.sum(axis=2) > 1)) if n > 1 else 0
    if overlap:
        warnings.warn(f"{overlap} pixels belong to more than one mask", AnnotationWarning,
                      stacklevel=2)
    masks = [InstanceMask(w, h, nonzero[:, :, i], confidence=float(c))
             for i, c in enumerate(confidences)]
    return MaskStack(w, h, masks, overlap_pixels=overlap)


# ---------------------------------------------------------------------------
# run-length codec

def rle_runs(bits):
    """Alternating run lengths of a flattened bool array, starting with zeros."""
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def encode_rle(mask):
    """Serialise an InstanceMask (or 2-D array) as one RLE record, without trailing newline."""
    if isinstance(mask, InstanceMask):
        bits, w, h = mask.bits, mask.width, mask.height
    else:
        bits = np.asarray(mask) != 0
        h, w = bits.shape
    runs = rle_runs(bits)
    return f"{RLE_MAGIC} {w} {h}\n" + ",".join(str(r) for r in runs)


def _parse_header(line, lineno):
    parts = line.split()
    if len(parts) != 4 or " ".join(parts[:2]) != RLE_MAGIC:
        raise FormatError(f"line {lineno}: expected 'RLE v1 <width> <height>', got {line!r}")
    try:
        w, h = int(parts[2]), int(parts[3])
    except ValueError:
        raise FormatError(f"line {lineno}: non-integer dimensions in {line!r}") from None
    if w <= 0 or h <= 0:
        raise FormatError(f"line {lineno}: dimensions must be positive")
    return w, h


def _decode_runs(text, w, h, lineno):
    try:
        runs = [int(tok) for tok in text.split(",")]
    except ValueError:
        raise FormatError(f"line {lineno}: malformed run list") from None
    if any(r < 0 for r in runs):
        raise FormatError(f"line {lineno}: negative run length")
    if any(r == 0 for r in runs[1:]):
        raise FormatError(f"line {lineno}: only the leading run may be empty")
    if sum(runs) != w * h:
        raise FormatError(
            f"line {lineno}: runs sum to {sum(runs)}, expected {w}x{h} = {w * h}")
    values = np.repeat(np.arange(len(runs)) % 2 == 1, runs)
    return values.reshape(h, w)


def decode_rle_array(text):
    """Decode RLE records into a list of (height, width) bool arrays (empty masks allowed)."""
    lines = [ln.strip() for ln in text.splitlines()]
    out = []
    i = 0
    while i < len(lines):
        if not lines[i]:
            i += 1
            continue
        w, h = _parse_header(lines[i], i + 1)
        if i + 1 >= len(lines):
            raise FormatError(f"line {i + 1}: RLE header without run line")
        out.append(_decode_runs(lines[i + 1], w, h, i + 2))
        i += 2
    return out


def decode_rle(text, confidence=1.0):
    """Decode exactly one RLE record into an InstanceMask."""
    arrays = decode_rle_array(text)
    if len(arrays) != 1:
        raise FormatError(f"expected one RLE record, found {len(arrays)}")
    return InstanceMask.from_array(arrays[0], confidence=confidence)


def encode_rle_stack(stack):
    return "".join(encode_rle(m) + "\n" for m in stack)


# ---------------------------------------------------------------------------
# npy / npz

def _read_npy(data):
    if not data.startswith(NPY_MAGIC):
        raise FormatError("missing NPY magic bytes")
    fp = io.BytesIO(data)
    try:
        version = np.lib.format.read_magic(fp)
        if version == (1, 0):
            shape, fortran, dtype = np.lib.format.read_array_header_1_0(fp)
        elif version == (2, 0):
            shape, fortran, dtype = np.lib.format.read_array_header_2_0(fp)
        else:
            raise FormatError(f"unsupported NPY version {version}")
    except ValueError as exc:
        raise FormatError(f"bad NPY header: {exc}") from None
    if fortran:
        raise FormatError("Fortran-ordered arrays are not accepted")
    if dtype not in (np.dtype(bool), np.dtype(np.uint8)):
        raise FormatError(f"mask dtype must be bool or uint8, got {dtype}")
    count = int(np.prod(shape)) if shape else 1
    payload = data[fp.tell():]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"NPY payload has {len(payload)} bytes, header promises {count}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def _read_npz(data):
    try:
        archive = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile:
        raise FormatError("not a zip archive") from None
    with archive:
        members = [n for n in archive.namelist() if n.endswith(".npy")]
        if len(members) != 1:
            raise FormatError(f"NPZ must hold exactly one array, found {len(members)}")
        return _read_npy(archive.read(members[0]))


def npy_bytes(array):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def load_mask_stack(data, fmt, dims=None, confidences=None):
    """Decode a mask stack from raw bytes in one of ``FORMATS``.

    ``dims`` is the expected ``(width, height)``; a mismatch is a
    ValidationError.
    """
    if fmt == "npy":
        array = _read_npy(data)
    elif fmt == "npz":
        array = _read_npz(data)
    elif fmt == "rle":
        try:
            text = data.decode("utf-8") if isinstance(data, bytes) else data
        except UnicodeDecodeError:
            raise FormatError("RLE data is not UTF-8") from None
        arrays = decode_rle_array(text)
        if not arrays:
            raise FormatError("no RLE records found")
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ValidationError(f"RLE records disagree on dimensions: {sorted(shapes)}")
        array = np.stack(arrays, axis=2)
    else:
        raise FormatError(f"unknown mask format {fmt!r}")
    return stack_from_array(array, confidences=confidences, dims=dims)


def read_mask_file(path, dims=None, confidences=None):
    """Load a stack from disk, picking the format from the file suffix."""
    fmt = str(path).rsplit(".", 1)[-1].lower()
    with open(path, "rb") as fh:
        data = fh.read()
    return load_mask_stack(data, fmt, dims=dims, confidences=confidences)
