"""Command line entry point: ``grapetrack {eval,track,synth,scribble,validate}``.

Exit codes: 0 success, 2 bad input, 1 internal error.  Results go to
stdout, diagnostics to stderr.  Options may also come from a ``--config``
file of ``key = value`` lines (keys are long option names); command line
flags take precedence over it.
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .association import (DEFAULT_MIN_CONFIDENCE, DEFAULT_MIN_EDGES, labels_csv,
                          read_manifest, track_clusters, tracks_json)
from .dataset import (DIMS_SIDECAR, MASK_SUFFIXES, VARIETIES, load_dataset_index,
                      load_image_dims, parse_yolo_boxes)
from .errors import GrapeTrackError, ValidationError
from .masks import encode_rle, read_mask_file
from .metrics import TASKS, evaluate_dataset
from .ppm import read_pnm, write_ppm
from .scribble import DEFAULT_H_MIN, DEFAULT_LAMBDA, parse_scribbles, segment_crop
from .sfm import read_model_dir
from .synth import SceneConfig, export_scene, generate_scene, perturb_detections

DEFAULT_IOUS = "0.3,0.4,0.5,0.6,0.7,0.8,0.9"


def _float_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None
    if any(b <= a for a, b in zip(values, values[1:])):
        raise argparse.ArgumentTypeError("IoU thresholds must be sorted ascending")
    return values


def _window(text):
    if str(text).lower() in ("none", "unbounded", "inf", ""):
        return None
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("window must be a positive integer")
    return value


REQUIRED = {
    "eval": ("gt", "pred"),
    "track": ("model_dir", "detections"),
    "scribble": ("crop", "scribbles"),
    "validate": ("gt",),
}


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# eval

def _find_mask_file(directory, image_id):
    for suffix in MASK_SUFFIXES:
        path = directory / f"{image_id}{suffix}"
        if path.exists():
            return path
    return None


def _load_image_set(directory, task, dims, scored):
    """Map image id -> list of BoundingBox (boxes task) or InstanceMask."""
    out = {}
    for box_file in sorted(directory.glob("*.txt")):
        image_id = box_file.stem
        boxes = parse_yolo_boxes(box_file.read_text(encoding="utf-8"), dims.get(image_id))
        if task == "boxes":
            out[image_id] = boxes
            continue
        mask_file = _find_mask_file(directory, image_id)
        if mask_file is None:
            continue
        if not boxes:
            out[image_id] = []
            continue
        confidences = [b.confidence for b in boxes] if scored else None
        out[image_id] = list(read_mask_file(mask_file, dims.get(image_id), confidences))
    return out


def run_eval(args):
    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    for d in (gt_dir, pred_dir):
        if not d.is_dir():
            raise ValidationError(f"not a directory: {d}")
    dims = load_image_dims(gt_dir / DIMS_SIDECAR) if (gt_dir / DIMS_SIDECAR).exists() else {}
    gt = _load_image_set(gt_dir, args.task, dims, scored=False)
    if not gt:
        raise ValidationError(f"no ground truth for task {args.task!r} in {gt_dir}")
    pred = {k: v for k, v in _load_image_set(pred_dir, args.task, dims, scored=True).items()
            if k in gt}
    report = evaluate_dataset(pred, gt, args.task, args.iou, args.conf, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / f"eval_{args.task}.json", report.to_json())
    _write(out / f"eval_{args.task}.csv", report.to_csv())
    sys.stdout.write(report.to_csv())
    return 0


# ---------------------------------------------------------------------------
# track

def run_track(args):
    model = read_model_dir(args.model_dir)
    frames = read_manifest(args.detections)
    result = track_clusters(model, frames, min_edges=args.min_edges, window=args.window,
                            projection=args.projection, min_confidence=args.conf,
                            workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "tracks.json", tracks_json(result, frames))
    _write(out / "labels.csv", labels_csv(result.labels))
    print(f"count={result.count}")
    return 0


# ---------------------------------------------------------------------------
# synth

def run_synth(args):
    cfg = SceneConfig(n_clusters=args.clusters, n_frames=args.frames,
                      points_per_cluster=args.points, width=args.width, height=args.height,
                      camera_step=args.step, dropout_p=args.dropout,
                      occlusion_p=args.occlusion, seed=args.seed)
    scene = generate_scene(cfg)
    manifest = perturb_detections(scene, args.jitter, args.seed) if args.jitter else None
    out = export_scene(scene, args.out, manifest=manifest, min_edges=args.min_edges)
    truth = json.loads((out / "truth.json").read_text(encoding="utf-8"))
    print(f"frames={cfg.n_frames} clusters={cfg.n_clusters} "
          f"expected_count={truth['expected_count']}")
    return 0


# ---------------------------------------------------------------------------
# scribble

def run_scribble(args):
    with open(args.crop, "rb") as fh:
        crop = read_pnm(fh.read())
    with open(args.scribbles, encoding="utf-8") as fh:
        scribbles = parse_scribbles(fh.read())
    bbox = None
    if args.bbox:
        bbox = [int(v) for v in args.bbox.split(",")]
        if len(bbox) != 4:
            raise ValidationError("--bbox takes x,y,w,h")
    mask = segment_crop(crop, scribbles, h_min=args.h_min, lambda_spatial=args.lambda_spatial,
                        bbox=bbox)
    out = Path(args.out)
    if out.suffix != ".rle":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "mask.rle"
    _write(out, encode_rle(mask) + "\n")
    if args.overlay:
        rgb = np.repeat(crop[:, :, None], 3, axis=2) if crop.ndim == 2 else crop.copy()
        rgb[mask.bits] = (rgb[mask.bits] // 2 + np.array([127, 0, 0])).astype(np.uint8)
        with open(args.overlay, "wb") as fh:
            fh.write(write_ppm(rgb))
    print(f"pixels={mask.area}")
    return 0


# ---------------------------------------------------------------------------
# validate

def _split_texts(root, splits):
    if splits:
        pairs = [item.split("=", 1) for item in splits.split(",")]
        return {name: Path(path).read_text(encoding="utf-8") for name, path in pairs}
    texts = {}
    for name in ("train", "test"):
        for base in (root, root.parent):
            path = base / f"{name}.txt"
            if path.exists():
                texts[name] = path.read_text(encoding="utf-8")
                break
    return texts


def run_validate(args):
    root = Path(args.gt)
    if not root.is_dir():
        raise ValidationError(f"not a directory: {root}")
    data_dir = root / "data" if (root / "data").is_dir() else root
    index = load_dataset_index(data_dir, _split_texts(data_dir, args.splits))
    stats = {}
    for entry in index.entries:
        row = stats.setdefault(entry.variety_prefix, [0, 0, 0])
        row[0] += 1
        n_boxes = 0
        if entry.has_boxes:
            text = (data_dir / f"{entry.image_id}.txt").read_text(encoding="utf-8")
            n_boxes = len(parse_yolo_boxes(text, index.image_dims.get(entry.image_id)))
            row[1] += n_boxes
        if entry.has_masks:
            stack = read_mask_file(_find_mask_file(data_dir, entry.image_id),
                                   index.image_dims.get(entry.image_id))
            if len(stack) != n_boxes:
                raise ValidationError(
                    f"{entry.image_id}: {len(stack)} masks but {n_boxes} boxes")
            row[2] += len(stack)
    print(f"{'Prefix':<8}{'Variety':<22}{'Images':>8}{'Boxed clusters':>16}"
          f"{'Masked clusters':>17}")
    total = [0, 0, 0]
    for prefix, row in sorted(stats.items()):
        print(f"{prefix:<8}{VARIETIES.get(prefix, '?'):<22}{row[0]:>8}{row[1]:>16}{row[2]:>17}")
        total = [a + b for a, b in zip(total, row)]
    print(f"{'Total':<8}{'':<22}{total[0]:>8}{total[1]:>16}{total[2]:>17}")
    for split, n in index.split_counts().items():
        print(f"split {split}: {n}")
    return 0


# ---------------------------------------------------------------------------

def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def build_parser():
    parser = argparse.ArgumentParser(prog="grapetrack", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value defaults file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p)
    p.add_argument("--gt")
    p.add_argument("--pred")
    p.add_argument("--task", choices=TASKS, default="instances")
    p.add_argument("--iou", type=_float_list, default=_float_list(DEFAULT_IOUS))
    p.add_argument("--conf", type=float, default=0.9)
    p.set_defaults(func=run_eval)

    p = sub.add_parser("track", help="count clusters across keyframes")
    common(p)
    p.add_argument("--model-dir")
    p.add_argument("--detections")
    p.add_argument("--min-edges", type=int, default=DEFAULT_MIN_EDGES)
    p.add_argument("--window", type=_window, default=None)
    p.add_argument("--projection", choices=("observed", "reprojected"), default="observed")
    p.add_argument("--conf", type=float, default=DEFAULT_MIN_CONFIDENCE)
    p.set_defaults(func=run_track)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clusters", type=int, default=9)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--points", type=int, default=12)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--step", type=float, default=0.25)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--occlusion", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--min-edges", type=int, default=DEFAULT_MIN_EDGES)
    p.set_defaults(func=run_synth)

    p = sub.add_parser("scribble", help="segment a crop from scribbles")
    common(p)
    p.add_argument("--crop", help="P6/P5 crop")
    p.add_argument("--scribbles", help="scribble JSON")
    p.add_argument("--bbox", help="x,y,w,h clip box in crop pixels")
    p.add_argument("--h-min", type=float, default=DEFAULT_H_MIN)
    p.add_argument("--lambda", dest="lambda_spatial", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--overlay", help="write a PPM overlay here")
    p.set_defaults(func=run_scribble)

    p = sub.add_parser("validate", help="check a dataset directory and print statistics")
    common(p)
    p.add_argument("--gt", help="dataset root")
    p.add_argument("--splits", help="name=path,... (default: train.txt/test.txt)")
    p.set_defaults(func=run_validate)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        config = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(config) - set(known))
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        # run the values through each option's type, then let flags override them
        sub.set_defaults(**{k: (known[k].type(v) if known[k].type else v)
                            for k, v in config.items()})
        args = parser.parse_args(argv)
    missing = [f"--{n.replace('_', '-')}" for n in REQUIRED.get(args.command, ())
               if getattr(args, n) is None]
    if missing:
        raise ValidationError(f"{args.command} needs {', '.join(missing)}")
    return args


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        return args.func(args)
    except (GrapeTrackError, OSError, ValueError, argparse.ArgumentTypeError) as exc:
        print(f"grapetrack: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover
        print(f"grapetrack: internal error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
