"""Grape cluster counting by 3-D association, plus detection/segmentation evaluation."""
__version__ = "0.1.0"

from .association import (FrameDetections, TrackGraph, TrackSet, build_graph,
                          count_and_annotate, extract_tracks, filter_edges, track_clusters)
from .dataset import BoundingBox, DatasetIndex, load_dataset_index, parse_yolo_boxes
from .masks import InstanceMask, MaskStack, decode_rle, encode_rle, load_mask_stack
from .metrics import (ConfusionCounts, EvalReport, PRF, average_precision, confusion_semantic,
                      evaluate_dataset, iou, match_instances, prf1)
from .sfm import (SparseModel, observations_by_image, parse_sparse_model, reproject_point,
                  serialize_sparse_model)
