import math

import numpy as np
import pytest

from grapetrack.errors import IntegrityError, ParseError, ValidationError
from grapetrack.sfm import (CameraIntrinsics, ImageRecord,
                            observations_by_image, parse_images, parse_points,
                            parse_sparse_model, read_model_dir, reproject_point,
                            reprojected_observations, serialize_sparse_model, write_model_dir)

from helpers import random_model


def test_point_line_by_hand():
    (pt,) = parse_points("7 1.0 2.0 3.0 128 128 128 0.5 1 0 2 3\n").values()
    assert pt.point_id == 7
    assert pt.xyz == (1.0, 2.0, 3.0)
    assert pt.rgb == (128, 128, 128)
    assert pt.error == 0.5
    assert pt.track == ((1, 0), (2, 3))


def test_untracked_observation_is_none():
    images = parse_images("1 1 0 0 0 0 0 0 1 a.jpg\n10.5 20.25 -1 3 4 7\n")
    assert images[1].observations == ((10.5, 20.25, None), (3.0, 4.0, 7))


def test_odd_image_lines():
    with pytest.raises(ParseError) as info:
        parse_images("# header\n1 1 0 0 0 0 0 0 1 a.jpg\n")
    assert info.value.line == 2


def test_non_unit_quaternion_rejected():
    with pytest.raises(ValidationError):
        parse_images("1 1 0 0 0.1 0 0 0 1 a.jpg\n\n")


def test_empty_points_line_allowed():
    images = parse_images("1 1 0 0 0 0 0 0 1 a.jpg\n\n")
    assert images[1].observations == ()


def test_dangling_track_reference():
    cams = "1 PINHOLE 100 100 50 50 50 50\n"
    imgs = "1 1 0 0 0 0 0 0 1 a.jpg\n1 1 7\n"
    with pytest.raises(IntegrityError):
        parse_sparse_model(cams, imgs, "7 0 0 1 0 0 0 0 1 0 2 0\n")
    with pytest.raises(IntegrityError):
        parse_sparse_model(cams, imgs, "")
    assert parse_sparse_model(cams, imgs, "7 0 0 1 0 0 0 0 1 0\n").points[7].track == ((1, 0),)


def test_round_trip_100_models():
    rng = np.random.default_rng(8)
    for _ in range(100):
        model = random_model(rng)
        texts = serialize_sparse_model(model)
        again = parse_sparse_model(*texts)
        assert again == model
        assert serialize_sparse_model(again) == texts


def test_model_dir_round_trip(tmp_path):
    model = random_model(np.random.default_rng(3))
    write_model_dir(model, tmp_path)
    assert read_model_dir(tmp_path) == model


def test_images_ordered_by_name():
    model = random_model(np.random.default_rng(5))
    names = [img.name for img in model.images.values()]
    assert names == sorted(names)


PINHOLE = CameraIntrinsics(1, "PINHOLE", 200, 100, (100.0, 50.0, 100.0, 50.0))
IDENTITY = ImageRecord(1, "a", (1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 1, ())


def test_reprojection_examples():
    assert reproject_point((0.0, 0.0, 2.0), IDENTITY, PINHOLE) == (100.0, 50.0)
    assert reproject_point((1.0, 1.0, 2.0), IDENTITY, PINHOLE) == (150.0, 75.0)
    assert reproject_point((0.0, 0.0, -1.0), IDENTITY, PINHOLE) is None
    # 90 degrees about z: camera x = -world y
    c = math.sqrt(0.5)
    rot = ImageRecord(2, "b", (c, 0.0, 0.0, c), (0.0, 0.0, 0.0), 1, ())
    x, y = reproject_point((0.0, 1.0, 1.0), rot, PINHOLE)
    assert x == pytest.approx(0.0, abs=1e-9)
    assert y == pytest.approx(50.0)
    radial = CameraIntrinsics(2, "SIMPLE_RADIAL", 200, 100, (100.0, 100.0, 50.0, 0.1))
    assert reproject_point((1.0, 0.0, 1.0), IDENTITY, radial) == pytest.approx((210.0, 50.0))


def test_reprojection_non_finite():
    with pytest.raises(ValueError):
        reproject_point((float("nan"), 0.0, 1.0), IDENTITY, PINHOLE)


def test_observation_lists():
    cams = "1 PINHOLE 200 100 100 50 100 50\n"
    imgs = ("1 1 0 0 0 0 0 0 1 a.jpg\n100 50 7 1 1 -1\n"
            "2 1 0 0 0 0 0 0 1 b.jpg\n3 3 -1\n")
    model = parse_sparse_model(cams, imgs, "7 0 0 2 0 0 0 0 1 0\n")
    assert observations_by_image(model) == {1: [(7, 100.0, 50.0)]}
    assert reprojected_observations(model) == {1: [(7, 100.0, 50.0)]}
