"""Coordinate plumbing: boxes, keypoints, and the image/grid projection."""

import numpy as np
import pytest

from maskdet import BBox, GridConfig, GridIndex, Keypoint
from maskdet.grid import center_of, clamp_box, grid_to_image, project_to_grid

CFG = GridConfig(height=64, width=64, stride=4, num_classes=2)


def test_bbox_properties():
    b = BBox(2.0, 3.0, 10.0, 9.0, 0)
    assert b.width == 8.0
    assert b.height == 6.0
    assert b.area == 48.0


def test_bbox_rejects_degenerate_and_bad_class():
    with pytest.raises(ValueError):
        BBox(5.0, 0.0, 5.0, 4.0, 0)
    with pytest.raises(ValueError):
        BBox(0.0, 4.0, 5.0, 4.0, 0)
    with pytest.raises(ValueError):
        BBox(0.0, 0.0, 5.0, 4.0, 2)
    with pytest.raises(ValueError):
        BBox(0.0, 0.0, np.inf, 4.0, 0)


def test_center_of_even_box_is_half_pixel():
    # centers of even-width boxes sit between pixels and stay exact
    assert center_of(BBox(8.0, 4.0, 16.0, 12.0, 0)) == Keypoint(12.0, 8.0)
    assert center_of(BBox(0.0, 0.0, 5.0, 5.0, 1)) == Keypoint(2.5, 2.5)


def test_projection_hand_cases():
    idx, off = project_to_grid(Keypoint(8.0, 4.0), CFG)
    assert idx == GridIndex(2, 1)
    assert off == (0.0, 0.0)

    idx, off = project_to_grid(Keypoint(10.0, 6.0), CFG)
    assert idx == GridIndex(2, 1)
    assert off == (0.5, 0.5)

    idx, off = project_to_grid(Keypoint(7.0, 5.0), CFG)
    assert idx == GridIndex(1, 1)
    assert off == (0.75, 0.25)


def test_grid_to_image_hand_cases():
    assert grid_to_image(GridIndex(2, 1), (0.5, 0.5), CFG) == Keypoint(10.0, 6.0)
    assert grid_to_image(GridIndex(0, 0), (0.0, 0.0), CFG) == Keypoint(0.0, 0.0)
    assert grid_to_image(GridIndex(3, 2), (0.25, 0.75), CFG) == Keypoint(13.0, 11.0)


def test_projection_round_trip_exact():
    rng = np.random.default_rng(7)
    for _ in range(300):
        p = Keypoint(float(rng.uniform(0, 63.999)), float(rng.uniform(0, 63.999)))
        idx, off = project_to_grid(p, CFG)
        assert 0.0 <= off[0] < 1.0 and 0.0 <= off[1] < 1.0
        assert 0 <= idx.i < CFG.grid_w and 0 <= idx.j < CFG.grid_h
        back = grid_to_image(idx, off, CFG)
        assert back.px == pytest.approx(p.px, abs=1e-12)
        assert back.py == pytest.approx(p.py, abs=1e-12)


def test_projection_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        project_to_grid(Keypoint(-0.5, 3.0), CFG)
    with pytest.raises(ValueError):
        project_to_grid(Keypoint(3.0, 64.0), CFG)
    with pytest.raises(ValueError):
        grid_to_image(GridIndex(16, 0), (0.0, 0.0), CFG)


def test_grid_config_validates_divisibility():
    with pytest.raises(ValueError):
        GridConfig(height=63, width=64, stride=4, num_classes=2)
    with pytest.raises(ValueError):
        GridConfig(height=64, width=64, stride=0, num_classes=2)


def test_clamp_box():
    c = clamp_box(BBox(-4.0, -2.0, 8.0, 6.0, 0), CFG)
    assert (c.x1, c.y1, c.x2, c.y2) == (0.0, 0.0, 8.0, 6.0)
    # fully outside collapses to nothing
    assert clamp_box(BBox(-10.0, -10.0, -1.0, -1.0, 0), CFG) is None
