"""Capture-style augmentation: parameter checks, exact warps, remapping."""

import json
import math

import numpy as np
import pytest

from docforge.augment import (
    AugmentError,
    AugmentationRecord,
    AugmentationSpec,
    BACKGROUND_TEXTURES,
    MAX_CORNER_JITTER_SIGMA,
    MAX_ROTATE_DEG,
    Transform,
    augment,
    default_spec,
    remap_bboxes,
)
from docforge.raster import Canvas, INK, PAPER

from oracles import project_points


def ink_page(w: int = 96, h: int = 64) -> Canvas:
    """A page with a recognizable ink pattern (no symmetry under rotation)."""
    canvas = Canvas.blank(w, h)
    canvas.buf[5:9, 8:30] = INK
    canvas.buf[20:44, 12:16] = INK
    canvas.buf[50:54, 40:80] = 128
    return canvas


def spec_of(*transforms: Transform) -> AugmentationSpec:
    return AugmentationSpec(tuple(transforms))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def test_unknown_transform_rejected():
    with pytest.raises(AugmentError, match="unknown transform"):
        spec_of(Transform("sharpen", {})).validate()


def test_rotate_range_capped():
    with pytest.raises(AugmentError, match="exceeds"):
        spec_of(Transform("rotate", {"angle": (-60, 60)})).validate()
    assert MAX_ROTATE_DEG == 45.0


def test_exact_right_angle_allowed():
    spec_of(Transform("rotate", {"angle": (90, 90)})).validate()
    spec_of(Transform("rotate", {"angle": (-90, -90)})).validate()
    with pytest.raises(AugmentError):
        spec_of(Transform("rotate", {"angle": (90, 91)})).validate()


def test_perspective_sigma_capped():
    with pytest.raises(AugmentError, match="corner jitter"):
        spec_of(Transform(
            "perspective",
            {"corner_jitter_sigma": MAX_CORNER_JITTER_SIGMA * 2})).validate()


def test_nonpositive_gain_and_gamma_rejected():
    with pytest.raises(AugmentError, match="> 0"):
        spec_of(Transform("illumination", {"gain": (0.0, 1.2)})).validate()
    with pytest.raises(AugmentError, match="> 0"):
        spec_of(Transform("exposure", {"gamma": (0.0, 1.0)})).validate()


def test_background_texture_and_scale_checked():
    with pytest.raises(AugmentError, match="texture"):
        spec_of(Transform("background", {"texture": "lava"})).validate()
    with pytest.raises(AugmentError, match="scale"):
        spec_of(Transform("background", {"page_scale": (0.5, 1.5)})).validate()
    assert "desk" in BACKGROUND_TEXTURES


def test_spec_dict_round_trip():
    spec = default_spec()
    again = AugmentationSpec.from_dict(spec.to_dict())
    assert again == spec
    with pytest.raises(AugmentError, match="name"):
        AugmentationSpec.from_dict({"transforms": [{"angle": 3}]})


# ---------------------------------------------------------------------------
# Identity behaviour
# ---------------------------------------------------------------------------

def test_empty_spec_is_identity():
    page = ink_page()
    out, record = augment(page, AugmentationSpec(), seed=5)
    assert np.array_equal(out.buf, page.buf)
    assert record.stages == []
    assert record.output_size == (page.width, page.height)
    pts = [(0.0, 0.0), (13.5, 40.25)]
    assert np.allclose(record.map_points(pts), pts)


def test_neutral_photometric_params_change_nothing():
    page = ink_page()
    spec = spec_of(
        Transform("illumination", {"gain": (1.0, 1.0), "direction": "diagonal"}),
        Transform("exposure", {"gamma": (1.0, 1.0)}),
    )
    out, record = augment(page, spec, seed=9)
    assert np.array_equal(out.buf, page.buf)
    assert record.stages == []
    assert [t["name"] for t in record.transforms] == ["illumination", "exposure"]


def test_input_canvas_not_mutated():
    page = ink_page()
    before = page.buf.copy()
    augment(page, default_spec(), seed=3)
    assert np.array_equal(page.buf, before)


# ---------------------------------------------------------------------------
# Rotation by an exact quarter turn
# ---------------------------------------------------------------------------

def test_rotate_90_swaps_size_and_matches_rot90():
    page = ink_page(96, 64)
    out, record = augment(page, spec_of(Transform("rotate", {"angle": (90, 90)})))
    assert (out.width, out.height) == (64, 96)
    assert np.array_equal(out.buf, np.rot90(page.buf, k=-1))


def test_rotate_90_pixel_map_is_exact():
    page = ink_page(96, 64)
    _, record = augment(page, spec_of(Transform("rotate", {"angle": (90, 90)})))
    xs = np.array([(0, 0), (95, 0), (40, 17), (95, 63)], dtype=float)
    mapped = record.map_pixels(xs)
    expected = np.array([(63 - y, x) for x, y in xs])
    assert np.allclose(mapped, expected, atol=1e-9)


def test_rotate_90_bbox_remap():
    page = ink_page(96, 64)
    _, record = augment(page, spec_of(Transform("rotate", {"angle": (90, 90)})))
    blocks = [{"block_id": "b0", "bbox": [10.0, 20.0, 30.0, 8.0]}]
    (new,) = remap_bboxes(blocks, record)
    # (x, y, w, h) -> (H - y - h, x, h, w) for a clockwise quarter turn
    assert np.allclose(new["bbox"], [64 - 20 - 8, 10, 8, 30], atol=1e-9)
    assert new["block_id"] == "b0"


def test_small_rotation_keeps_ink_amount_close():
    page = ink_page()
    dark_before = int((page.buf < 128).sum())
    out, _ = augment(page, spec_of(Transform("rotate", {"angle": (4, 4)})))
    dark_after = int((out.buf < 128).sum())
    assert dark_after == pytest.approx(dark_before, rel=0.15)


# ---------------------------------------------------------------------------
# Perspective
# ---------------------------------------------------------------------------

def test_perspective_stage_matches_direct_homography():
    page = ink_page(128, 96)
    spec = spec_of(Transform("perspective", {"corner_jitter_sigma": 0.04}))
    _, record = augment(page, spec, seed=11)
    (stage,) = record.stages
    assert stage["type"] == "homography"
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 96, size=(50, 2))
    assert np.allclose(record.map_points(pts),
                       project_points(stage["matrix"], pts), atol=1e-9)


def test_perspective_corners_land_in_output():
    page = ink_page(128, 96)
    spec = spec_of(Transform("perspective", {"corner_jitter_sigma": 0.05}))
    for seed in range(8):
        out, record = augment(page, spec, seed=seed)
        corners = [(0, 0), (128, 0), (128, 96), (0, 96)]
        mapped = record.map_points(corners)
        assert (mapped[:, 0] >= -1e-6).all()
        assert (mapped[:, 1] >= -1e-6).all()
        assert (mapped[:, 0] <= out.width + 1e-6).all()
        assert (mapped[:, 1] <= out.height + 1e-6).all()


# ---------------------------------------------------------------------------
# Non-rigid warps
# ---------------------------------------------------------------------------

def test_bend_forward_map_lands_on_ink():
    page = Canvas.blank(120, 80)
    page.buf[30:34, 20:24] = INK
    spec = spec_of(Transform("bend", {"amplitude": (3, 3),
                                      "wavelength": (50, 50), "axis": "y"}))
    out, record = augment(page, spec, seed=2)
    assert out.width == 120 and out.height == 80 + 2 * 3
    (cx,), (cy,) = record.map_pixels([(21.5, 31.5)]).T
    assert out.buf[round(cy), round(cx)] < 128


def test_bend_x_axis_pads_width():
    page = ink_page()
    spec = spec_of(Transform("bend", {"amplitude": (2, 2),
                                      "wavelength": (40, 40), "axis": "x"}))
    out, _ = augment(page, spec, seed=1)
    assert out.width == page.width + 4
    assert out.height == page.height


def test_wrinkle_keeps_size_and_pins_borders():
    page = ink_page()
    spec = spec_of(Transform("wrinkle", {"grid_n": 4,
                                         "displacement_sigma": (1.5, 1.5)}))
    out, record = augment(page, spec, seed=7)
    assert (out.width, out.height) == (page.width, page.height)
    corners = [(0.0, 0.0), (page.width, 0.0), (0.0, page.height)]
    assert np.allclose(record.map_points(corners), corners, atol=1e-9)
    interior = record.map_points([(48.0, 32.0)])
    assert np.isfinite(interior).all()


# ---------------------------------------------------------------------------
# Photometric
# ---------------------------------------------------------------------------

def test_gain_above_one_never_darkens():
    page = ink_page()
    spec = spec_of(Transform("illumination", {"gain": (1.0, 1.3),
                                              "direction": "horizontal"}))
    out, _ = augment(page, spec, seed=4)
    assert (out.buf.astype(int) >= page.buf.astype(int)).all()


def test_gamma_above_one_never_brightens():
    page = ink_page()
    out, _ = augment(page, spec_of(Transform("exposure", {"gamma": (1.4, 1.4)})))
    assert (out.buf.astype(int) <= page.buf.astype(int)).all()
    assert (out.buf < page.buf).any()


# ---------------------------------------------------------------------------
# Background compositing
# ---------------------------------------------------------------------------

def test_background_window_preserves_page():
    page = ink_page()
    spec = spec_of(Transform("background", {"texture": "wood",
                                            "page_scale": (0.8, 0.8)}))
    out, record = augment(page, spec, seed=6)
    assert out.width >= page.width and out.height >= page.height
    ox, oy = record.transforms[0]["params"]["offset"]
    window = out.buf[oy:oy + page.height, ox:ox + page.width]
    assert np.array_equal(window, page.buf)
    assert np.allclose(record.map_points([(0.0, 0.0)]), [(ox, oy)])


def test_background_runs_after_geometry_regardless_of_listing():
    page = ink_page()
    tr_bg = Transform("background", {"texture": "moire", "page_scale": (0.9, 0.9)})
    tr_rot = Transform("rotate", {"angle": (90, 90)})
    out_a, rec_a = augment(page, spec_of(tr_bg, tr_rot), seed=13)
    out_b, rec_b = augment(page, spec_of(tr_rot, tr_bg), seed=13)
    assert np.array_equal(out_a.buf, out_b.buf)
    assert rec_a.to_json() == rec_b.to_json()
    assert [t["name"] for t in rec_a.transforms] == ["rotate", "background"]


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

def test_record_json_round_trip():
    page = ink_page()
    _, record = augment(page, default_spec(), seed=21)
    again = AugmentationRecord.from_json(record.to_json())
    assert again.output_size == record.output_size
    pts = [(3.0, 4.0), (50.5, 60.25), (90.0, 10.0)]
    assert np.allclose(again.map_points(pts), record.map_points(pts))
    json.loads(record.to_json())


def test_augment_deterministic_per_seed():
    page = ink_page()
    spec = default_spec()
    out1, rec1 = augment(page, spec, seed=40)
    out2, rec2 = augment(page, spec, seed=40)
    out3, rec3 = augment(page, spec, seed=41)
    assert np.array_equal(out1.buf, out2.buf)
    assert rec1.to_json() == rec2.to_json()
    assert rec3.to_json() != rec1.to_json()


def test_default_spec_remaps_boxes_into_bounds():
    page = ink_page(200, 140)
    blocks = [{"block_id": f"b{i}", "bbox": [20.0 * i + 5, 10.0 * i + 5, 30.0, 12.0]}
              for i in range(4)]
    for seed in range(6):
        out, record = augment(page, default_spec(), seed=seed)
        for new in remap_bboxes(blocks, record):
            x, y, w, h = new["bbox"]
            assert 0 <= x <= x + w <= out.width + 1e-6
            assert 0 <= y <= y + h <= out.height + 1e-6
            assert w > 0 and h > 0


def test_rgb_canvas_supported():
    page = Canvas.blank(60, 40, channels=3)
    page.buf[10:20, 10:30] = (INK, INK, INK)
    spec = spec_of(
        Transform("rotate", {"angle": (90, 90)}),
        Transform("background", {"texture": "desk", "page_scale": (0.9, 0.9)}),
    )
    out, _ = augment(page, spec, seed=2)
    assert out.channels == 3
    assert out.buf.ndim == 3 and out.buf.shape[2] == 3
    assert PAPER in out.buf
