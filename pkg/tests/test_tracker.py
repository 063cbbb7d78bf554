import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afsn.backbone import reference_spec
from afsn.labels import BBox, HeadOutput, make_targets
from afsn.model import build_model
from afsn.tensor import Tensor
from afsn.tracker import (
    CropGeometry,
    Frame,
    OracleModel,
    TrackerConfig,
    apply_hanning,
    context_side,
    crop_geometry,
    crop_region,
    decode,
    hanning_window,
    init,
    read_results,
    track_sequence,
    track_step,
    write_results,
)


def _frame(value=(90, 120, 150), w=320, h=240):
    return Frame.from_array(np.broadcast_to(np.array(value, np.uint8), (h, w, 3)).copy())


def _rect_frame(box, w=320, h=240, bg=40, fg=220):
    px = np.full((h, w, 3), bg, np.uint8)
    px[int(box.y1):int(box.y2), int(box.x1):int(box.x2)] = fg
    return Frame.from_array(px)


def test_frame_validation():
    with pytest.raises(ValueError, match="uint8"):
        Frame(2, 2, np.zeros((2, 2, 3)))
    with pytest.raises(ValueError, match="expected 12"):
        Frame(2, 2, np.zeros(11, np.uint8))
    assert Frame(2, 1, np.arange(6, dtype=np.uint8)).pixels.shape == (1, 2, 3)


@pytest.mark.parametrize("w,h,side", [(100, 100, 200.0), (64, 32, math.sqrt(8960))])
def test_context_side(w, h, side):
    assert context_side(w, h) == pytest.approx(side, abs=1e-12)


def test_instance_side_scales_by_patch_ratio():
    box = BBox(100, 100, 64, 32)
    z = crop_geometry(box, 127)
    x = crop_geometry(box, 255)
    assert x.side / z.side == pytest.approx(255 / 127)
    assert z.crop_scale == pytest.approx(x.crop_scale)
    assert z.crop_scale == pytest.approx(127 / math.sqrt(8960))


def test_crop_of_uniform_frame_is_uniform():
    patch, scale = crop_region(_frame(), BBox(160, 120, 40, 30), 127)
    assert patch.shape == (3, 127, 127)
    np.testing.assert_allclose(patch.data[:, 0, 0], [90, 120, 150])
    assert np.ptp(patch.data, axis=(1, 2)).max() < 1e-9
    assert scale == pytest.approx(127 / context_side(40, 30))


def test_crop_outside_frame_uses_mean_color():
    px = np.zeros((40, 40, 3), np.uint8)
    px[:, 20:] = 200
    frame = Frame.from_array(px)
    patch, _ = crop_region(frame, BBox(2, 20, 20, 20), 127, center=(-500.0, 20.0))
    np.testing.assert_allclose(patch.data, 100.0)


def test_crop_with_unit_scale_copies_pixels():
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, size=(60, 80, 3), dtype=np.uint8)
    frame = Frame.from_array(px)
    geom = CropGeometry((40.0, 30.0), 20.0, 20)
    from afsn.tracker import resample

    patch = resample(frame, geom)
    np.testing.assert_array_equal(patch, px[20:40, 30:50].transpose(2, 0, 1))


@settings(max_examples=30, deadline=None)
@given(st.floats(12, 60), st.floats(12, 60), st.floats(100, 220), st.floats(80, 160))
def test_crop_preserves_rectangle_size(w, h, cx, cy):
    box = BBox(cx, cy, w, h)
    frame = _rect_frame(box)
    patch, scale = crop_region(frame, box, 127)
    lum = patch.data.mean(axis=0)
    mask = lum > 130
    cols = np.nonzero(mask.any(axis=0))[0]
    rows = np.nonzero(mask.any(axis=1))[0]
    drawn_w = int(box.x2) - int(box.x1)
    drawn_h = int(box.y2) - int(box.y1)
    assert abs((cols.max() - cols.min() + 1) - drawn_w * scale) <= 1.0 + scale
    assert abs((rows.max() - rows.min() + 1) - drawn_h * scale) <= 1.0 + scale


def test_patch_frame_mapping_round_trip():
    geom = crop_geometry(BBox(100.3, 80.7, 33, 21), 255)
    p = (17.25, 240.5)
    back = geom.patch_to_frame(geom.frame_to_patch(p))
    assert back == pytest.approx(p, abs=1e-12)
    assert geom.frame_to_patch(geom.center) == (127.5, 127.5)


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        crop_region(_frame(), BBox(10, 10, 0, 5), 127)


def test_hanning_blend():
    s = np.random.default_rng(1).uniform(size=(1, 17, 17))
    np.testing.assert_array_equal(apply_hanning(s, 0.0), s)
    np.testing.assert_allclose(apply_hanning(s, 1.0)[0], hanning_window(17), atol=1e-15)
    w = hanning_window(17)
    assert w[8, 8] == 1.0 and w[0, 0] == 0.0
    with pytest.raises(ValueError):
        apply_hanning(s, 1.5)


@pytest.mark.parametrize("gamma", [0.5, 0.01, 1.0])
def test_hanning_uniform_score_peaks_at_center(gamma):
    blended = apply_hanning(np.full((1, 17, 17), 0.4), gamma)
    assert divmod(int(np.argmax(blended)), 17) == (8, 8)


def test_decode_examples():
    score = np.zeros((1, 17, 17))
    score[0, 8, 8] = 1.0
    offset = np.zeros((2, 17, 17))
    size = np.zeros((2, 17, 17))
    size[0], size[1] = math.log(40), math.log(30)
    box = decode(score, offset, size, 8)
    assert (box.cx, box.cy) == (64.0, 64.0)
    assert box.w == pytest.approx(40) and box.h == pytest.approx(30)


def test_decode_ties_break_row_major():
    score = np.zeros((1, 5, 5))
    score[0, 3, 1] = score[0, 1, 4] = score[0, 1, 2] = 1.0
    box = decode(score, np.zeros((2, 5, 5)), np.zeros((2, 5, 5)), 8)
    assert (box.cx, box.cy) == (16.0, 8.0)


def _oracle_outputs(box, m=17, stride=8):
    t = make_targets(box, m, stride)
    score = np.where(t.score_label == 1.0, 1 - 1e-6, 1e-6)
    off = np.broadcast_to(np.asarray(t.offset_target)[:, None, None], (2, m, m))
    size = np.broadcast_to(np.asarray(t.scale_target)[:, None, None], (2, m, m))
    return score, off, size


@settings(max_examples=300)
@given(st.floats(0, 135.99), st.floats(0, 135.99), st.floats(2, 200), st.floats(2, 200))
def test_encode_decode_identity(cx, cy, w, h):
    box = BBox(cx, cy, w, h)
    got = decode(*_oracle_outputs(box), 8)
    assert abs(got.cx - cx) < 1e-9 and abs(got.cy - cy) < 1e-9
    assert abs(got.w - w) < 1e-9 * w and abs(got.h - h) < 1e-9 * h


@settings(max_examples=100)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20))
def test_decoded_size_positive(a, b, c, d):
    score = np.zeros((1, 3, 3))
    size = np.zeros((2, 3, 3))
    size[0, 0, 0], size[1, 0, 0] = a, b
    box = decode(score, np.full((2, 3, 3), c), size, 8, crop_scale=math.exp(d / 10))
    assert box.w > 0 and box.h > 0


def test_map_origin_centres_cell_zero_on_exemplar_footprint():
    model = build_model(reference_spec(), 0)
    a = model.analysis
    footprint = (a.exemplar_feature - 1) * a.total_stride + a.receptive_field
    assert footprint == 127 and model.map_origin == 63.5
    # the instance center lands on map position 64, the middle cell
    assert (127.5 - model.map_origin) / model.stride == 8.0


def _moving_sequence(n, step, box0):
    frames, truth = [], []
    for k in range(n):
        b = BBox(box0.cx + step * k, box0.cy, box0.w, box0.h)
        truth.append(b)
        frames.append(_rect_frame(b))
    return frames, truth


def test_static_scene_oracle_holds_box():
    box = BBox(150.5, 110.25, 36, 28)
    frames, truth = _moving_sequence(100, 0.0, box)
    boxes = track_sequence(frames, box, OracleModel(truth))
    assert len(boxes) == 100
    for b in boxes:
        assert abs(b.cx - box.cx) < 1 and abs(b.cy - box.cy) < 1
        assert abs(b.w - box.w) < 1 and abs(b.h - box.h) < 1


def test_translating_target_oracle_error_below_one_pixel():
    box = BBox(60.0, 120.0, 30, 30)
    frames, truth = _moving_sequence(80, 2.0, box)
    boxes = track_sequence(frames, box, OracleModel(truth))
    errs = [math.hypot(b.cx - t.cx, b.cy - t.cy) for b, t in zip(boxes, truth)]
    assert max(errs) < 1.0


def test_one_instance_forward_per_frame():
    model = build_model(reference_spec(), 0)
    box = BBox(160, 120, 40, 40)
    frame = _rect_frame(box)
    state = init(frame, box, model)
    assert state.current_bbox == box
    assert model.exemplar_forwards == 1 and model.instance_forwards == 0
    feats = state.exemplar_features.data.copy()
    assert feats.shape == (256, model.analysis.exemplar_feature, model.analysis.exemplar_feature)
    for k in range(3):
        track_step(state, frame)
        assert model.instance_forwards == k + 1
    assert model.exemplar_forwards == 1
    np.testing.assert_array_equal(state.exemplar_features.data, feats)


def test_init_is_deterministic():
    box = BBox(100, 100, 30, 40)
    frame = _rect_frame(box)
    a = init(frame, box, build_model(reference_spec(), 3)).exemplar_features
    b = init(frame, box, build_model(reference_spec(), 3)).exemplar_features
    assert a.data.tobytes() == b.data.tobytes()


class _TinyBoxModel(OracleModel):
    def respond(self, exemplar_feat, patch, crop):
        out = super().respond(exemplar_feat, patch, crop)
        return HeadOutput(out.score, out.offset, Tensor(np.full((2, 17, 17), math.log(0.01))))


def test_tiny_decoded_size_is_clamped_with_warning():
    box = BBox(100, 100, 30, 30)
    frames, truth = _moving_sequence(2, 0.0, box)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        boxes = track_sequence(frames, box, _TinyBoxModel(truth))
    assert boxes[1].w == 2.0 and boxes[1].h == 2.0
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


def test_tracker_config_validates_gamma():
    with pytest.raises(ValueError):
        TrackerConfig(-0.1)


def test_results_round_trip(tmp_path):
    boxes = [BBox(1.5, 2.25, 3.0, 4.125), BBox(100.123456, 5, 6, 7)]
    path = tmp_path / "r.txt"
    write_results(path, boxes)
    assert path.read_text().splitlines()[0] == "0 1.500000 2.250000 3.000000 4.125000"
    back = read_results(path)
    assert all(abs(a.cx - b.cx) < 1e-6 and abs(a.w - b.w) < 1e-6 for a, b in zip(back, boxes))
    path.write_text("0 1 2 3\n")
    with pytest.raises(ValueError, match="expected"):
        read_results(path)
