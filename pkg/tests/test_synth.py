import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afsn.labels import BBox
from afsn.synth import (
    ConfigError,
    SequenceConfig,
    SequenceFormatError,
    config_from_kv,
    config_to_text,
    decode_ppm,
    encode_ppm,
    generate_sequence,
    parse_kv,
    parse_ppm_header,
    read_sequence,
    sample_training_pair,
    write_sequence,
)
from afsn.tracker import Frame, crop_geometry, decode, resample

SMALL = SequenceConfig(frames=12, frame_size=(160, 120), target_size_range=(16, 28), seed=5)


def test_degenerate_config_gives_static_sequence():
    seq = generate_sequence(replace(SMALL, velocity_range=0.0, scale_drift=0.0, noise_sigma=0.0))
    assert all(f == seq.frames[0] for f in seq.frames)
    assert all(b == seq.truth[0] for b in seq.truth)


def test_same_seed_is_bit_identical():
    assert generate_sequence(SMALL) == generate_sequence(SMALL)
    assert generate_sequence(SMALL) != generate_sequence(replace(SMALL, seed=6))


def test_reference_sequence_bounds_hold():
    cfg = SequenceConfig(seed=11)
    seq = generate_sequence(cfg)
    assert len(seq) == 100
    W, H = cfg.frame_size
    for a, b in zip(seq.truth, seq.truth[1:]):
        assert math.hypot(b.cx - a.cx, b.cy - a.cy) <= cfg.velocity_range
        assert b.w / a.w <= 1 + cfg.scale_drift + 1e-2 and a.w / b.w <= 1 + cfg.scale_drift + 1e-2
    for b in seq.truth:
        assert b.x1 >= 0 and b.y1 >= 0 and b.x2 <= W and b.y2 <= H


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 6), st.floats(0, 0.1), st.integers(0, 3))
def test_generator_invariants(seed, vel, drift, distractors):
    cfg = SequenceConfig(frames=30, frame_size=(96, 80), target_size_range=(10, 30), velocity_range=vel,
                         scale_drift=drift, distractor_count=distractors, seed=seed)
    seq = generate_sequence(cfg)
    for a, b in zip(seq.truth, seq.truth[1:]):
        assert math.hypot(b.cx - a.cx, b.cy - a.cy) <= vel + 1e-12
        # quantizing the size to 1/256 px may add one quantum on top of the drift
        assert abs(math.log(b.w / a.w)) <= math.log1p(drift) + (1 / 256) / min(a.w, b.w) + 1e-12
    for b in seq.truth:
        assert b.x1 >= 0 and b.y1 >= 0 and b.x2 <= 96 and b.y2 <= 80
        assert 10 <= b.w <= 30 and 10 <= b.h <= 30


@pytest.mark.parametrize(
    "kwargs,match",
    [
        (dict(frames=0), "frames"),
        (dict(target_size_range=(20, 300)), "cannot fit"),
        (dict(scale_drift=0.2), "scale_drift"),
        (dict(noise_sigma=-1), "non-negative"),
        (dict(seed=-1), "unsigned"),
    ],
)
def test_config_validation(kwargs, match):
    with pytest.raises(ConfigError, match=match):
        replace(SMALL, **kwargs)


def test_config_text_round_trip():
    cfg = replace(SMALL, scale_drift=0.037, noise_sigma=2.5)
    assert config_from_kv(parse_kv(config_to_text(cfg))) == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key 'colour'"):
        config_from_kv({"colour": "red"})
    with pytest.raises(ConfigError, match="expected key=value"):
        parse_kv("frames 3")


def test_ppm_header_parse():
    w, h, maxval, offset = parse_ppm_header(b"P6\n8 4\n255\n" + bytes(96))
    assert (w, h, maxval, offset) == (8, 4, 255, 11)
    frame = decode_ppm(b"P6\n8 4\n255\n" + bytes(96))
    assert (frame.width, frame.height) == (8, 4)


def test_ppm_header_with_comment():
    frame = decode_ppm(b"P6 # made by hand\n2 1\n255\n" + bytes(range(6)))
    assert frame.pixels.ravel().tolist() == list(range(6))


@pytest.mark.parametrize(
    "blob,match",
    [
        (b"P5\n8 4\n255\n" + bytes(32), "not a binary PPM"),
        (b"P6\n8 4\n65535\n" + bytes(96), "unsupported"),
        (b"P6\n8 4\n255\n" + bytes(95), "expected 96 payload bytes"),
        (b"P6\n8", "truncated"),
    ],
)
def test_ppm_errors_name_the_file(blob, match):
    with pytest.raises(SequenceFormatError, match=f"f.ppm: .*{match}"):
        decode_ppm(blob, "f.ppm")


def test_ppm_round_trip():
    px = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    assert decode_ppm(encode_ppm(Frame.from_array(px))) == Frame.from_array(px)


def test_sequence_round_trip(tmp_path):
    seq = generate_sequence(SMALL)
    write_sequence(seq, tmp_path / "s")
    assert sorted(p.name for p in (tmp_path / "s").iterdir())[:2] == ["000000.ppm", "000001.ppm"]
    back = read_sequence(tmp_path / "s")
    assert back == seq
    assert [b.to_xywh() for b in back.truth] == [b.to_xywh() for b in seq.truth]


def test_sequence_count_mismatch_rejected(tmp_path):
    write_sequence(generate_sequence(SMALL), tmp_path)
    (tmp_path / "000011.ppm").unlink()
    with pytest.raises(SequenceFormatError, match="groundtruth.txt: 12 annotations but 11 frames"):
        read_sequence(tmp_path)


def test_missing_groundtruth_rejected(tmp_path):
    with pytest.raises(FileNotFoundError, match="groundtruth.txt"):
        read_sequence(tmp_path)


@pytest.fixture(scope="module")
def reference_seq():
    return generate_sequence(SequenceConfig(frames=60, seed=3))


def test_pair_without_jitter_is_centered(reference_seq):
    pair = sample_training_pair(reference_seq, np.random.default_rng(0), frames=(4, 4), jitter=(0.0, 0.0))
    assert pair.exemplar.shape == (3, 127, 127) and pair.instance.shape == (3, 255, 255)
    assert pair.targets.center_cell == (8, 8)
    # the target sits at patch 127.5, i.e. map position 64 + 0.0
    assert pair.targets.offset_target == pytest.approx((0.0, 0.0), abs=1e-12)


def test_pair_jitter_displaces_peak(reference_seq):
    pair = sample_training_pair(reference_seq, np.random.default_rng(0), frames=(4, 9), jitter=(16.0, 8.0))
    assert pair.targets.center_cell == (10, 9)
    label = pair.targets.score_label[0]
    assert divmod(int(np.argmax(label)), 17) == (9, 10)


@pytest.mark.slow
def test_sampler_draws_valid_pairs(reference_seq):
    rng = np.random.default_rng(7)
    for _ in range(1000):
        pair = sample_training_pair(reference_seq, rng)
        t = pair.targets
        assert t.score_label.shape == (1, 17, 17)
        assert (t.score_label == 1.0).sum() == 1
        assert 0 <= t.offset_target[0] < 1 and 0 <= t.offset_target[1] < 1
        cx, cy = t.center_cell
        assert t.score_label[0, cy, cx] == 1.0


def test_pair_targets_decode_to_truth(reference_seq):
    rng = np.random.default_rng(5)
    for _ in range(50):
        pair = sample_training_pair(reference_seq, rng)
        t = pair.targets
        score = np.where(t.score_label == 1.0, 1 - 1e-6, 1e-6)
        off = np.broadcast_to(np.asarray(t.offset_target)[:, None, None], (2, 17, 17))
        size = np.broadcast_to(np.asarray(t.scale_target)[:, None, None], (2, 17, 17))
        geom = pair.instance_crop
        box = decode(score, off, size, 8, geom.crop_scale, geom.map_origin_frame(63.5))
        assert abs(box.cx - pair.truth.cx) < 1e-9 and abs(box.cy - pair.truth.cy) < 1e-9
        assert abs(box.w - pair.truth.w) < 1e-9 and abs(box.h - pair.truth.h) < 1e-9


def test_zero_gap_pairs_share_a_frame(reference_seq):
    rng = np.random.default_rng(1)
    for _ in range(20):
        pair = sample_training_pair(reference_seq, rng, max_gap=0)
        j = next(k for k, b in enumerate(reference_seq.truth) if b is pair.truth)
        expect = resample(reference_seq.frames[j], crop_geometry(pair.truth, 127))
        np.testing.assert_array_equal(pair.exemplar.data, expect)


def test_pair_needs_two_frames():
    seq = generate_sequence(replace(SMALL, frames=1))
    with pytest.raises(ValueError, match="at least 2"):
        sample_training_pair(seq, np.random.default_rng(0))
