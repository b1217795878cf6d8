import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vtn.errors import BoundsError, ConfigError, ShapeError, TruncatedFileError, BadMagicError
from vtn.frontend import (ClipSpec, EmbeddingClip, FrameSequence, TableProvider, ToyEncoder,
                          embed_clip, enumerate_segments, frames_from_bytes, frames_to_bytes,
                          rgb_diff, sample_clip, stack_modalities, video_clips)


def video(num_frames=64, h=16, w=16, seed=0):
    r = np.random.default_rng(seed)
    return FrameSequence(r.integers(0, 256, size=(num_frames, 3, h, w), dtype=np.uint8))


@pytest.mark.parametrize("n, starts", [(100, [0, 32, 64]), (31, []), (64, [0, 32]), (0, [])])
def test_enumerate_segments(n, starts):
    segs = enumerate_segments(n)
    assert [s.segment_start for s in segs] == starts
    assert all(s.stride == 2 and s.clip_len == 16 and s.receptive_field == 32 for s in segs)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000))
def test_segments_disjoint_and_covering(n):
    segs = enumerate_segments(n)
    spans = [(s.segment_start, s.segment_start + s.receptive_field) for s in segs]
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert sum(e - s for s, e in spans) == (n // 32) * 32


def test_sample_clip_examples():
    assert sample_clip(64, ClipSpec(0)) == list(range(0, 31, 2))
    assert sample_clip(64, ClipSpec(32)) == list(range(32, 63, 2))
    assert sample_clip(10, ClipSpec(5, stride=1, clip_len=4)) == [5, 6, 7, 8]


def test_sample_clip_overrun():
    with pytest.raises(BoundsError):
        sample_clip(40, ClipSpec(32))


def test_rgb_diff_constant_video_is_zero():
    frames = FrameSequence(np.full((40, 3, 8, 8), 77, dtype=np.uint8))
    d = rgb_diff(frames, sample_clip(frames, ClipSpec(0)))
    assert d.shape == (16, 3, 8, 8)
    assert not d.any()


def test_rgb_diff_first_position():
    frames = video(70)
    first = rgb_diff(frames, sample_clip(frames, ClipSpec(0)))
    assert not first[0].any()
    second = rgb_diff(frames, sample_clip(frames, ClipSpec(32)))
    expected = frames.normalized([32]) - frames.normalized([30])
    np.testing.assert_array_equal(second[0], expected[0])
    assert second.shape[0] * second.shape[1] == 48  # 16 positions x 3 channels


def test_rgb_diff_interior_uses_stride_predecessor():
    frames = video(40)
    idx = sample_clip(frames, ClipSpec(0))
    d = rgb_diff(frames, idx)
    np.testing.assert_array_equal(d[5], (frames.normalized([10]) - frames.normalized([8]))[0])


def test_normalization_default():
    frames = FrameSequence(np.array([0, 255], dtype=np.uint8).reshape(2, 1, 1, 1).repeat(3, 1))
    np.testing.assert_allclose(frames.normalized([0, 1])[:, 0, 0, 0], [-1.0, 1.0])


def test_table_provider_passthrough_and_bijection():
    table = np.arange(64 * 4, dtype=np.float64).reshape(64, 4)
    clip = embed_clip(TableProvider(table), ClipSpec(32), label=3, expected_dim=4)
    np.testing.assert_array_equal(clip.embeddings, table[32:64:2])
    assert clip.label == 3
    rows = np.concatenate([embed_clip(TableProvider(table), s).embeddings
                           for s in enumerate_segments(64, stride=1, window=32)])
    np.testing.assert_array_equal(rows, table)


def test_embed_clip_dimension_mismatch():
    with pytest.raises(ConfigError):
        embed_clip(TableProvider(np.zeros((40, 4))), ClipSpec(0), expected_dim=8)


def test_toy_encoder_zero_input_and_determinism():
    enc = ToyEncoder(dim=6, seed=3)
    zero = np.zeros((1, 3, 16, 16))
    np.testing.assert_array_equal(enc.encode(zero)[0], np.tanh(enc.bias))
    frames = video(40)
    a = embed_clip(ToyEncoder(6, 3), ClipSpec(0), frames)
    b = embed_clip(ToyEncoder(6, 3), ClipSpec(0), frames)
    assert a.embeddings.shape == (16, 6)
    assert a.embeddings.tobytes() == b.embeddings.tobytes()


def test_toy_encoder_diff_modality_of_static_video():
    frames = FrameSequence(np.full((40, 3, 8, 8), 10, dtype=np.uint8))
    enc = ToyEncoder(5)
    clip = embed_clip(enc, ClipSpec(0), frames, modality="rgbdiff")
    np.testing.assert_allclose(clip.embeddings, np.tile(np.tanh(enc.bias), (16, 1)))
    assert clip.modality == "rgbdiff"


def test_stack_modalities():
    r = np.random.default_rng(0)
    rgb = EmbeddingClip(r.standard_normal((16, 512)), 1)
    diff = EmbeddingClip(np.zeros((16, 512)))
    s = stack_modalities(rgb, diff)
    assert s.embeddings.shape == (16, 1024) and s.modality == "stacked" and s.label == 1
    np.testing.assert_array_equal(s.embeddings[:, :512], rgb.embeddings)
    assert not s.embeddings[:, 512:].any()
    with pytest.raises(ShapeError):
        stack_modalities(rgb, EmbeddingClip(np.zeros((8, 512))))


def test_video_clips_sampling():
    emb = np.arange(70)[:, None].astype(float)
    clips = video_clips(emb)
    assert len(clips) == 2
    np.testing.assert_array_equal(clips[1][:, 0], np.arange(32, 64, 2))


def test_frame_container_roundtrip_and_errors():
    frames = video(3, 9, 11)
    buf = frames_to_bytes(frames)
    assert buf[:4] == b"VTNF"
    np.testing.assert_array_equal(frames_from_bytes(buf).pixels, frames.pixels)
    with pytest.raises(TruncatedFileError):
        frames_from_bytes(buf[:-1])
    with pytest.raises(BadMagicError):
        frames_from_bytes(b"XXXX" + buf[4:])
