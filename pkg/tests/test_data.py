"""Synthetic dataset generation, augmentation, and clip persistence."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actionvae import data as ds
from actionvae.autodiff import DimensionError, ParameterError
from actionvae.data import ClipFormatError, SynthConfig, VideoClip


def small_cfg(**kw):
    base = dict(n_classes=6, clips_per_class=4, frame_dims=(12, 24, 24),
                key_frame_fraction=0.5, noise_std=0.02, seed=7)
    base.update(kw)
    return SynthConfig(**base)


def quadrant_stats(frames):
    """Trivial per-frame statistics probe: 3x3 grid cell means over time."""
    t, h, w, _ = frames.shape
    gray = frames.mean(axis=-1)
    ys = [0, h // 3, 2 * h // 3, h]
    xs = [0, w // 3, 2 * w // 3, w]
    feats = [gray[:, ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(1, 2))
             for i in range(3) for j in range(3)]
    return np.concatenate(feats)


def aspect_probe(frames):
    """Cue-aware probe: intensity-weighted second moments of each frame."""
    gray = frames.mean(axis=-1)
    t, h, w = gray.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    vals = []
    for i in range(t):
        m = gray[i] / max(gray[i].sum(), 1e-9)
        mx, my = (m * xx).sum(), (m * yy).sum()
        sx = (m * (xx - mx) ** 2).sum()
        sy = (m * (yy - my) ** 2).sum()
        vals.append(np.log(max(sx, 1e-9) / max(sy, 1e-9)))
    return np.array([np.mean(vals)])


def nearest_centroid_accuracy(train, test, featurize):
    feats = {}
    for clip in train:
        feats.setdefault(clip.label, []).append(featurize(clip.frames))
    centroids = {k: np.mean(v, axis=0) for k, v in feats.items()}
    hits = 0
    for clip in test:
        f = featurize(clip.frames)
        pred = min(centroids, key=lambda k: np.linalg.norm(centroids[k] - f))
        hits += pred == clip.label
    return hits / len(test)


class TestGenDataset:
    def test_deterministic(self):
        a = ds.gen_dataset(small_cfg())
        b = ds.gen_dataset(small_cfg())
        for ca, cb in zip(a, b):
            np.testing.assert_array_equal(ca.frames, cb.frames)
            assert ca.id == cb.id and ca.label == cb.label

    def test_counts_and_balance(self):
        clips = ds.gen_dataset(small_cfg(n_classes=6, clips_per_class=10))
        assert len(clips) == 60
        labels = [c.label for c in clips]
        assert all(labels.count(k) == 10 for k in range(6))

    def test_values_in_unit_interval(self):
        clips = ds.gen_dataset(small_cfg(clips_per_class=2))
        for c in clips:
            assert c.frames.min() >= 0.0 and c.frames.max() <= 1.0

    def test_early_window_hides_motion_but_not_cue(self):
        # at r=0.4 with key frame at 0.5, post-climax motion is unobserved:
        # a plain pixel-statistics probe is near chance, while the planted
        # aspect-ratio cue separates classes
        clips = ds.gen_dataset(small_cfg(clips_per_class=12, seed=3))
        early = [ds.truncate_ratio(c, 0.4) for c in clips]
        train, test = early[::2], early[1::2]
        stats_acc = nearest_centroid_accuracy(train, test, quadrant_stats)
        cue_acc = nearest_centroid_accuracy(train, test, aspect_probe)
        assert stats_acc < 0.45
        assert cue_acc > 0.8

    def test_full_window_separable_by_statistics(self):
        clips = ds.gen_dataset(small_cfg(clips_per_class=12, seed=3))
        train, test = clips[::2], clips[1::2]
        acc = nearest_centroid_accuracy(train, test, quadrant_stats)
        assert acc > 0.7

    def test_bad_config(self):
        with pytest.raises(ParameterError):
            small_cfg(key_frame_fraction=1.5)
        with pytest.raises(DimensionError):
            small_cfg(frame_dims=(1, 24, 24))


class TestAugmentation:
    def setup_method(self):
        self.clip = ds.gen_dataset(small_cfg(clips_per_class=1))[0]

    def test_random_clip_identity(self):
        out = ds.random_clip(self.clip, self.clip.n_frames,
                             np.random.default_rng(0))
        np.testing.assert_array_equal(out.frames, self.clip.frames)

    def test_random_clip_window(self):
        rng = np.random.default_rng(1)
        out = ds.random_clip(self.clip, 5, rng)
        assert out.n_frames == 5
        t = self.clip.n_frames
        found = any(
            np.array_equal(out.frames, self.clip.frames[s:s + 5])
            for s in range(t - 4))
        assert found

    def test_random_clip_too_long(self):
        with pytest.raises(DimensionError):
            ds.random_clip(self.clip, 99, np.random.default_rng(0))

    def test_multiscale_crop_yields_two_samples(self):
        out = ds.multiscale_crop(self.clip, [16, 20], np.random.default_rng(2))
        assert len(out) == 2
        np.testing.assert_array_equal(out[1].frames, self.clip.frames)
        assert out[0].frames.shape[1] in (16, 20)

    def test_multiscale_crop_full_size_is_copy(self):
        h = self.clip.frames.shape[1]
        out = ds.multiscale_crop(self.clip, [h], np.random.default_rng(3))
        np.testing.assert_array_equal(out[0].frames, self.clip.frames)

    def test_multiscale_crop_window_consistent_across_frames(self):
        out = ds.multiscale_crop(self.clip, [16], np.random.default_rng(4))
        crop = out[0].frames
        t, h, w, _ = self.clip.frames.shape
        matches = 0
        for y0 in range(h - 15):
            for x0 in range(w - 15):
                if np.array_equal(crop,
                                  self.clip.frames[:, y0:y0 + 16,
                                                   x0:x0 + 16, :]):
                    matches += 1
        assert matches >= 1

    def test_multiscale_crop_too_large(self):
        with pytest.raises(DimensionError):
            ds.multiscale_crop(self.clip, [999], np.random.default_rng(0))

    def test_resize_identity(self):
        _, h, w, _ = self.clip.frames.shape
        out = ds.resize(self.clip, h, w)
        np.testing.assert_array_equal(out.frames, self.clip.frames)

    def test_resize_constant(self):
        clip = VideoClip(np.full((3, 8, 8, 3), 0.4))
        out = ds.resize(clip, 5, 11)
        np.testing.assert_allclose(out.frames, 0.4, atol=1e-12)

    def test_resize_ramp_exact(self):
        ramp = np.tile(np.linspace(0, 1, 16), (16, 1))
        clip = VideoClip(np.repeat(ramp[None, ..., None], 3, axis=-1)[None][0]
                         .reshape(1, 16, 16, 3))
        out = ds.resize(clip, 8, 8)
        want = np.tile(np.linspace(0, 1, 8), (8, 1))
        for c in range(3):
            np.testing.assert_allclose(out.frames[0, :, :, c], want,
                                       atol=1e-12)

    def test_truncate_basic(self):
        clip = VideoClip(np.zeros((64, 8, 8, 3)))
        assert ds.truncate_ratio(clip, 1.0).n_frames == 64
        assert ds.truncate_ratio(clip, 0.5).n_frames == 32

    def test_truncate_prefix_property(self):
        a = ds.truncate_ratio(self.clip, 0.5)
        b = ds.truncate_ratio(self.clip, 0.9)
        np.testing.assert_array_equal(b.frames[:a.n_frames], a.frames)

    def test_truncate_too_short(self):
        with pytest.raises(DimensionError):
            ds.truncate_ratio(VideoClip(np.zeros((4, 8, 8, 3))), 0.25)

    @given(st.floats(0.2, 1.0), st.floats(0.2, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_truncate_prefix_for_all_ratios(self, r1, r2):
        clip = VideoClip(np.random.default_rng(5).random((12, 8, 8, 1)))
        lo, hi = sorted([r1, r2])
        a = ds.truncate_ratio(clip, lo)
        b = ds.truncate_ratio(clip, hi)
        np.testing.assert_array_equal(b.frames[:a.n_frames], a.frames)


class TestPersistence:
    def test_round_trip_bit_identical(self, tmp_path):
        clip = ds.gen_dataset(small_cfg(clips_per_class=1))[0]
        f32 = clip.frames.astype("<f4").astype(np.float64)
        path = tmp_path / "clip.vid"
        ds.save_clip(clip, path)
        back = ds.load_clip(path)
        np.testing.assert_array_equal(back.frames, f32)
        ds.save_clip(back, tmp_path / "clip2.vid")
        assert (tmp_path / "clip.vid").read_bytes() == \
               (tmp_path / "clip2.vid").read_bytes()

    def test_truncated_file_is_parse_error(self, tmp_path):
        path = tmp_path / "bad.vid"
        clip = VideoClip(np.zeros((2, 4, 4, 3)))
        ds.save_clip(clip, path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(ClipFormatError):
            ds.load_clip(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vid"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(ClipFormatError):
            ds.load_clip(path)

    def test_flow_clip_two_channels_round_trip(self, tmp_path):
        flow = VideoClip(np.random.default_rng(6).random((5, 8, 8, 2)))
        path = tmp_path / "flow.vid"
        ds.save_clip(flow, path)
        back = ds.load_clip(path)
        assert back.frames.shape == (5, 8, 8, 2)
        np.testing.assert_array_equal(back.frames,
                                      flow.frames.astype("<f4"))

    def test_dataset_manifest_round_trip(self, tmp_path):
        clips = ds.gen_dataset(small_cfg(clips_per_class=2))
        ds.save_dataset(clips, tmp_path)
        back = ds.load_dataset(tmp_path)
        assert len(back) == len(clips)
        by_id = {c.id: c for c in back}
        for clip in clips:
            assert by_id[clip.id].label == clip.label
            np.testing.assert_array_equal(by_id[clip.id].frames,
                                          clip.frames.astype("<f4"))


def test_train_test_split_balanced_and_seeded():
    clips = ds.gen_dataset(small_cfg(clips_per_class=8))
    tr1, te1 = ds.train_test_split(clips, 0.25, seed=5)
    tr2, te2 = ds.train_test_split(clips, 0.25, seed=5)
    assert [c.id for c in tr1] == [c.id for c in tr2]
    assert [c.id for c in te1] == [c.id for c in te2]
    assert len(te1) == 6 * 2
    labels = [c.label for c in te1]
    assert all(labels.count(k) == 2 for k in range(6))
    assert not set(c.id for c in tr1) & set(c.id for c in te1)
