import json
import math
import os

import numpy as np
import pytest

import astad.tensor as T
from astad.data import (
    DepthMap,
    ForegroundMask,
    Sample,
    SynthSpec,
    assemble_sample,
    background_plane,
    bilinear_resize,
    depth_to_model_input,
    downsample_mask,
    extract_foreground,
    fill_missing_depth,
    load_corpus,
    load_tensor,
    normalize_depth,
    positional_encoding,
    save_corpus,
    save_tensor,
    synth_corpus,
)
from astad.errors import (
    DimensionError,
    EmptyForegroundError,
    FormatError,
    InvalidCornerError,
)
from astad.tensor import Tensor


class TestFillMissingDepth:
    def test_all_valid_unchanged_and_idempotent(self):
        rng = np.random.default_rng(0)
        d = DepthMap.from_arrays(rng.normal(10, 1, (8, 8)))
        once = fill_missing_depth(d)
        np.testing.assert_array_equal(once.values.data, d.values.data)
        twice = fill_missing_depth(once)
        np.testing.assert_array_equal(twice.values.data, once.values.data)

    def test_single_hole_filled_with_neighbor_mean(self):
        vals = np.full((5, 5), 5.0)
        valid = np.ones((5, 5))
        valid[2, 2] = 0
        filled = fill_missing_depth(DepthMap.from_arrays(vals, valid))
        assert filled.values.data[2, 2] == 5.0
        assert filled.validity.data[2, 2] == 1.0

    def test_wide_invalid_disk_center_survives_three_iterations(self):
        # the fill advances one 8-connected ring per iteration, so the center
        # of a 7-pixel-wide invalid block is still out of reach after 3
        h = w = 15
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        invalid = np.maximum(np.abs(ii - 7), np.abs(jj - 7)) <= 3
        filled = fill_missing_depth(DepthMap.from_arrays(np.full((h, w), 3.0), ~invalid))
        assert filled.validity.data[7, 7] == 0.0
        assert filled.values.data[7, 7] == 0.0

    def test_matches_simulation_oracle(self):
        from astad.verify import _oracle_fill
        rng = np.random.default_rng(1)
        for _ in range(5):
            vals = rng.normal(10, 2, (12, 12))
            valid = rng.uniform(size=(12, 12)) > 0.4
            d = DepthMap.from_arrays(vals, valid)
            filled = fill_missing_depth(d)
            want_vals, want_valid = _oracle_fill(d.values.data, valid)
            np.testing.assert_array_equal(filled.values.data, want_vals.astype(np.float32))
            np.testing.assert_array_equal(filled.validity.data > 0, want_valid)


class TestBackgroundPlane:
    def test_equal_corners_constant(self):
        d = DepthMap.from_arrays(np.full((6, 7), 4.0))
        np.testing.assert_allclose(background_plane(d).data, 4.0)

    def test_bilinear_midpoint(self):
        vals = np.zeros((5, 5))
        vals[4, :] = 1.0  # bottom corners 1, top corners 0
        plane = background_plane(DepthMap.from_arrays(vals)).data
        assert plane[2, 2] == pytest.approx(0.5, abs=1e-6)

    def test_matches_formula_at_random_positions(self):
        rng = np.random.default_rng(2)
        vals = np.zeros((9, 11))
        vals[0, 0], vals[0, -1], vals[-1, 0], vals[-1, -1] = rng.normal(size=4)
        plane = background_plane(DepthMap.from_arrays(vals)).data
        c00, c01, c10, c11 = vals[0, 0], vals[0, -1], vals[-1, 0], vals[-1, -1]
        for _ in range(20):
            i, j = int(rng.integers(0, 9)), int(rng.integers(0, 11))
            u, v = i / 8, j / 10
            want = (1 - u) * ((1 - v) * c00 + v * c01) + u * ((1 - v) * c10 + v * c11)
            assert plane[i, j] == pytest.approx(want, abs=1e-6)

    def test_invalid_corner_raises(self):
        valid = np.ones((4, 4))
        valid[0, 0] = 0
        with pytest.raises(InvalidCornerError):
            background_plane(DepthMap.from_arrays(np.ones((4, 4)), valid))


class TestExtractForeground:
    def test_flat_scene_is_background(self):
        d = DepthMap.from_arrays(np.full((10, 10), 8.0))
        plane = background_plane(d)
        assert extract_foreground(d, plane).array().sum() == 0

    def test_single_pixel_dilates_to_8x8_block(self):
        vals = np.zeros((20, 20))
        vals[10, 10] = 5.0
        d = DepthMap.from_arrays(vals)
        mask = extract_foreground(d, Tensor(np.zeros((20, 20), np.float32))).array()
        assert mask.sum() == 64
        assert mask[10 - 4:10 + 4, 10 - 4:10 + 4].sum() == 64

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(3)
        vals = rng.normal(10, 1, (12, 12))
        d1 = DepthMap.from_arrays(vals)
        d2 = DepthMap.from_arrays(vals + 5.0)
        plane = rng.normal(10, 0.1, (12, 12)).astype(np.float32)
        m1 = extract_foreground(d1, Tensor(plane)).array()
        m2 = extract_foreground(d2, Tensor(plane + 5.0)).array()
        np.testing.assert_array_equal(m1, m2)

    def test_blob_matches_max_filter_oracle(self):
        from astad.verify import _oracle_dilate
        rng = np.random.default_rng(4)
        vals = np.zeros((16, 16))
        vals[5:9, 6:11] = 3.0
        d = DepthMap.from_arrays(vals + rng.normal(0, 0.01, (16, 16)))
        plane = Tensor(np.zeros((16, 16), np.float32))
        got = extract_foreground(d, plane).array()
        base = np.abs(d.values.data.astype(np.float64)) > 0.7
        np.testing.assert_array_equal(got > 0, _oracle_dilate(base))


class TestNormalizeDepth:
    def _mask(self, shape, fg):
        m = np.zeros(shape, np.float32)
        m[fg] = 1.0
        return ForegroundMask(Tensor(m), "full")

    def test_constant_foreground_zeroes_out(self):
        d = DepthMap.from_arrays(np.full((4, 4), 3.0))
        out = normalize_depth(d, self._mask((4, 4), np.s_[:, :]))
        np.testing.assert_array_equal(out.values.data, np.zeros((4, 4), np.float32))

    def test_two_value_foreground(self):
        vals = np.zeros((1, 4))
        vals[0, :2] = [1.0, 3.0]
        mask = self._mask((1, 4), np.s_[0, :2])
        out = normalize_depth(DepthMap.from_arrays(vals), mask).values.data
        np.testing.assert_allclose(out, [[-1.0, 1.0, 0.0, 0.0]], atol=1e-6)

    def test_foreground_mean_is_zero(self):
        rng = np.random.default_rng(5)
        vals = rng.normal(10, 2, (8, 8))
        m = (rng.uniform(size=(8, 8)) > 0.5).astype(np.float32)
        m[0, 0] = 1.0
        out = normalize_depth(DepthMap.from_arrays(vals),
                              ForegroundMask(Tensor(m), "full"))
        assert abs(out.values.data[m > 0].mean(dtype=np.float64)) < 1e-6

    def test_empty_foreground_raises(self):
        with pytest.raises(EmptyForegroundError):
            normalize_depth(DepthMap.from_arrays(np.ones((3, 3))),
                            self._mask((3, 3), np.s_[0:0, 0:0]))


class TestDepthToModelInput:
    def test_constant_map(self):
        d = DepthMap.from_arrays(np.full((100, 100), 2.5))
        out = depth_to_model_input(d, 192, 8)
        assert out.shape == (64, 24, 24)
        np.testing.assert_allclose(out.data, 2.5, atol=1e-6)

    def test_channel_count_is_factor_squared(self):
        d = DepthMap.from_arrays(np.zeros((24, 24)))
        assert depth_to_model_input(d, 24, 2).shape == (4, 12, 12)

    def test_unshuffle_stage_delegates_to_tensor_op(self):
        rng = np.random.default_rng(6)
        vals = rng.normal(size=(24, 24))
        d = DepthMap.from_arrays(vals)
        got = depth_to_model_input(d, 24, 2).data
        resized = bilinear_resize(d.values.data, 24, 24).astype(np.float32)
        want = T.pixel_unshuffle(Tensor(resized[None]), 2).data
        np.testing.assert_array_equal(got, want)

    def test_divisibility_violation(self):
        with pytest.raises(DimensionError):
            depth_to_model_input(DepthMap.from_arrays(np.zeros((10, 10))), 10, 3)


class TestDownsampleMask:
    def test_all_ones_and_all_zeros(self):
        ones = ForegroundMask(Tensor(np.ones((8, 8), np.float32)), "full")
        zeros = ForegroundMask(Tensor(np.zeros((8, 8), np.float32)), "full")
        assert downsample_mask(ones, 4, 4).array().min() == 1.0
        assert downsample_mask(zeros, 4, 4).array().max() == 0.0

    def test_single_pixel_matches_bilinear_oracle(self):
        from astad.verify import _oracle_bilinear_binarize
        m = np.zeros((12, 12), np.float32)
        m[5, 7] = 1.0
        mask = ForegroundMask(Tensor(m), "full")
        got = downsample_mask(mask, 6, 6).array()
        want = _oracle_bilinear_binarize(m.astype(np.float64), 6, 6)
        np.testing.assert_array_equal(got, want.astype(np.float32))

    def test_monotone_in_foreground(self):
        rng = np.random.default_rng(7)
        small = (rng.uniform(size=(16, 16)) > 0.8).astype(np.float32)
        big = np.clip(small + (rng.uniform(size=(16, 16)) > 0.6), 0, 1).astype(np.float32)
        low_small = downsample_mask(ForegroundMask(Tensor(small), "full"), 8, 8).array()
        low_big = downsample_mask(ForegroundMask(Tensor(big), "full"), 8, 8).array()
        assert np.all(low_small <= low_big)


class TestPositionalEncoding:
    def test_origin_values(self):
        pe = positional_encoding(4, 4, 8).data
        np.testing.assert_array_equal(pe[0, 0, :], np.zeros(4, np.float32))   # sin rows
        np.testing.assert_array_equal(pe[1, 0, :], np.ones(4, np.float32))    # cos rows
        np.testing.assert_array_equal(pe[4, :, 0], np.zeros(4, np.float32))   # sin cols
        np.testing.assert_array_equal(pe[5, :, 0], np.ones(4, np.float32))    # cos cols

    def test_base_frequency_row_channel(self):
        pe = positional_encoding(4, 4, 8).data
        assert pe[0, 1, 0] == pytest.approx(math.sin(1.0), abs=1e-6)

    def test_cached_and_data_independent(self):
        a = positional_encoding(24, 24, 32)
        b = positional_encoding(24, 24, 32)
        assert a is b
        np.testing.assert_array_equal(a.data, b.data)

    def test_range_and_distinctness(self):
        pe = positional_encoding(24, 24, 32).data
        assert pe.min() >= -1.0 and pe.max() <= 1.0
        flat = pe.reshape(32, -1).T
        assert len({tuple(v) for v in flat.tolist()}) == 24 * 24

    def test_channels_divisible_by_four(self):
        with pytest.raises(DimensionError):
            positional_encoding(4, 4, 6)


class TestAssembleSample:
    def test_channel_concatenation_counts(self):
        feats = Tensor(np.zeros((304, 24, 24), np.float32))
        depth = Tensor(np.zeros((64, 24, 24), np.float32))
        sample = assemble_sample(feats, depth=depth)
        assert sample.model_input().shape == (368, 24, 24)

    def test_rgb_only_mode(self):
        feats = Tensor(np.zeros((8, 6, 6), np.float32))
        sample = assemble_sample(feats)
        assert sample.model_input() is sample.features
        assert sample.mask is None and sample.mask_array() is None

    def test_channel_order_features_then_depth(self):
        feats = Tensor(np.full((3, 4, 4), 7.0, np.float32))
        depth = Tensor(np.full((2, 4, 4), 3.0, np.float32))
        x = assemble_sample(feats, depth=depth).model_input().data
        assert np.all(x[:3] == 7.0) and np.all(x[3:] == 3.0)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(DimensionError):
            assemble_sample(Tensor(np.zeros((3, 4, 4), np.float32)),
                            depth=Tensor(np.zeros((2, 5, 5), np.float32)))


class TestSynthCorpus:
    def test_same_seed_bitwise_identical(self):
        spec = SynthSpec(seed=11, train_samples=4, test_normal=2, test_anomalous=2,
                         feature_channels=4, height=8, width=8)
        t1, s1 = synth_corpus(spec)
        t2, s2 = synth_corpus(spec)
        for a, b in zip(t1 + s1, t2 + s2):
            np.testing.assert_array_equal(a.model_input().data, b.model_input().data)
            assert a.label == b.label

    def test_train_set_all_normal_and_gt_matches_patch(self):
        spec = SynthSpec(seed=3, train_samples=5, test_normal=3, test_anomalous=4,
                         feature_channels=4, height=10, width=10, patch_size=3)
        train, test = synth_corpus(spec)
        assert all(s.label == "normal" for s in train)
        anomalous = [s for s in test if s.label == "anomalous"]
        assert len(anomalous) == 4
        for s in anomalous:
            gt = s.gt_mask.data
            assert gt.sum() == 9.0
            rows, cols = np.nonzero(gt)
            assert rows.max() - rows.min() == 2 and cols.max() - cols.min() == 2

    def test_zero_amplitude_matches_normal_generation(self):
        spec = SynthSpec(seed=5, train_samples=2, test_normal=2, test_anomalous=2,
                         feature_channels=4, height=8, width=8,
                         feature_amplitude=0.0, depth_amplitude_cm=0.0)
        _, test = synth_corpus(spec)
        normal, anomalous = test[:2], test[2:]
        # with amplitude 0 the perturbation is a no-op; distributions coincide
        for s in anomalous:
            assert s.label == "anomalous" and s.gt_mask is not None
        pooled_n = np.stack([s.features.data for s in normal])
        pooled_a = np.stack([s.features.data for s in anomalous])
        assert abs(pooled_n.mean() - pooled_a.mean()) < 0.5

    def test_rgb_kind_has_no_depth(self):
        spec = SynthSpec(seed=1, train_samples=2, test_normal=1, test_anomalous=1,
                         feature_channels=4, height=8, width=8, kind="rgb")
        train, test = synth_corpus(spec)
        assert all(s.depth is None and s.mask is None for s in train + test)


class TestTensorFileFormat:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(8)
        arr = rng.normal(size=(3, 5, 7)).astype(np.float32)
        path = tmp_path / "t.astt"
        save_tensor(path, Tensor(arr))
        np.testing.assert_array_equal(load_tensor(path).data, arr)

    def test_file_size_arithmetic(self, tmp_path):
        path = tmp_path / "big.astt"
        save_tensor(path, np.zeros((368, 24, 24), np.float32))
        header = 4 + 4 + 1 + 1 + 3 * 4
        assert os.path.getsize(path) == 368 * 24 * 24 * 4 + header

    def test_truncated_file_raises_without_partial_result(self, tmp_path):
        path = tmp_path / "t.astt"
        save_tensor(path, np.ones((4, 4), np.float32))
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 7])
        with pytest.raises(FormatError, match="byte offset"):
            load_tensor(path)

    def test_bad_magic_and_version(self, tmp_path):
        path = tmp_path / "t.astt"
        save_tensor(path, np.ones(3, np.float32))
        raw = bytearray(path.read_bytes())
        bad = bytes(b"XYZT") + bytes(raw[4:])
        path.write_bytes(bad)
        with pytest.raises(FormatError, match="magic"):
            load_tensor(path)
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_tensor(path)


class TestCorpusRoundTrip:
    def test_save_load_reproduces_samples(self, tmp_path):
        spec = SynthSpec(seed=9, train_samples=3, test_normal=2, test_anomalous=2,
                         feature_channels=4, height=8, width=8)
        train, _ = synth_corpus(spec)
        meta = {"threshold_cm": spec.threshold_cm, "depth_factor": spec.depth_factor,
                "depth_resize": spec.height * spec.depth_factor}
        save_corpus(tmp_path / "train", train, meta)
        loaded = load_corpus(str(tmp_path / "train"))
        assert len(loaded) == 3
        for a, b in zip(train, loaded):
            np.testing.assert_array_equal(a.model_input().data, b.model_input().data)
            np.testing.assert_array_equal(a.mask_array(), b.mask_array())
            assert a.label == b.label

    def test_manifest_schema(self, tmp_path):
        spec = SynthSpec(seed=9, train_samples=1, test_normal=1, test_anomalous=1,
                         feature_channels=4, height=8, width=8)
        _, test = synth_corpus(spec)
        save_corpus(tmp_path / "test", test, {})
        doc = json.loads((tmp_path / "test" / "manifest.json").read_text())
        assert set(doc.keys()) == {"samples", "meta"}
        for entry in doc["samples"]:
            assert set(entry.keys()) == {"features", "depth", "label", "gt_mask"}
            assert entry["label"] in ("normal", "anomalous")
