import numpy as np
import pytest

from astad.data import positional_encoding
from astad.errors import DimensionError, EmptyForegroundError
from astad.student import StudentModel, distance_map, image_score, student_loss
from astad.tensor import Tensor


def make_student(seed, c_in=4, c_pe=4, hidden=8, blocks=2, c_out=4):
    return StudentModel(c_in, c_pe, out_channels=c_out, hidden=hidden,
                        n_st_blocks=blocks, rng=np.random.default_rng(seed))


class TestStudentForward:
    def test_zeroed_exit_conv_gives_zeros(self):
        model = make_student(0)
        model.exit.weight.data = np.zeros_like(model.exit.weight.data)
        model.exit.bias.data = np.zeros_like(model.exit.bias.data)
        pe = positional_encoding(5, 5, 4)
        x = Tensor(np.random.default_rng(1).normal(size=(4, 5, 5)).astype(np.float32))
        out = model.forward(x, pe, "eval")
        np.testing.assert_array_equal(out.data, np.zeros((4, 5, 5), np.float32))

    @pytest.mark.parametrize("c_in,c_out,hw", [(3, 6, 4), (5, 2, 7), (4, 4, 5)])
    def test_output_shape_contract(self, c_in, c_out, hw):
        model = StudentModel(c_in, 4, out_channels=c_out, hidden=8, n_st_blocks=1,
                             rng=np.random.default_rng(2))
        pe = positional_encoding(hw, hw, 4)
        x = Tensor(np.random.default_rng(3).normal(size=(c_in, hw, hw)).astype(np.float32))
        assert model.forward(x, pe, "eval").shape == (c_out, hw, hw)

    def test_eval_mode_deterministic_bitwise(self):
        model = make_student(4)
        pe = positional_encoding(6, 6, 4)
        x = Tensor(np.random.default_rng(5).normal(size=(4, 6, 6)).astype(np.float32))
        first = model.forward(x, pe, "eval").data
        second = model.forward(x, pe, "eval").data
        np.testing.assert_array_equal(first, second)

    def test_wrong_channels_raise(self):
        model = make_student(6)
        pe = positional_encoding(5, 5, 4)
        with pytest.raises(DimensionError):
            model.forward(Tensor(np.zeros((3, 5, 5), np.float32)), pe, "eval")

    def test_param_count_grows_with_blocks(self):
        counts = [make_student(0, blocks=b).count_parameters() for b in (1, 2, 4, 8)]
        assert counts == sorted(counts) and len(set(counts)) == 4


class TestDistanceMap:
    def test_identical_inputs_give_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(5, 4, 4)).astype(np.float32))
        assert np.all(distance_map(x, x).data == 0.0)

    def test_single_pixel_difference(self):
        a = np.zeros((1, 3, 3), np.float32)
        b = a.copy()
        b[0, 1, 2] = 3.0
        dist = distance_map(Tensor(a), Tensor(b)).data
        assert dist[1, 2] == 9.0
        assert dist.sum() == 9.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(6, 4, 4)).astype(np.float32)
        b = rng.normal(size=(6, 4, 4)).astype(np.float32)
        got = distance_map(Tensor(a), Tensor(b)).data
        want = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                for c in range(6):
                    want[i, j] += (float(a[c, i, j]) - float(b[c, i, j])) ** 2
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(8)
        a = Tensor(rng.normal(size=(3, 5, 5)).astype(np.float32))
        b = Tensor(rng.normal(size=(3, 5, 5)).astype(np.float32))
        np.testing.assert_array_equal(distance_map(a, b).data, distance_map(b, a).data)

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            distance_map(Tensor(np.zeros((2, 3, 3), np.float32)),
                         Tensor(np.zeros((3, 3, 3), np.float32)))


class TestStudentLoss:
    def test_full_mask_is_mean(self):
        rng = np.random.default_rng(9)
        dist = Tensor(np.abs(rng.normal(size=(5, 5))).astype(np.float32))
        assert student_loss(dist, np.ones((5, 5))).item() == pytest.approx(
            student_loss(dist).item())

    def test_constant_distance_any_mask(self):
        dist = Tensor(np.full((4, 4), 2.5, np.float32))
        mask = np.zeros((4, 4), np.float32)
        mask[1:3, 1:3] = 1.0
        assert student_loss(dist, mask).item() == pytest.approx(2.5)

    def test_checkerboard_subset_oracle(self):
        rng = np.random.default_rng(10)
        dist = np.abs(rng.normal(size=(6, 6))).astype(np.float32)
        mask = np.indices((6, 6)).sum(axis=0) % 2
        got = student_loss(Tensor(dist), mask.astype(np.float32)).item()
        want = dist[mask > 0].astype(np.float64).mean()
        assert got == pytest.approx(want, abs=1e-6)

    def test_empty_foreground_raises(self):
        with pytest.raises(EmptyForegroundError):
            student_loss(Tensor(np.ones((3, 3), np.float32)), np.zeros((3, 3)))


class TestImageScore:
    def test_background_peak_ignored(self):
        dist = np.zeros((4, 4), np.float32)
        dist[0, 0] = 9.0   # background
        dist[2, 2] = 7.5   # foreground
        mask = np.zeros((4, 4), np.float32)
        mask[2:, 2:] = 1.0
        assert image_score(dist, mask) == 7.5

    def test_no_mask_constant_gives_constant(self):
        assert image_score(np.full((3, 3), 1.25, np.float32)) == pytest.approx(1.25)

    def test_no_mask_is_arithmetic_mean(self):
        rng = np.random.default_rng(11)
        dist = np.abs(rng.normal(size=(7, 7))).astype(np.float32)
        assert image_score(dist) == pytest.approx(dist.astype(np.float64).mean(), abs=1e-6)

    def test_monotone_in_mask_under_max(self):
        rng = np.random.default_rng(12)
        dist = np.abs(rng.normal(size=(8, 8))).astype(np.float32)
        small = (rng.uniform(size=(8, 8)) > 0.7).astype(np.float32)
        small[0, 0] = 1.0
        big = np.clip(small + (rng.uniform(size=(8, 8)) > 0.5), 0, 1).astype(np.float32)
        assert image_score(dist, small) <= image_score(dist, big)

    def test_empty_foreground_raises(self):
        with pytest.raises(EmptyForegroundError):
            image_score(np.ones((3, 3), np.float32), np.zeros((3, 3)))


class TestOverfitSanity:
    def test_student_overfits_eight_samples(self):
        # 500 steps on 8 fixed samples should crush the loss below 1% of start
        from astad.training import Adam, TrainConfig

        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(8, 4, 6, 6)).astype(np.float32))
        target = Tensor(rng.normal(size=(8, 4, 6, 6)).astype(np.float32))
        pe = positional_encoding(6, 6, 4)
        model = StudentModel(4, 4, out_channels=4, hidden=16, n_st_blocks=2,
                             rng=np.random.default_rng(14))
        config = TrainConfig(lr=3e-3, weight_decay=0.0, seed=0)
        opt = Adam(model.parameters(), config)
        losses = []
        for _ in range(500):
            loss = student_loss(distance_map(model.forward(x, pe, "train"), target))
            losses.append(loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert losses[-1] < 0.01 * losses[0]
