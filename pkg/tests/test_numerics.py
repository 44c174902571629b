import numpy as np
import pytest

from guidematch.numerics import (
    AdamState,
    Tensor,
    adam_step,
    conv2d,
    conv4d,
    l2_normalize_channels,
    leaky_relu,
    load_checkpoint,
    matmul,
    max_over,
    parameter,
    save_checkpoint,
    softmax_over,
)
from guidematch.numerics.gradcheck import max_gradient_error

import oracles

N_GRAD_SEEDS = 20
GRAD_TOL = 1e-4


def weighted_sum(t, rng):
    w = rng.standard_normal(t.shape)
    return (t * w).sum(), w


class TestConv2d:
    def test_pointwise_scaling(self):
        x = Tensor(np.arange(9, dtype=float).reshape(1, 3, 3))
        k = Tensor(np.full((1, 1, 1, 1), 2.0))
        b = Tensor(np.zeros(1))
        out = conv2d(x, k, b)
        assert np.allclose(out.data, 2.0 * x.data)

    def test_zero_kernel_gives_bias(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((3, 5, 5)))
        k = Tensor(np.zeros((2, 3, 3, 3)))
        b = Tensor(np.array([0.7, -1.2]))
        out = conv2d(x, k, b, stride=1, zero_pad=1)
        assert np.allclose(out.data[0], 0.7)
        assert np.allclose(out.data[1], -1.2)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_matches_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.standard_normal((2, 8, 8))
        k = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, zero_pad=pad)
        ref = oracles.conv2d_loops(x, k, b, stride=stride, pad=pad)
        assert out.data.shape == ref.shape
        assert np.max(np.abs(out.data - ref)) < 1e-12

    def test_channel_mismatch_names_dimension(self):
        x = Tensor(np.zeros((3, 4, 4)))
        k = Tensor(np.zeros((1, 2, 3, 3)))
        with pytest.raises(ValueError, match="channel"):
            conv2d(x, k, Tensor(np.zeros(1)))

    def test_linearity(self):
        rng = np.random.default_rng(3)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)))
        b = Tensor(np.zeros(3))
        x = rng.standard_normal((2, 6, 6))
        y = rng.standard_normal((2, 6, 6))
        a, c = 1.7, -0.4
        lhs = conv2d(Tensor(a * x + c * y), k, b, zero_pad=1).data
        rhs = a * conv2d(Tensor(x), k, b, zero_pad=1).data + c * conv2d(Tensor(y), k, b, zero_pad=1).data
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_gradients(self):
        for seed in range(N_GRAD_SEEDS):
            rng = np.random.default_rng(seed)
            x = parameter(rng.standard_normal((2, 5, 5)), "x")
            k = parameter(rng.standard_normal((3, 2, 3, 3)), "k")
            b = parameter(rng.standard_normal(3), "b")
            w = rng.standard_normal((3, 3, 3))

            def f():
                return (conv2d(x, k, b, stride=2, zero_pad=1) * w).sum()

            assert max_gradient_error(f, [x, k, b]) < GRAD_TOL


class TestConv4d:
    def test_delta_kernel_identity(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 3, 4, 2, 3))
        k = np.zeros((1, 1, 3, 3, 3, 3))
        k[0, 0, 1, 1, 1, 1] = 1.0
        out = conv4d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
        assert np.max(np.abs(out.data - x)) < 1e-15

    def test_zero_kernel_bias(self):
        x = Tensor(np.ones((1, 2, 2, 2, 2)))
        out = conv4d(x, Tensor(np.zeros((1, 1, 3, 3, 3, 3))), Tensor(np.array([0.5])))
        assert np.allclose(out.data, 0.5)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 3, 3, 3, 3))
        k = rng.standard_normal((2, 1, 3, 3, 3, 3))
        b = rng.standard_normal(2)
        out = conv4d(Tensor(x), Tensor(k), Tensor(b))
        ref = oracles.conv4d_loops(x, k, b)
        assert np.max(np.abs(out.data - ref)) < 1e-12

    def test_linearity(self):
        rng = np.random.default_rng(9)
        k = Tensor(rng.standard_normal((2, 1, 3, 3, 3, 3)))
        b = Tensor(np.zeros(2))
        x = rng.standard_normal((1, 2, 3, 2, 3))
        y = rng.standard_normal((1, 2, 3, 2, 3))
        lhs = conv4d(Tensor(0.3 * x - 2.0 * y), k, b).data
        rhs = 0.3 * conv4d(Tensor(x), k, b).data - 2.0 * conv4d(Tensor(y), k, b).data
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_gradients(self):
        for seed in range(N_GRAD_SEEDS):
            rng = np.random.default_rng(100 + seed)
            x = parameter(rng.standard_normal((1, 3, 3, 2, 2)), "x")
            k = parameter(rng.standard_normal((2, 1, 3, 3, 3, 3)), "k")
            b = parameter(rng.standard_normal(2), "b")
            w = rng.standard_normal((2, 3, 3, 2, 2))

            def f():
                return (conv4d(x, k, b) * w).sum()

            assert max_gradient_error(f, [x, k, b]) < GRAD_TOL

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((2, 2, 2, 2, 2)))
        k = Tensor(np.zeros((1, 3, 3, 3, 3, 3)))
        with pytest.raises(ValueError, match="channel"):
            conv4d(x, k, Tensor(np.zeros(1)))


class TestSoftmax:
    def test_single_cell(self):
        out = softmax_over(Tensor(np.array([[3.7]])), (0, 1))
        assert np.allclose(out.data, 1.0)

    def test_two_equal_cells(self):
        out = softmax_over(Tensor(np.array([2.0, 2.0])), (0,))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 2, 3, 3)) * 4
        out = softmax_over(Tensor(x), (2, 3))
        assert np.max(np.abs(out.data - oracles.softmax_direct(x, (2, 3)))) < 1e-12

    def test_sums_to_one(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((3, 4, 5)) * 10
        out = softmax_over(Tensor(x), (1, 2))
        assert np.max(np.abs(out.data.sum(axis=(1, 2)) - 1.0)) < 1e-12

    def test_preserves_argmax(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((4, 6))
        out = softmax_over(Tensor(x), (1,))
        assert np.array_equal(x.argmax(axis=1), out.data.argmax(axis=1))

    def test_gradients(self):
        for seed in range(N_GRAD_SEEDS):
            rng = np.random.default_rng(200 + seed)
            x = parameter(rng.standard_normal((2, 3, 4)), "x")
            w = rng.standard_normal((2, 3, 4))

            def f():
                return (softmax_over(x, (1, 2)) * w).sum()

            assert max_gradient_error(f, [x]) < GRAD_TOL


class TestMaxOver:
    def test_simple(self):
        vals, arg = max_over(Tensor(np.array([[1.0, 3.0], [2.0, 0.0]])), (0, 1))
        assert vals.item() == 3.0
        assert tuple(arg) == (0, 1)

    def test_tie_breaks_to_lowest_index(self):
        vals, arg = max_over(Tensor(np.ones((2, 3, 2))), (0, 1, 2))
        assert vals.item() == 1.0
        assert tuple(arg) == (0, 0, 0)

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((4, 5))
        vals, arg = max_over(Tensor(x), (1,))
        ref_vals, ref_args = oracles.max_scan_axis1(x)
        assert np.allclose(vals.data, ref_vals)
        assert np.array_equal(arg[:, 0], ref_args)

    def test_tie_detectable_only_via_lowest_index_rule(self):
        x = np.array([[5.0, 1.0, 5.0]])
        _, arg = max_over(Tensor(x), (1,))
        assert arg[0, 0] == 0

    def test_gradient_routes_to_argmax(self):
        x = parameter(np.array([[1.0, 4.0, 2.0]]), "x")
        vals, _ = max_over(x, (1,))
        vals.sum().backward()
        assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_gradients(self):
        for seed in range(N_GRAD_SEEDS):
            rng = np.random.default_rng(300 + seed)
            x = parameter(rng.standard_normal((3, 4, 5)), "x")
            # keep a safe gap so central differences do not cross a switch
            w = rng.standard_normal((3,))

            def f():
                vals, _ = max_over(x, (1, 2))
                return (vals * w).sum()

            assert max_gradient_error(f, [x]) < GRAD_TOL


class TestL2Normalize:
    def test_three_four_five(self):
        x = Tensor(np.array([3.0, 4.0]).reshape(2, 1, 1))
        out = l2_normalize_channels(x)
        assert np.allclose(out.data.ravel(), [0.6, 0.8])

    def test_zero_vector_guard(self):
        out = l2_normalize_channels(Tensor(np.zeros((3, 2, 2))), eps=1e-8)
        assert np.all(out.data == 0.0)

    def test_unit_norms(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((8, 4, 4))
        out = l2_normalize_channels(Tensor(x))
        norms = np.sqrt((out.data**2).sum(axis=0))
        assert np.max(np.abs(norms - 1.0)) < 1e-9

    def test_gradients(self):
        for seed in range(N_GRAD_SEEDS):
            rng = np.random.default_rng(400 + seed)
            x = parameter(rng.standard_normal((4, 3, 3)), "x")
            w = rng.standard_normal((4, 3, 3))

            def f():
                return (l2_normalize_channels(x) * w).sum()

            assert max_gradient_error(f, [x]) < GRAD_TOL


class TestBackward:
    def test_square(self):
        x = parameter(np.array(3.0), "x")
        (x * x).backward()
        assert float(x.grad) == 6.0

    def test_constant_has_zero_gradient(self):
        x = parameter(np.array(2.0), "x")
        y = x * 0.0 + 5.0
        y.backward()
        assert float(x.grad) == 0.0

    def test_requires_scalar(self):
        x = parameter(np.zeros(3), "x")
        with pytest.raises(ValueError, match="scalar"):
            (x * 2.0).backward()

    def test_pure_repeated_calls(self):
        rng = np.random.default_rng(23)
        x = parameter(rng.standard_normal((3, 3)), "x")
        y = (leaky_relu(x * 2.0) * x).sum()
        y.backward()
        g1 = x.grad.copy()
        y.backward()
        assert np.array_equal(g1, x.grad)

    def test_shared_subexpression(self):
        x = parameter(np.array(2.0), "x")
        y = x * x
        z = y + y
        z.backward()
        assert float(x.grad) == 8.0

    def test_matmul_and_ops_gradients(self):
        for seed in range(N_GRAD_SEEDS):
            rng = np.random.default_rng(500 + seed)
            a = parameter(rng.standard_normal((3, 4)), "a")
            b = parameter(rng.standard_normal((4, 2)), "b")
            w = rng.standard_normal((3, 2))

            def f():
                m = matmul(a, b)
                return (leaky_relu(m, 0.1) * w).sum() + (m * m).sum() * 0.1

            assert max_gradient_error(f, [a, b]) < GRAD_TOL


class TestAdam:
    def test_first_step_magnitude(self):
        p = parameter(np.array(1.0), "p")
        st = AdamState(lr=1e-3)
        adam_step(st, [p], [np.array(0.5)])
        assert abs(float(p.data) - (1.0 - 1e-3 * 0.5 / (0.5 + 1e-8))) < 1e-15

    def test_zero_lr_bit_identical(self):
        rng = np.random.default_rng(29)
        vals = rng.standard_normal((4, 4))
        p = parameter(vals.copy(), "p")
        st = AdamState(lr=0.0)
        for _ in range(3):
            adam_step(st, [p], [rng.standard_normal((4, 4))])
        assert p.data.tobytes() == vals.tobytes()

    def test_matches_reference_iteration(self):
        st = AdamState(lr=0.1)
        p = parameter(np.array(1.0), "x")
        grads = []
        for _ in range(3):
            g = 2.0 * float(p.data)
            grads.append(g)
            adam_step(st, [p], [np.array(g)])
        # replay the published update equations independently
        ref = oracles.adam_reference(1.0, grads, lr=0.1)
        assert abs(float(p.data) - ref) < 1e-12

    def test_nan_gradient_names_parameter(self):
        p = parameter(np.array(1.0), "weights/conv1")
        with pytest.raises(ValueError, match="weights/conv1"):
            adam_step(AdamState(), [p], [np.array(np.nan)])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(31)
        arrays = {
            "backbone/0/weight": rng.standard_normal((3, 1, 3, 3)),
            "filter/bias": rng.standard_normal(16),
            "meta/stride": np.array(16.0),
        }
        path = tmp_path / "model.gmck"
        save_checkpoint(path, arrays)
        loaded = load_checkpoint(path)
        assert list(loaded) == list(arrays)
        for k in arrays:
            assert loaded[k].shape == np.asarray(arrays[k]).shape
            assert np.array_equal(loaded[k], arrays[k])

    def test_header(self, tmp_path):
        path = tmp_path / "m.gmck"
        save_checkpoint(path, {"a": np.zeros(2)})
        raw = path.read_bytes()
        assert raw[:4] == b"GMCK"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gmck"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)
