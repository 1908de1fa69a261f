"""Differentiable-array core: primitive semantics, gradient correctness
against finite differences, determinism, and checkpoint round-trips."""
import math

import numpy as np
import pytest

import hetlink.autodiff as ad
from hetlink.autodiff import Parameter, Tensor


class TestPrimitives:
    def test_softmax_uniform(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(7, 11)) * 10)
        out = ad.softmax(x, axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_relu(self):
        out = ad.relu(Tensor([-2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [0.0, 3.0])

    def test_matmul_identity(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 5))
        out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_shape_error_names_operands(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_add_shape_error(self):
        with pytest.raises(ad.ShapeError):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_exp_overflow_raises(self):
        with pytest.raises(FloatingPointError, match="exp"):
            ad.exp(Tensor([1000.0]))

    def test_log_domain_raises(self):
        with pytest.raises(FloatingPointError, match="log"):
            ad.log(Tensor([0.0]))

    def test_apply_primitive_dispatch(self):
        out = ad.apply_primitive("sigmoid", Tensor([0.0]))
        assert out.data[0] == 0.5
        with pytest.raises(ValueError, match="unknown primitive"):
            ad.apply_primitive("conv2d", Tensor([0.0]))

    def test_embedding_lookup_accumulates_duplicate_rows(self):
        table = Parameter(np.arange(6.0).reshape(3, 2), name="t")
        out = ad.embedding_lookup(table, np.array([1, 1, 2]))
        loss = ad.tensor_sum(out)
        loss.backward()
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])


class TestBackward:
    def test_dot_gradient_is_other_operand(self):
        x = Parameter([1.0, 2.0, 3.0], name="x")
        y = Parameter([4.0, 5.0, 6.0], name="y")
        ad.dot(x, y).backward()
        np.testing.assert_array_equal(x.grad, y.data)
        np.testing.assert_array_equal(y.grad, x.data)

    def test_softmax_sum_has_zero_gradient(self):
        z = Parameter(np.random.default_rng(2).normal(size=5), name="z")
        loss = ad.tensor_sum(ad.softmax(z, axis=0))
        loss.backward()
        np.testing.assert_allclose(z.grad, 0.0, atol=1e-12)

    def test_chained_matmuls_match_finite_differences(self):
        rng = np.random.default_rng(3)
        a = Parameter(rng.normal(size=(4, 3)), name="a")
        b = Parameter(rng.normal(size=(3, 5)), name="b")
        c = Parameter(rng.normal(size=(5, 2)), name="c")

        def fn():
            return ad.tensor_sum(ad.matmul(ad.matmul(a, b), c))

        assert ad.check_gradients(fn, [a, b, c], step=1e-6) < 1e-6

    def test_backward_requires_scalar(self):
        t = ad.add(Tensor(np.zeros(3), requires_grad=True), Tensor(np.ones(3)))
        with pytest.raises(ValueError, match="scalar"):
            t.backward()

    def test_backward_bit_identical_across_runs(self):
        rng = np.random.default_rng(4)
        w = Parameter(rng.normal(size=(6, 6)), name="w")
        x = Tensor(rng.normal(size=(2, 6)))

        def run():
            w.zero_grad()
            h = ad.relu(ad.matmul(x, w))
            loss = ad.tensor_sum(ad.softmax(h, axis=1))
            loss.backward()
            return w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_nonparticipating_parameter_keeps_zero_gradient(self):
        used = Parameter([1.0, 2.0], name="used")
        unused = Parameter([3.0], name="unused")
        ad.tensor_sum(ad.mul(used, used)).backward()
        np.testing.assert_array_equal(unused.grad, [0.0])

    def test_broadcast_add_gradient(self):
        x = Parameter(np.ones((4, 3)), name="x")
        b = Parameter(np.zeros(3), name="b")
        ad.tensor_sum(ad.add(x, b)).backward()
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


class TestCheckGradients:
    def test_quadratic_form_closed_form(self):
        rng = np.random.default_rng(5)
        mat = rng.normal(size=(4, 4))
        sym = Tensor(mat + mat.T)
        x = Parameter(rng.normal(size=(4, 1)), name="x")

        def fn():
            return ad.reshape(ad.matmul(ad.matmul(ad.transpose(x, (1, 0)), sym), x), ())

        assert ad.check_gradients(fn, [x], step=1e-6) < 1e-8
        # closed form: gradient of x'Ax is (A + A') x = 2 sym x here
        x.zero_grad()
        fn().backward()
        np.testing.assert_allclose(x.grad, 2 * sym.data @ x.data, rtol=1e-12)

    def test_constant_function_zero_everywhere(self):
        p = Parameter([1.0, -2.0], name="p")

        def fn():
            return Tensor(np.array(7.5))

        assert ad.check_gradients(fn, [p], step=1e-5) == 0.0

    def test_layer_norm_and_composites(self):
        rng = np.random.default_rng(6)
        x = Parameter(rng.normal(size=(3, 8)), name="x")
        g = Parameter(np.ones(8), name="g")
        b = Parameter(np.zeros(8), name="b")

        def fn():
            return ad.tensor_sum(ad.mul(ad.layer_norm(x, g, b), ad.layer_norm(x, g, b)))

        assert ad.check_gradients(fn, [x, g, b], step=1e-6) < 1e-6

    def test_logsumexp_matches_naive(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 5)) * 3
        out = ad.logsumexp(Tensor(x), axis=1)
        np.testing.assert_allclose(out.data, np.log(np.exp(x).sum(axis=1)), rtol=1e-12)

    def test_gather_and_interleave_gradients(self):
        rng = np.random.default_rng(8)
        x = Parameter(rng.normal(size=(2, 5, 3)), name="x")
        idx = np.array([[0, 2], [4, 4]])
        nodes = Parameter(rng.normal(size=(2, 3, 4)), name="n")
        conns = Parameter(rng.normal(size=(2, 2, 4)), name="c")

        def fn():
            g = ad.gather_rows(x, idx)
            woven = ad.interleave(nodes, conns, axis=1)
            return ad.add(ad.tensor_sum(ad.mul(g, g)), ad.tensor_sum(ad.mul(woven, woven)))

        assert ad.check_gradients(fn, [x, nodes, conns], step=1e-6) < 1e-7


class TestCheckpoint:
    def test_round_trip_exact_at_64_bit(self, tmp_path):
        rng = np.random.default_rng(9)
        arrays = {
            "w": rng.normal(size=(17, 5)),
            "b": rng.normal(size=(5,)) * 1e-13,
        }
        path = tmp_path / "ckpt.npz"
        ad.save_arrays(path, arrays, meta={"note": "x"})
        loaded, meta = ad.load_arrays(path)
        assert meta == {"note": "x"}
        for key, arr in arrays.items():
            assert np.array_equal(loaded[key], arr)
            assert loaded[key].dtype == np.float64

    def test_format_version_enforced(self, tmp_path):
        path = tmp_path / "bad.npz"
        header = b'{"format": 999, "meta": {}}'
        np.savez(path, __header__=np.frombuffer(header, dtype=np.uint8))
        with pytest.raises(ValueError, match="format"):
            ad.load_arrays(path)
