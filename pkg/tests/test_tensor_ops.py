"""numeric core: tensors, the op set, the tape, and gradient checking."""

from __future__ import annotations

import math

import numpy as np
import pytest

import memmixer as mm
from memmixer import ops
from memmixer.errors import ConfigError, NonFiniteError, ShapeError, TapeError
from memmixer.gradcheck import grad_check
from memmixer.tensor import Parameter, Tape, Tensor, backward

from conftest import fd_gradient, rel_err


def tensor(x):
    return Tensor(np.asarray(x, dtype=float))


class TestTensor:
    def test_scalar_and_vector_promotion(self):
        assert Tensor(3.0).shape == (1, 1)
        assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)

    def test_rejects_higher_rank(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2, 2)))

    def test_rejects_empty(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_precision_mode(self):
        mm.set_precision(64)
        assert Tensor(1.0).data.dtype == np.float64
        mm.set_precision(32)
        assert Tensor(1.0).data.dtype == np.float32
        with pytest.raises(ConfigError):
            mm.set_precision(16)

    def test_parameter_grad_matches_shape_and_zeroes(self):
        p = Parameter(tensor([[1.0, 2.0]]), "p")
        assert p.grad.data.shape == p.value.data.shape
        p.grad.data += 3.0
        p.zero_grad()
        assert np.all(p.grad.data == 0.0)


class TestMatmul:
    def test_identity(self):
        out = ops.matmul(tensor(np.eye(2)), tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_row_times_column(self):
        out = ops.matmul(tensor([[1.0, 2.0]]), tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ops.matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 2))))

    def test_transpose_flags_match_numpy(self):
        mm.set_precision(64)
        rng = np.random.default_rng(0)
        np.testing.assert_allclose(
            ops.matmul(tensor(x := rng.standard_normal((3, 4))),
                       tensor(y := rng.standard_normal((5, 4))),
                       transpose_b=True).data,
            x @ y.T, rtol=1e-6)
        np.testing.assert_allclose(
            ops.matmul(tensor(x := rng.standard_normal((4, 3))),
                       tensor(y := rng.standard_normal((4, 5))),
                       transpose_a=True).data,
            x.T @ y, rtol=1e-6)
        np.testing.assert_allclose(
            ops.matmul(tensor(x := rng.standard_normal((4, 3))),
                       tensor(y := rng.standard_normal((5, 4))),
                       transpose_a=True, transpose_b=True).data,
            x.T @ y.T, rtol=1e-6)

    def test_gradient_vs_central_differences(self):
        mm.set_precision(64)
        rng = np.random.default_rng(1)
        a = Parameter(Tensor(rng.standard_normal((3, 4))), "a")
        b = Parameter(Tensor(rng.standard_normal((4, 5))), "b")
        # weight the entries so the loss is not symmetric in the operands
        w = Tensor(rng.standard_normal((3, 5)))

        def loss_fn():
            return ops.sum_all(ops.mul(ops.matmul(a.value, b.value), w))

        with Tape() as tape:
            loss = loss_fn()
        backward(tape, loss)
        for p in (a, b):
            numeric = fd_gradient(loss_fn, p)
            assert rel_err(p.grad.data, numeric).max() < 1e-6


class TestGelu:
    def test_zero(self):
        assert ops.gelu(tensor(0.0)).item() == 0.0

    def test_at_one_matches_erf_oracle(self):
        # x * Phi(x) evaluated independently through math.erf
        expected = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        assert abs(expected - 0.841345) < 5e-7  # the documented 6-decimal value
        mm.set_precision(64)
        assert ops.gelu(Tensor(1.0)).item() == pytest.approx(expected, abs=1e-12)

    def test_derivative_at_zero_is_half(self):
        mm.set_precision(64)
        w = Parameter(Tensor(0.0), "w")
        with Tape() as tape:
            loss = ops.sum_all(ops.gelu(w.value))
        backward(tape, loss)
        assert w.grad.data[0, 0] == pytest.approx(0.5, abs=1e-15)


class TestLayerNorm:
    def test_constant_row_normalizes_to_zero(self):
        out = ops.layer_norm(tensor([5.0, 5.0, 5.0]), tensor([1.0, 1.0, 1.0]),
                             tensor([0.0, 0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])

    def test_unit_variance_row(self):
        mm.set_precision(64)
        out = ops.layer_norm(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 1.0, 1.0]),
                             Tensor([0.0, 0.0, 0.0]), eps=1e-15)
        expected = 1.0 / math.sqrt(2.0 / 3.0)  # mu=2, population var=2/3
        np.testing.assert_allclose(out.data, [[-expected, 0.0, expected]],
                                   atol=1e-9)
        assert abs(expected - 1.22474) < 1e-5

    def test_affine_only(self):
        rng = np.random.default_rng(2)
        x = tensor(rng.standard_normal((4, 3)))
        out = ops.layer_norm(x, tensor([0.0, 0.0, 0.0]), tensor([7.0, 7.0, 7.0]))
        np.testing.assert_array_equal(out.data, np.full((4, 3), 7.0,
                                                        dtype=out.data.dtype))

    def test_row_statistics_property(self):
        mm.set_precision(64)
        rng = np.random.default_rng(3)
        for _ in range(25):
            rows, cols = int(rng.integers(1, 6)), int(rng.integers(8, 64))
            x = Tensor(rng.standard_normal((rows, cols)) * rng.uniform(0.5, 3.0))
            out = ops.layer_norm(x, Tensor(np.ones((1, cols))),
                                 Tensor(np.zeros((1, cols)))).data
            assert np.abs(out.mean(axis=1)).max() < 1e-6
            assert np.abs(out.var(axis=1) - 1.0).max() < 1e-4

    def test_gamma_shape_checked(self):
        with pytest.raises(ShapeError):
            ops.layer_norm(tensor([[1.0, 2.0]]), tensor([1.0]), tensor([0.0]))


class TestPlumbingOps:
    def test_concat_rows(self):
        out = ops.concat([tensor([[1.0], [2.0]]), tensor([[3.0]])], axis=0)
        np.testing.assert_array_equal(out.data, [[1.0], [2.0], [3.0]])

    def test_mean_axis1(self):
        out = ops.mean(tensor([[2.0, 4.0]]), axis=1)
        np.testing.assert_array_equal(out.data, [[3.0]])

    def test_slice_concat_roundtrip_bit_exact(self):
        rng = np.random.default_rng(4)
        x = tensor(rng.standard_normal((5, 3)))
        parts = [ops.slice_(x, 0, 0, 2), ops.slice_(x, 0, 2, 5)]
        back_together = ops.concat(parts, axis=0)
        assert np.array_equal(back_together.data, x.data)
        cols = [ops.slice_(x, 1, 0, 1), ops.slice_(x, 1, 1, 3)]
        assert np.array_equal(ops.concat(cols, axis=1).data, x.data)

    def test_slice_out_of_range(self):
        with pytest.raises(ShapeError):
            ops.slice_(tensor(np.zeros((2, 2))), 0, 1, 3)

    def test_concat_extent_mismatch(self):
        with pytest.raises(ShapeError):
            ops.concat([tensor(np.zeros((2, 2))), tensor(np.zeros((2, 3)))], axis=0)

    def test_add_row_broadcast(self):
        out = ops.add(tensor([[1.0, 2.0], [3.0, 4.0]]), tensor([[10.0, 20.0]]))
        np.testing.assert_array_equal(out.data, [[11.0, 22.0], [13.0, 24.0]])
        with pytest.raises(ShapeError):
            ops.add(tensor(np.zeros((2, 2))), tensor(np.zeros((2, 3))))

    def test_transpose(self):
        out = ops.transpose2d(tensor([[1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(out.data, [[1.0], [2.0], [3.0]])

    def test_mlp2_equals_primitive_composition(self):
        mm.set_precision(64)
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((3, 4)))
        w1 = Tensor(rng.standard_normal((6, 4)))
        b1 = Tensor(rng.standard_normal((1, 6)))
        w2 = Tensor(rng.standard_normal((4, 6)))
        b2 = Tensor(rng.standard_normal((1, 4)))
        fused = ops.mlp2(x, w1, b1, w2, b2)
        h = ops.gelu(ops.linear(x, w1, b1, transpose_w=True))
        manual = ops.linear(h, w2, b2, transpose_w=True)
        np.testing.assert_allclose(fused.data, manual.data, atol=1e-14)

    def test_mlp2_transposed_equals_primitive_composition(self):
        # token-mix layout: the MLP runs over the transposed input
        mm.set_precision(64)
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((3, 4)))
        w1 = Tensor(rng.standard_normal((6, 3)))
        b1 = Tensor(rng.standard_normal((1, 6)))
        w2 = Tensor(rng.standard_normal((3, 6)))
        b2 = Tensor(rng.standard_normal((1, 3)))
        fused = ops.mlp2(x, w1, b1, w2, b2, transpose_io=True)
        xt = ops.transpose2d(x)
        h = ops.gelu(ops.linear(xt, w1, b1, transpose_w=True))
        manual = ops.transpose2d(ops.linear(h, w2, b2, transpose_w=True))
        assert fused.data.shape == (3, 4)
        np.testing.assert_allclose(fused.data, manual.data, atol=1e-14)


class TestBackward:
    def test_gelu_grad_at_zero(self):
        mm.set_precision(64)
        w = Parameter(Tensor([[0.0, 0.0]]), "w")
        with Tape() as tape:
            loss = ops.sum_all(ops.gelu(w.value))
        backward(tape, loss)
        np.testing.assert_allclose(w.grad.data, [[0.5, 0.5]], atol=1e-15)

    def test_linear_model_mse_matches_hand_derived_gradient(self):
        mm.set_precision(64)
        # one data point (x, y): loss = (w x + b - y)^2
        x_val, y_val = 1.7, -0.3
        w = Parameter(Tensor(0.4), "w")
        b = Parameter(Tensor(0.1), "b")
        with Tape() as tape:
            pred = ops.add(ops.matmul(w.value, Tensor(x_val)), b.value)
            diff = ops.sub(pred, Tensor(y_val))
            loss = ops.sum_all(ops.mul(diff, diff))
        backward(tape, loss)
        resid = 0.4 * x_val + 0.1 - y_val
        assert abs(w.grad.data[0, 0] - 2.0 * resid * x_val) < 1e-12
        assert abs(b.grad.data[0, 0] - 2.0 * resid) < 1e-12

    def test_backward_twice_is_an_error(self):
        w = Parameter(Tensor(1.0), "w")
        with Tape() as tape:
            loss = ops.sum_all(ops.gelu(w.value))
        backward(tape, loss)
        with pytest.raises(TapeError):
            backward(tape, loss)

    def test_non_scalar_loss_rejected(self):
        w = Parameter(Tensor([[1.0, 2.0]]), "w")
        with Tape() as tape:
            out = ops.gelu(w.value)
        with pytest.raises(TapeError):
            backward(tape, out)

    def test_gradients_accumulate_across_backward_calls(self):
        mm.set_precision(64)
        w = Parameter(Tensor(0.0), "w")
        for _ in range(2):
            with Tape() as tape:
                loss = ops.sum_all(ops.gelu(w.value))
            backward(tape, loss)
        assert w.grad.data[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_forward_without_tape_records_nothing(self):
        w = Parameter(Tensor(1.0), "w")
        out = ops.gelu(w.value)
        assert out.data.shape == (1, 1)


def _random_op_cases(rng):
    """(name, builder) pairs; each builder returns (loss_fn, params)."""
    def shapes():
        m = int(rng.integers(1, 5))
        k = int(rng.integers(1, 5))
        n = int(rng.integers(1, 5))
        return m, k, n

    def matmul_case():
        m, k, n = shapes()
        a = Parameter(Tensor(rng.standard_normal((m, k))), "a")
        b = Parameter(Tensor(rng.standard_normal((k, n))), "b")
        w = Tensor(rng.standard_normal((m, n)))
        return lambda: ops.sum_all(ops.mul(ops.matmul(a.value, b.value), w)), [a, b]

    def linear_case():
        m, k, n = shapes()
        x = Parameter(Tensor(rng.standard_normal((m, k))), "x")
        wt = Parameter(Tensor(rng.standard_normal((n, k))), "wt")
        bias = Parameter(Tensor(rng.standard_normal((1, n))), "bias")
        w = Tensor(rng.standard_normal((m, n)))
        return (lambda: ops.sum_all(ops.mul(
            ops.linear(x.value, wt.value, bias.value, transpose_w=True), w)),
            [x, wt, bias])

    def gelu_case():
        m, k, _ = shapes()
        x = Parameter(Tensor(rng.standard_normal((m, k)) * 2.0), "x")
        w = Tensor(rng.standard_normal((m, k)))
        return lambda: ops.sum_all(ops.mul(ops.gelu(x.value), w)), [x]

    def layer_norm_case():
        m, _, _ = shapes()
        c = int(rng.integers(3, 8))
        x = Parameter(Tensor(rng.standard_normal((m, c)) * 1.5), "x")
        g = Parameter(Tensor(rng.standard_normal((1, c))), "g")
        b = Parameter(Tensor(rng.standard_normal((1, c))), "b")
        w = Tensor(rng.standard_normal((m, c)))
        return (lambda: ops.sum_all(ops.mul(
            ops.layer_norm(x.value, g.value, b.value), w)), [x, g, b])

    def mix_case():
        m, k, _ = shapes()
        m = max(m, 2)
        x = Parameter(Tensor(rng.standard_normal((m, k))), "x")
        y = Parameter(Tensor(rng.standard_normal((m, k))), "y")
        w = Tensor(rng.standard_normal((k, m)))

        def loss_fn():
            s = ops.sub(ops.scale(x.value, 1.3), y.value)
            s = ops.mul(s, ops.add(x.value, y.value))
            s = ops.concat([ops.slice_(s, 0, 0, 1), ops.slice_(s, 0, 1, m)], axis=0)
            return ops.sum_all(ops.mul(ops.transpose2d(s), w))
        return loss_fn, [x, y]

    def mean_case():
        m, k, _ = shapes()
        x = Parameter(Tensor(rng.standard_normal((m, k))), "x")
        axis = int(rng.integers(0, 2))
        w = Tensor(rng.standard_normal((1, k) if axis == 0 else (m, 1)))
        return lambda: ops.sum_all(ops.mul(ops.mean(x.value, axis), w)), [x]

    def mlp2_case():
        m, k, n = shapes()
        h = int(rng.integers(2, 6))
        x = Parameter(Tensor(rng.standard_normal((m, k))), "x")
        w1 = Parameter(Tensor(rng.standard_normal((h, k))), "w1")
        b1 = Parameter(Tensor(rng.standard_normal((1, h))), "b1")
        w2 = Parameter(Tensor(rng.standard_normal((n, h))), "w2")
        b2 = Parameter(Tensor(rng.standard_normal((1, n))), "b2")
        w = Tensor(rng.standard_normal((m, n)))
        return (lambda: ops.sum_all(ops.mul(
            ops.mlp2(x.value, w1.value, b1.value, w2.value, b2.value), w)),
            [x, w1, b1, w2, b2])

    def mlp2_transposed_case():
        m, k, _ = shapes()
        h = int(rng.integers(2, 6))
        x = Parameter(Tensor(rng.standard_normal((m, k))), "x")
        w1 = Parameter(Tensor(rng.standard_normal((h, m))), "w1")
        b1 = Parameter(Tensor(rng.standard_normal((1, h))), "b1")
        w2 = Parameter(Tensor(rng.standard_normal((m, h))), "w2")
        b2 = Parameter(Tensor(rng.standard_normal((1, m))), "b2")
        w = Tensor(rng.standard_normal((m, k)))
        return (lambda: ops.sum_all(ops.mul(
            ops.mlp2(x.value, w1.value, b1.value, w2.value, b2.value,
                     transpose_io=True), w)),
            [x, w1, b1, w2, b2])

    return [matmul_case, linear_case, gelu_case, layer_norm_case, mix_case,
            mean_case, mlp2_case, mlp2_transposed_case]


class TestGradientProperty:
    def test_every_op_matches_central_differences(self):
        """>= 100 random cases across the whole op set, 1e-4 relative."""
        mm.set_precision(64)
        rng = np.random.default_rng(20240)
        cases = 0
        for round_ in range(13):
            for builder in _random_op_cases(rng):
                loss_fn, params = builder()
                for p in params:
                    p.zero_grad()
                with Tape() as tape:
                    loss = loss_fn()
                backward(tape, loss)
                for p in params:
                    numeric = fd_gradient(loss_fn, p)
                    worst = rel_err(p.grad.data, numeric).max()
                    assert worst < 1e-4, f"{builder.__name__}/{p.name}: {worst}"
                cases += 1
        assert cases >= 100

    def test_no_nan_inf_from_bounded_inputs(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            x = Tensor(rng.uniform(-1e3, 1e3, size=(3, 4)))
            y = Tensor(rng.uniform(-1e3, 1e3, size=(3, 4)))
            g = Tensor(rng.uniform(0.5, 2.0, size=(1, 4)))
            b = Tensor(rng.uniform(-1.0, 1.0, size=(1, 4)))
            for out in (ops.gelu(x), ops.add(x, y), ops.mul(x, y),
                        ops.layer_norm(x, g, b), ops.matmul(x, ops.transpose2d(y)),
                        ops.mean(x, 0), ops.sum_all(x)):
                assert np.isfinite(out.data).all()

    def test_non_finite_output_is_an_error(self):
        big = Tensor(np.full((2, 2), 3e38, dtype=np.float32))
        with pytest.raises(NonFiniteError):
            ops.add(big, big)


class TestGradCheck:
    def test_tiny_model_passes(self):
        mm.set_precision(64)
        rng = np.random.default_rng(6)
        w1 = Parameter(Tensor(rng.standard_normal((3, 3))), "w1")
        b = Parameter(Tensor(rng.standard_normal((1, 3))), "b")
        x = Tensor(rng.standard_normal((2, 3)))

        def loss_fn():
            return ops.sum_all(ops.gelu(ops.linear(x, w1.value, b.value,
                                                   transpose_w=True)))

        report = grad_check(loss_fn, [w1, b])
        assert report.max_rel_error <= 1e-4

    def test_zero_parameter_closure_is_empty_report(self):
        mm.set_precision(64)
        x = Tensor([[1.0, 2.0]])
        report = grad_check(lambda: ops.sum_all(ops.gelu(x)), [])
        assert report.per_param == {}
        assert report.max_rel_error == 0.0
        assert report.worst() is None

    def test_corrupted_adjoint_is_flagged(self):
        """Mutation fixture: an op whose recorded adjoint is wrong by 1.5x."""
        mm.set_precision(64)
        from memmixer.tensor import accumulate, active_tape

        w = Parameter(Tensor([[0.7, -0.4]]), "w")

        def crooked_double(t):
            out = Tensor.wrap(t.data * 2.0)
            tape = active_tape()
            if tape is not None:
                def adjoint(dy, adj):
                    accumulate(adj, t, dy * 3.0)  # should be 2.0
                tape.record(out, adjoint)
            return out

        def loss_fn():
            return ops.sum_all(crooked_double(w.value))

        report = grad_check(loss_fn, [w])
        assert report.max_rel_error > 1e-2

    def test_requires_64bit_mode(self):
        w = Parameter(Tensor(1.0), "w")
        with pytest.raises(ConfigError):
            grad_check(lambda: ops.sum_all(w.value), [w])

    def test_non_finite_tape_gradient_names_parameter(self):
        mm.set_precision(64)
        from memmixer.tensor import accumulate, active_tape

        w = Parameter(Tensor(1.0), "weird")

        def nan_grad_op(t):
            out = Tensor.wrap(t.data * 1.0)
            tape = active_tape()
            if tape is not None:
                tape.record(out, lambda dy, adj: accumulate(adj, t, dy * np.nan))
            return out

        with pytest.raises(NonFiniteError, match="weird"):
            grad_check(lambda: ops.sum_all(nan_grad_op(w.value)), [w])

    def test_non_finite_base_loss_aborts(self):
        mm.set_precision(64)
        w = Parameter(Tensor(0.0), "w")
        mm.set_finite_checks(False)
        try:
            def loss_fn():
                bad = np.array([[np.inf]])
                return ops.sum_all(Tensor(bad))
            with pytest.raises(NonFiniteError):
                grad_check(loss_fn, [w])
        finally:
            mm.set_finite_checks(True)
