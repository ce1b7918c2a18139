"""Every differentiable primitive is checked for value correctness and its
gradient is compared against dense central finite differences."""

import numpy as np
import pytest

from gridhil import autodiff as ad
from oracles import fd_scalar, segment_softmax_reference


def _grad_of(build, *arrays, h=1e-6):
    """Analytic and FD gradients of a scalar-valued tape program.

    build(tape, *tensors) must return a scalar Tensor.  Returns a list of
    (analytic, numeric) pairs, one per input array.
    """
    tape = ad.Tape()
    params = [tape.param(f"x{i}", a) for i, a in enumerate(arrays)]
    loss = build(tape, *params)
    grads = tape.backward(loss)
    out = []
    for i, a in enumerate(arrays):
        def scalar(values, i=i):
            t2 = ad.Tape()
            ps = [t2.param(f"x{j}", values if j == i else arrays[j])
                  for j in range(len(arrays))]
            return float(build(t2, *ps).values)
        out.append((grads[f"x{i}"], fd_scalar(scalar, a, h=h)))
    return out


def _check(build, *arrays, tol=1e-6, h=1e-6):
    for analytic, numeric in _grad_of(build, *arrays, h=h):
        assert analytic.shape == numeric.shape
        scale = max(np.max(np.abs(numeric)), 1.0)
        assert np.max(np.abs(analytic - numeric)) < tol * scale


RNG = np.random.default_rng(11)


class TestElementwise:
    def test_add_sub_mul_values(self):
        tape = ad.Tape()
        a = tape.constant(RNG.normal(size=(3, 4)))
        b = tape.constant(RNG.normal(size=(3, 4)))
        assert np.array_equal(ad.add(a, b).values, a.values + b.values)
        assert np.array_equal(ad.sub(a, b).values, a.values - b.values)
        assert np.array_equal(ad.mul(a, b).values, a.values * b.values)

    def test_add_grad_with_broadcast(self):
        a = RNG.normal(size=(5, 3))
        b = RNG.normal(size=(1, 3))
        square = lambda t, x, y: ad.sum_all(ad.mul(ad.add(x, y), ad.add(x, y)))
        _check(square, a, b)
        _check(lambda t, x, y: square(t, y, x), a, b)

    def test_sub_and_scale_grads(self):
        a = RNG.normal(size=(4, 2))
        b = RNG.normal(size=(4, 2))
        _check(lambda t, x, y: ad.sum_all(ad.mul(ad.sub(x, y), ad.sub(x, y))),
               a, b)
        _check(lambda t, x: ad.sum_all(ad.scale(x, -2.5)), a)

    def test_mul_broadcast_grads(self):
        a = RNG.normal(size=(6, 1))
        b = RNG.normal(size=(6, 4))
        _check(lambda t, x, y: ad.sum_all(ad.mul(x, y)), a, b)

    def test_exp_cos_sin_sqrt(self):
        a = RNG.normal(size=(3, 3))
        _check(lambda t, x: ad.sum_all(ad.exp(x)), a)
        _check(lambda t, x: ad.sum_all(ad.cos(x)), a)
        _check(lambda t, x: ad.sum_all(ad.sin(x)), a)
        pos = np.abs(a) + 0.5
        _check(lambda t, x: ad.sum_all(ad.sqrt(x)), pos)

    def test_sqrt_at_zero_has_zero_subgradient(self):
        tape = ad.Tape()
        x = tape.param("x", np.array([0.0, 4.0]))
        g = tape.backward(ad.sum_all(ad.sqrt(x)))["x"]
        assert g[0] == 0.0
        assert g[1] == pytest.approx(0.25)

    def test_relu_and_leaky_relu(self):
        a = RNG.normal(size=(5, 4)) * 2
        _check(lambda t, x: ad.sum_all(ad.relu(x)), a)
        _check(lambda t, x: ad.sum_all(ad.leaky_relu(x, 0.2)), a)
        tape = ad.Tape()
        x = tape.param("x", np.array([-1.0, 0.0, 2.0]))
        y = ad.leaky_relu(x, 0.2)
        assert np.allclose(y.values, [-0.2, 0.0, 2.0])
        g = tape.backward(ad.sum_all(y))["x"]
        # Kink resolved to the negative branch.
        assert list(g) == [0.2, 0.2, 1.0]
        tape = ad.Tape()
        x = tape.param("x", np.array([0.0]))
        g = tape.backward(ad.sum_all(ad.relu(x)))["x"]
        assert g[0] == 0.0


class TestLinear:
    def test_matmul_value_and_grads(self):
        a = RNG.normal(size=(4, 3))
        b = RNG.normal(size=(3, 5))
        tape = ad.Tape()
        ta, tb = tape.constant(a), tape.constant(b)
        assert np.allclose(ad.matmul(ta, tb).values, a @ b, atol=1e-14)
        _check(lambda t, x, y: ad.sum_all(ad.mul(ad.matmul(x, y),
                                                 ad.matmul(x, y))), a, b)

    def test_matmul_rejects_bad_shapes(self):
        tape = ad.Tape()
        with pytest.raises(ValueError):
            ad.matmul(tape.constant(np.ones(3)), tape.constant(np.ones((3, 2))))
        with pytest.raises(ValueError):
            ad.matmul(tape.constant(np.ones((2, 3))),
                      tape.constant(np.ones((4, 2))))

    def test_concat_value_and_grad(self):
        a = RNG.normal(size=(4, 2))
        b = RNG.normal(size=(4, 3))
        tape = ad.Tape()
        out = ad.concat(tape.constant(a), tape.constant(b))
        assert np.array_equal(out.values, np.concatenate([a, b], axis=-1))
        _check(lambda t, x, y: ad.sum_all(ad.mul(ad.concat(x, y),
                                                 ad.concat(x, y))), a, b)


class TestIndexing:
    def test_gather_rows_value(self):
        a = RNG.normal(size=(5, 3))
        idx = np.array([4, 0, 0, 2])
        tape = ad.Tape()
        out = ad.gather_rows(tape.constant(a), idx)
        assert np.array_equal(out.values, a[idx])

    def test_gather_rows_scatter_add_backward(self):
        # Duplicate indices must accumulate, not overwrite.
        a = RNG.normal(size=(5, 3))
        idx = np.array([1, 1, 1, 3])
        _check(lambda t, x: ad.sum_all(ad.mul(ad.gather_rows(x, idx),
                                              ad.gather_rows(x, idx))), a)
        tape = ad.Tape()
        x = tape.param("x", np.ones((4, 1)))
        g = tape.backward(ad.sum_all(
            ad.gather_rows(x, np.array([2, 2, 2]))))["x"]
        assert list(g.ravel()) == [0.0, 0.0, 3.0, 0.0]

    def test_segment_sum_value_and_grad(self):
        a = RNG.normal(size=(6, 2))
        seg = np.array([0, 0, 2, 1, 2, 2])
        tape = ad.Tape()
        out = ad.segment_sum(tape.constant(a), seg, 4)
        want = np.zeros((4, 2))
        np.add.at(want, seg, a)
        assert np.allclose(out.values, want, atol=1e-15)
        assert np.array_equal(out.values[3], [0.0, 0.0])
        _check(lambda t, x: ad.sum_all(ad.mul(ad.segment_sum(x, seg, 4),
                                              ad.segment_sum(x, seg, 4))), a)


class TestSoftmaxAndNorms:
    def test_segment_softmax_matches_reference(self):
        a = RNG.normal(size=(7, 1)) * 3
        seg = np.array([0, 0, 0, 1, 2, 2, 4])
        tape = ad.Tape()
        out = ad.segment_softmax(tape.constant(a), seg, 5)
        assert np.allclose(out.values, segment_softmax_reference(a, seg),
                           atol=1e-14)
        for s in (0, 1, 2, 4):
            assert out.values[seg == s].sum() == pytest.approx(1.0)

    def test_segment_softmax_large_logits_stable(self):
        a = np.array([[900.0], [901.0], [899.5]])
        seg = np.array([0, 0, 0])
        tape = ad.Tape()
        out = ad.segment_softmax(tape.constant(a), seg, 1)
        assert np.all(np.isfinite(out.values))
        assert out.values.sum() == pytest.approx(1.0)

    def test_segment_softmax_grad(self):
        a = RNG.normal(size=(6, 1))
        seg = np.array([0, 0, 1, 1, 1, 2])
        w = RNG.normal(size=(6, 1))
        _check(lambda t, x: ad.sum_all(
            ad.mul(ad.segment_softmax(x, seg, 3), t.constant(w))), a)

    def test_singleton_segments_have_zero_grad(self):
        a = RNG.normal(size=(3, 1))
        seg = np.array([0, 1, 2])
        tape = ad.Tape()
        x = tape.param("x", a)
        out = ad.segment_softmax(x, seg, 3)
        assert np.allclose(out.values, 1.0)
        g = tape.backward(ad.sum_all(
            ad.mul(out, tape.constant(RNG.normal(size=(3, 1))))))["x"]
        assert np.array_equal(g, np.zeros((3, 1)))

    def test_l2_normalize_rows_and_grad(self):
        a = RNG.normal(size=(5, 4)) + 0.1
        tape = ad.Tape()
        out = ad.l2_normalize(tape.constant(a))
        assert np.allclose(np.linalg.norm(out.values, axis=-1), 1.0)
        w = RNG.normal(size=(5, 4))
        _check(lambda t, x: ad.sum_all(ad.mul(ad.l2_normalize(x),
                                              t.constant(w))), a)

    def test_l2_normalize_zero_row_is_safe(self):
        tape = ad.Tape()
        x = tape.param("x", np.array([[0.0, 0.0], [3.0, 4.0]]))
        out = ad.l2_normalize(x)
        assert np.array_equal(out.values[0], [0.0, 0.0])
        assert np.allclose(out.values[1], [0.6, 0.8])
        g = tape.backward(ad.sum_all(out))["x"]
        assert np.all(np.isfinite(g))


class TestReductionsAndLosses:
    def test_sum_all(self):
        a = RNG.normal(size=(3, 5))
        tape = ad.Tape()
        out = ad.sum_all(tape.constant(a))
        assert out.values.shape == ()
        assert float(out.values) == pytest.approx(a.sum())
        _check(lambda t, x: ad.sum_all(x), a)

    def test_mse_value_and_grads(self):
        a = RNG.normal(size=(4, 2))
        b = RNG.normal(size=(4, 2))
        tape = ad.Tape()
        out = ad.mse(tape.constant(a), tape.constant(b))
        assert float(out.values) == pytest.approx(np.mean((a - b) ** 2))
        _check(lambda t, x, y: ad.mse(x, y), a, b)

    def test_mse_shape_mismatch_rejected(self):
        tape = ad.Tape()
        with pytest.raises(ValueError):
            ad.mse(tape.constant(np.ones((2, 2))),
                   tape.constant(np.ones((2, 3))))

    def test_hinge_sq_value(self):
        tape = ad.Tape()
        x = tape.constant(np.array([[0.5], [0.95], [1.3]]))
        out = ad.hinge_sq(x, 0.9, 1.1)
        assert np.allclose(out.values, [[0.16], [0.0], [0.04]], atol=1e-15)

    def test_hinge_sq_grad_away_from_kinks(self):
        a = np.array([[0.5], [1.0], [1.4], [0.2]])
        _check(lambda t, x: ad.sum_all(ad.hinge_sq(x, 0.9, 1.1)), a)

    def test_hinge_sq_one_sided_with_infinite_bound(self):
        tape = ad.Tape()
        x = tape.constant(np.array([[2.0], [-3.0]]))
        out = ad.hinge_sq(x, -np.inf, 1.0)
        assert np.allclose(out.values, [[1.0], [0.0]])
        out = ad.hinge_sq(x, 0.0, np.inf)
        assert np.allclose(out.values, [[0.0], [9.0]])

    def test_hinge_sq_array_bounds(self):
        tape = ad.Tape()
        x = tape.constant(np.array([[1.0], [1.0]]))
        out = ad.hinge_sq(x, np.array([[1.5], [0.0]]), np.array([[2.0], [0.5]]))
        assert np.allclose(out.values, [[0.25], [0.25]])


class TestTapeMechanics:
    def test_unreachable_param_gets_zeros(self):
        tape = ad.Tape()
        x = tape.param("x", np.ones((2, 2)))
        tape.param("unused", np.ones((3,)))
        g = tape.backward(ad.sum_all(x))
        assert np.array_equal(g["unused"], np.zeros(3))
        assert np.array_equal(g["x"], np.ones((2, 2)))

    def test_fan_out_accumulates(self):
        tape = ad.Tape()
        a = np.array([1.0, -2.0, 3.0])
        x = tape.param("x", a)
        # f = sum(x*x + x) -> df/dx = 2x + 1
        loss = ad.sum_all(ad.add(ad.mul(x, x), x))
        assert np.allclose(tape.backward(loss)["x"], 2 * a + 1)

    def test_diamond_graph(self):
        tape = ad.Tape()
        x = tape.param("x", np.array([3.0]))
        y = ad.add(x, x)
        z = ad.mul(y, y)  # (2x)^2 -> 8x
        assert tape.backward(ad.sum_all(z))["x"][0] == pytest.approx(24.0)

    def test_backward_requires_scalar(self):
        tape = ad.Tape()
        x = tape.param("x", np.ones((2, 2)))
        with pytest.raises(ValueError):
            tape.backward(ad.mul(x, x))

    def test_backward_rejects_foreign_loss(self):
        t1, t2 = ad.Tape(), ad.Tape()
        loss = ad.sum_all(t2.param("x", np.ones(2)))
        with pytest.raises(ValueError):
            t1.backward(loss)

    def test_tensors_cannot_cross_tapes(self):
        t1, t2 = ad.Tape(), ad.Tape()
        with pytest.raises(ValueError):
            ad.add(t1.constant(np.ones(2)), t2.constant(np.ones(2)))

    def test_duplicate_param_name_rejected(self):
        tape = ad.Tape()
        tape.param("w", np.ones(2))
        with pytest.raises(ValueError):
            tape.param("w", np.ones(2))

    def test_overflow_raises(self):
        tape = ad.Tape()
        with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
            ad.exp(tape.constant(np.array([1000.0])))

    def test_nan_raises(self):
        tape = ad.Tape()
        a = tape.constant(np.array([np.inf]))
        b = tape.constant(np.array([0.0]))
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            ad.mul(a, b)

    def test_leaves_copy_their_input(self):
        src = np.array([1, 2, 3], dtype=np.int64)
        tape = ad.Tape()
        t = tape.constant(src)
        assert t.values.dtype == np.float64
        src[0] = 99
        assert t.values[0] == 1.0
