import numpy as np
import numpy.testing as npt
import pytest

from deepe.numkernel import (
    Rng,
    ShapeError,
    matmul,
    relu_backward,
    relu_forward,
    xavier_normal_init,
)


def triple_loop_matmul(a, b):
    """Independent O(n^3) reference product."""
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += float(a[i, k]) * float(b[k, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        rng = Rng(1)
        a = rng.normal(size=(3, 4), dtype=np.float64)
        npt.assert_array_equal(matmul(np.eye(3), a), a)

    def test_zeros_annihilate(self):
        rng = Rng(2)
        a = rng.normal(size=(3, 4), dtype=np.float64)
        npt.assert_array_equal(matmul(np.zeros((2, 3)), a), np.zeros((2, 4)))

    def test_matches_triple_loop(self):
        rng = Rng(3)
        a = rng.normal(size=(5, 4), dtype=np.float64)
        b = rng.normal(size=(4, 3), dtype=np.float64)
        npt.assert_allclose(matmul(a, b), triple_loop_matmul(a, b), atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(np.zeros((2, 3)), np.zeros((4, 5)))

    def test_associativity(self):
        rng = Rng(4)
        for trial in range(5):
            a = rng.normal(size=(4, 5), dtype=np.float64)
            b = rng.normal(size=(5, 6), dtype=np.float64)
            c = rng.normal(size=(6, 3), dtype=np.float64)
            npt.assert_allclose(
                matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-10
            )


class TestXavierNormal:
    def test_variance_matches_fan_sum(self):
        w = xavier_normal_init(1000, 1000, Rng(5), np.float64)
        target = 2.0 / 2000.0
        assert abs(w.var() - target) < 0.1 * target

    def test_same_seed_same_matrix(self):
        a = xavier_normal_init(8, 8, Rng(6))
        b = xavier_normal_init(8, 8, Rng(6))
        npt.assert_array_equal(a, b)

    def test_degenerate_shape(self):
        w = xavier_normal_init(1, 1, Rng(7))
        assert w.shape == (1, 1)
        assert np.isfinite(w).all()

    def test_rejects_nonpositive_shape(self):
        with pytest.raises(ValueError):
            xavier_normal_init(0, 3, Rng(8))


class TestRelu:
    def test_forward_definition(self):
        npt.assert_array_equal(relu_forward(np.array([1.0, -1.0])), [1.0, 0.0])

    def test_backward_definition(self):
        out = relu_backward(np.array([2.0, -3.0]), np.array([5.0, 7.0]))
        npt.assert_array_equal(out, [5.0, 0.0])

    def test_subgradient_at_zero_is_zero(self):
        out = relu_backward(np.array([0.0]), np.array([3.0]))
        npt.assert_array_equal(out, [0.0])

    def test_backward_matches_finite_differences(self):
        rng = Rng(9)
        x = rng.normal(size=(6, 5), dtype=np.float64)
        x = x[np.abs(x).min(axis=1) > 1e-4]  # stay away from the kink
        upstream = rng.normal(size=x.shape, dtype=np.float64)
        analytic = relu_backward(x, upstream)
        h = 1e-5
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            numeric[idx] = np.sum((relu_forward(xp) - relu_forward(xm)) * upstream) / (2 * h)
        npt.assert_allclose(analytic, numeric, atol=1e-6)

    def test_backward_shape_mismatch(self):
        with pytest.raises(ShapeError):
            relu_backward(np.zeros((2, 2)), np.zeros((2, 3)))


class TestRng:
    def test_same_seed_same_sequence(self):
        a, b = Rng(11), Rng(11)
        npt.assert_array_equal(a.normal(size=(4, 4)), b.normal(size=(4, 4)))
        npt.assert_array_equal(a.random(10), b.random(10))
        npt.assert_array_equal(a.permutation(20), b.permutation(20))

    def test_children_are_independent_and_reproducible(self):
        root = Rng(12)
        left = root.child(0).normal(size=5)
        right = root.child(1).normal(size=5)
        assert not np.array_equal(left, right)
        npt.assert_array_equal(left, Rng(12).child(0).normal(size=5))

    def test_kernel_op_sequence_is_bit_reproducible(self):
        def run():
            rng = Rng(13)
            w = xavier_normal_init(6, 6, rng, np.float64)
            x = rng.normal(size=(3, 6), dtype=np.float64)
            return relu_forward(matmul(x, w)).tobytes()

        assert run() == run()
