import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from replaylab import autodiff as ad
from replaylab.autodiff import Tensor


def naive_matmul(a, b):
    """Triple-loop contraction, the independent oracle."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            for l in range(k):
                out[i, j] += float(a[i, l]) * float(b[l, j])
    return out


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2, dtype=np.float32)
        out = ad.matmul(Tensor(eye), Tensor(eye))
        np.testing.assert_array_equal(out.data, eye)

    def test_column_selection(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
        b = Tensor(np.array([[0.0], [1.0]], dtype=np.float32))
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[2.0], [4.0]])

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((4, 5)).astype(np.float32)
        got = ad.matmul(Tensor(a), Tensor(b)).data
        want = naive_matmul(a, b)
        # 8 ulps of accumulated tolerance at 32-bit
        tol = 8 * np.spacing(np.abs(want).max().astype(np.float32))
        assert np.abs(got - want).max() <= tol

    def test_shape_mismatch_reports_both_shapes(self):
        a = Tensor(np.zeros((2, 3), dtype=np.float32))
        b = Tensor(np.zeros((4, 5), dtype=np.float32))
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(a, b)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((2, 3, 16)))
        targets = np.zeros((2, 3), dtype=np.int64)
        mask = np.ones((2, 3))
        loss = ad.softmax_cross_entropy(logits, targets, mask)
        assert loss.item() == pytest.approx(math.log(16), abs=1e-6)

    def test_near_deterministic(self):
        logits = np.zeros((1, 1, 8))
        logits[0, 0, 3] = 50.0
        loss = ad.softmax_cross_entropy(Tensor(logits), np.array([[3]]), np.ones((1, 1)))
        assert loss.item() < 1e-6

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((2, 4, 7))
        targets = rng.integers(0, 7, size=(2, 4))
        mask = rng.integers(0, 2, size=(2, 4)).astype(np.float64)
        mask[0, 0] = 1.0
        # direct -log(exp(z_t)/sum exp(z_v)) in 64-bit, no max-subtraction
        total, n = 0.0, 0
        for b in range(2):
            for t in range(4):
                if mask[b, t]:
                    z = logits[b, t]
                    total += -math.log(math.exp(z[targets[b, t]]) / np.exp(z).sum())
                    n += 1
        want = total / n
        got = ad.softmax_cross_entropy(Tensor(logits), targets, mask).item()
        assert got == pytest.approx(want, rel=1e-12)

    def test_stable_under_large_shift(self):
        logits = np.zeros((1, 1, 4))
        shifted = logits + 10_000.0
        a = ad.softmax_cross_entropy(Tensor(logits), np.array([[0]]), np.ones((1, 1))).item()
        b = ad.softmax_cross_entropy(Tensor(shifted), np.array([[0]]), np.ones((1, 1))).item()
        assert a == pytest.approx(b, abs=1e-9)

    def test_all_zero_mask_rejected(self):
        with pytest.raises(ValueError, match="mask"):
            ad.softmax_cross_entropy(Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), dtype=int), np.zeros((1, 2)))


class TestSoftmax:
    @given(arrays(np.float64, (3, 8), elements=st.floats(-30, 30)))
    def test_rows_sum_to_one(self, x):
        y = ad.softmax(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)

    @given(
        arrays(np.float64, (2, 6), elements=st.floats(-20, 20)),
        st.floats(-10, 10),
    )
    def test_shift_invariance(self, x, c):
        a = ad.softmax(Tensor(x)).data
        b = ad.softmax(Tensor(x + c)).data
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestGrad:
    def test_quadratic(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        loss, grads = ad.grad(lambda tp: ad.tensor_sum(tp["w"] * tp["w"]), p)
        np.testing.assert_allclose(grads["w"], 2 * p["w"])

    def test_constant_loss_zero_grads(self):
        p = {"w": np.array([1.0, 2.0])}
        _, grads = ad.grad(lambda tp: Tensor(np.asarray(5.0)) + 0.0, p)
        np.testing.assert_array_equal(grads["w"], np.zeros(2))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_names_first_bad_op(self):
        p = {"w": np.array([0.0])}

        def loss_fn(tp):
            return ad.tensor_sum(ad.log(tp["w"]))  # log(0) = -inf

        with pytest.raises(ad.NonFiniteLossError, match="log"):
            ad.grad(loss_fn, p)

    def test_composed_ops_match_finite_differences(self):
        rng = np.random.default_rng(2)
        p = {
            "a": rng.standard_normal((3, 4)),
            "b": rng.standard_normal((4, 2)),
        }
        x = rng.standard_normal((5, 3))

        def loss_fn(tp):
            h = ad.gelu(ad.einsum("nd,df->nf", Tensor(x), tp["a"]))
            h = ad.rms_norm(h)
            out = ad.softmax(ad.matmul(h, tp["b"]))
            return ad.tensor_mean(ad.mul(out, out))

        _, grads = ad.grad(loss_fn, p)
        fd = ad.finite_difference_grads(loss_fn, p, step=1e-6)
        for k in p:
            denom = np.maximum(np.abs(grads[k]), 1e-8)
            rel = np.where(np.abs(grads[k]) < 1e-8, np.abs(grads[k] - fd[k]), np.abs(grads[k] - fd[k]) / denom)
            assert rel.max() < 1e-4


class TestKLFromReference:
    @staticmethod
    def _logits_for(p):
        return np.log(np.asarray(p, dtype=np.float64) + 1e-300).reshape(1, 1, -1)

    def test_identical_distributions(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((2, 3, 5))
        kl = ad.kl_from_reference(logits, Tensor(logits.copy()), np.ones((2, 3)))
        assert abs(kl.item()) < 1e-6

    def test_onehot_vs_uniform(self):
        ref = self._logits_for([1.0, 0.0])
        theta = self._logits_for([0.5, 0.5])
        kl = ad.kl_from_reference(ref, Tensor(theta), np.ones((1, 1)))
        assert kl.item() == pytest.approx(math.log(2), abs=1e-9)

    def test_direct_summation_value(self):
        ref = self._logits_for([0.75, 0.25])
        theta = self._logits_for([0.5, 0.5])
        want = 0.75 * math.log(0.75 / 0.5) + 0.25 * math.log(0.25 / 0.5)
        kl = ad.kl_from_reference(ref, Tensor(theta), np.ones((1, 1)))
        assert kl.item() == pytest.approx(want, abs=1e-9)
        assert want == pytest.approx(0.13081, abs=1e-5)

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            ref = rng.standard_normal((1, 2, 6))
            theta = rng.standard_normal((1, 2, 6))
            assert ad.kl_from_reference(ref, Tensor(theta), np.ones((1, 2))).item() >= 0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        ref = rng.standard_normal((1, 3, 4))
        p = {"z": rng.standard_normal((1, 3, 4))}
        mask = np.array([[1.0, 0.0, 1.0]])

        def loss_fn(tp):
            return ad.kl_from_reference(ref, tp["z"], mask)

        _, grads = ad.grad(loss_fn, p)
        fd = ad.finite_difference_grads(loss_fn, p, step=1e-6)
        np.testing.assert_allclose(grads["z"], fd["z"], atol=1e-7)


class TestTape:
    def test_replay_reproduces_scalar(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((4, 4)))
        with ad.GradientTape() as tape:
            y = ad.tensor_sum(ad.gelu(ad.matmul(x, x)))
        assert tape.replay() == y.item()

    def test_every_param_gets_a_gradient(self):
        p = {"used": np.ones(3), "unused": np.ones(2)}
        _, grads = ad.grad(lambda tp: ad.tensor_sum(tp["used"]), p)
        assert set(grads) == {"used", "unused"}
        np.testing.assert_array_equal(grads["unused"], np.zeros(2))


class TestRotatePairs:
    def test_position_zero_identity(self):
        x = np.random.default_rng(7).standard_normal((3, 4))
        out = ad.rotate_pairs(Tensor(x), np.zeros(2) + 1.0, np.zeros(2))
        np.testing.assert_allclose(out.data, x)

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            ad.rotate_pairs(Tensor(np.zeros((2, 3))), np.ones(1), np.zeros(1))

    @settings(max_examples=25)
    @given(arrays(np.float64, (2, 6), elements=st.floats(-5, 5)), st.floats(-3, 3))
    def test_norm_preserved(self, x, theta):
        c = np.full(3, math.cos(theta))
        s = np.full(3, math.sin(theta))
        y = ad.rotate_pairs(Tensor(x), c, s).data
        before = x[..., 0::2] ** 2 + x[..., 1::2] ** 2
        after = y[..., 0::2] ** 2 + y[..., 1::2] ** 2
        np.testing.assert_allclose(before, after, atol=1e-6)
