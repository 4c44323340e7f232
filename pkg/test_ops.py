"""
Forward primitives and their finite-difference gradient checks.
"""
import numpy as np
import pytest

from icl_lab import ops
from icl_lab.gradcheck import (
    check_attention,
    check_cross_entropy,
    check_filter_path,
    check_gelu,
    check_linear,
    check_lm,
    check_rmsnorm,
    check_softmax,
    numerical_grad,
    rel_error,
    run_suite,
    toy_filter_case,
)


class TestForwardPrimitives:

    def test_causal_mask(self):
        mask = ops.causal_mask(4)
        assert mask.dtype == bool
        assert mask[3, 0] and mask[2, 2]
        assert not mask[0, 1]

    def test_self_only_row(self):
        blocked = ops.self_only_row(ops.causal_mask(4), 3)
        np.testing.assert_array_equal(blocked[3], [False, False, False, True])
        np.testing.assert_array_equal(blocked[:3], ops.causal_mask(4)[:3])

    def test_uniform_cross_entropy_is_log_vocab(self):
        V = 7
        losses, probs = ops.cross_entropy(np.zeros((3, V)), np.array([0, 3, 6]))
        np.testing.assert_allclose(losses, np.full(3, np.log(V)), atol=1e-12)
        np.testing.assert_allclose(probs.sum(axis=-1), np.ones(3), atol=1e-12)

    def test_softmax_large_logits(self):
        p = ops.softmax(np.array([[1000.0, 1000.0, -1000.0]]))
        np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]], atol=1e-12)

    def test_rmsnorm_zero_row_stays_zero(self):
        y, _ = ops.rmsnorm(np.zeros((1, 4)), np.ones(4), 1e-5)
        assert np.all(y == 0.0)

    def test_gelu_reference_values(self):
        np.testing.assert_allclose(ops.gelu(np.array([0.0])), [0.0])
        assert ops.gelu(np.array([10.0]))[0] == pytest.approx(10.0, rel=1e-9)

    def test_attention_first_position_copies_value(self):
        rng = np.random.default_rng(0)
        d, H = 8, 2
        x = rng.standard_normal((1, 3, d))
        Ws = [rng.standard_normal((d, d)) for _ in range(4)]
        out, cache = ops.attention(x, *Ws, H, ops.causal_mask(3))
        np.testing.assert_allclose(cache.probs[0, :, 0, 0], np.ones(H))
        np.testing.assert_allclose(out[0, 0], x[0, 0] @ Ws[2] @ Ws[3], atol=1e-10)


class TestGradCheck:

    @pytest.mark.parametrize("check", [check_linear, check_softmax, check_rmsnorm, check_gelu,
                                       check_cross_entropy, check_attention])
    def test_primitive(self, check):
        report = check(np.random.default_rng(11), 16)
        assert report.passed(1e-4), f"{report.name}: {report.max_rel_error:.3e}"

    def test_lm_parameters(self):
        report = check_lm(np.random.default_rng(12))
        assert report.passed(1e-4), f"{report.max_rel_error:.3e}"

    def test_filter_path(self):
        report = check_filter_path(*toy_filter_case(seed=3, d=16))
        assert report.passed(1e-4), f"{report.max_rel_error:.3e}"

    def test_suite_names(self):
        names = [r.name for r in run_suite(seed=0, d=8)]
        assert names == ["linear", "softmax", "rmsnorm", "gelu", "cross_entropy", "attention", "lm", "filter"]

    def test_numerical_grad_quadratic(self):
        x = np.array([1.0, -2.0, 3.0])
        grad = numerical_grad(lambda: float(np.sum(x ** 2)), x)
        np.testing.assert_allclose(grad, 2.0 * x, atol=1e-8)
        np.testing.assert_array_equal(x, [1.0, -2.0, 3.0])

    def test_rel_error_scale(self):
        assert rel_error(np.array([2.0]), np.array([2.0])) == 0.0
        assert rel_error(np.array([1.0]), np.array([2.0])) == pytest.approx(0.5)
