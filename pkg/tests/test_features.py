import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icldual.errors import OverflowRangeError, UnsupportedVariantError, ValidationError
from icldual.features import (
    FeatureMapSpec,
    apply_feature_map,
    attention_approx_report,
    gaussian_kernel_form,
    kernel_scores,
    normalize_columns,
    softmax_kernel_exact,
    unbiasedness_probe,
)
from icldual.numerics import SeededRng


def _vec_with_norm(rng, d, r):
    v = rng.standard_normal(d)
    return v * r / np.linalg.norm(v)


class TestSoftmaxKernel:
    def test_zero_argument(self):
        assert softmax_kernel_exact(np.zeros(3), np.array([1.0, 2.0, 3.0])) == 1.0

    def test_log_two(self):
        assert softmax_kernel_exact([np.log(2), 0.0], [1.0, 0.0]) == pytest.approx(2.0, rel=1e-15)

    def test_overflow_is_reported(self):
        with pytest.raises(OverflowRangeError):
            softmax_kernel_exact([30.0], [30.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            softmax_kernel_exact([1.0, 2.0], [1.0])

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 4, elements=st.floats(-2.5, 2.5)), arrays(np.float64, 4, elements=st.floats(-2.5, 2.5)))
    def test_gaussian_relation(self, x, y):
        exact = softmax_kernel_exact(x, y)
        assert gaussian_kernel_form(x, y) == pytest.approx(exact, rel=1e-12)


class TestFeatureMap:
    def test_prf_at_zero(self):
        spec = FeatureMapSpec.positive_random(5, 64, SeededRng(0))
        np.testing.assert_allclose(apply_feature_map(spec, np.zeros(5)), np.full(64, 1 / 8), rtol=1e-15)

    def test_elu_at_zero(self):
        np.testing.assert_array_equal(apply_feature_map(FeatureMapSpec.elu_plus_one(4), np.zeros(4)), np.ones(4))

    def test_prf_matches_naive_formula(self):
        rng = np.random.default_rng(3)
        spec = FeatureMapSpec.positive_random(6, 20, SeededRng(3))
        x = rng.standard_normal(6)
        naive = np.exp(spec.omega @ x - x @ x / 2) / np.sqrt(20)
        np.testing.assert_allclose(apply_feature_map(spec, x), naive, rtol=1e-13)

    def test_matrix_is_columnwise(self):
        rng = np.random.default_rng(4)
        spec = FeatureMapSpec.positive_random(3, 10, SeededRng(4))
        X = rng.standard_normal((3, 5))
        cols = np.stack([apply_feature_map(spec, X[:, j]) for j in range(5)], axis=1)
        np.testing.assert_allclose(apply_feature_map(spec, X), cols, rtol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            apply_feature_map(FeatureMapSpec.elu_plus_one(3), np.zeros(4))

    def test_exponent_out_of_range(self):
        spec = FeatureMapSpec.positive_random(2, 4, SeededRng(0))
        with pytest.raises(OverflowRangeError):
            apply_feature_map(spec, np.array([60.0, 0.0]))

    def test_omega_is_reproducible_and_read_only(self):
        a = FeatureMapSpec.positive_random(3, 7, SeededRng(9, 2))
        b = FeatureMapSpec.positive_random(3, 7, SeededRng(9, 2))
        np.testing.assert_array_equal(a.omega, b.omega)
        with pytest.raises(ValueError):
            a.omega[0, 0] = 1.0

    def test_bad_specs(self):
        with pytest.raises(ValidationError):
            FeatureMapSpec("prf", 3, 4, np.zeros((3, 4)))
        with pytest.raises(ValidationError):
            FeatureMapSpec("elu", 3, 4)
        with pytest.raises(ValidationError):
            FeatureMapSpec("orf", 3, 3)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-4, 4)), st.sampled_from(["prf", "elu"]))
    def test_outputs_strictly_positive(self, X, variant):
        spec = (FeatureMapSpec.positive_random(4, 32, SeededRng(1)) if variant == "prf"
                else FeatureMapSpec.elu_plus_one(4))
        assert np.all(apply_feature_map(spec, X) > 0)

    def test_large_dr_estimates_kernel(self):
        # relative variance per feature is exp(|x + y|^2) - 1; for orthogonal
        # unit vectors the relative sd at d_r = 1e5 is about 0.8%
        x, y = np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.0, 0.6, 0.8, 0.0])
        target = softmax_kernel_exact(x, y)
        hits = 0
        for seed in range(10):
            spec = FeatureMapSpec.positive_random(4, 100_000, SeededRng(seed))
            est = apply_feature_map(spec, x) @ apply_feature_map(spec, y)
            hits += abs(est / target - 1) < 0.02
        assert hits >= 9

    def test_scale_cancels_after_normalization(self):
        rng = np.random.default_rng(5)
        spec = FeatureMapSpec.positive_random(3, 50, SeededRng(5))
        K, Q = rng.standard_normal((3, 6)), rng.standard_normal((3, 4))
        A = normalize_columns(kernel_scores(spec, K, Q))
        PK, PQ = apply_feature_map(spec, K), apply_feature_map(spec, Q)
        for c in (1e-3, 7.0, np.sqrt(50)):
            np.testing.assert_allclose(normalize_columns((c * PK).T @ (c * PQ)), A, atol=1e-12)

    def test_exact_scores(self):
        K = np.array([[0.0, 1.0]])
        Q = np.array([[2.0]])
        np.testing.assert_allclose(kernel_scores(None, K, Q), [[1.0], [np.exp(2.0)]])


class TestApproxReport:
    def test_single_token(self):
        spec = FeatureMapSpec.positive_random(3, 5, SeededRng(0))
        rng = np.random.default_rng(0)
        rep = attention_approx_report(rng.standard_normal((3, 1)), rng.standard_normal((3, 3)),
                                      rng.standard_normal((3, 3)), spec)
        np.testing.assert_array_equal(rep.exact, [[1.0]])
        np.testing.assert_allclose(rep.approx, [[1.0]], rtol=1e-15)
        assert rep.mse == pytest.approx(0, abs=1e-30) and rep.mae == pytest.approx(0, abs=1e-15)

    def test_identical_tokens_give_identical_columns(self):
        rng = np.random.default_rng(1)
        X = np.repeat(rng.standard_normal((4, 1)), 3, axis=1)
        spec = FeatureMapSpec.positive_random(4, 30, SeededRng(1))
        rep = attention_approx_report(X, rng.standard_normal((4, 4)), rng.standard_normal((4, 4)), spec)
        for A in (rep.exact, rep.approx):
            np.testing.assert_allclose(A, np.full((3, 3), 1 / 3), atol=1e-15)

    def test_exact_matrix_is_tempered_softmax(self):
        rng = np.random.default_rng(2)
        X, WK, WQ = rng.standard_normal((4, 5)), rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        rep = attention_approx_report(X, WK, WQ, FeatureMapSpec.positive_random(4, 8, SeededRng(2)))
        S = (WK @ X).T @ (WQ @ X) / 2.0
        E = np.exp(S - S.max(axis=0))
        np.testing.assert_allclose(rep.exact, E / E.sum(axis=0), rtol=1e-13)
        np.testing.assert_allclose(rep.approx.sum(axis=0), 1.0, atol=1e-12)


class TestUnbiasednessProbe:
    def test_zero_inputs(self):
        spec = FeatureMapSpec.positive_random(3, 16, SeededRng(0))
        r = unbiasedness_probe(spec, np.zeros(3), np.zeros(3), 20, SeededRng(1))
        assert r.mean == 1.0 and r.stderr == 0.0 and r.target == 1.0

    def test_log_two_inner_product(self):
        x = np.array([np.log(2), 0.0, 0.0])
        y = np.array([1.0, 0.0, 0.0])
        spec = FeatureMapSpec.positive_random(3, 1024, SeededRng(0))
        r = unbiasedness_probe(spec, x, y, 200, SeededRng(2))
        assert r.target == pytest.approx(2.0)
        assert abs(r.mean - 2.0) < 3 * r.stderr

    def test_estimate_is_feature_inner_product(self):
        rng = np.random.default_rng(3)
        x, y = rng.standard_normal(3) * 0.5, rng.standard_normal(3) * 0.5
        spec = FeatureMapSpec.positive_random(3, 40, SeededRng(0))
        r = unbiasedness_probe(spec, x, y, 3, SeededRng(4))
        again = FeatureMapSpec.positive_random(3, 40, SeededRng(4).child(1))
        direct = apply_feature_map(again, x) @ apply_feature_map(again, y)
        assert r.estimates[1] == pytest.approx(direct, rel=1e-12)

    def test_standard_error_scales_with_dr(self):
        rng = np.random.default_rng(5)
        x, y = _vec_with_norm(rng, 4, 1.0), _vec_with_norm(rng, 4, 1.0)
        se = {}
        for d_r in (64, 1024):
            spec = FeatureMapSpec.positive_random(4, d_r, SeededRng(0))
            se[d_r] = unbiasedness_probe(spec, x, y, 200, SeededRng(d_r)).stderr
        ratio = se[64] / se[1024]
        assert 4 / 2 <= ratio <= 4 * 2  # sqrt(1024 / 64) = 4

    def test_elu_is_rejected(self):
        with pytest.raises(UnsupportedVariantError):
            unbiasedness_probe(FeatureMapSpec.elu_plus_one(2), np.zeros(2), np.zeros(2), 5, SeededRng(0))
