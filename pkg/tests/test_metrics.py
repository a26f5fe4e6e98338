import json
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from eslab.errors import DimensionError, DomainError
from eslab.metrics import (
    FeatureExtract,
    GaussianSummary,
    agreement,
    dumps_report,
    feature_fid,
    fid,
    gaussian_summary,
    inception_score,
    inception_score_from_probs,
    jacobi_eigh,
    quality_report,
    sqrtm_psd,
    trace_sqrt_product,
)
from eslab.models import build_model


def random_psd(rng, d, n=None):
    a = rng.standard_normal((n or d + 3, d))
    return a.T @ a / len(a)


# -- IS ------------------------------------------------------------------------


def test_is_uniform_is_one():
    assert abs(inception_score_from_probs(np.full((5, 4), 0.25)) - 1.0) < 1e-9


@pytest.mark.parametrize("k", [2, 5, 10])
def test_is_one_hot_per_class_is_k(k):
    assert abs(inception_score_from_probs(np.eye(k)) - k) < 1e-9


def test_is_hand_summation():
    p = [[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]]
    marginal = [sum(row[j] for row in p) / 3 for j in range(2)]
    kl = [sum(row[j] * math.log(row[j] / marginal[j]) for j in range(2)) for row in p]
    expected = math.exp(sum(kl) / 3)
    assert abs(inception_score_from_probs(np.array(p)) - expected) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(2, 30), st.integers(0, 10_000))
def test_is_bounds(k, n, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((n, k)) * rng.uniform(0.1, 30)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    score = inception_score_from_probs(p)
    assert 1 - 1e-9 <= score <= k + 1e-9


def test_is_errors():
    with pytest.raises(DomainError):
        inception_score_from_probs(np.array([[1.0, 0.0]]))
    with pytest.raises(DomainError):
        inception_score(build_model("linear", (2,), 2, seed=0), np.zeros((0, 2)))


def test_is_through_model(rng):
    net = build_model("mlp-small", (4,), 3, seed=0)
    x = rng.standard_normal((20, 4))
    assert inception_score(net, x) == inception_score_from_probs(net.predict_proba(x))


# -- Jacobi ----------------------------------------------------------------------


@pytest.mark.parametrize("d", [1, 2, 5, 17])
def test_jacobi_reconstructs_and_matches_numpy(rng, d):
    a = random_psd(rng, d) - 0.3 * np.eye(d)
    w, v = jacobi_eigh(a)
    np.testing.assert_allclose(v @ np.diag(w) @ v.T, a, atol=1e-10)
    np.testing.assert_allclose(v.T @ v, np.eye(d), atol=1e-10)
    np.testing.assert_allclose(np.sort(w), np.linalg.eigvalsh(a), atol=1e-10)


def test_jacobi_rejects_non_square():
    with pytest.raises(DimensionError):
        jacobi_eigh(np.zeros((2, 3)))


def test_sqrtm_squares_back(rng):
    a = random_psd(rng, 6)
    r = sqrtm_psd(a)
    np.testing.assert_allclose(r @ r, a, atol=1e-10)


def test_trace_sqrt_product_matches_scipy(rng):
    a, b = random_psd(rng, 8), random_psd(rng, 8)
    expected = np.trace(scipy.linalg.sqrtm(a @ b)).real
    assert abs(trace_sqrt_product(a, b) - expected) < 1e-8


# -- FID -----------------------------------------------------------------------


def test_fid_diagonal_closed_form():
    a = GaussianSummary(np.zeros(2), np.diag([1.0, 4.0]))
    b = GaussianSummary(np.zeros(2), np.diag([9.0, 1.0]))
    assert abs(fid(a, b) - 5.0) < 1e-6


def test_fid_mean_shift_only(rng):
    s = random_psd(rng, 5)
    v = rng.standard_normal(5)
    assert abs(fid(GaussianSummary(np.zeros(5), s), GaussianSummary(v, s)) - v @ v) < 1e-6


def test_fid_self_is_zero(rng):
    g = gaussian_summary(rng.standard_normal((300, 32)))
    assert abs(fid(g, g)) < 1e-6


def test_fid_matches_scipy_oracle(rng):
    fa, fb = rng.standard_normal((200, 10)), 0.5 + 2 * rng.standard_normal((150, 10))
    a, b = gaussian_summary(fa), gaussian_summary(fb)
    covmean = scipy.linalg.sqrtm(a.sigma @ b.sigma).real
    expected = np.sum((a.mu - b.mu) ** 2) + np.trace(a.sigma + b.sigma - 2 * covmean)
    assert abs(fid(a, b) - expected) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_fid_symmetric_and_non_negative(d, seed):
    rng = np.random.default_rng(seed)
    a = GaussianSummary(rng.standard_normal(d), random_psd(rng, d, n=max(1, d - 1)))
    b = GaussianSummary(rng.standard_normal(d), random_psd(rng, d))
    assert fid(a, b) >= -1e-6
    assert abs(fid(a, b) - fid(b, a)) < 1e-6


def test_fid_dimension_mismatch():
    with pytest.raises(DimensionError):
        fid(GaussianSummary(np.zeros(2), np.eye(2)), GaussianSummary(np.zeros(3), np.eye(3)))
    with pytest.raises(DimensionError):
        GaussianSummary(np.zeros(2), np.eye(3))


def test_gaussian_summary_unbiased(rng):
    f = rng.standard_normal((50, 3))
    g = gaussian_summary(f)
    np.testing.assert_allclose(g.sigma, np.cov(f, rowvar=False))
    with pytest.raises(DomainError):
        gaussian_summary(f[:1])


# -- model-level -----------------------------------------------------------------


def test_feature_extract_taps_last_dense_input(rng):
    net = build_model("mlp-small", (6,), 3, seed=1)
    x = rng.standard_normal((5, 6))
    feats = FeatureExtract(net)(x)
    w, b = net.params["4.weight"].data, net.params["4.bias"].data
    np.testing.assert_allclose(feats @ w + b, net(x).data)
    assert FeatureExtract(net).tap_point == 4


def test_feature_fid_same_set_zero(rng):
    net = build_model("mlp-small", (6,), 3, seed=1)
    x = rng.standard_normal((100, 6))
    assert abs(feature_fid(net, x, x)) < 1e-6


def test_agreement(rng):
    a = build_model("mlp-small", (6,), 3, seed=1)
    x = rng.standard_normal((40, 6))
    assert agreement(a, a, x) == 1.0
    assert 0.0 <= agreement(a, build_model("mlp-small", (6,), 3, seed=2), x) <= 1.0


def test_quality_report_json(rng):
    net = build_model("mlp-small", (6,), 3, seed=1)
    ref = rng.standard_normal((80, 6))
    report = quality_report(net, ref, {"b": ref, "a": rng.standard_normal((60, 6))})
    assert list(report) == ["a", "b"] and abs(report["b"]["fid"]) < 1e-6
    assert json.loads(dumps_report(report)) == report
