import math

import numpy as np
import pytest

from colearn import autodiff as ad
from colearn.autodiff import Tensor
from colearn.errors import DegeneracyError, ParameterError
from colearn.losses import (BatchViews, LossConfig, MixupDraw, cosine_similarity, cross_entropy,
                            cross_entropy_logits, draw_mixup, info_nce_pair, info_nce_terms, intrinsic_loss,
                            mixup, one_hot, similarity_metric, structural_loss, supervised_mixup_loss,
                            total_loss)
from colearn.model import NetworkConfig, classify, encode, init_params, logits, project


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


# -- cross-entropy ------------------------------------------------------------------

def test_ce_perfect_prediction_is_zero():
    y = one_hot(np.array([0, 2]), 3)
    assert cross_entropy(y, t(y)).item() == 0.0


@pytest.mark.parametrize("c", [2, 10])
def test_ce_uniform_is_log_c(c):
    y = one_hot(np.array([1]), c)
    assert abs(cross_entropy(y, t(np.full((1, c), 1 / c))).item() - math.log(c)) < 1e-9
    assert abs(cross_entropy_logits(y, t(np.zeros((1, c)))).item() - math.log(c)) < 1e-9


def test_ce_mean_of_two():
    y = one_hot(np.array([0, 1]), 2)
    p = np.array([[0.8, 0.2], [0.4, 0.6]])
    a, b = -math.log(0.8), -math.log(0.6)
    assert cross_entropy(y, t(p)).item() == pytest.approx((a + b) / 2, abs=1e-15)
    assert cross_entropy(y, t(p), reduction="sum").item() == pytest.approx(a + b, abs=1e-15)


def test_ce_zero_probability_is_clamped():
    y = one_hot(np.array([0]), 2)
    assert cross_entropy(y, t([[0.0, 1.0]])).item() == pytest.approx(-math.log(1e-12))


def test_ce_logits_matches_probability_form():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(6, 4))
    y = one_hot(rng.integers(0, 4, 6), 4)
    assert cross_entropy_logits(y, t(z)).item() == pytest.approx(cross_entropy(y, ad.softmax(t(z))).item(),
                                                                 abs=1e-12)


# -- mixup ------------------------------------------------------------------------------

@pytest.fixture
def batch():
    rng = np.random.default_rng(1)
    return rng.normal(size=(5, 3)), one_hot(rng.integers(0, 4, 5), 4)


def test_mixup_lambda_one_and_zero(batch):
    x, y = batch
    perm = np.array([2, 0, 1, 4, 3])
    xb, yb, _ = mixup(x, y, draw=MixupDraw(1.0, perm))
    np.testing.assert_array_equal(xb, x)
    np.testing.assert_array_equal(yb, y)
    xb, _, _ = mixup(x, y, draw=MixupDraw(0.0, perm))
    np.testing.assert_array_equal(xb, x[perm])


def test_mixup_labels_are_distributions(batch):
    x, y = batch
    rng = np.random.default_rng(2)
    for per_sample in (False, True):
        for _ in range(20):
            _, yb, _ = mixup(x, y, draw=draw_mixup(5, 1.0, rng, per_sample))
            np.testing.assert_allclose(yb.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_mixup_errors(batch):
    x, y = batch
    with pytest.raises(ParameterError):
        mixup(x[:1], y[:1], rng=np.random.default_rng(0))
    with pytest.raises(ParameterError):
        MixupDraw(0.5, np.array([0, 0, 1]))
    with pytest.raises(ParameterError):
        MixupDraw(1.5, np.arange(3))


def test_mixup_loss_collapses_to_ce(batch):
    _, y = batch
    pred = ad.softmax(t(np.random.default_rng(3).normal(size=(5, 4))))
    perm = np.array([1, 2, 3, 4, 0])
    _, y1, _ = mixup(np.zeros((5, 1)), y, draw=MixupDraw(1.0, perm))
    assert supervised_mixup_loss(y1, pred).item() == cross_entropy(y, pred).item()
    _, ys, _ = mixup(np.zeros((5, 1)), y, draw=MixupDraw(0.37, np.arange(5)))
    assert supervised_mixup_loss(ys, pred).item() == pytest.approx(cross_entropy(y, pred).item(), abs=1e-15)


def test_mixup_loss_is_affine_in_lambda(batch):
    _, y = batch
    pred = ad.softmax(t(np.random.default_rng(4).normal(size=(5, 4))))
    perm = np.array([3, 4, 0, 1, 2])

    def loss(lam):
        _, yb, _ = mixup(np.zeros((5, 1)), y, draw=MixupDraw(lam, perm))
        return supervised_mixup_loss(yb, pred).item()

    assert abs(loss(0.3) - (0.3 * loss(1.0) + 0.7 * loss(0.0))) < 1e-12


# -- cosine similarity and InfoNCE -------------------------------------------------------

def test_cosine_similarity_examples():
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2], [3, 6]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 0], [-1, 0]) == -1.0
    with pytest.raises(DegeneracyError):
        cosine_similarity([0, 0], [1, 0])


@pytest.mark.parametrize("tau", [0.1, 0.5, 1.0, 3.0])
def test_info_nce_identical_projections_is_log4(tau):
    v = t(np.tile([[0.3, -1.2, 0.5]], (2, 1)))
    terms = info_nce_terms(v, v, tau).data
    np.testing.assert_allclose(terms, math.log(4), rtol=0, atol=1e-9)


def test_info_nce_orthogonal_pair():
    v = t([[1.0, 0.0], [0.0, 1.0]])
    for i in range(2):
        assert info_nce_pair(i, 2, 3, {2: v, 3: v}, tau=1.0).item() == pytest.approx(math.log(4) - 1, abs=1e-12)


def test_info_nce_scale_invariance():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    base = info_nce_terms(t(a), t(b), 0.5).data
    np.testing.assert_allclose(info_nce_terms(t(7.5 * a), t(0.2 * b), 0.5).data, base, rtol=0, atol=1e-12)


def test_info_nce_batch_of_one():
    with pytest.raises(ParameterError):
        info_nce_terms(t([[1.0, 0.0]]), t([[1.0, 0.0]]), 0.5)


def test_info_nce_is_symmetric_in_views():
    rng = np.random.default_rng(6)
    a, b = t(rng.normal(size=(5, 3))), t(rng.normal(size=(5, 3)))
    views = {2: a, 3: b}
    for i in range(5):
        assert info_nce_pair(i, 2, 3, views, 0.5).item() == pytest.approx(info_nce_pair(i, 3, 2, views, 0.5).item(),
                                                                          abs=1e-12)


def test_info_nce_against_direct_evaluation():
    rng = np.random.default_rng(7)
    n, tau = 4, 0.5
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    views = [a, b]
    expected = []
    for i in range(n):
        num = math.exp(cosine_similarity(a[i], b[i]) / tau)
        den = sum(math.exp(cosine_similarity(views[p][i], views[q][j]) / tau)
                  for j in range(n) if j != i for p in range(2) for q in range(2))
        expected.append(-math.log(num / den))
    np.testing.assert_allclose(info_nce_terms(t(a), t(b), tau).data, expected, rtol=1e-12)


def test_intrinsic_loss_is_twice_mean_term():
    rng = np.random.default_rng(8)
    a, b = t(rng.normal(size=(5, 3))), t(rng.normal(size=(5, 3)))
    assert intrinsic_loss(a, b).item() == pytest.approx(2 * info_nce_terms(a, b, 0.5).data.mean(), abs=1e-12)


def test_aligned_orthogonal_beats_random():
    aligned = t(np.eye(8))
    rng = np.random.default_rng(9)
    rand = intrinsic_loss(t(rng.normal(size=(8, 8))), t(rng.normal(size=(8, 8)))).item()
    assert intrinsic_loss(aligned, aligned).item() < rand


def test_loss_falls_as_positive_cosine_rises():
    neg = [0.0, 0.0, 1.0]
    values = []
    for angle in np.linspace(np.pi / 2, 0, 10):
        a = t([[1.0, 0.0, 0.0], neg])
        b = t([[math.cos(angle), math.sin(angle), 0.0], neg])
        values.append(info_nce_terms(a, b, 0.5).data[0])
    assert all(x > y for x, y in zip(values, values[1:]))


# -- structural similarity -----------------------------------------------------------------

def test_similarity_metric_examples():
    assert similarity_metric(0.0) == 1.0
    assert abs(similarity_metric(1.0, 0.5) - math.exp(-2)) < 1e-12
    assert similarity_metric(0.5) > similarity_metric(1.0) > similarity_metric(2.0)
    with pytest.raises(ParameterError):
        similarity_metric(-1.0)


def test_structural_identical_metrics_is_zero():
    # unit-norm projections and predictions at the same points give p == q
    v = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
    assert abs(structural_loss(t(v), t(v)).item()) < 1e-9


def test_structural_hand_value():
    s = math.sqrt(2 / 3)
    y = t([[1.0, 0.0, 0.0], [1 - s, s / 2, s / 2]])  # distance exactly 1
    v = t([[0.2, 0.4], [0.2, 0.4]])
    assert structural_loss(v, y).item() == pytest.approx(2.0, abs=1e-12)


def test_structural_permutation_invariant():
    rng = np.random.default_rng(10)
    v = rng.normal(size=(6, 4))
    y = ad.softmax(t(rng.normal(size=(6, 3)))).data
    perm = rng.permutation(6)
    assert structural_loss(t(v[perm]), t(y[perm])).item() == pytest.approx(structural_loss(t(v), t(y)).item(),
                                                                           abs=1e-12)


def test_structural_batch_of_one():
    with pytest.raises(ParameterError):
        structural_loss(t([[1.0, 0.0]]), t([[1.0, 0.0]]))


# -- total ---------------------------------------------------------------------------------

@pytest.fixture
def fixture():
    rng = np.random.default_rng(11)
    params = init_params(NetworkConfig(input_dim=12, num_classes=3), seed=0)
    views = BatchViews(rng.uniform(-1, 1, (6, 12)), rng.integers(0, 3, 6), 3,
                       rng.uniform(-1, 1, (6, 12)), rng.uniform(-1, 1, (6, 12)))
    return params, views, MixupDraw(0.42, rng.permutation(6))


def test_breakdown_sums_to_total(fixture):
    params, views, draw = fixture
    out = total_loss(views, params, LossConfig(), draw=draw)
    assert abs(out.l_sup + out.l_int + out.l_str - out.total) < 1e-12
    assert out.objective.item() == pytest.approx(out.total, abs=1e-12)


def test_total_matches_separate_terms(fixture):
    params, views, draw = fixture
    out = total_loss(views, params, LossConfig(), draw=draw)
    x_bar, y_bar, _ = mixup(views.x1, views.one_hot, draw=draw)
    sup = cross_entropy(y_bar, classify(encode(x_bar, params.theta1), params.theta2)).item()
    v2 = project(encode(views.x2, params.theta1), params.theta3)
    v3 = project(encode(views.x3, params.theta1), params.theta3)
    y = classify(encode(views.x1, params.theta1), params.theta2)
    assert out.l_sup == pytest.approx(sup, abs=1e-12)
    assert out.l_int == pytest.approx(intrinsic_loss(v2, v3).item(), abs=1e-12)
    assert out.l_str == pytest.approx(structural_loss(v2, y).item(), abs=1e-12)


def test_no_str_reports_zero_and_has_no_gradient_path(fixture):
    params, views, draw = fixture
    full = total_loss(views, params, LossConfig(), draw=draw)
    ablated = total_loss(views, params, LossConfig(structural=False), draw=draw)
    assert ablated.l_str == 0.0
    assert ablated.l_sup == full.l_sup and ablated.l_int == full.l_int
    params.zero_grad()
    ad.backward(ablated.objective)
    g_ablated = [p.grad.copy() for p in params.tensors()]

    params.zero_grad()
    x_bar, y_bar, _ = mixup(views.x1, views.one_hot, draw=draw)
    sup = cross_entropy_logits(y_bar, logits(encode(x_bar, params.theta1), params.theta2))
    v2 = project(encode(views.x2, params.theta1), params.theta3)
    v3 = project(encode(views.x3, params.theta1), params.theta3)
    ad.backward(sup + intrinsic_loss(v2, v3))
    for a, p in zip(g_ablated, params.tensors()):
        np.testing.assert_allclose(a, p.grad, rtol=1e-10, atol=1e-14)


def test_weighted_sup_scales_supervised_term(fixture):
    params, views, draw = fixture
    plain = total_loss(views, params, LossConfig(), draw=draw)
    weighted = total_loss(views, params, LossConfig(sup_weight=0.01), draw=draw)
    assert weighted.l_sup == 0.01 * plain.l_sup
    assert weighted.l_int == plain.l_int and weighted.l_str == plain.l_str


def test_standard_ce_needs_only_weak_view(fixture):
    params, views, _ = fixture
    cfg = LossConfig(mixup=False, intrinsic=False, structural=False)
    out = total_loss(BatchViews(views.x1, views.labels, 3), params, cfg)
    expected = cross_entropy(views.one_hot, classify(encode(views.x1, params.theta1), params.theta2)).item()
    assert out.total == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ParameterError):
        total_loss(BatchViews(views.x1, views.labels, 3), params, LossConfig(), rng=np.random.default_rng(0))


def test_loss_config_validation():
    for bad in ({"tau": 0}, {"alpha": -1}, {"sigma": 0}, {"reduction": "max"}):
        with pytest.raises(ParameterError):
            LossConfig(**bad)
