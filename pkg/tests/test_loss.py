import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paramine import geometry as geo
from paramine.errors import DimensionMismatch, EmptyBatch
from paramine.loss import (LossBatch, LossParams, ams_loss, ams_loss_grad, hard_term,
                           negative_term, positive_term)

import oracles

DEFAULTS = LossParams(s=0.5, m=0.5, g=1.0)
E1, E2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])

# exp(0.5 * cos(0.5)) evaluated with mpmath at 30 digits
POS_DEFAULT_IDENTICAL = 1.550831565506899
# exp(0) + exp(-1), mpmath at 30 digits
HARD_ORTHO_ANTIPODAL = 1.3678794411714423


def random_batch(rng, n, d, ks=None):
    ks = ks if ks is not None else rng.integers(0, 4, size=n)
    return LossBatch(
        geo.normalize_rows(rng.normal(size=(n, d))),
        geo.normalize_rows(rng.normal(size=(n, d))),
        [geo.normalize_rows(rng.normal(size=(k, d))) if k else np.zeros((0, d)) for k in ks],
    )


def test_params_defaults_and_validation():
    assert LossParams() == DEFAULTS
    for bad in (dict(s=0), dict(m=-0.1), dict(m=math.pi / 2), dict(g=-1)):
        with pytest.raises(ValueError):
            LossParams(**bad)


def test_positive_term_examples():
    assert positive_term(E1, E1, LossParams(1, 0, 1)) == pytest.approx(math.e, abs=1e-12)
    assert positive_term(E1, E1, DEFAULTS) == pytest.approx(POS_DEFAULT_IDENTICAL, abs=1e-12)
    assert positive_term(E1, E2, LossParams(1, 0, 1)) == pytest.approx(1.0, abs=1e-12)


def test_positive_term_decreases_with_angle():
    angles = np.linspace(0, math.pi - DEFAULTS.m, 25)
    vals = [positive_term(E1, np.array([math.cos(a), math.sin(a)]), DEFAULTS) for a in angles]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_negative_term_examples():
    p = LossParams(1, 0, 1)
    assert negative_term(E1, [], p) == 0.0
    assert negative_term(E1, [E2], p) == pytest.approx(1.0, abs=1e-12)
    assert negative_term(E1, [E1, E1], p) == pytest.approx(2 * math.e, abs=1e-12)


def test_hard_term_examples():
    assert hard_term(E1, [], DEFAULTS) == 0.0
    assert hard_term(E1, [E1], DEFAULTS) == pytest.approx(math.exp(0.5), abs=1e-12)
    assert hard_term(E1, [E2, -E1], LossParams(1, 0, 1)) == pytest.approx(
        HARD_ORTHO_ANTIPODAL, abs=1e-12)


def test_terms_check_dimensions():
    with pytest.raises(DimensionMismatch):
        positive_term(E1, [1, 0, 0], DEFAULTS)
    with pytest.raises(DimensionMismatch):
        negative_term(E1, [[1, 0, 0]], DEFAULTS)


def test_single_pair_without_negatives_has_zero_loss():
    value = ams_loss(LossBatch([E1], [E1]), DEFAULTS)
    assert value.total == 0.0
    assert value.n[0] == 0.0 and value.h[0] == 0.0


def test_symmetric_batch_gives_ln2():
    # all four cross-similarities equal: two anchors and positives on a 45 degree fan
    x = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    y = np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    value = ams_loss(LossBatch(x, y), LossParams(1.0, 0.0, 1.0))
    np.testing.assert_allclose(value.per_anchor, [math.log(2)] * 2, atol=1e-12)


def test_matches_scalar_oracle(rng):
    for _ in range(20):
        b = random_batch(rng, 4, 6)
        value = ams_loss(b, DEFAULTS)
        expected = oracles.scalar_ams_loss(b.anchors, b.positives, b.hard_negatives, 0.5, 0.5, 1.0)
        np.testing.assert_allclose(value.per_anchor, expected, atol=1e-12, rtol=0)
        assert abs(value.total - np.mean(expected)) < 1e-12


def test_loss_value_invariants(rng):
    b = random_batch(rng, 5, 4, ks=[0, 2, 1, 0, 3])
    v = ams_loss(b, DEFAULTS)
    assert abs(v.total - np.mean(v.per_anchor)) < 1e-12
    assert (v.p > 0).all() and (v.n >= 0).all() and (v.h >= 0).all()
    assert v.h[0] == 0.0 and v.h[3] == 0.0


def test_empty_batch_and_mismatch():
    with pytest.raises(EmptyBatch):
        LossBatch(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(DimensionMismatch):
        LossBatch([[1.0, 0.0]], [[1.0, 0.0, 0.0]])
    with pytest.raises(DimensionMismatch):
        LossBatch([[1.0, 0.0]], [[0.0, 1.0]], [[[1.0, 0.0, 0.0]]])


def test_reduces_to_softmax_cross_entropy(rng):
    params = LossParams(s=3.0, m=0.0, g=0.0)
    for _ in range(50):
        b = random_batch(rng, int(rng.integers(1, 9)), 5)
        expected = oracles.softmax_ce(b.anchors, b.positives, 3.0)
        assert abs(ams_loss(b, params).total - expected) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.5), st.floats(0.0, 1.5))
def test_margin_monotonicity(seed, m1, m2):
    m_lo, m_hi = sorted((m1, m2))
    b = random_batch(np.random.default_rng(seed), 4, 5)
    theta = [geo.angle(b.anchors[i], b.positives[i]) for i in range(4)]
    if not all(0 < t < math.pi - m_hi for t in theta):
        return
    lo = ams_loss(b, LossParams(1.0, m_lo, 1.0)).total
    hi = ams_loss(b, LossParams(1.0, m_hi, 1.0)).total
    assert hi >= lo


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_hard_weight_strict_monotonicity(seed, g1, g2):
    if abs(g1 - g2) < 1e-6:
        return
    g_lo, g_hi = sorted((g1, g2))
    b = random_batch(np.random.default_rng(seed), 3, 4, ks=[2, 0, 1])
    assert ams_loss(b, LossParams(1.0, 0.3, g_hi)).total > ams_loss(b, LossParams(1.0, 0.3, g_lo)).total


def test_positivity_and_equality_case(rng):
    for _ in range(30):
        assert ams_loss(random_batch(rng, 3, 4), DEFAULTS).total >= 0
    # equality only when the denominator holds nothing but p
    assert ams_loss(LossBatch([E1], [E2], [[E1]]), LossParams(1, 0.2, 0.0)).total == 0.0


def test_permutation_equivariance(rng):
    b = random_batch(rng, 6, 5)
    perm = rng.permutation(6)
    pb = LossBatch(b.anchors[perm], b.positives[perm], [b.hard_negatives[i] for i in perm])
    v, pv = ams_loss(b, DEFAULTS), ams_loss(pb, DEFAULTS)
    np.testing.assert_allclose(pv.per_anchor, v.per_anchor[perm], atol=1e-12, rtol=0)
    assert abs(pv.total - v.total) < 1e-12


def test_large_scale_does_not_overflow(rng):
    b = random_batch(rng, 4, 5)
    v = ams_loss(b, LossParams(s=2000.0, m=0.2, g=1.0))
    assert math.isfinite(v.total)


# --- gradient -------------------------------------------------------------------

def fd_check(b: LossBatch, params: LossParams) -> float:
    grad = ams_loss_grad(b, params)

    def f():
        return oracles.vector_ams_loss(b.anchors, b.positives, b.hard_negatives,
                                       params.s, params.m, params.g)

    pairs = [(grad.anchors, b.anchors), (grad.positives, b.positives),
             *zip(grad.hard_negatives, b.hard_negatives)]
    return max(oracles.max_relative_error(a, oracles.central_difference(f, arr))
               for a, arr in pairs)


def test_gradient_zero_at_stationary_point(rng):
    x = geo.normalize_rows(rng.normal(size=(1, 6)))
    grad = ams_loss_grad(LossBatch(x, x.copy()), DEFAULTS)
    np.testing.assert_allclose(grad.anchors, 0.0, atol=1e-9)
    np.testing.assert_allclose(grad.positives, 0.0, atol=1e-9)


def test_gradient_matches_finite_differences(rng):
    b = random_batch(rng, 4, 8, ks=[3, 3, 3, 3])
    assert fd_check(b, DEFAULTS) <= 1e-4


def test_gradient_follows_scale(rng):
    b = random_batch(rng, 4, 6)
    g1 = ams_loss_grad(b, DEFAULTS)
    g2 = ams_loss_grad(b, LossParams(1.0, 0.5, 1.0))
    assert not np.allclose(g1.anchors, g2.anchors)
    assert fd_check(b, LossParams(1.0, 0.5, 1.0)) <= 1e-4


def test_gradient_on_unnormalized_inputs(rng):
    b = random_batch(rng, 3, 5)
    b.anchors *= rng.uniform(0.5, 3.0, size=(3, 1))
    assert fd_check(b, DEFAULTS) <= 1e-4


def test_gradient_is_finite_for_identical_pairs(rng):
    x = geo.normalize_rows(rng.normal(size=(3, 4)))
    grad = ams_loss_grad(LossBatch(x, x.copy()), DEFAULTS)
    assert np.isfinite(grad.anchors).all() and np.isfinite(grad.positives).all()


def test_gradient_has_no_radial_component(rng):
    b = random_batch(rng, 4, 6)
    grad = ams_loss_grad(b, DEFAULTS)
    radial = (grad.anchors * b.anchors).sum(axis=1)
    np.testing.assert_allclose(radial, 0.0, atol=1e-12)
