import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import brute_ece, central_diff, pairwise_auroc, random_net
from jemlab.diffcore import Affine, Network, Tensor
from jemlab.energy import JemModel, QuadraticEnergy
from jemlab.evaluation import auroc, default_ood_sets, ece, ood_report, score_approx_mass, score_logp, score_maxprob, two_column_text
from jemlab.rng import make_rng


def bias_model(logits):
    logits = np.asarray(logits, dtype=np.float64)
    return JemModel(Network([Affine(Tensor(np.zeros((len(logits), 2))), Tensor(logits))]))


def test_ece_examples():
    assert ece(np.ones(10), np.ones(10, dtype=bool)).ece == 0.0
    assert ece(np.ones(10), np.arange(10) % 2 == 0).ece == 0.5
    with pytest.raises(ValueError):
        ece(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        ece(np.array([1.2]), np.array([True]))


def test_ece_bucket_edges():
    t = ece(np.array([0.0, 0.05, 0.050001, 1.0]), np.array([1, 1, 0, 1]))
    assert t.counts[0] == 2 and t.counts[1] == 1 and t.counts[-1] == 1
    assert t.counts.sum() == 4


def test_ece_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        conf = rng.random(n)
        if rng.random() < 0.2:
            conf = np.round(conf * 20) / 20  # exercise bucket boundaries
        flags = rng.random(n) < conf
        assert abs(ece(conf, flags).ece - brute_ece(conf, flags)) <= 1e-12


def test_calibrated_set_is_below_discretization_bound():
    rng = np.random.default_rng(1)
    conf = rng.uniform(0.25, 1.0, 200_000)
    flags = rng.random(len(conf)) < conf
    # per-bucket accuracy equals per-bucket confidence in expectation
    assert ece(conf, flags).ece < 1 / (2 * 20)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1)), st.data())
def test_reliability_table_invariants(conf, data):
    flags = np.array(data.draw(st.lists(st.booleans(), min_size=len(conf), max_size=len(conf))))
    t = ece(conf, flags)
    assert t.counts.sum() == len(conf)
    assert 0.0 <= t.ece <= 1.0


def test_auroc_examples():
    assert auroc([3, 4, 5], [0, 1, 2]) == 1.0
    assert auroc(np.ones(7), np.ones(5)) == 0.5
    with pytest.raises(ValueError):
        auroc([], [1.0])


def test_auroc_matches_pairwise_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        pos = np.round(rng.standard_normal(200), 1)
        neg = np.round(rng.standard_normal(200) - 0.5, 1)
        assert abs(auroc(pos, neg) - pairwise_auroc(pos, neg)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, st.integers(1, 30), elements=st.integers(-40, 40)),
       arrays(np.int64, st.integers(1, 30), elements=st.integers(-40, 40)))
def test_auroc_invariant_under_increasing_transform(pos, neg):
    # grid values keep the transform strictly increasing in floating point
    pos, neg = pos / 8.0, neg / 8.0
    a = auroc(pos, neg)
    assert 0.0 <= a <= 1.0
    assert auroc(np.exp(pos) * 3 + 1, np.exp(neg) * 3 + 1) == pytest.approx(a, abs=1e-12)


def test_score_examples():
    zero = JemModel(Network.mlp([2, 3, 4], zero=True))
    x = np.random.default_rng(3).standard_normal((5, 2))
    np.testing.assert_allclose(score_logp(zero, x), np.log(4.0), rtol=1e-15)
    np.testing.assert_array_equal(score_approx_mass(zero, x), np.zeros(5))
    assert score_maxprob(bias_model([0.0, 0.0]), np.zeros(2)) == pytest.approx(0.5)
    assert score_maxprob(bias_model([1e6, 0.0]), np.zeros(2)) == pytest.approx(1.0)
    assert score_approx_mass(QuadraticEnergy(input_dim=2), np.array([[3.0, 4.0]]))[0] == pytest.approx(-5.0)


def test_scores_against_re_evaluation_and_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(100):
        net = random_net(rng, "softplus")
        m = JemModel(net)
        x = rng.standard_normal((2, net.input_dim))
        np.testing.assert_allclose(score_maxprob(m, x), np.exp(np.max(m.log_p_y_given_x(x), axis=1)), rtol=1e-15)
    for _ in range(10):
        net = random_net(rng, "softplus")
        m = JemModel(net)
        x = rng.standard_normal(net.input_dim)
        fd = central_diff(lambda v: float(m.log_p_tilde(v)), x)
        assert score_approx_mass(m, x[None])[0] == pytest.approx(-np.linalg.norm(fd), rel=1e-4)


def test_logit_shift_effects_on_scores():
    rng = np.random.default_rng(5)
    net = random_net(rng)
    shifted = net.copy()
    shifted.layers[-1].bias.data = shifted.layers[-1].bias.data + 2.5
    a, b = JemModel(net), JemModel(shifted)
    xin, xout = rng.standard_normal((30, net.input_dim)), rng.standard_normal((30, net.input_dim)) + 2
    np.testing.assert_allclose(score_logp(b, xin) - score_logp(a, xin), 2.5, atol=1e-12)
    assert auroc(score_logp(a, xin), score_logp(a, xout)) == auroc(score_logp(b, xin), score_logp(b, xout))
    np.testing.assert_allclose(score_approx_mass(a, xin), score_approx_mass(b, xin), atol=1e-12)


def test_ood_report_exchangeable_sets_and_determinism():
    rng = np.random.default_rng(6)
    m = JemModel(random_net(rng))
    x = rng.uniform(-1, 1, (4000, m.input_dim))
    reports = ood_report(m, x[:2000], {"same": x[2000:]})
    for r in reports:
        assert abs(r.auroc["same"] - 0.5) <= 0.02
        edges, a, b = r.histograms["same"]
        assert a.sum() == 2000 and b.sum() == 2000 and len(edges) == 31
    again = ood_report(m, x[:2000], {"same": x[2000:]})
    assert [r.to_dict() for r in reports] == [r.to_dict() for r in again]
    with pytest.raises(ValueError):
        ood_report(m, x, {"empty": np.zeros((0, m.input_dim))})


def test_default_ood_sets_include_constant_input():
    sets = default_ood_sets(3, 10, make_rng(0))
    np.testing.assert_array_equal(sets["constant"], np.zeros((10, 3)))
    assert np.all(np.abs(sets["uniform"]) <= 1.0)


def test_two_column_text_round_trips_floats():
    a, b = np.array([0.1, 1 / 3]), np.array([2.0, np.pi])
    rows = [list(map(float, line.split())) for line in two_column_text(a, b).splitlines()]
    np.testing.assert_array_equal(rows, np.stack([a, b], axis=1))
