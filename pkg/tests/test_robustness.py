import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import central_diff, random_net, rel_err
from jemlab.diffcore import Affine, Network, Tensor
from jemlab.energy import JemModel
from jemlab.rng import make_rng
from jemlab.robustness import (
    AttackConfig,
    Defended,
    distal_generate,
    eot_logits,
    pgd_attack,
    pgd_minimal_eps,
    pointwise_attack,
    refine,
    robustness_curve,
    transfer_distances,
    transfer_eval,
)
from jemlab.sampler import SamplerConfig


def linear_model(w):
    w = np.asarray(w, dtype=np.float64)
    return JemModel(Network([Affine(Tensor(np.stack([w, -w])), Tensor(np.zeros(2)))]))


def constant_model(k=3, d=2):
    return JemModel(Network([Affine(Tensor(np.zeros((k, d))), Tensor(np.zeros(k)))]))


FAST = dict(pgd_iters=20, restarts=4, votes=1)


def test_config_validation_and_brackets():
    with pytest.raises(ValueError):
        AttackConfig(norm="l1")
    with pytest.raises(ValueError):
        AttackConfig(pgd_iters=0)
    assert AttackConfig(norm="LINF").bracket(4) == 2.0
    assert AttackConfig(norm="l2").bracket(4) == pytest.approx(4.0)
    assert AttackConfig(eps_max=0.5).bracket(4) == 0.5


@pytest.mark.parametrize("norm,w,x,expected", [
    # distance to the hyperplane w.x = 0 is |w.x| / ||w||_1 under linf
    ("linf", [1.0, 0.5], [0.45, 0.0], 0.3),
    # and |w.x| / ||w||_2 under l2
    ("l2", [1.0, 0.0], [0.3, 0.2], 0.3),
])
def test_minimal_eps_on_linear_model(norm, w, x, expected):
    d = Defended(linear_model(w))
    ac = AttackConfig(norm=norm, **FAST)
    eps, adv = pgd_minimal_eps(d, np.array([x]), np.array([0]), ac, make_rng(0))
    # bisection resolution is bracket / 2^12
    assert expected - 1e-9 <= eps[0] <= expected + 2e-3
    delta = adv[0] - np.array(x)
    size = np.max(np.abs(delta)) if norm == "linf" else np.linalg.norm(delta)
    assert size <= eps[0] + 1e-9
    assert d.predict(adv, make_rng(1))[0] == 1


def test_minimal_eps_zero_for_misclassified_and_inf_when_unreachable():
    d = Defended(linear_model([1.0, 0.0]))
    ac = AttackConfig(eps_max=0.1, **FAST)
    eps, _ = pgd_minimal_eps(d, np.array([[-0.5, 0.0], [0.5, 0.0]]), np.array([0, 0]), ac, make_rng(0))
    assert eps[0] == 0.0 and eps[1] == np.inf


def test_k0_refinement_is_identity():
    m = JemModel(random_net(np.random.default_rng(0)))
    x = np.random.default_rng(1).standard_normal((4, m.input_dim))
    np.testing.assert_array_equal(refine(m, x, 0, SamplerConfig(), make_rng(0)), x)
    np.testing.assert_array_equal(eot_logits(m, x, 7, 0, SamplerConfig(), make_rng(0)), m.log_p_y_given_x(x))
    with pytest.raises(ValueError):
        refine(m, x, -1, SamplerConfig(), make_rng(0))


def test_noise_free_eot_equals_single_refinement():
    m = JemModel(random_net(np.random.default_rng(2), "softplus"))
    x = np.random.default_rng(3).uniform(-1, 1, (5, m.input_dim))
    cfg = SamplerConfig(alpha=0.05, sigma=0.0)
    single = m.log_p_y_given_x(refine(m, x, 4, cfg, make_rng(0)))
    np.testing.assert_allclose(eot_logits(m, x, 6, 4, cfg, make_rng(1)), single, atol=1e-14)


def test_defended_k0_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(10):
        m = JemModel(random_net(rng, "softplus"))
        d = Defended(m)
        x = rng.standard_normal((1, m.input_dim))
        y = np.array([int(rng.integers(m.num_classes))])
        _, g = d.loss_grad(x, y, make_rng(0))
        fd = central_diff(lambda v: -float(m.log_p_y_given_x(v)[0, y[0]]), x)
        assert rel_err(g, fd) < 1e-6


def test_k0_majority_is_deterministic_prediction():
    m = JemModel(random_net(np.random.default_rng(5)))
    x = np.random.default_rng(6).standard_normal((20, m.input_dim))
    d = Defended(m)
    np.testing.assert_array_equal(d.predict_majority(x, make_rng(0), 5), np.argmax(m.logits(x), axis=1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["linf", "l2"]), st.floats(0.01, 1.0), st.sampled_from([0, 2]))
def test_attack_output_stays_in_budget_and_box(seed, norm, eps, k):
    rng = np.random.default_rng(seed)
    m = JemModel(random_net(rng, "softplus"))
    x = rng.uniform(-1, 1, (3, m.input_dim))
    y = rng.integers(0, m.num_classes, 3)
    d = Defended(m, k=k, n=2, sampler=SamplerConfig(alpha=0.01, sigma=0.01))
    _, adv = pgd_attack(d, x, y, eps, AttackConfig(norm=norm, pgd_iters=5, restarts=2, votes=1), make_rng(seed))
    delta = adv - x
    size = np.max(np.abs(delta), axis=1) if norm == "linf" else np.linalg.norm(delta, axis=1)
    assert np.all(size <= eps + 1e-9)
    assert np.all(np.abs(adv) <= 1.0)


def test_pointwise_on_constant_model_is_infinite():
    d = Defended(constant_model())
    assert pointwise_attack(d, np.array([0.2, -0.4]), 0, "linf", make_rng(0), votes=1,
                            noise_levels=10, repetitions=2) == np.inf


@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_pointwise_is_sound_and_close_to_pgd_on_linear_model(norm):
    # coordinate search is sparse; x1 alone cannot cross inside the box, so it moves x0
    w, x = np.array([1.0, 0.2]), np.array([0.45, 0.0])
    d = Defended(linear_model(w))
    true_min = abs(w @ x) / (np.sum(np.abs(w)) if norm == "linf" else np.linalg.norm(w))
    pw = pointwise_attack(d, x, 0, norm, make_rng(0), votes=1)
    eps, _ = pgd_minimal_eps(d, x[None], np.array([0]), AttackConfig(norm=norm, **FAST), make_rng(0))
    assert pw >= true_min - 1e-9
    assert pw <= 2.0 * eps[0]


def test_transfer_empty_set_raises():
    with pytest.raises(ValueError):
        transfer_eval(Defended(constant_model()), np.zeros((0, 2)), np.zeros(0, dtype=int), make_rng(0))


def test_transfer_to_the_source_model_reproduces_the_attack():
    m = linear_model([1.0, 0.5])
    d = Defended(m)
    x = np.random.default_rng(7).uniform(0.2, 0.6, (10, 2))
    y = np.zeros(10, dtype=int)
    ok, adv = pgd_attack(d, x, y, 1.0, AttackConfig(**FAST), make_rng(0))
    assert ok.all()
    assert transfer_eval(d, adv, y, make_rng(1)) == 0.0
    dist = transfer_distances(d, x, adv, y, "linf", make_rng(2))
    np.testing.assert_allclose(dist, np.max(np.abs(adv - x), axis=1))
    assert np.all(transfer_distances(d, x, x, y, "linf", make_rng(3)) == np.inf)


def test_robustness_curve_examples():
    np.testing.assert_array_equal(robustness_curve([0.0, 0.5, np.inf], [0.0, 0.4, 1.0]), [2 / 3, 2 / 3, 1 / 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.floats(0, 3), st.just(np.inf)), min_size=1, max_size=40))
def test_robustness_curve_is_non_increasing(eps):
    curve = robustness_curve(eps, np.linspace(0, 3, 25))
    assert np.all(np.diff(curve) <= 0)
    assert np.all((curve >= 0) & (curve <= 1))


def test_distal_constant_model_stays_at_uniform():
    res = distal_generate(constant_model(k=4), 2, make_rng(0), max_iters=15, n=3)
    np.testing.assert_allclose(res.trajectory, 0.25, atol=1e-15)
    assert res.trajectory.shape == (16, 3) and not res.reached.any()


def test_distal_reaches_target_on_linear_model():
    res = distal_generate(linear_model([2.0, 1.0]), 1, make_rng(1), conf_target=0.9, max_iters=200, n=5, step=0.05)
    assert res.reached.all() and np.all(res.confidence >= 0.9)
    assert np.all(np.abs(res.x) <= 1.0)
    with pytest.raises(IndexError):
        distal_generate(linear_model([1.0, 0.0]), 2, make_rng(0))
    with pytest.raises(ValueError):
        distal_generate(linear_model([1.0, 0.0]), 0, make_rng(0), conf_target=1.0)
