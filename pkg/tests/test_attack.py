import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

import advseg.tensor as T
from advseg import model as M
from advseg.attack import (
    AttackConfig,
    default_alpha,
    fgsm,
    pgd,
    project_linf,
    run_attack,
    sign,
)
from advseg.objective import per_sample_loss
from advseg.tensor import Tensor


def linear_loss(w):
    w = Tensor(np.asarray(w, dtype=np.float64))
    return lambda x: T.reduce("sum", x * w)


def test_sign_examples():
    t = np.array([-3.2, 0.0, 7.0])
    np.testing.assert_array_equal(sign(t), [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(sign(sign(t)), sign(t))
    np.testing.assert_array_equal(sign(-t), -sign(t))


def test_project_examples():
    c = np.array([0.5, 0.5])
    np.testing.assert_array_equal(project_linf(np.array([0.55, 0.45]), c, 0.1), [0.55, 0.45])
    assert project_linf(np.array([0.9]), np.array([0.5]), 0.1)[0] == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(ValueError):
        project_linf(np.zeros(2), np.zeros(3), 0.1)


def test_fgsm_toy():
    res = fgsm(linear_loss([3.0, -2.0]), np.array([0.5, 0.5]), 0.1)
    np.testing.assert_allclose(res.adversarial_image, [0.6, 0.4], rtol=0, atol=1e-15)
    assert res.loss_after > res.loss_before
    assert res.linf_distance == pytest.approx(0.1)


def test_fgsm_zero_budget_and_zero_gradient():
    x = np.array([0.2, 0.7, 0.4])
    res = fgsm(linear_loss([1.0, -1.0, 2.0]), x, 0.0)
    assert res.adversarial_image.tobytes() == x.tobytes()
    res = fgsm(linear_loss([1.0, 0.0, -1.0]), x, 0.05)
    assert res.adversarial_image[1] == x[1]


def test_pgd_scalar_toy():
    loss = lambda x: T.reduce("sum", (x - 2.0) * (x - 2.0))
    res = pgd(loss, np.array([0.5]), AttackConfig(kind="pgd", epsilon=0.3, alpha=0.25, steps=40))
    # gradient 2(x-2) < 0 pushes x down to the ball edge 0.2
    assert res.adversarial_image[0] == pytest.approx(0.2, abs=1e-15)
    assert res.loss_after == pytest.approx(3.24, abs=1e-12)
    assert res.loss_before == pytest.approx(2.25, abs=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(kind="pgd", steps=0)
    with pytest.raises(ValueError):
        AttackConfig(kind="pgd", alpha=0.0)
    with pytest.raises(ValueError):
        AttackConfig(kind="cw")
    assert default_alpha(0.1, 40) == pytest.approx(0.025)
    assert default_alpha(0.1, 5) == pytest.approx(0.05)
    assert default_alpha(0.0, 40) > 0


def test_nonfinite_gradient_raises():
    loss = lambda x: T.reduce("sum", T.log(x))
    with pytest.raises(T.NonFiniteError):
        fgsm(loss, np.array([0.0, 0.5]), 0.1)


@pytest.fixture(scope="module")
def attack_setup(tiny_config):
    rng = np.random.default_rng(30)
    params = M.init_params(tiny_config)
    params = params.replace({n: rng.uniform(-0.6, 0.6, a.shape) for n, a in params.arrays.items()})
    return tiny_config, params


def _model_loss(config, params, toks, mask):
    leaves = params.leaves()
    return lambda x: T.reduce("sum", per_sample_loss(M.forward_batch(x, toks, leaves, config), mask))


def _random_case(rng, config):
    img = rng.random((1, 3, 8, 8))
    toks = np.array([[2, 3, int(rng.integers(4, 7)), 0]])
    mask = (rng.random((1, 1, 8, 8)) > 0.6).astype(float)
    return img, toks, mask


def test_pgd_one_step_equals_fgsm(tiny_config):
    rng = np.random.default_rng(31)
    for trial in range(100):
        if trial % 10 == 0:
            params = M.init_params(tiny_config)
            params = params.replace({n: rng.uniform(-0.6, 0.6, a.shape) for n, a in params.arrays.items()})
        img, toks, mask = _random_case(rng, tiny_config)
        eps = float(rng.choice([0.0, 0.01, 0.03, 0.1, 0.5, rng.uniform(0, 0.6)]))
        loss = _model_loss(tiny_config, params, toks, mask)
        a = fgsm(loss, img, eps).adversarial_image
        b = pgd(loss, img, AttackConfig(kind="pgd", epsilon=eps, alpha=eps if eps > 0 else 1.0, steps=1)).adversarial_image
        if eps == 0:
            assert a.tobytes() == img.tobytes() and b.tobytes() == img.tobytes()
        else:
            assert a.tobytes() == b.tobytes()


def test_attacks_do_not_mutate_inputs(attack_setup):
    config, params = attack_setup
    rng = np.random.default_rng(32)
    img, toks, mask = _random_case(rng, config)
    digest = lambda: hashlib.sha256(M.checkpoint_bytes(params) + img.tobytes()).hexdigest()
    before = digest()
    loss = _model_loss(config, params, toks, mask)
    fgsm(loss, img, 0.1)
    pgd(loss, img, AttackConfig(kind="pgd", epsilon=0.1, steps=5, random_start=True, seed=3))
    assert digest() == before


def test_random_start_is_deterministic(attack_setup):
    config, params = attack_setup
    img, toks, mask = _random_case(np.random.default_rng(33), config)
    loss = _model_loss(config, params, toks, mask)
    cfg = AttackConfig(kind="pgd", epsilon=0.05, steps=3, random_start=True, seed=11)
    a = pgd(loss, img, cfg).adversarial_image
    b = pgd(loss, img, cfg).adversarial_image
    c = pgd(loss, img, AttackConfig(kind="pgd", epsilon=0.05, steps=3, random_start=True, seed=12)).adversarial_image
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_attack_raises_loss_on_model(attack_setup):
    config, params = attack_setup
    img, toks, mask = _random_case(np.random.default_rng(34), config)
    loss = _model_loss(config, params, toks, mask)
    res = run_attack(loss, img, AttackConfig(kind="pgd", epsilon=0.1, steps=10))
    assert res.loss_after > res.loss_before


@given(
    arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 1)),
    st.data(),
    st.floats(0, 0.6),
    st.sampled_from(["fgsm", "pgd"]),
    st.integers(1, 6),
    st.booleans(),
)
def test_bounds_hold_for_any_config(x, data, eps, kind, steps, random_start):
    w = data.draw(arrays(np.float64, x.shape, elements=st.floats(-3, 3)))
    alpha = data.draw(st.one_of(st.none(), st.floats(1e-3, 1.0)))
    loss = lambda t: T.reduce("sum", t * Tensor(w) + t * t)
    cfg = AttackConfig(kind=kind, epsilon=eps, alpha=alpha, steps=steps, random_start=random_start, seed=1)
    res = run_attack(loss, x, cfg)
    adv = res.adversarial_image
    assert np.max(np.abs(adv - x)) <= eps + 1e-6
    assert adv.min() >= 0 and adv.max() <= 1
    assert res.linf_distance <= eps + 1e-6
