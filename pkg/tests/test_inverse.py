import itertools

import numpy as np
import pytest

from iat import ops
from iat.autodiff import Tensor
from iat.inverse import (InverseConfig, UniversalBank, apply_universal, instance_inverse, inverse_loss, inverse_step,
                         per_example_inverse_loss, universal_update)
from iat.models import AffineClassifier, NetworkSpec, forward, init, predict


@pytest.fixture
def mlp():
    return init(NetworkSpec.mlp(2, 3, (12, 10)), 3)


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((9, 2)).astype(np.float32)
    y = np.arange(9) % 3
    x_adv = x + rng.uniform(-0.1, 0.1, x.shape).astype(np.float32)
    return x, y, x_adv


def test_inverse_loss_reductions(mlp, batch):
    x, y, x_adv = batch
    ce = ops.softmax_cross_entropy(forward(mlp, x).logits, y).item()
    assert inverse_loss(mlp, Tensor(x), x, None, y, 0.0).item() == ce
    assert inverse_loss(mlp, Tensor(x), x, x, y, 1.0).item() == pytest.approx(ce, abs=1e-7)
    # F(x_inv) = F(x) != F(x_adv): the triplet term is negative
    assert inverse_loss(mlp, Tensor(x), x, x_adv, y, 1.0).item() < ce
    with pytest.raises(ValueError):
        inverse_loss(mlp, Tensor(x), x, None, y, 1.0)


def test_per_example_loss_agrees_with_batch_loss(mlp, batch):
    x, y, x_adv = batch
    x_inv = x + np.float32(0.03)
    per = per_example_inverse_loss(mlp, x_inv, x, x_adv, y, 1.0)
    whole = inverse_loss(mlp, Tensor(x_inv), x, x_adv, y, 1.0).item()
    assert per.mean() == pytest.approx(whole, abs=1e-5)


def test_instance_inverse_degenerate(mlp, batch):
    x, y, x_adv = batch
    assert np.array_equal(instance_inverse(mlp, x, y, x_adv, InverseConfig(0.0, 0.01, 5)), x)
    out = instance_inverse(mlp, x, y, x_adv, InverseConfig(0.05, 0.01, 0), np.random.default_rng(0))
    assert 0 < np.abs(out - x).max() < 0.01


def test_instance_inverse_stays_in_ball_and_domain(mlp):
    rng = np.random.default_rng(1)
    x = rng.random((20, 2)).astype(np.float32)
    y = rng.integers(0, 3, 20)
    out = instance_inverse(mlp, x, y, None, InverseConfig(0.2, 0.1, 5, beta=0.0, clamp_domain=(0.0, 1.0)), rng)
    assert np.abs(out - x).max() <= np.float32(0.2) + 1e-7
    assert out.min() >= 0 and out.max() <= 1


def test_small_steps_decrease_cross_entropy(mlp, batch):
    x, y, _ = batch
    eps = 0.05
    cfg = InverseConfig(eps, 1e-3 * eps, 1, beta=0.0)
    delta = np.zeros_like(x)
    losses = [ops.softmax_cross_entropy(Tensor(predict(mlp, x)), y).item()]
    for _ in range(5):
        delta = inverse_step(mlp, x, y, None, delta, cfg)
        losses.append(ops.softmax_cross_entropy(Tensor(predict(mlp, x + delta)), y).item())
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_affine_one_step_hits_minimizing_corner():
    rng = np.random.default_rng(4)
    for _ in range(20):
        model = AffineClassifier.random(rng, 2, 2)
        x = rng.standard_normal((1, 2)).astype(np.float32)
        y = rng.integers(0, 2, 1)
        eps = 0.1
        out = instance_inverse(model, x, y, None, InverseConfig(eps, 2 * eps, 1, beta=0.0), rng)
        corners = [x + np.float32(eps) * np.asarray(s, np.float32) for s in itertools.product([-1, 1], repeat=2)]
        losses = [ops.per_example_cross_entropy(predict(model, c), y)[0] for c in corners]
        assert np.array_equal(out, corners[int(np.argmin(losses))])


def test_bank_init_and_apply():
    bank = UniversalBank.init(3, (2,), 0.05, seed=0)
    assert bank.max_norm() <= 0.05 and 0 < bank.max_norm() < 0.01
    x = np.array([[0.2, 0.3], [0.99, 0.5]], dtype=np.float32)
    assert np.array_equal(apply_universal(x, [0, 1], UniversalBank.zeros(3, (2,), 0.05)), x)
    full = UniversalBank(np.full((3, 2), 0.05, dtype=np.float32), 0.05)
    np.testing.assert_array_equal(apply_universal(x[:1], [2], full), x[:1] + np.float32(0.05))
    assert apply_universal(x[1:], [0], full, (0.0, 1.0))[0, 0] == 1.0
    with pytest.raises(ValueError):
        apply_universal(x, [0, 3], full)


def test_universal_update_matches_instance_step_for_one_example_per_class(mlp):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 2)).astype(np.float32)
    y = np.array([2, 0, 1])
    x_adv = x + rng.uniform(-0.1, 0.1, x.shape).astype(np.float32)
    bank = UniversalBank.init(3, (2,), 0.05, seed=1)
    cfg = InverseConfig(0.05, 0.05, 1, beta=1.0)
    new = universal_update(bank, mlp, x, y, x_adv, cfg).bank
    for j in range(3):
        c = y[j]
        step = inverse_step(mlp, x[j:j + 1], y[j:j + 1], x_adv[j:j + 1], bank.z[c][None], cfg)
        assert np.array_equal(new.z[c], step[0])


def test_absent_class_unchanged_and_ball_kept(mlp, batch):
    x, y, x_adv = batch
    bank = UniversalBank.init(4, (2,), 0.05, seed=2)
    mlp4 = init(NetworkSpec.mlp(2, 4, (8,)), 0)
    new = universal_update(bank, mlp4, x, y, x_adv, InverseConfig(0.05, 0.05)).bank
    assert np.array_equal(new.z[3], bank.z[3])
    assert new.max_norm() <= np.float32(0.05)


def test_duplicated_batch_same_direction(mlp, batch):
    x, y, x_adv = batch
    bank = UniversalBank.init(3, (2,), 0.05, seed=3)
    cfg = InverseConfig(0.05, 0.01)
    a = universal_update(bank, mlp, x, y, x_adv, cfg).bank.z
    b = universal_update(bank, mlp, np.tile(x, (3, 1)), np.tile(y, 3), np.tile(x_adv, (3, 1)), cfg).bank.z
    np.testing.assert_array_equal(np.sign(a - bank.z), np.sign(b - bank.z))


def test_update_probabilities_use_pre_update_bank(mlp, batch):
    x, y, x_adv = batch
    bank = UniversalBank.init(3, (2,), 0.05, seed=4)
    upd = universal_update(bank, mlp, x, y, x_adv, InverseConfig(0.05, 0.05))
    np.testing.assert_array_equal(upd.inverse_inputs, apply_universal(x, y, bank))
    np.testing.assert_allclose(upd.inverse_probs, ops.softmax_array(predict(mlp, upd.inverse_inputs)), atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        InverseConfig(-1.0, 0.1)
    with pytest.raises(ValueError):
        InverseConfig(0.1, 0.1, beta=-1)
