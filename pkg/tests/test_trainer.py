import numpy as np
import pytest

from iat import trainer
from iat.autodiff import override_backward
from iat.datasets import gaussian_blobs, two_moons
from iat.models import NetworkSpec, init
from iat.trainer import (TrainConfig, TrainingDivergedError, cyclic_lr, nesterov_update, sgd_nesterov_step, shuffle_order,
                         train)

SPEC = NetworkSpec.mlp(2, 2, (8, 8))


@pytest.fixture(scope="module")
def moons():
    return two_moons(90, 0.2, seed=5)


def small(objective, **kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 32)
    return TrainConfig.for_radius(0.1, objective, **kw)


def test_cyclic_lr_examples():
    assert cyclic_lr(0, 100, 0.1) == 0.0
    assert cyclic_lr(50, 100, 0.1) == pytest.approx(0.1)
    assert cyclic_lr(25, 100, 0.1) == pytest.approx(0.05)
    assert cyclic_lr(100, 100, 0.1) == 0.0
    assert cyclic_lr(0, 0, 0.1) == 0.0
    with pytest.raises(ValueError):
        cyclic_lr(101, 100, 0.1)


def test_nesterov_examples():
    p, v = nesterov_update([np.float32([1.0])], [np.float32([1.0])], [np.float32([0.0])], 0.1, 0.9)
    assert v[0][0] == 1.0
    assert p[0][0] == pytest.approx(0.81, abs=1e-7)
    p, v = nesterov_update([np.float32([2.0])], [np.float32([0.5])], [np.float32([0.3])], 0.0, 0.9)
    assert p[0][0] == 2.0 and v[0][0] == pytest.approx(0.9 * 0.3 + 0.5)
    p, _ = nesterov_update([np.float32([2.0])], [np.float32([0.5])], [np.float32([0.3])], 0.1, 0.0)
    assert p[0][0] == pytest.approx(1.95)
    p, _ = nesterov_update([np.float32([2.0])], [np.float32([0.0])], [np.float32([0.0])], 0.1, 0.0, weight_decay=0.5)
    assert p[0][0] == pytest.approx(1.9)


def test_nesterov_errors():
    with pytest.raises(ValueError):
        nesterov_update([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1)
    with pytest.raises(FloatingPointError):
        nesterov_update([np.float32([1.0])], [np.float32([np.inf])], [np.float32([0.0])], 0.1)


def test_sgd_step_on_state():
    state = init(SPEC, 0)
    grads = [np.ones_like(p.data) for p in state.params]
    vel = [np.zeros_like(p.data) for p in state.params]
    new, _ = sgd_nesterov_step(state, grads, vel, 0.1, momentum=0.0)
    np.testing.assert_allclose(new.params[0].data, state.params[0].data - np.float32(0.1), atol=1e-7)


def test_epochs_zero_returns_initial_state(moons):
    res = train(moons, SPEC, small("uiat", epochs=0))
    ref = init(SPEC, 0)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(res.state.params, ref.params))
    assert res.report.epochs == []


def test_iteration_count_keeps_partial_batch(moons):
    res = train(moons, SPEC, small("natural", epochs=3))
    assert res.report.iterations == 3 * 3  # ceil(90 / 32) = 3
    assert all(e.iterations == 3 for e in res.report.epochs)


def test_shuffle_is_pure_function_of_seed_and_epoch():
    assert np.array_equal(shuffle_order(50, 1, 2), shuffle_order(50, 1, 2))
    assert not np.array_equal(shuffle_order(50, 1, 2), shuffle_order(50, 1, 3))
    assert sorted(shuffle_order(50, 1, 2)) == list(range(50))


@pytest.mark.parametrize("objective", ["natural", "sat", "trades", "iat", "uiat", "uiat-oneoff", "singlestep", "singlestep-uiat"])
def test_every_objective_trains_deterministically(moons, objective, tmp_path):
    cfg = small(objective, oneoff_epoch=1, momentum_start=1)
    a = train(moons, SPEC, cfg)
    b = train(moons, SPEC, cfg)
    for pa, pb in zip(a.state.params, b.state.params):
        assert np.array_equal(pa.data, pb.data)
    assert [e.loss for e in a.report.epochs] == [e.loss for e in b.report.epochs]
    assert all(np.isfinite(e.loss) for e in a.report.epochs)


def test_bank_respects_radius_and_classes():
    data = gaussian_blobs(60, [[-1, 0], [1, 0], [0, 1.5]], 0.5, seed=0)
    res = train(data, NetworkSpec.mlp(2, 3, (8,)), small("uiat", epochs=2, batch_size=16))
    assert res.bank.z.shape == (3, 2)
    assert res.bank.max_norm() <= np.float32(0.05)


def test_lambda_zero_uiat_matches_sat_bitwise(moons):
    sat = train(moons, SPEC, small("sat", epochs=3))
    uiat = train(moons, SPEC, small("uiat", epochs=3, lam=0.0, momentum_start=1))
    for a, b in zip(sat.state.params, uiat.state.params):
        assert np.array_equal(a.data, b.data)


def test_divergence_reports_coordinates(moons):
    def bad(g, saved, z, *, labels):
        return (np.full_like(z, np.nan),)

    with override_backward("softmax_cross_entropy", bad):
        with pytest.raises(TrainingDivergedError) as err:
            train(moons, SPEC, small("natural"))
    assert err.value.epoch == 0 and err.value.batch == 0


def test_checkpoints_written_at_cadence(moons, tmp_path):
    res = train(moons, SPEC, small("natural", epochs=4, checkpoint_every=2), out_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == ["epoch_0002.ckpt", "epoch_0004.ckpt"]
    assert all(p.exists() for p in res.checkpoints)


def test_report_csv(moons, tmp_path):
    res = train(moons, SPEC, small("natural"))
    res.report.write_csv(tmp_path / "train.csv")
    lines = (tmp_path / "train.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_nat_acc,train_rob_acc,loss,seconds"
    assert len(lines) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        small("mart")
    with pytest.raises(ValueError):
        small("sat", batch_size=0)
    with pytest.raises(ValueError):
        small("sat", lr=-1.0)


def test_default_schedule_epochs():
    cfg = small("uiat", epochs=40)
    assert cfg.start_epoch == 30 and cfg.one_off_epoch == 32
    assert cfg.universal.step_size == pytest.approx(0.05)
    assert cfg.inverse.step_size == pytest.approx(0.025) and cfg.inverse.steps == 5
    assert cfg.attack.steps == 10 and cfg.attack.step_size == pytest.approx(0.025)
    assert small("singlestep-uiat").universal.beta == 0.0
    assert trainer.BANK_OBJECTIVES == ("uiat", "uiat-oneoff", "singlestep-uiat")
