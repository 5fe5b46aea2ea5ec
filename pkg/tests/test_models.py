import numpy as np
import pytest

from iat import ops
from iat.autodiff import ShapeError, Tensor
from iat.models import AffineClassifier, NetworkSpec, NetworkState, forward, init, predict


def test_init_is_deterministic_with_zero_biases():
    spec = NetworkSpec.mlp(2, 3, (8, 4))
    a, b = init(spec, 5), init(spec, 5)
    for pa, pb in zip(a.params, b.params):
        assert np.array_equal(pa.data, pb.data)
    for bias in a.params[1::2]:
        assert not bias.data.any()


def test_he_scaling_on_large_layer():
    spec = NetworkSpec.mlp(100, 2, (100, 8))
    w = init(spec, 3).params[2].data  # 100 x 100 hidden layer, 10k weights
    assert abs(w.var() / (2 / 100) - 1) < 0.2


def test_cnn_conv_weight_variance():
    spec = NetworkSpec.small_cnn((1, 28, 28), 10)
    w = init(spec, 0).params[2].data  # 32 x 16 x 3 x 3
    assert abs(w.var() / (2 / (16 * 9)) - 1) < 0.2


@pytest.mark.parametrize("kw", [dict(hidden=(0,)), dict(hidden=()), dict(num_classes=1)])
def test_degenerate_specs_rejected(kw):
    args = dict(kind="mlp", input_shape=(2,), num_classes=2)
    args.update(kw)
    with pytest.raises(ValueError):
        NetworkSpec(**args)


def test_zero_final_layer_gives_uniform_probabilities():
    spec = NetworkSpec.mlp(2, 4, (5,))
    state = init(spec, 0)
    params = list(state.params)
    params[-2] = Tensor(np.zeros(params[-2].shape))
    out = forward(state.with_params(params), np.random.default_rng(0).standard_normal((3, 2)))
    np.testing.assert_allclose(ops.softmax_array(out.logits.data), 0.25)


def test_features_are_last_hidden_layer():
    spec = NetworkSpec.mlp(2, 3, (7, 5))
    out = forward(init(spec, 0), np.ones((4, 2)))
    assert out.features.shape == (4, 5) and out.logits.shape == (4, 3)
    cnn = NetworkSpec.small_cnn((1, 8, 8), 3, (2, 4), dense=6)
    out = forward(init(cnn, 0), np.ones((2, 1, 8, 8)))
    assert out.features.shape == (2, 6)


def test_batch_independence():
    spec = NetworkSpec.small_cnn((1, 7, 7), 3, (2, 3), dense=6)
    state = init(spec, 1)
    x = np.random.default_rng(2).random((32, 1, 7, 7)).astype(np.float32)
    full = forward(state, x).logits.data
    single = forward(state, x[5:6]).logits.data
    np.testing.assert_allclose(single[0], full[5], atol=1e-6)
    dup = forward(state, np.repeat(x[:1], 4, axis=0)).logits.data
    assert all(np.array_equal(dup[0], r) for r in dup)


def test_hidden_unit_permutation_leaves_logits_unchanged():
    spec = NetworkSpec.mlp(3, 2, (6, 5))
    state = init(spec, 7)
    w1, b1, w2, b2, w3, b3 = (p.data for p in state.params)
    perm = np.random.default_rng(0).permutation(6)
    permuted = state.with_params([Tensor(w1[:, perm]), Tensor(b1[perm]), Tensor(w2[perm]), Tensor(b2), Tensor(w3), Tensor(b3)])
    x = np.random.default_rng(1).standard_normal((10, 3))
    np.testing.assert_allclose(forward(state, x).logits.data, forward(permuted, x).logits.data, atol=1e-5)


def test_input_shape_mismatch():
    state = init(NetworkSpec.mlp(2, 2), 0)
    with pytest.raises(ShapeError):
        forward(state, np.ones((3, 4)))


def test_state_rejects_wrong_parameter_shapes():
    spec = NetworkSpec.mlp(2, 2, (3,))
    with pytest.raises(ShapeError):
        NetworkState(spec, (Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.ones((3, 2))), Tensor(np.ones(2))))


def test_spec_json_round_trip():
    spec = NetworkSpec.small_cnn((1, 6, 6), 4, (3, 5), dense=7)
    assert NetworkSpec.from_json(spec.to_json()) == spec


def test_affine_classifier_is_linear():
    model = AffineClassifier.random(np.random.default_rng(0), 2, 3)
    x = np.array([[1.0, 2.0]], dtype=np.float32)
    expected = x @ model.weight.data + model.bias.data
    np.testing.assert_allclose(predict(model, x), expected, rtol=1e-6)
