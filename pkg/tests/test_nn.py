import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scfc import nn
from scfc.errors import BackwardWithoutForwardError, NonFiniteGradientError, ShapeError

from gradcheck import LAYER_KINDS, REL_TOL, check_layer, check_pair_loss, pair_fixture


def _zero(stack):
    for layer in stack.layers:
        for arr in layer.params.values():
            arr[:] = 0.0
    return stack


def test_zero_weight_stack_gives_half_after_sigmoid():
    rng = np.random.default_rng(0)
    stack = _zero(nn.LayerStack((6,), [nn.Dense(6, 4, rng=rng), nn.ReLU(), nn.Dense(4, 3, rng=rng), nn.Sigmoid()]))
    out = stack.forward(rng.normal(size=(5, 6)))
    assert np.array_equal(out, np.full((5, 3), 0.5))


def test_zero_weight_stack_pre_sigmoid_is_zero():
    rng = np.random.default_rng(1)
    stack = _zero(nn.LayerStack((6,), [nn.Dense(6, 4, rng=rng), nn.Dense(4, 2, rng=rng)]))
    assert np.array_equal(stack.forward(rng.normal(size=(3, 6))), np.zeros((3, 2)))


def test_identity_dense_layer():
    layer = nn.Dense(4, 4)
    layer.params["W"][:] = np.eye(4)
    layer.params["b"][:] = 0.0
    v = np.array([[0.5, -1.0, 2.0, 3.25]])
    assert np.array_equal(nn.LayerStack((4,), [layer]).forward(v), v)


def test_conv_on_ramp_matches_hand_sum():
    conv = nn.Conv2D(1, 1, 2, 1)
    conv.params["W"][0, 0] = [[1.0, 0.0], [0.0, 1.0]]
    conv.params["b"][:] = 0.0
    img = np.arange(9.0).reshape(1, 1, 3, 3)
    out = nn.LayerStack((1, 3, 3), [conv]).forward(img)
    # each output cell: top-left + bottom-right of its 2x2 window
    assert np.array_equal(out[0, 0], [[4.0, 6.0], [10.0, 12.0]])


def test_conv_stride_two_shape_and_values():
    conv = nn.Conv2D(1, 1, 1, 2)
    conv.params["W"][:] = 1.0
    conv.params["b"][:] = 0.0
    img = np.arange(25.0).reshape(1, 1, 5, 5)
    out = nn.LayerStack((1, 5, 5), [conv]).forward(img)
    assert np.array_equal(out[0, 0], img[0, 0, ::2, ::2])


def test_maxpool_drops_odd_edge():
    x = np.arange(15.0).reshape(1, 1, 3, 5)
    out = nn.LayerStack((1, 3, 5), [nn.MaxPool2x2()]).forward(x)
    assert np.array_equal(out[0, 0], [[6.0, 8.0]])


def test_shape_mismatch_reports_layer_index():
    stack = nn.LayerStack((4,), [nn.Dense(4, 3), nn.ReLU()])
    with pytest.raises(ShapeError) as info:
        stack.forward(np.zeros((1, 5)))
    assert info.value.layer_index == 0


def test_incompatible_layers_rejected_at_construction():
    with pytest.raises(ShapeError) as info:
        nn.LayerStack((4,), [nn.Dense(4, 3), nn.Dense(5, 2)])
    assert info.value.layer_index == 1


def test_forward_leaves_weights_untouched():
    rng = np.random.default_rng(2)
    stack = nn.encoder_stack((28, 28), rng)
    before = {k: v.copy() for k, v in stack.state().items()}
    stack.forward(rng.uniform(size=(3, 1, 28, 28)))
    for k, v in stack.state().items():
        assert np.array_equal(v, before[k])


def test_encoder_layer_shapes():
    stack = nn.encoder_stack((28, 28), np.random.default_rng(0))
    assert stack.shapes[3] == (8, 13, 13)
    assert stack.shapes[6] == (16, 5, 5)
    assert stack.output_shape == (32,)
    room = nn.encoder_stack((48, 64), np.random.default_rng(0))
    assert room.output_shape == (32,)


def test_backward_requires_forward():
    stack = nn.LayerStack((3,), [nn.Dense(3, 2)])
    with pytest.raises(BackwardWithoutForwardError):
        stack.backward(np.ones((1, 2)))


def test_backward_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(3)
    stack = nn.encoder_stack((12, 12), rng)
    stack.forward(rng.uniform(size=(2, 1, 12, 12)))
    dx, grads = stack.backward(np.zeros((2, 32)))
    assert not dx.any()
    for g in grads:
        for arr in g.values():
            assert not arr.any()


def test_backward_does_not_mutate_weights():
    rng = np.random.default_rng(4)
    stack = nn.encoder_stack((12, 12), rng)
    before = {k: v.copy() for k, v in stack.state().items()}
    stack.forward(rng.uniform(size=(2, 1, 12, 12)))
    stack.backward(rng.normal(size=(2, 32)))
    for k, v in stack.state().items():
        assert np.array_equal(v, before[k])


def test_linear_gradient_is_outer_product():
    layer = nn.Dense(3, 2, rng=np.random.default_rng(5))
    stack = nn.LayerStack((3,), [layer])
    x = np.array([[0.5, -2.0, 4.0]])
    stack.forward(x)
    _, grads = stack.backward(np.ones((1, 2)))
    assert np.array_equal(grads[0]["W"], np.outer(np.ones(2), x[0]))
    assert np.array_equal(grads[0]["b"], np.ones(2))


@pytest.mark.parametrize("kind", LAYER_KINDS)
@pytest.mark.parametrize("seed", range(5))
def test_layer_gradients_match_finite_differences(kind, seed):
    assert check_layer(kind, seed) <= REL_TOL


@pytest.mark.parametrize("seed", range(3))
def test_full_pair_loss_gradient(seed):
    model, x1, x2, y = pair_fixture(seed, lam=0.01)
    assert check_pair_loss(model, x1, x2, y) <= REL_TOL


# ------------------------------------------------------------------- SGD


def _single_weight_stack(w):
    layer = nn.Dense(1, 1)
    layer.params["W"][:] = w
    layer.params["b"][:] = 0.25
    return nn.LayerStack((1,), [layer])


def test_sgd_zero_learning_rate_is_noop():
    stack = _single_weight_stack(1.5)
    nn.sgd_step(stack, [{"W": np.array([[3.0]]), "b": np.array([1.0])}], nn.SgdConfig(0.0, 1, 0.5))
    assert stack.layers[0].params["W"][0, 0] == 1.5
    assert stack.layers[0].params["b"][0] == 0.25


def test_sgd_plain_step_without_l2():
    stack = _single_weight_stack(1.5)
    nn.sgd_step(stack, [{"W": np.array([[2.0]]), "b": np.array([1.0])}], nn.SgdConfig(0.1, 1, 0.0))
    assert stack.layers[0].params["W"][0, 0] == 1.5 - 0.1 * 2.0
    assert stack.layers[0].params["b"][0] == 0.25 - 0.1 * 1.0


def test_sgd_weight_decay_arithmetic():
    stack = _single_weight_stack(1.0)
    nn.sgd_step(stack, [{"W": np.array([[0.0]]), "b": np.array([0.0])}], nn.SgdConfig(0.5, 1, 0.1))
    assert stack.layers[0].params["W"][0, 0] == pytest.approx(0.9, abs=1e-15)
    # biases are not regularized
    assert stack.layers[0].params["b"][0] == 0.25


def test_sgd_refuses_non_finite_gradient():
    stack = nn.LayerStack((2,), [nn.ReLU(), nn.Dense(2, 1)])
    before = stack.layers[1].params["W"].copy()
    with pytest.raises(NonFiniteGradientError) as info:
        nn.sgd_step(stack, [{}, {"W": np.array([[np.nan, 0.0]]), "b": np.zeros(1)}], nn.SgdConfig())
    assert info.value.layer_index == 1
    assert np.array_equal(stack.layers[1].params["W"], before)


def test_sgd_rejects_shape_mismatch():
    stack = _single_weight_stack(1.0)
    with pytest.raises(ShapeError):
        nn.sgd_step(stack, [{"W": np.zeros((2, 1))}], nn.SgdConfig())


@pytest.mark.parametrize("kwargs", [{"learning_rate": -1.0}, {"batch_size": 0}, {"l2_lambda": -0.1}])
def test_sgd_config_validation(kwargs):
    with pytest.raises(ValueError):
        nn.SgdConfig(**kwargs)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 0.4), st.floats(1e-3, 1.0), st.integers(0, 2**16))
def test_weight_decay_shrinks_norm(lr, lam, seed):
    # 2*lr*lam < 1 keeps the multiplier in (0, 1)
    stack = nn.encoder_stack((10, 10), np.random.default_rng(seed))
    zero = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in stack.layers]
    before = stack.l2_norm_sq()
    nn.sgd_step(stack, zero, nn.SgdConfig(lr, 1, lam))
    assert stack.l2_norm_sq() < before


def test_glorot_bounds():
    rng = np.random.default_rng(0)
    layer = nn.Dense(30, 20, rng=rng)
    assert np.abs(layer.params["W"]).max() <= np.sqrt(6 / 50)
    assert not layer.params["b"].any()


def test_sigmoid_strictly_inside_unit_interval_for_moderate_logits():
    y, _ = nn.Sigmoid().forward(np.linspace(-30, 30, 101))
    assert np.all((y > 0) & (y < 1))
    assert np.all(np.isfinite(nn.Sigmoid().forward(np.array([-1e4, 1e4]))[0]))


def test_identical_seed_identical_trajectory():
    def run():
        rng = np.random.default_rng(11)
        stack = nn.encoder_stack((12, 12), rng)
        x = rng.uniform(size=(4, 1, 12, 12))
        for _ in range(3):
            out = stack.forward(x)
            _, grads = stack.backward(out - 1.0)
            nn.sgd_step(stack, grads, nn.SgdConfig(0.05, 4, 0.01))
        return stack.state()

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(9)
    stack = nn.encoder_stack((16, 16), rng)
    cfg = nn.SgdConfig(0.02, 8, 1e-3, seed=9)
    path = nn.save_checkpoint(tmp_path / "ck.npz", {"enc": stack}, cfg, {"note": "x"})
    stacks, cfg2, meta = nn.load_checkpoint(path)
    x = rng.uniform(size=(3, 1, 16, 16))
    assert stack.forward(x).tobytes() == stacks["enc"].forward(x).tobytes()
    assert cfg2 == cfg
    assert meta == {"note": "x"}
