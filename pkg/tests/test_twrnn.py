import numpy as np
import pytest

from gradcases import draw_case, randomize
from oracles import scalar_scan
from spaformer import tensor as T
from spaformer import twrnn as R
from spaformer.errors import ContractError
from spaformer.gradcheck import gradient_errors
from spaformer.params import iter_parameters, zero_
from spaformer.tensor import Tensor


def _relu(a):
    return np.maximum(a, 0)


@pytest.mark.parametrize("direction", R.DIRECTIONS)
def test_zero_kernel_is_memoryless(direction, rng):
    f = Tensor(rng.uniform(-1, 1, (2, 3, 4, 5)))
    out = R.directional_scan(f, Tensor(np.zeros((3, 3, 1, 1))), direction)
    np.testing.assert_array_equal(out.data, _relu(f.data))


def test_hand_recurrence_left_to_right():
    f = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3))
    out = R.directional_scan(f, Tensor(np.ones((1, 1, 1, 1))), "right")
    np.testing.assert_array_equal(out.data.ravel(), [1, 3, 6])


def test_right_to_left_runs_backwards():
    f = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3))
    out = R.directional_scan(f, Tensor(np.ones((1, 1, 1, 1))), "left")
    np.testing.assert_array_equal(out.data.ravel(), [6, 5, 3])


@pytest.mark.parametrize("vertical,horizontal", [("up", "left"), ("down", "right")])
def test_vertical_scan_is_transposed_horizontal(vertical, horizontal, rng):
    f = rng.uniform(-1, 1, (1, 2, 4, 5))
    g = Tensor(rng.uniform(-0.5, 0.5, (2, 2, 1, 1)))
    a = R.directional_scan(Tensor(f), g, vertical).data
    b = R.directional_scan(Tensor(f.transpose(0, 1, 3, 2)), g, horizontal).data
    np.testing.assert_array_equal(a, b.transpose(0, 1, 3, 2))


@pytest.mark.parametrize("direction", R.DIRECTIONS)
@pytest.mark.parametrize("shape", [(1, 1, 1, 1), (1, 2, 4, 4), (1, 2, 3, 4), (1, 1, 4, 2)])
def test_scan_matches_scalar_loops(direction, shape, rng):
    f = rng.uniform(-1, 1, shape)
    g = rng.uniform(-0.8, 0.8, (shape[1], shape[1], 1, 1))
    got = R.directional_scan(Tensor(f), Tensor(g), direction).data
    ref = scalar_scan(f.astype(np.float32), g.astype(np.float32), direction)
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_unknown_direction():
    with pytest.raises(ContractError):
        R.directional_scan(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 1, 1))), "diagonal")


def _average_mix(w, c):
    zero_(w)
    w.mix.weight.data[...] = np.tile(np.eye(c), (1, 4)).reshape(c, 4 * c, 1, 1) / 4


def test_degenerate_wheels_compose_relu(rng):
    c = 3
    w1, w2 = R.init_directional(rng, "a", c), R.init_directional(rng, "b", c)
    _average_mix(w1, c)
    _average_mix(w2, c)
    x = Tensor(rng.uniform(-1, 1, (1, c, 4, 5)))
    np.testing.assert_allclose(R.two_wheel_pass(x, w1, w2).data, _relu(_relu(x.data)), atol=1e-7)


def test_single_pixel_two_wheels(rng):
    c = 2
    w1, w2 = R.init_directional(rng, "a", c), R.init_directional(rng, "b", c)
    randomize([w1, w2], rng)
    x = rng.uniform(-1, 1, (1, c, 1, 1))

    def mix(w, v):
        m = w.mix.weight.data[:, :, 0, 0].astype(np.float64)
        return m @ np.concatenate([_relu(v)] * 4) + w.mix.bias.data

    ref = mix(w2, mix(w1, x[0, :, 0, 0].astype(np.float32)))
    got = R.two_wheel_pass(Tensor(x), w1, w2).data[0, :, 0, 0]
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_shared_wheels_reuse_first(rng):
    w = R.init_directional(rng, "a", 2)
    x = Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
    np.testing.assert_array_equal(R.two_wheel_pass(x, w).data, R.two_wheel_pass(x, w, w).data)


@pytest.mark.parametrize("seed", range(3))
def test_two_wheel_gradcheck(seed):
    loss_fn, tensors, draw = draw_case("two_wheel_pass", seed)
    assert max(gradient_errors(loss_fn, tensors, rng=np.random.default_rng(draw))) < 1e-3


def test_zero_projection_gives_half(rng):
    p = R.init_attention(rng, "att", 3)
    zero_(p.proj)
    last, maps = R.attention_map(Tensor(rng.uniform(-1, 1, (1, 3, 4, 4))), p, 3)
    for a in maps:
        assert np.all(a.data == 0.5)


def test_one_step_matches_composition(rng):
    p = R.init_attention(rng, "att", 2)
    randomize(p, rng)
    x = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
    last, maps = R.attention_map(x, p, 1)
    h = R.two_wheel_pass(x, p.first, p.second)
    ref = T.sigmoid(T.conv2d(h, p.proj.weight, p.proj.bias, "pointwise_1x1"))
    assert len(maps) == 1 and last is maps[0]
    np.testing.assert_array_equal(last.data, ref.data)


def test_steps_gate_next_input(rng):
    p = R.init_attention(rng, "att", 2)
    randomize(p, rng)
    x = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
    _, maps = R.attention_map(x, p, 2)
    gated = T.mul_map(x, maps[0])
    ref = T.sigmoid(T.conv2d(R.two_wheel_pass(gated, p.first, p.second), p.proj.weight, p.proj.bias, "pointwise_1x1"))
    np.testing.assert_array_equal(maps[1].data, ref.data)


@pytest.mark.parametrize("seed", range(10))
def test_maps_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    p = R.init_attention(rng, "att", 3)
    randomize(p, rng, 2.0)
    steps = 1 + seed % 4
    _, maps = R.attention_map(Tensor(rng.uniform(-3, 3, (2, 3, 5, 4))), p, steps)
    assert len(maps) == steps
    for a in maps:
        assert a.shape == (2, 1, 5, 4)
        assert a.data.min() >= 0 and a.data.max() <= 1


def test_zero_steps_rejected(rng):
    with pytest.raises(ContractError):
        R.attention_map(Tensor(np.zeros((1, 2, 2, 2))), R.init_attention(rng, "a", 2), 0)


@pytest.mark.parametrize("seed", range(3))
def test_every_directional_weight_gets_gradient(seed):
    rng = np.random.default_rng(seed)
    p = R.init_attention(rng, "att", 3)
    x = Tensor(rng.uniform(-1, 1, (1, 3, 6, 6)))
    _, maps = R.attention_map(x, p, 2)
    w = rng.uniform(-1, 1, maps[-1].shape)
    T.backward(T.sum_all(T.mul_const(T.add(maps[0], maps[1]), w)))
    for prm in iter_parameters(p):
        assert np.abs(prm.grad).max() > 0, prm.name


def test_direction_kernels_share_channels(rng):
    w = R.init_directional(rng, "a", 5)
    assert all(w.kernel(d).shape == (5, 5, 1, 1) for d in R.DIRECTIONS)
    assert w.mix.weight.shape == (5, 20, 1, 1)
