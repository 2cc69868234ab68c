import math

import numpy as np
import pytest

from gradcases import randomize
from oracles import scalar_attention, scalar_cgan, scalar_l1
from spaformer import blocks as B
from spaformer import losses as L
from spaformer import tensor as T
from spaformer.errors import ContractError
from spaformer.gradcheck import gradient_errors
from spaformer.params import iter_parameters
from spaformer.tensor import Tensor


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# --- adversarial


def test_half_sigmoid_values():
    zeros = _t(np.zeros((2, 1, 3, 3)))
    d, g = L.cgan_losses(zeros, zeros)
    assert d.item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert g.item() == pytest.approx(math.log(2), abs=1e-6)


def test_perfect_discriminator_limit():
    d, _ = L.cgan_losses(_t(np.full((1, 1, 2, 2), 40.0)), _t(np.full((1, 1, 2, 2), -40.0)))
    assert 0 <= d.item() < 1e-6


def test_saturating_form():
    fake = _t(np.zeros((1, 1, 2, 2)))
    assert L.generator_adversarial_loss(fake, non_saturating=False).item() == pytest.approx(-math.log(2), abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_cgan_matches_scalar_loops(seed):
    rng = np.random.default_rng(seed)
    real, fake = rng.uniform(-4, 4, (1, 1, 2, 2)), rng.uniform(-4, 4, (1, 1, 2, 2))
    d, g = L.cgan_losses(_t(real), _t(fake))
    rd, rg = scalar_cgan(real.astype(np.float32), fake.astype(np.float32))
    assert d.item() == pytest.approx(rd, abs=1e-6)
    assert g.item() == pytest.approx(rg, abs=1e-6)


def test_extreme_scores_stay_finite():
    d, g = L.cgan_losses(_t(np.full((1, 1, 2, 2), -1e4)), _t(np.full((1, 1, 2, 2), 1e4)))
    assert np.isfinite(d.item()) and np.isfinite(g.item())


def test_score_shape_mismatch():
    with pytest.raises(ContractError):
        L.discriminator_loss(_t(np.zeros((1, 1, 2, 2))), _t(np.zeros((1, 1, 4, 4))))


# --- weighted L1


def test_l1_identity(rng):
    x = _t(rng.uniform(-1, 1, (2, 3, 4, 4)))
    assert L.l1_weighted(x, x).item() == 0.0


def test_l1_constant_difference_is_three_quarters():
    d = 0.4
    out = L.l1_weighted(_t(np.full((1, 3, 5, 6), d)), _t(np.zeros((1, 3, 5, 6))))
    assert out.item() == pytest.approx(0.75 * d, rel=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_l1_matches_scalar_loops(seed):
    rng = np.random.default_rng(seed)
    n = 1 + seed % 2
    a, b = rng.uniform(-1, 1, (n, 3, 4, 5)).astype(np.float32), rng.uniform(-1, 1, (n, 3, 4, 5)).astype(np.float32)
    w = rng.uniform(0, 2, 3)
    got = L.l1_weighted(_t(a), _t(b), w).item()
    assert got == pytest.approx(scalar_l1(a, b, w), abs=1e-6)


def test_l1_weight_count_checked():
    with pytest.raises(ContractError):
        L.l1_weighted(_t(np.zeros((1, 3, 2, 2))), _t(np.zeros((1, 3, 2, 2))), (1.0, 1.0))


def test_l1_divisor_exposed():
    out = L.l1_weighted(_t(np.ones((1, 3, 2, 2))), _t(np.zeros((1, 3, 2, 2))), divisor=3.0)
    assert out.item() == pytest.approx(1.0)


# --- attention


def test_attention_identity():
    m = _t((np.arange(16).reshape(1, 1, 4, 4) % 3 == 0).astype(float))
    assert L.attention_loss(m, m).item() == 0.0


def test_attention_ones_vs_zeros():
    assert L.attention_loss(_t(np.ones((1, 1, 3, 3))), _t(np.zeros((1, 1, 3, 3)))).item() == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_attention_matches_scalar_loops(seed):
    rng = np.random.default_rng(seed)
    maps = [rng.uniform(0, 1, (1, 1, 4, 4)).astype(np.float32) for _ in range(1 + seed % 4)]
    mask = (rng.random((1, 1, 4, 4)) < 0.4).astype(np.float32)
    got = L.attention_loss([_t(a) for a in maps], _t(mask)).item()
    assert got == pytest.approx(scalar_attention(maps, mask), abs=1e-6)


def test_attention_sum_reduction():
    out = L.attention_loss(_t(np.ones((1, 1, 3, 3))), _t(np.zeros((1, 1, 3, 3))), reduction="sum")
    assert out.item() == 9.0


@pytest.mark.parametrize("bad", [0.5, 2.0, -1.0])
def test_attention_rejects_non_binary_mask(bad):
    mask = np.zeros((1, 1, 2, 2))
    mask[0, 0, 1, 1] = bad
    with pytest.raises(ContractError):
        L.attention_loss(_t(np.zeros((1, 1, 2, 2))), _t(mask))


# --- total


def test_total_is_sum():
    total, parts = L.total_loss(1.0, 2.0, 3.0)
    assert total.item() == 6.0 and parts.total == 6.0
    total, parts = L.total_loss(0.0, 0.0, 0.0)
    assert total.item() == 0.0


def test_breakdown_total_invariant(rng):
    l1, g, a = (_t(rng.uniform(0, 2)) for _ in range(3))
    _, parts = L.total_loss(l1, g, a, 1.3)
    assert parts.total == pytest.approx(parts.l1 + parts.l_cgan_g + parts.l_attention, abs=1e-6)
    assert parts.l_cgan_d == pytest.approx(1.3)
    assert min(parts.l1, parts.l_cgan_g, parts.l_attention, parts.l_cgan_d) >= 0


def test_zero_weight_drops_term(rng):
    x = T.Parameter(rng.uniform(-1, 1, (1, 1, 2, 2)))
    total, _ = L.total_loss(T.sum_all(x), T.sum_all(T.square(x)), 0.0, weights=L.LossWeights(cgan=0.0))
    T.backward(total)
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def _stub(rng):
    """One residual block acting on an image: the smallest generator-like map."""
    p = B.init_res_block(rng, "stub", 3)
    randomize(p, rng, 0.4)
    image = _t(rng.uniform(-1, 1, (1, 3, 4, 4)))
    target = _t(rng.uniform(-1, 1, (1, 3, 4, 4)))
    mask = _t((rng.random((1, 1, 4, 4)) < 0.5).astype(float))
    mix = rng.uniform(-1, 1, (1, 3, 1, 1))
    return p, image, target, mask, mix


def _components(p, image, target, mask, mix):
    out = B.res_block(image, p)
    att = T.sigmoid(T.conv2d(out, T.Tensor(mix), mode="pointwise_1x1"))
    return L.l1_weighted(out, target), L.generator_adversarial_loss(att), L.attention_loss(att, mask)


@pytest.mark.parametrize("which", [0, 1, 2, None])
def test_losses_gradcheck_through_stub(which):
    rng = np.random.default_rng(11)
    p, *rest = _stub(rng)

    def loss():
        parts = _components(p, *rest)
        return L.total_loss(*parts)[0] if which is None else parts[which]

    assert max(gradient_errors(loss, list(iter_parameters(p)), rng=rng)) < 1e-3


def test_total_gradient_is_sum_of_parts():
    rng = np.random.default_rng(12)
    p, *rest = _stub(rng)
    params = list(iter_parameters(p))

    def grads(fn):
        for q in params:
            q.zero_grad()
        T.backward(fn())
        return [q.grad.astype(np.float64).copy() for q in params]

    total = grads(lambda: L.total_loss(*_components(p, *rest))[0])
    parts = [grads(lambda i=i: _components(p, *rest)[i]) for i in range(3)]
    for k, g in enumerate(total):
        np.testing.assert_allclose(g, sum(part[k] for part in parts), atol=1e-6)
