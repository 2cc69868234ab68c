import math

import numpy as np
import pytest

from spaformer import trainer as TR
from spaformer.data import from_model_range, synthetic_triplets, to_model_range
from spaformer.errors import ContractError, NonFiniteError
from spaformer.model import ModelConfig, init_params, load_checkpoint
from spaformer.tensor import Parameter

SMALL = dict(base_channels=4, encoder_levels=2, n_ftr_blocks=1, twrnn_steps=2, disc_channels=4)


def _model(seed=0, **kw):
    return init_params(ModelConfig(**{**SMALL, **kw}, seed=seed))


def _cfg(**kw):
    base = dict(epochs=1, eval_images=0, image_size=16, seed=0)
    return TR.TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def trips():
    return synthetic_triplets(2, (16, 16), seed=3)


def _snapshot(params):
    return {p.name: p.data.copy() for p in params}


def _same(a, params):
    return all(np.array_equal(a[p.name], p.data) for p in params)


# --- Adam


def test_zero_gradient_is_fixed_point():
    p = Parameter(np.array([0.3, -2.0]), name="p")
    opt = TR.Adam([p])
    for _ in range(3):
        opt.zero_grad()
        opt.step()
    np.testing.assert_array_equal(p.data, np.array([0.3, -2.0], np.float32))


def test_first_step_moves_by_learning_rate():
    # minimising theta**2 from -0.1: the bias-corrected first step has size lr
    p = Parameter(np.array([-0.1]), name="theta")
    opt = TR.Adam([p], lr=0.01)
    p.grad = 2 * p.data
    opt.step()
    assert float(p.data[0]) == pytest.approx(-0.09, abs=1e-7)


def test_constant_unit_gradient_first_step():
    p = Parameter(np.array([0.0]), name="theta")
    opt = TR.Adam([p], lr=0.1, beta1=0.9, beta2=0.999)
    p.grad = np.ones(1, np.float32)
    opt.step()
    assert float(p.data[0]) == pytest.approx(-0.1, abs=1e-7)


def _scalar_adam(theta, grads, lr, b1, b2, eps):
    """Plain-float Adam; parameters are stored as float32 like the real ones."""
    m = v = 0.0
    for t, gfn in enumerate(grads, 1):
        g = float(np.float32(gfn(theta)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        theta = float(np.float32(theta) - np.float32(step))
    return theta


@pytest.mark.parametrize("b1", [0.5, 0.9])
def test_two_steps_match_scalar_reference(b1):
    p = Parameter(np.array([0.7]), name="x")
    opt = TR.Adam([p], lr=0.05, beta1=b1)
    grad = lambda x: 3 * x**2 - 1.0
    for _ in range(2):
        p.grad = np.array([grad(float(p.data[0]))], np.float32)
        opt.step()
    ref = _scalar_adam(float(np.float32(0.7)), [grad, grad], 0.05, b1, 0.999, 1e-8)
    assert float(p.data[0]) == pytest.approx(ref, abs=1e-7)


def test_non_finite_gradient_names_parameter():
    a, b = Parameter(np.zeros(2), name="good"), Parameter(np.zeros(2), name="bad.weight")
    opt = TR.Adam([a, b])
    opt.zero_grad()
    b.grad[1] = np.nan
    with pytest.raises(NonFiniteError, match="bad.weight"):
        opt.step()
    assert opt.t == 0 and not a.data.any()


# --- config


@pytest.mark.parametrize(
    "bad", [dict(learning_rate=0), dict(beta1=1.0), dict(beta2=-0.1), dict(batch_size=0), dict(epochs=-1)]
)
def test_train_config_invariants(bad):
    with pytest.raises(ContractError):
        TR.TrainConfig(**bad)


def test_default_hyperparameters():
    c = TR.TrainConfig()
    assert (c.learning_rate, c.beta1, c.beta2, c.epochs, c.batch_size) == (4e-4, 0.5, 0.999, 200, 1)
    assert c.loss_weights.l1 == c.loss_weights.cgan == c.loss_weights.attention == 1.0


# --- training loop


def test_zero_epochs_leaves_parameters(trips):
    model = _model()
    before = _snapshot(model.named_parameters().values())
    log = TR.train(model, trips, _cfg(epochs=0))
    assert log.steps == 0 and _same(before, model.named_parameters().values())


def test_training_bit_reproducible(trips):
    runs = []
    for _ in range(2):
        model = _model(seed=1)
        log = TR.train(model, trips, _cfg(epochs=2, max_steps=3, seed=5))
        runs.append((log, _snapshot(model.named_parameters().values())))
    (la, pa), (lb, pb) = runs
    assert la.steps == 3 and la == lb
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_different_seed_differs(trips):
    logs = [TR.train(_model(), trips, _cfg(max_steps=2, seed=s)) for s in (0, 1)]
    assert logs[0] != logs[1]


def test_updates_touch_only_their_network(trips):
    model = _model()
    cfg = _cfg()
    g_opt, d_opt = TR.Adam(model.generator_parameters()), TR.Adam(model.discriminator_parameters())
    shadow, free, mask = TR._batch_tensors(trips[:1])

    g0, d0 = _snapshot(model.generator_parameters()), _snapshot(model.discriminator_parameters())
    # a generator optimiser that never steps shows the discriminator update leaves G alone
    g_opt.step = lambda: None
    TR.train_step(model, shadow, free, mask, g_opt, d_opt, cfg, np.random.default_rng(0))
    assert _same(g0, model.generator_parameters())
    assert not _same(d0, model.discriminator_parameters())

    g_opt, d_opt = TR.Adam(model.generator_parameters()), TR.Adam(model.discriminator_parameters())
    d1 = _snapshot(model.discriminator_parameters())
    d_opt.step = lambda: None
    TR.train_step(model, shadow, free, mask, g_opt, d_opt, cfg, np.random.default_rng(0))
    assert _same(d1, model.discriminator_parameters())
    assert not _same(g0, model.generator_parameters())


def test_step_breakdown_consistent(trips):
    model = _model()
    log = TR.train(model, trips, _cfg(max_steps=2))
    for b in log.history:
        assert b.total == pytest.approx(b.l1 + b.l_cgan_g + b.l_attention, rel=1e-5)
        assert all(np.isfinite([b.l1, b.l_cgan_g, b.l_attention, b.l_cgan_d]))
    assert len(log.timings) == 2


def test_zero_weight_same_as_removing_term(trips, monkeypatch):
    a = _model()
    log_a = TR.train(a, trips, _cfg(max_steps=2, weight_attention=0.0))

    def zero_attention(maps, mask, **kw):
        from spaformer import tensor as T

        first = maps[0] if isinstance(maps, (list, tuple)) else maps
        return T.scale(T.sum_all(first), 0.0)

    b = _model()
    monkeypatch.setattr(TR, "attention_loss", zero_attention)
    TR.train(b, trips, _cfg(max_steps=2, weight_attention=1.0))
    pa, pb = a.named_parameters(), b.named_parameters()
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)
    # the raw term is still logged but left out of the total
    for h in log_a.history:
        assert h.l_attention > 0
        assert h.total == pytest.approx(h.l1 + h.l_cgan_g, rel=1e-5)


def test_checkpoint_schedule(trips, tmp_path):
    model = _model()
    TR.train(model, trips, _cfg(epochs=3, checkpoint_interval=2), out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["final.ckpt", "step0000002.ckpt", "step0000004.ckpt", "step0000006.ckpt"]
    final = load_checkpoint(tmp_path / "final.ckpt").named_parameters()
    assert all(np.array_equal(final[k].data, p.data) for k, p in model.named_parameters().items())


def test_divergence_keeps_last_checkpoint(trips, tmp_path, monkeypatch):
    real_step = TR.train_step
    calls = []

    def poisoned(model, *args, **kw):
        calls.append(1)
        if len(calls) == 3:
            model.generator.out.bias.data[...] = np.nan
        return real_step(model, *args, **kw)

    monkeypatch.setattr(TR, "train_step", poisoned)
    with pytest.raises(TR.TrainingDiverged) as info:
        TR.train(_model(), trips, _cfg(epochs=5, checkpoint_interval=2), out_dir=tmp_path)
    assert info.value.step == 2
    assert info.value.last_checkpoint == tmp_path / "step0000002.ckpt"
    assert info.value.last_checkpoint.exists()
    assert np.all(np.isfinite(load_checkpoint(info.value.last_checkpoint).generator.out.bias.data))


def test_held_out_evaluation_per_epoch(trips):
    log = TR.train(_model(), trips[:1], _cfg(epochs=2, eval_images=1), held_out=trips[1:])
    assert [e for e, _ in log.evals] == [0, 1]
    assert log.evals[0][1].rmse_all > 0


def test_empty_training_set():
    with pytest.raises(ContractError):
        TR.train(_model(), [], _cfg())


def test_flip_changes_run(trips):
    a = TR.train(_model(), trips, _cfg(epochs=3, flip=True))
    b = TR.train(_model(), trips, _cfg(epochs=3, flip=False))
    assert a.steps == b.steps == 6 and a != b


# --- inference


def test_zero_residual_inference_is_pixel_identical(tmp_path, rng):
    model = _model()
    image = rng.integers(0, 256, (3, 16, 20)).astype(np.float32)
    res = TR.infer(model, image, tmp_path, name="img")
    np.testing.assert_array_equal(res.restored, image.astype(np.uint8))
    assert np.array_equal(from_model_range(to_model_range(image)), image.astype(np.uint8))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["img.png", "img_attention1.png", "img_attention2.png"]
    assert len(res.attention) == model.config.twrnn_steps


def test_inference_deterministic(rng):
    model = _model()
    model.generator.out.weight.data[...] = rng.uniform(-0.2, 0.2, model.generator.out.weight.shape)
    image = rng.integers(0, 256, (3, 16, 16)).astype(np.float32)
    a, b = TR.infer(model, image), TR.infer(model, image)
    assert np.array_equal(a.restored, b.restored)
    assert all(np.array_equal(x, y) for x, y in zip(a.attention, b.attention))


def test_indivisible_input(rng):
    model = _model()
    image = rng.integers(0, 256, (3, 18, 17)).astype(np.float32)
    with pytest.raises(ContractError, match="divisible"):
        TR.infer(model, image)
    res = TR.infer(model, image, on_indivisible="resize")
    assert res.restored.shape == (3, 18, 17)
