"""Adam, the alternating generator/discriminator loop, inference, and the overfit smoke harness."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import (
    DatasetIndex,
    ShadowTriplet,
    from_model_range,
    load_triplet,
    synthetic_triplets,
    to_model_range,
    write_png,
)
from .errors import ContractError, NonFiniteError
from .losses import (
    LossBreakdown,
    LossWeights,
    attention_loss,
    discriminator_loss,
    generator_adversarial_loss,
    l1_weighted,
    total_loss,
)
from .metrics import MetricsReport, aggregate_reports, evaluate_pair
from .model import ModelConfig, SpAFormer, init_params, save_checkpoint
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 4e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 200
    max_steps: int = 0  # 0 means no cap
    batch_size: int = 1
    weight_l1: float = 1.0
    weight_cgan: float = 1.0
    weight_attention: float = 1.0
    channel_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    l1_divisor: float = 4.0
    supervise_all_steps: bool = True
    non_saturating: bool = True
    seed: int = 0
    checkpoint_interval: int = 0  # in steps; 0 saves only the final model
    image_size: int = 256
    eval_images: int = 2
    flip: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.max_steps < 0:
            raise ContractError("epochs and max_steps must be non-negative")
        self.channel_weights = tuple(float(w) for w in self.channel_weights)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.weight_l1, self.weight_cgan, self.weight_attention)


@dataclass
class TrainLog:
    history: list[LossBreakdown] = field(default_factory=list)
    evals: list[tuple[int, MetricsReport]] = field(default_factory=list)
    timings: list[float] = field(default_factory=list, compare=False)

    @property
    def steps(self) -> int:
        return len(self.history)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, what: str, last_checkpoint: Path | None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        super().__init__(f"non-finite {what} at step {step}; last good checkpoint: {last_checkpoint}")


class Adam:
    """Adam with bias correction. Moments are kept in float64 per parameter."""

    def __init__(self, params: Iterable[Parameter], lr=4e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(p.name, f"non-finite gradient for parameter {p.name}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.dtype)


def _batch_tensors(batch: Sequence[ShadowTriplet]) -> tuple[Tensor, Tensor, Tensor]:
    shadow = np.stack([to_model_range(t.shadow) for t in batch])
    free = np.stack([to_model_range(t.free) for t in batch])
    mask = np.stack([t.mask for t in batch])
    return Tensor(shadow), Tensor(free), Tensor(mask)


def _finite(x: Tensor) -> bool:
    return bool(np.all(np.isfinite(x.data)))


def train_step(model: SpAFormer, shadow, free, mask, g_opt: Adam, d_opt: Adam, config: TrainConfig, rng, step: int = 0):
    """One discriminator update on a detached fake, then one generator update."""
    # generator forward once; the detached copy feeds the discriminator update
    out = model.generate(shadow, training=True, rng=rng)
    d_loss = discriminator_loss(model.discriminate(shadow, free), model.discriminate(shadow, out.restored.detach()))
    if not _finite(d_loss):
        raise FloatingPointError("discriminator loss")
    d_opt.zero_grad()
    T.backward(d_loss)
    d_opt.step()

    weights = config.loss_weights
    l1 = l1_weighted(out.restored, free, config.channel_weights, config.l1_divisor)
    att = attention_loss(out.attention_steps if config.supervise_all_steps else out.attention, mask)
    adv = generator_adversarial_loss(model.discriminate(shadow, out.restored), config.non_saturating)
    total, breakdown = total_loss(l1, adv, att, d_loss, weights)
    if not _finite(total):
        raise FloatingPointError("generator loss")
    g_opt.zero_grad()
    T.backward(total)
    g_opt.step()
    return breakdown


def _flip(t: ShadowTriplet) -> ShadowTriplet:
    return ShadowTriplet(t.shadow[..., ::-1].copy(), t.mask[..., ::-1].copy(), t.free[..., ::-1].copy(), t.id)


def evaluate_model(model: SpAFormer, triplets: Sequence[ShadowTriplet]) -> MetricsReport:
    reports = []
    for t in triplets:
        with T.no_grad():
            out = model.generate(Tensor(to_model_range(t.shadow)[None]))
        pred = from_model_range(out.restored.data[0]).astype(np.float64)
        reports.append(evaluate_pair(pred, t.free, t.mask, on_empty="nan"))
    return aggregate_reports(reports)


def train(
    model: SpAFormer,
    dataset: DatasetIndex | Sequence[ShadowTriplet],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    held_out: Sequence[ShadowTriplet] | None = None,
) -> TrainLog:
    """Alternating adversarial training. Deterministic given the seeds and data."""
    if isinstance(dataset, DatasetIndex):
        size = (config.image_size, config.image_size)
        ids = list(dataset.train_ids)

        def fetch(i):
            return load_triplet(dataset, ids[i], size)

        if held_out is None and config.eval_images:
            held_out = [load_triplet(dataset, i, size) for i in dataset.test_ids[: config.eval_images]]
    else:
        triplets = list(dataset)

        def fetch(i):
            return triplets[i]

        ids = [t.id for t in triplets]
    if not ids:
        raise ContractError("training set is empty")
    held_out = list(held_out or [])[: config.eval_images] if config.eval_images else []
    model.config.__post_init__()

    order_seed, dropout_seed, flip_seed = np.random.SeedSequence(config.seed).spawn(3)
    order_rng = np.random.default_rng(order_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    flip_rng = np.random.default_rng(flip_seed)
    g_opt = Adam(model.generator_parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    d_opt = Adam(model.discriminator_parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps)

    out_dir = Path(out_dir) if out_dir is not None else None
    last_ckpt: Path | None = None
    log_ = TrainLog()
    step = 0
    done = False
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(ids))
        for start in range(0, len(order), config.batch_size):
            t0 = time.perf_counter()
            batch = [fetch(i) for i in order[start : start + config.batch_size]]
            if config.flip:
                batch = [_flip(t) if flip_rng.random() < 0.5 else t for t in batch]
            shadow, free, mask = _batch_tensors(batch)
            try:
                breakdown = train_step(model, shadow, free, mask, g_opt, d_opt, config, dropout_rng, step)
            except NonFiniteError as exc:
                raise TrainingDiverged(step, f"gradient ({exc.what})", last_ckpt) from exc
            except FloatingPointError as exc:
                raise TrainingDiverged(step, str(exc), last_ckpt) from exc
            log_.history.append(breakdown)
            log_.timings.append(time.perf_counter() - t0)
            step += 1
            if out_dir is not None and config.checkpoint_interval and step % config.checkpoint_interval == 0:
                last_ckpt = save_checkpoint(model, out_dir / f"step{step:07d}.ckpt")
            if config.max_steps and step >= config.max_steps:
                done = True
                break
        if held_out:
            log_.evals.append((epoch, evaluate_model(model, held_out)))
        log.info("epoch %d step %d %s", epoch, step, log_.history[-1] if log_.history else None)
        if done:
            break
    if out_dir is not None:
        save_checkpoint(model, out_dir / "final.ckpt")
    return log_


# ---------------------------------------------------------------------------
# inference


@dataclass
class InferenceResult:
    restored: np.ndarray  # (3, H, W) uint8
    attention: list[np.ndarray]  # per step, (H, W) uint8
    paths: list[Path] = field(default_factory=list)


def _resize_chw(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    from PIL import Image

    hwc = np.clip(np.rint(image), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    out = Image.fromarray(hwc).resize((size[1], size[0]), Image.BILINEAR)
    return np.asarray(out, dtype=np.float32).transpose(2, 0, 1)


def infer(
    model: SpAFormer,
    image: np.ndarray,
    out_dir: str | Path | None = None,
    name: str = "image",
    on_indivisible: str = "error",
) -> InferenceResult:
    """Restore one (3, H, W) image in [0, 255]; optionally write PNGs for the result and each attention step."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[1:]
    m = model.config.stride_multiple
    size = (h, w)
    if h % m or w % m:
        if on_indivisible != "resize":
            raise ContractError(f"image {h}x{w} is not divisible by {m}; pass on_indivisible='resize' to resize")
        size = (max(m, h // m * m), max(m, w // m * m))
        log.warning("resizing %s from %dx%d to %dx%d for inference", name, h, w, *size)
        image = _resize_chw(image, size)
    with T.no_grad():
        out = model.generate(Tensor(to_model_range(image)[None]))
    restored = from_model_range(out.restored.data[0])
    attention = [np.clip(np.rint(a.data[0, 0] * 255.0), 0, 255).astype(np.uint8) for a in out.attention_steps]
    if size != (h, w):
        restored = _resize_chw(restored.astype(np.float32), (h, w)).astype(np.uint8)
    result = InferenceResult(restored, attention)
    if out_dir is not None:
        out_dir = Path(out_dir)
        result.paths.append(write_png(out_dir / f"{name}.png", restored))
        for k, a in enumerate(attention):
            result.paths.append(write_png(out_dir / f"{name}_attention{k + 1}.png", a))
    return result


# ---------------------------------------------------------------------------
# smoke harness


def overfit_smoke(
    n_images: int = 4,
    steps: int = 300,
    size: int = 32,
    seed: int = 0,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
) -> tuple[TrainLog, SpAFormer]:
    """Train default-configured models on a few synthetic triplets for a fixed number of steps."""
    triplets = synthetic_triplets(n_images, (size, size), seed=seed)
    model = init_params(model_config or ModelConfig(seed=seed))
    config = train_config or TrainConfig(seed=seed, epochs=steps, max_steps=steps, eval_images=0, image_size=size)
    return train(model, triplets, config), model
