"""Adversarial, weighted-L1 and attention-supervision losses, and their sum."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

SIGMOID_EPS = 1e-7


@dataclass
class LossWeights:
    l1: float = 1.0
    cgan: float = 1.0
    attention: float = 1.0


@dataclass
class LossBreakdown:
    l_cgan_g: float
    l_cgan_d: float
    l1: float
    l_attention: float
    total: float


def discriminator_loss(real_scores: Tensor, fake_scores: Tensor, eps: float = SIGMOID_EPS) -> Tensor:
    if real_scores.shape != fake_scores.shape:
        raise ContractError(f"score grids differ: real {real_scores.shape}, fake {fake_scores.shape}")
    # log(1 - sigmoid(s)) == log(sigmoid(-s)), and the clamp is symmetric
    real_term = T.mean_all(T.log_sigmoid(real_scores, eps))
    fake_term = T.mean_all(T.log_sigmoid(T.neg(fake_scores), eps))
    return T.neg(T.add(real_term, fake_term))


def generator_adversarial_loss(fake_scores: Tensor, non_saturating: bool = True, eps: float = SIGMOID_EPS) -> Tensor:
    """-mean log D(fake) by default; ``non_saturating=False`` gives the literal mean log(1 - D(fake))."""
    if non_saturating:
        return T.neg(T.mean_all(T.log_sigmoid(fake_scores, eps)))
    return T.mean_all(T.log_sigmoid(T.neg(fake_scores), eps))


def cgan_losses(real_scores: Tensor, fake_scores: Tensor, non_saturating: bool = True) -> tuple[Tensor, Tensor]:
    return discriminator_loss(real_scores, fake_scores), generator_adversarial_loss(fake_scores, non_saturating)


def l1_weighted(
    output: Tensor,
    target: Tensor,
    channel_weights: Sequence[float] = (1.0, 1.0, 1.0),
    divisor: float = 4.0,
) -> Tensor:
    """sum_c w_c sum_{v,u} |output - target| / (divisor * H * W), averaged over the batch.

    ``divisor`` defaults to 4 even for 3 channels.
    """
    if output.shape != target.shape:
        raise ContractError(f"l1_weighted: output {output.shape} and target {target.shape} differ")
    n, c, h, w = output.shape
    if len(channel_weights) != c:
        raise ContractError(f"l1_weighted: {len(channel_weights)} channel weights for {c} channels")
    weights = np.asarray(channel_weights, dtype=np.float64).reshape(1, c, 1, 1)
    weighted = T.mul_const(T.absolute(T.sub(output, target)), np.broadcast_to(weights, output.shape))
    return T.scale(T.sum_all(weighted), 1.0 / (divisor * h * w * n))


def check_binary_mask(mask: Tensor | np.ndarray, tol: float = 1e-6) -> None:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    off = np.minimum(np.abs(m), np.abs(m - 1.0))
    if off.size and off.max() > tol:
        raise ContractError(f"mask must be binary (values in {{0, 1}}); found value {m.reshape(-1)[off.argmax()]}")


def attention_loss(maps: Tensor | Sequence[Tensor], mask: Tensor, reduction: str = "mean") -> Tensor:
    """Squared error between attention map(s) and a binary mask, summed over maps."""
    check_binary_mask(mask)
    if isinstance(maps, Tensor):
        maps = [maps]
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    total = None
    for a in maps:
        if a.shape != mask.shape:
            raise ContractError(f"attention map {a.shape} and mask {mask.shape} differ")
        sq = T.square(T.sub(a, mask))
        term = T.mean_all(sq) if reduction == "mean" else T.sum_all(sq)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ContractError("attention_loss needs at least one map")
    return total


def _scalar(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def total_loss(
    l1: Tensor | float,
    cgan_g: Tensor | float,
    attention: Tensor | float,
    cgan_d: Tensor | float = 0.0,
    weights: LossWeights | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Generator objective ``w1*L1 + wc*L_cgan + wa*L_attention``; zero-weight terms are left out."""
    weights = weights or LossWeights()
    l1, cgan_g, attention, cgan_d = map(_scalar, (l1, cgan_g, attention, cgan_d))
    total = None
    for weight, term in ((weights.l1, l1), (weights.cgan, cgan_g), (weights.attention, attention)):
        if weight == 0:
            continue
        scaled = term if weight == 1 else T.scale(term, weight)
        total = scaled if total is None else T.add(total, scaled)
    if total is None:
        total = Tensor(np.zeros((), dtype=np.float32))
    breakdown = LossBreakdown(
        l_cgan_g=cgan_g.item(),
        l_cgan_d=cgan_d.item(),
        l1=l1.item(),
        l_attention=attention.item(),
        total=total.item(),
    )
    return total, breakdown
