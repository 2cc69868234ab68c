"""Central finite-difference checks of the tape's analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def random_projection_loss(out: Tensor, rng: np.random.Generator):
    """A scalar ``sum(out * R)`` with fixed random R, so every output element matters."""
    from .tensor import mul_const, sum_all

    weights = rng.uniform(-1.0, 1.0, size=out.shape)
    return sum_all(mul_const(out, weights))


def gradient_errors(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-3,
    max_entries: int | None = 24,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> list[float]:
    """Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) per tensor.

    The analytic gradient is taken at the tensors' working precision. The
    numeric one perturbs a float64 copy of each checked tensor, which promotes
    everything downstream of it to float64 for the difference quotient.
    At most ``max_entries`` coordinates per tensor are sampled.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    backward(loss_fn())
    analytic = [t.grad.astype(np.float64) for t in tensors]

    errors = []
    for t, ana in zip(tensors, analytic):
        original = t.data
        work = original.astype(np.float64)
        flat = work.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        t.data = work
        try:
            with no_grad():
                for k, i in enumerate(idx):
                    keep = flat[i]
                    flat[i] = keep + step
                    up = float(loss_fn().data)
                    flat[i] = keep - step
                    down = float(loss_fn().data)
                    flat[i] = keep
                    numeric[k] = (up - down) / (2 * step)
        finally:
            t.data = original
        a = ana.reshape(-1)[idx]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), floor)
        errors.append(float(np.linalg.norm(a - numeric) / scale))
    return errors


def max_gradient_error(loss_fn, tensors, **kwargs) -> float:
    return max(gradient_errors(loss_fn, tensors, **kwargs))
