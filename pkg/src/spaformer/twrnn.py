"""Two-wheel recurrent spatial attention.

Four directional ReLU recurrences sweep the feature map, their outputs are
mixed back to C channels, and the whole sweep runs twice (two wheels). A 1x1
projection plus sigmoid turns the result into a single-channel map in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .params import ConvParams, init_conv
from .tensor import Parameter, Tensor

DIRECTIONS = ("up", "down", "left", "right")

# direction of travel -> (scan axis of an NCHW array, runs backwards along it)
_SCAN_AXES = {"down": (2, False), "up": (2, True), "right": (3, False), "left": (3, True)}


@dataclass
class DirectionalWeights:
    g_up: Parameter
    g_down: Parameter
    g_left: Parameter
    g_right: Parameter
    mix: ConvParams

    def kernel(self, direction: str) -> Parameter:
        return getattr(self, f"g_{direction}")


@dataclass
class AttentionParams:
    first: DirectionalWeights
    # None means the second wheel reuses ``first``
    second: DirectionalWeights | None
    proj: ConvParams


def init_directional(rng: np.random.Generator, name: str, channels: int) -> DirectionalWeights:
    c = channels
    gs = {d: init_conv(rng, f"{name}.g_{d}", (c, c, 1, 1), bias=False).weight for d in DIRECTIONS}
    mix = init_conv(rng, f"{name}.mix", (c, 4 * c, 1, 1))
    return DirectionalWeights(gs["up"], gs["down"], gs["left"], gs["right"], mix)


def init_attention(rng: np.random.Generator, name: str, channels: int, share_wheels: bool = False) -> AttentionParams:
    first = init_directional(rng, f"{name}.wheel1", channels)
    second = None if share_wheels else init_directional(rng, f"{name}.wheel2", channels)
    return AttentionParams(first, second, init_conv(rng, f"{name}.proj", (1, channels, 1, 1)))


def _to_scan_layout(a: np.ndarray, axis: int, backwards: bool) -> np.ndarray:
    """(N, C, H, W) -> (L, N, C, P) with the scan axis first, in travel order."""
    s = np.moveaxis(a, axis, 0)
    return s[::-1] if backwards else s


def _from_scan_layout(s: np.ndarray, axis: int, backwards: bool) -> np.ndarray:
    if backwards:
        s = s[::-1]
    return np.ascontiguousarray(np.moveaxis(s, 0, axis))


def directional_scan(f: Tensor, g: Tensor, direction: str) -> Tensor:
    """ReLU recurrence h(t) = relu(f(t) + G h(t-1)), h(0) = relu(f(0)), along one direction.

    ``direction`` names the way information travels: ``"right"`` scans
    columns left to right, ``"down"`` scans rows top to bottom, and
    ``"left"``/``"up"`` are their reverses. ``g`` is a (C, C, 1, 1) channel mix.
    """
    if direction not in _SCAN_AXES:
        raise ContractError(f"unknown scan direction {direction!r}; expected one of {DIRECTIONS}")
    if f.ndim != 4:
        raise ContractError(f"directional_scan expects (N, C, H, W), got {f.shape}")
    c = f.shape[1]
    if g.shape != (c, c, 1, 1):
        raise ContractError(f"directional_scan: kernel {g.shape} does not fit input {f.shape}")
    axis, backwards = _SCAN_AXES[direction]
    mix = g.data[:, :, 0, 0]
    dtype = np.result_type(f.data, g.data)
    fs = _to_scan_layout(f.data, axis, backwards)
    pre = np.empty(fs.shape, dtype=dtype)
    hs = np.empty(fs.shape, dtype=dtype)
    pre[0] = fs[0]
    hs[0] = np.maximum(pre[0], 0)
    for t in range(1, fs.shape[0]):
        pre[t] = fs[t] + mix @ hs[t - 1]
        hs[t] = np.maximum(pre[t], 0)

    def back(grad_out):
        gs = _to_scan_layout(grad_out, axis, backwards)
        df = np.empty_like(gs)
        dmix = np.zeros(mix.shape, dtype=gs.dtype)
        carry = np.zeros_like(gs[0])
        for t in range(gs.shape[0] - 1, -1, -1):
            dpre = (gs[t] + carry) * (pre[t] > 0)
            df[t] = dpre
            if t > 0:
                dmix += np.einsum("nop,ncp->oc", dpre, hs[t - 1])
                carry = mix.T @ dpre
        return _from_scan_layout(df, axis, backwards), dmix[:, :, None, None]

    return T.record(_from_scan_layout(hs, axis, backwards), (f, g), back)


def wheel(x: Tensor, w: DirectionalWeights) -> Tensor:
    scans = [directional_scan(x, w.kernel(d), d) for d in DIRECTIONS]
    return T.conv2d(T.concat_channels(scans), w.mix.weight, w.mix.bias, "pointwise_1x1")


def two_wheel_pass(x: Tensor, first: DirectionalWeights, second: DirectionalWeights | None = None) -> Tensor:
    return wheel(wheel(x, first), second if second is not None else first)


def attention_map(features: Tensor, p: AttentionParams, steps: int) -> tuple[Tensor, list[Tensor]]:
    """Progressive attention: each step's map gates the features seen by the next step.

    Returns the last (N, 1, H, W) map and the list of all ``steps`` maps.
    """
    if steps < 1:
        raise ContractError(f"attention_map needs steps >= 1, got {steps}")
    maps: list[Tensor] = []
    current = features
    for _ in range(steps):
        h = two_wheel_pass(current, p.first, p.second)
        a = T.sigmoid(T.conv2d(h, p.proj.weight, p.proj.bias, "pointwise_1x1"))
        maps.append(a)
        current = T.mul_map(features, a)
    return maps[-1], maps
