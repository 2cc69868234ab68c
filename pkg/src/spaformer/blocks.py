"""Channel-attention transformer block, plain residual block, and Fourier residual block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .params import ConvParams, init_conv
from .tensor import Parameter, Tensor


@dataclass
class TransformerBlockParams:
    norm_gain: Parameter
    norm_shift: Parameter
    w_p_q: Parameter
    w_p_k: Parameter
    w_p_v: Parameter
    w_d_q: Parameter
    w_d_k: Parameter
    w_d_v: Parameter
    w_p_out: Parameter
    # alpha = exp(log_alpha) keeps the temperature positive
    log_alpha: Parameter

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data[0]))

    @property
    def channels(self) -> int:
        return self.norm_gain.shape[0]


@dataclass
class ResBlockParams:
    conv1: ConvParams
    conv2: ConvParams


@dataclass
class FtrBlockParams:
    freq_in: ConvParams
    freq_out: ConvParams
    spatial1: ConvParams
    spatial2: ConvParams


def init_transformer_block(rng: np.random.Generator, name: str, channels: int) -> TransformerBlockParams:
    c = channels

    def pw(tag):
        return init_conv(rng, f"{name}.{tag}", (c, c, 1, 1), bias=False).weight

    def dw(tag):
        return init_conv(rng, f"{name}.{tag}", (c, 1, 3, 3), bias=False).weight

    return TransformerBlockParams(
        norm_gain=Parameter(np.ones(c), f"{name}.norm_gain"),
        norm_shift=Parameter(np.zeros(c), f"{name}.norm_shift"),
        w_p_q=pw("w_p_q"),
        w_p_k=pw("w_p_k"),
        w_p_v=pw("w_p_v"),
        w_d_q=dw("w_d_q"),
        w_d_k=dw("w_d_k"),
        w_d_v=dw("w_d_v"),
        w_p_out=pw("w_p_out"),
        log_alpha=Parameter([0.5 * np.log(c)], f"{name}.log_alpha"),
    )


def init_res_block(rng: np.random.Generator, name: str, channels: int) -> ResBlockParams:
    shape = (channels, channels, 3, 3)
    return ResBlockParams(init_conv(rng, f"{name}.conv1", shape), init_conv(rng, f"{name}.conv2", shape))


def init_ftr_block(rng: np.random.Generator, name: str, channels: int) -> FtrBlockParams:
    c2 = 2 * channels
    spatial = (channels, channels, 3, 3)
    return FtrBlockParams(
        freq_in=init_conv(rng, f"{name}.freq_in", (c2, c2, 1, 1)),
        freq_out=init_conv(rng, f"{name}.freq_out", (c2, c2, 1, 1)),
        spatial1=init_conv(rng, f"{name}.spatial1", spatial),
        spatial2=init_conv(rng, f"{name}.spatial2", spatial),
    )


def _check_input(x: Tensor, what: str) -> None:
    if x.ndim != 4 or min(x.shape[1:]) < 1:
        raise ContractError(f"{what} needs a non-empty (N, C, H, W) input, got {x.shape}")


def _qkv(y: Tensor, pointwise: Parameter, depthwise: Parameter) -> Tensor:
    t = T.conv2d(y, pointwise, mode="pointwise_1x1")
    return T.conv2d(t, depthwise, mode="depthwise_3x3", padding=1)


def channel_attention(x: Tensor, p: TransformerBlockParams, normalize_qk: bool = True) -> tuple[Tensor, Tensor]:
    """Transposed self-attention across channels.

    Returns the attended values before the output projection, shaped like
    ``x``, and the (N, C, C) attention matrix. Memory for the matrix is C*C
    per item whatever the spatial size.
    """
    _check_input(x, "transformer_block")
    n, c, h, w = x.shape
    if p.channels != c:
        raise ContractError(f"transformer_block: params for {p.channels} channels, input {x.shape}")
    y = T.layer_norm_channels(x, p.norm_gain, p.norm_shift)
    q = T.reshape(_qkv(y, p.w_p_q, p.w_d_q), (n, c, h * w))
    k = T.reshape(_qkv(y, p.w_p_k, p.w_d_k), (n, c, h * w))
    v = T.reshape(_qkv(y, p.w_p_v, p.w_d_v), (n, c, h * w))
    if normalize_qk:
        q = T.l2_normalize_last(q)
        k = T.l2_normalize_last(k)
    logits = T.div_by_scalar(T.bmm(k, q, transpose_b=True), T.exp(p.log_alpha))
    attn = T.softmax_last(logits)
    out = T.bmm(attn, v)
    return T.reshape(out, (n, c, h, w)), attn


def transformer_block(x: Tensor, p: TransformerBlockParams, normalize_qk: bool = True) -> Tensor:
    attended, _ = channel_attention(x, p, normalize_qk)
    return T.add(T.conv2d(attended, p.w_p_out, mode="pointwise_1x1"), x)


def res_branch(x: Tensor, p: ResBlockParams) -> Tensor:
    h = T.relu(T.conv2d(x, p.conv1.weight, p.conv1.bias, "full_3x3", padding=1))
    return T.conv2d(h, p.conv2.weight, p.conv2.bias, "full_3x3", padding=1)


def res_block(x: Tensor, p: ResBlockParams) -> Tensor:
    _check_input(x, "res_block")
    return T.add(x, res_branch(x, p))


def frequency_branch(x: Tensor, p: FtrBlockParams) -> Tensor:
    z = T.rfft2_stacked(x)
    z = T.relu(T.conv2d(z, p.freq_in.weight, p.freq_in.bias, "pointwise_1x1"))
    z = T.conv2d(z, p.freq_out.weight, p.freq_out.bias, "pointwise_1x1")
    return T.irfft2_stacked(z, x.shape[3])


def ftr_block(x: Tensor, p: FtrBlockParams) -> Tensor:
    """x + spectral branch + spatial conv branch."""
    _check_input(x, "ftr_block")
    if p.freq_in.weight.shape[1] != 2 * x.shape[1]:
        raise ContractError(f"ftr_block: frequency kernel {p.freq_in.weight.shape} needs 2C={2 * x.shape[1]} inputs")
    spatial = T.relu(T.conv2d(x, p.spatial1.weight, p.spatial1.bias, "full_3x3", padding=1))
    spatial = T.conv2d(spatial, p.spatial2.weight, p.spatial2.bias, "full_3x3", padding=1)
    return T.add(T.add(x, frequency_branch(x, p)), spatial)
