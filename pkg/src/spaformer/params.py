"""Parameter containers shared by the blocks and the model assembly."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Parameter


@dataclass
class ConvParams:
    weight: Parameter
    bias: Parameter | None = None


def iter_parameters(obj) -> Iterator[Parameter]:
    """Yield every Parameter in a tree of dataclasses and lists, in field order."""
    if obj is None:
        return
    if isinstance(obj, Parameter):
        yield obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from iter_parameters(getattr(obj, f.name))
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from iter_parameters(item)


def named_parameters(obj) -> dict[str, Parameter]:
    out: dict[str, Parameter] = {}
    for p in iter_parameters(obj):
        if p.name in out:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        out[p.name] = p
    return out


def fan_in_bound(shape: tuple[int, ...]) -> float:
    """Half-width of the uniform init: 1/sqrt(fan_in), inside the sqrt(6/fan_in) He bound."""
    fan_in = int(np.prod(shape[1:]))
    return 1.0 / np.sqrt(fan_in)


def init_conv(
    rng: np.random.Generator,
    name: str,
    shape: tuple[int, int, int, int],
    bias: bool = True,
    zero: bool = False,
) -> ConvParams:
    if zero:
        w = np.zeros(shape)
    else:
        bound = fan_in_bound(shape)
        w = rng.uniform(-bound, bound, size=shape)
    b = Parameter(np.zeros(shape[0]), f"{name}.bias") if bias else None
    return ConvParams(Parameter(w, f"{name}.weight"), b)


def zero_(obj) -> None:
    """Set every parameter in ``obj`` to zero in place."""
    for p in iter_parameters(obj):
        p.data[...] = 0
