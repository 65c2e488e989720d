"""Parameter initialisation and small building blocks shared by the model parts.

Parameters live in nested dicts of :class:`~survfuse.autograd.Tensor`;
``flatten`` gives them stable dotted names for optimisers and checkpoints.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return ag.parameter(rng.uniform(-bound, bound, size=shape))


def init_linear(rng, fan_in: int, fan_out: int, bias: bool = True) -> dict:
    p = {"W": uniform_fan_in(rng, fan_in, (fan_in, fan_out))}
    if bias:
        p["b"] = uniform_fan_in(rng, fan_in, (fan_out,))
    return p


def init_mlp(rng, widths: list[int]) -> dict:
    return {"layers": [init_linear(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]}


def mlp(params: dict, x, act: Callable = ag.relu, final_act: Callable | None = None) -> Tensor:
    layers = params["layers"]
    for i, layer in enumerate(layers):
        x = ag.linear(x, layer["W"], layer.get("b"))
        if i < len(layers) - 1:
            x = act(x)
        elif final_act is not None:
            x = final_act(x)
    return x


def init_layer_norm(dim: int) -> dict:
    return {"gamma": ag.parameter(np.ones(dim)), "beta": ag.parameter(np.zeros(dim))}


def flatten(params, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    if isinstance(params, Tensor):
        yield prefix, params
    elif isinstance(params, dict):
        for key, val in params.items():
            yield from flatten(val, f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(params, (list, tuple)):
        for i, val in enumerate(params):
            yield from flatten(val, f"{prefix}.{i}" if prefix else str(i))
    else:
        raise TypeError(f"unexpected parameter container {type(params).__name__} at {prefix!r}")


def parameters(params) -> list[Tensor]:
    return [t for _, t in flatten(params)]


def substitute(params, values, _it=None):
    """Copy of the nested ``params`` structure with leaves replaced, in ``flatten`` order."""
    it = iter(values) if _it is None else _it
    if isinstance(params, Tensor):
        return ag.as_tensor(next(it))
    if isinstance(params, dict):
        return {k: substitute(v, None, it) for k, v in params.items()}
    if isinstance(params, (list, tuple)):
        return [substitute(v, None, it) for v in params]
    raise TypeError(f"unexpected parameter container {type(params).__name__}")
