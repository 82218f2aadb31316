from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    def __init__(self, value: np.ndarray, name: str | None = None) -> None:
        super().__init__(value, requires_grad=True, name=name)


def uniform_parameter(
    rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]
) -> Parameter:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Registry of parameters and submodules found among instance attributes."""

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        seen: set[int] = set()
        self._collect("", params, seen)
        return params

    def _collect(self, prefix: str, params: dict[str, Tensor], seen: set[int]) -> None:
        for name, value in self._children():
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    params[prefix + name] = value
            elif isinstance(value, Module):
                value._collect(f"{prefix}{name}.", params, seen)

    def train(self, mode: bool = True) -> None:
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)

    def eval(self) -> None:
        self.train(False)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: surviving units are rescaled by 1 / (1 - rate)."""
    if rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return ad.mul(x, keep / (1.0 - rate))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int) -> None:
        self.weight = uniform_parameter(rng, fan_in, (fan_in, fan_out))
        self.bias = uniform_parameter(rng, fan_in, (1, fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class MLP(Module):
    """Linear layers with ReLU in between and optional dropout on hidden units."""

    def __init__(
        self,
        rng: np.random.Generator,
        sizes: Sequence[int],
        dropout: float = 0.0,
    ) -> None:
        self.layers = [Linear(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        self.dropout = dropout
        self.rng = np.random.default_rng(rng.integers(2**63))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
                if self.training:
                    x = dropout(x, self.dropout, self.rng)
        return x


class GRUCell(Module):
    def __init__(self, rng: np.random.Generator, input_size: int, hidden_size: int) -> None:
        self.hidden_size = hidden_size
        self.weight_ih = uniform_parameter(rng, hidden_size, (input_size, 3 * hidden_size))
        self.weight_hh = uniform_parameter(rng, hidden_size, (hidden_size, 3 * hidden_size))
        self.bias_ih = uniform_parameter(rng, hidden_size, (1, 3 * hidden_size))
        self.bias_hh = uniform_parameter(rng, hidden_size, (1, 3 * hidden_size))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        n = self.hidden_size
        gi = ad.add(ad.matmul(x, self.weight_ih), self.bias_ih)
        gh = ad.add(ad.matmul(h, self.weight_hh), self.bias_hh)
        gi_r, gi_z, gi_n = _split3(gi, n)
        gh_r, gh_z, gh_n = _split3(gh, n)
        reset = ad.sigmoid(ad.add(gi_r, gh_r))
        update = ad.sigmoid(ad.add(gi_z, gh_z))
        candidate = ad.tanh(ad.add(gi_n, ad.mul(reset, gh_n)))
        # h' = (1 - u) * n + u * h
        return ad.add(candidate, ad.mul(update, ad.sub(h, candidate)))


def _split3(x: Tensor, n: int) -> tuple[Tensor, Tensor, Tensor]:
    return (
        ad.columns(x, 0, n),
        ad.columns(x, n, 2 * n),
        ad.columns(x, 2 * n, 3 * n),
    )
