"""Parameters, a minimal module tree, and the standard layers built on it."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor. ``name`` is its dotted path inside a model."""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def fan_in_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container whose Parameters are discovered from its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        seen = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                continue
            seen.add(id(p))
            p.name = name
            yield name, p

    def _walk(self, prefix: str):
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value._walk(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> Dict[str, Parameter]:
        return dict(self.named_parameters())

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def zero_grads(params) -> None:
    """Clear gradients so the next backward may run."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(fan_in_uniform(rng, (n_in, n_out), n_in))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        self.weight = Parameter(fan_in_uniform(rng, (kernel, kernel, cin, cout), kernel * kernel * cin))
        self.bias = Parameter(np.zeros(cout))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


def grad_norm(params: Dict[str, Parameter]) -> float:
    """Global L2 norm of all gradients, summed in the dict's order."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


class SGD:
    """Momentum SGD applied in the fixed order of the parameter dict.

    With ``clip_norm`` set, gradients are rescaled so their global norm is at
    most ``clip_norm`` before the update.
    """

    def __init__(
        self,
        params: Dict[str, Parameter],
        lr: float,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        clip_norm: Optional[float] = None,
    ):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.last_grad_norm = 0.0

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            self.last_grad_norm = grad_norm(self.params)
            if self.last_grad_norm > self.clip_norm:
                scale = self.clip_norm / self.last_grad_norm
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grads(self) -> None:
        zero_grads(self.params)
