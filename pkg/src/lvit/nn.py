"""Minimal module system: parameters, buffers and the standard layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or T.DEFAULT_DTYPE)


class Buffer(Tensor):
    """Non-trainable module state (e.g. running statistics)."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=False, dtype=dtype or T.DEFAULT_DTYPE)


class Module:
    """Base class. Parameters, buffers and child modules are discovered by
    walking instance attributes (lists of modules included), so names are
    dotted attribute paths."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def _walk(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value._walk(full + ".")
            else:
                yield full, value

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(sorted((n, t) for n, t in self._walk() if isinstance(t, Parameter)))

    def named_buffers(self) -> dict[str, Buffer]:
        return dict(sorted((n, t) for n, t in self._walk() if isinstance(t, Buffer)))

    def state(self) -> dict[str, Tensor]:
        """Parameters and buffers together, lexicographically ordered."""
        return dict(sorted(self._walk(), key=lambda kv: kv[0]))

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.named_parameters().values()]))

    def astype(self, dtype) -> "Module":
        for t in self.state().values():
            t.data = t.data.astype(dtype)
        return self

    @property
    def dtype(self):
        return next(iter(self.state().values())).dtype

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(kaiming_uniform(rng, (d_in, d_out), d_in))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        size: int,
        rng: np.random.Generator,
        padding: int = 0,
        bias: bool = False,
        mode: str = "zero",
    ):
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, size, size), c_in * size * size))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.padding = padding
        self.mode = mode

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.padding, mode=self.mode)


class BatchNorm(Module):
    """Batch normalisation over every axis except ``channel_axis``.

    Training uses batch statistics and updates running averages (momentum
    0.1, unbiased variance) unless ``update_stats`` is off. Eval mode, and
    training batches of a single sample, normalise with the running averages.
    """

    eps = 1e-5
    momentum = 0.1

    def __init__(self, channels: int, channel_axis: int = 1):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = Buffer(np.zeros(channels))
        self.running_var = Buffer(np.ones(channels))
        self.channel_axis = channel_axis
        self.update_stats = True

    def _bshape(self, x: Tensor) -> tuple[int, ...]:
        shape = [1] * x.ndim
        shape[self.channel_axis] = x.shape[self.channel_axis]
        return tuple(shape)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``mask`` (broadcastable to x, channel axis of size 1) excludes
        positions from the batch statistics."""
        bshape = self._bshape(x)
        axes = tuple(i for i in range(x.ndim) if i != self.channel_axis)
        if self.training and x.shape[0] > 1:
            if mask is None:
                mu = T.mean(x, axes, keepdims=True)
                xc = x - mu
                var = T.mean(xc * xc, axes, keepdims=True)
                count = int(np.prod([x.shape[a] for a in axes]))
            else:
                m = Tensor(mask.astype(x.dtype))
                stat_shape = list(x.shape)
                stat_shape[self.channel_axis] = 1
                count = max(float(np.broadcast_to(mask, stat_shape).sum()), 1.0)
                mu = T.sum(x * m, axes, keepdims=True) * (1.0 / count)
                xc = x - mu
                var = T.sum(xc * xc * m, axes, keepdims=True) * (1.0 / count)
            if self.update_stats:
                unbiased = var.data.reshape(-1) * (count / max(count - 1, 1))
                self.running_mean.data = ((1 - self.momentum) * self.running_mean.data + self.momentum * mu.data.reshape(-1)).astype(x.dtype)
                self.running_var.data = ((1 - self.momentum) * self.running_var.data + self.momentum * unbiased).astype(x.dtype)
            xhat = xc / T.sqrt(var + self.eps)
        else:
            mu = self.running_mean.data.reshape(bshape)
            inv = 1.0 / np.sqrt(self.running_var.data.reshape(bshape) + self.eps)
            xhat = (x - Tensor(mu)) * Tensor(inv.astype(x.dtype))
        return xhat * T.reshape(self.weight, bshape) + T.reshape(self.bias, bshape)


class LayerNorm(Module):
    eps = 1e-5

    def __init__(self, dim: int):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        mu = T.mean(x, -1, keepdims=True)
        xc = x - mu
        var = T.mean(xc * xc, -1, keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.weight + self.bias


class ConvBNReLU(Module):
    """Conv → BatchNorm → ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, size: int = 3):
        self.conv = Conv2d(c_in, c_out, size, rng, padding=size // 2)
        self.bn = BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))
