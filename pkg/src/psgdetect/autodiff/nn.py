"""Parameter containers and the layers the detector is assembled from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    """A named, persistent, trainable tensor."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class Module:
    """Minimal module: parameters and buffers discovered by attribute walk."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, init: str = "he"):
        fan_in = c_in * k
        if init == "zeros":
            w = np.zeros((c_out, c_in, k))
        elif init in ("he", "fan_in"):
            w = (he_uniform if init == "he" else fan_in_uniform)(rng, (c_out, c_in, k), fan_in)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm1d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(c))
        self.beta = Parameter(np.zeros(c))
        self.running_mean = np.zeros(c, dtype=DEFAULT_DTYPE)
        self.running_var = np.ones(c, dtype=DEFAULT_DTYPE)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batchnorm1d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)


class BiGRU(Module):
    """One bidirectional GRU layer; hidden size per direction ``hidden``."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        def direction(tag: str) -> list[Parameter]:
            w_ih = he_uniform(rng, (3 * hidden, d_in), d_in)
            w_hh = np.concatenate([orthogonal(rng, hidden) for _ in range(3)], axis=0)
            return [
                Parameter(w_ih, f"w_ih_{tag}"),
                Parameter(w_hh, f"w_hh_{tag}"),
                Parameter(np.zeros(3 * hidden), f"b_ih_{tag}"),
                Parameter(np.zeros(3 * hidden), f"b_hh_{tag}"),
            ]

        self.w_ih_f, self.w_hh_f, self.b_ih_f, self.b_hh_f = direction("f")
        self.w_ih_b, self.w_hh_b, self.b_ih_b, self.b_hh_b = direction("b")
        self.hidden = hidden

    def weights(self) -> tuple[Parameter, ...]:
        return (self.w_ih_f, self.w_hh_f, self.b_ih_f, self.b_hh_f,
                self.w_ih_b, self.w_hh_b, self.b_ih_b, self.b_hh_b)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.bgru(x, self.weights())
