"""Parameter containers built on the tensor core."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class that discovers parameters, buffers and children by attribute.

    Parameters are tensors with ``requires_grad``; buffers are plain numpy
    arrays registered through :meth:`register_buffer`. Lists of modules are
    walked in order.
    """

    def __init__(self) -> None:
        self.training = True
        self._buffer_names: List[str] = []

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)
        self._buffer_names.append(name)

    # ------------------------------------------------------------------
    # Traversal
    # ------------------------------------------------------------------
    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters and buffers; names and shapes must match."""

        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(own) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(
                f"State mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}."
            )
        for name, array in state.items():
            target = own[name].data if name in own else buffers[name]
            if target.shape != array.shape:
                raise ValueError(f"Shape mismatch for '{name}': {target.shape} vs {array.shape}.")
            target[...] = array

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    """Affine map with weight stored as ``(in_features, out_features)``."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        *,
        bias: bool = True,
        gain: float = 1.0,
    ) -> None:
        super().__init__()
        self.weight = T.parameter(gain * _glorot(rng, (in_features, out_features), in_features, out_features))
        self.bias = T.parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        *,
        stride: int = 1,
        padding: int | None = None,
        bias: bool = True,
    ) -> None:
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        self.weight = T.parameter(
            _glorot(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, fan_out)
        )
        self.bias = T.parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.padding, stride=self.stride)


class BatchNorm(Module):
    """Batch normalisation over channel axis 1 with running statistics."""

    def __init__(self, num_features: int, *, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.gamma = T.parameter(np.ones(num_features))
        self.beta = T.parameter(np.zeros(num_features))
        self.register_buffer("running_mean", np.zeros(num_features, dtype=T.get_default_dtype()))
        self.register_buffer("running_var", np.ones(num_features, dtype=T.get_default_dtype()))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class LayerNorm(Module):
    def __init__(self, features: int, *, eps: float = 1e-5) -> None:
        super().__init__()
        self.gamma = T.parameter(np.ones(features))
        self.beta = T.parameter(np.zeros(features))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.weight = T.parameter(rng.normal(0.0, dim**-0.5, size=(num_embeddings, dim)))

    def forward(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.weight, ids)


class Dropout(Module):
    """Inverted dropout sharing the model's random generator."""

    def __init__(self, rate: float, rng: np.random.Generator) -> None:
        super().__init__()
        self.rate = rate
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.rate, self.rng, training=self.training)
