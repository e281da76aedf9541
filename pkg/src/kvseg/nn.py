"""Parameter containers and the standard layers the architectures share."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


class Module:
    """Attribute-scanning container: Tensors that require grad are parameters,
    ``Module`` attributes (and lists of them) are children.

    ``_no_decay`` names local parameters excluded from weight decay;
    ``_buffers`` holds non-learned state (batch-norm running statistics).
    """

    _no_decay: frozenset[str] = frozenset()

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def decay_flags(self) -> dict[str, bool]:
        flags = {}
        for mod_name, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    full = f"{mod_name}.{name}" if mod_name else name
                    flags[full] = name not in mod._no_decay
        return flags

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules():
            for name, buf in mod._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), buf

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise KeyError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x @ weight (+ bias)``; weight is stored ``(d_in, d_out)``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = he_normal(rng, (d_in, d_out), d_in)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
    ):
        super().__init__()
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = he_normal(rng, (c_out, c_in // groups, kernel, kernel), fan_in)
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm(Module):
    _no_decay = frozenset({"gamma", "beta"})

    def __init__(self, d: int):
        super().__init__()
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class BatchNorm2d(Module):
    _no_decay = frozenset({"gamma", "beta"})

    def __init__(self, channels: int, momentum: float = 0.1, zero_init: bool = False):
        super().__init__()
        self.gamma = parameter(np.zeros(channels) if zero_init else np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.momentum = momentum
        dtype = self.gamma.dtype
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.training,
            self.momentum,
        )


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
