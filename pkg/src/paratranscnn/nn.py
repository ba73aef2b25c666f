"""Small module system: parameter/buffer registration, naming and basic layers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing outliers.

    Draws are always made in float32 so f32 and f64 builds share values.
    """
    out = rng.standard_normal(shape, dtype=np.float32)
    flat = out.reshape(-1)
    idx = np.flatnonzero(np.abs(flat) > 2.0)
    while idx.size:
        redraw = rng.standard_normal(idx.size, dtype=np.float32)
        flat[idx] = redraw
        idx = idx[np.abs(redraw) > 2.0]
    out *= np.float32(std)
    return out.astype(dtype, copy=False)


def kaiming_normal(rng: np.random.Generator, shape, fan: int, dtype=np.float32) -> np.ndarray:
    out = rng.standard_normal(shape, dtype=np.float32)
    out *= np.float32(np.sqrt(2.0 / fan))
    return out.astype(dtype, copy=False)


class Module:
    """Base class; attribute order defines parameter order and names."""

    def __init__(self):
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_buffers", {})

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, ModuleList):
                for i, m in enumerate(val, start=val.start):
                    yield f"{name}{i}" if val.flat_names else f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in self._buffers.items():
            yield prefix + name, val
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        if strict:
            missing = (set(own) | set(bufs)) - set(state)
            if missing:
                raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, arr in state.items():
            if name in own:
                p = own[name]
                if p.shape != arr.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = np.array(arr, dtype=p.dtype)
            elif name in bufs:
                buf = bufs[name]
                if buf.shape != arr.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {buf.shape}")
                buf[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for k, v in list(self._buffers.items()):
            self._buffers[k] = v.astype(dtype)
        for _, child in self.children():
            child._cast_buffers(dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(list):
    """List of modules; ``flat_names`` gives ``layer0`` instead of ``layer.0``."""

    def __init__(self, modules=(), flat_names: bool = True, start: int = 0):
        super().__init__(modules)
        self.flat_names = flat_names
        self.start = start


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, bias=True, *, rng, dtype=np.float32, init="kaiming"):
        super().__init__()
        kh, kw = ops._pair(kernel)
        self.stride, self.padding = stride, padding
        if init == "kaiming":
            w = kaiming_normal(rng, (cout, cin, kh, kw), fan=cout * kh * kw, dtype=dtype)
        elif init == "trunc_normal":
            w = trunc_normal(rng, (cout, cin, kh, kw), dtype=dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, bias=True, *, rng, dtype=np.float32):
        super().__init__()
        kh, kw = ops._pair(kernel)
        sh, sw = ops._pair(stride)
        self.stride, self.padding = stride, padding
        fan = max(1, cin * kh * kw // (sh * sw))
        self.weight = Parameter(kaiming_normal(rng, (cin, cout, kh, kw), fan=fan, dtype=dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, *, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm2d(x, self.weight, self.bias, self._buffers["running_mean"],
                                self._buffers["running_var"], self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6, *, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class Linear(Module):
    """Affine map with weight stored in_features x out_features."""

    def __init__(self, din, dout, bias=True, *, rng, dtype=np.float32, init="trunc_normal"):
        super().__init__()
        if init == "trunc_normal":
            w = trunc_normal(rng, (din, dout), dtype=dtype)
        elif init == "uniform":
            bound = 1.0 / np.sqrt(din)
            w = rng.uniform(-bound, bound, (din, dout)).astype(np.float32).astype(dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(dout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ConvBNReLU(Module):
    def __init__(self, cin, cout, kernel=3, stride=1, padding=1, *, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, stride, padding, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))
