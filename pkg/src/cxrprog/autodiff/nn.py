"""Parameter containers and the layers used by the encoders and heads."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from ..errors import ContractError, DimensionError
from . import ops
from .tensor import Tensor, concat, relu


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, copy=True), requires_grad=True)


class Module:
    """Tree of named parameters, buffers and child modules.

    Attribute assignment order defines the hierarchical names, e.g.
    ``encoder.block0.conv.weight``.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    # -- traversal --------------------------------------------------------
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state, strict: bool = True) -> None:
        """Copy arrays into the existing storage (keeps optimizer references valid)."""
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = [k for k in list(own) + list(bufs) if k not in state]
        if strict and missing:
            raise ContractError(f"state is missing entries: {missing[:5]}")
        for name, p in own.items():
            if name in state:
                src = np.asarray(state[name])
                if src.shape != p.shape:
                    raise DimensionError(f"{name}: shape {src.shape} != {p.shape}")
                p.data[...] = src
        for name, buf in bufs.items():
            if name in state:
                buf[...] = np.asarray(state[name])

    def to(self, dtype) -> "Module":
        for module in self.modules():
            for p in module._params.values():
                p.data = p.data.astype(dtype)
            for name in list(module._buffers):
                arr = getattr(module, name).astype(dtype)
                module._buffers[name] = arr
                object.__setattr__(module, name, arr)
        return self

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(kaiming_uniform((out_features, in_features), in_features, rng))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(kaiming_uniform((out_ch, in_ch, kernel, kernel), fan_in, rng))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, None, self.stride, self.padding)


class BatchNorm(Module):
    """Batch norm over channel axis 1; ``frozen`` pins it to stored statistics."""

    def __init__(self, channels: int, momentum: float = ops.BN_MOMENTUM, eps: float = ops.BN_EPS):
        super().__init__()
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mode = "train" if self.training else "eval_frozen"
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                              mode=mode, momentum=self.momentum, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = Parameter(np.ones(dim, dtype=np.float32))
        self.bias = Parameter(np.zeros(dim, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias)


class ConvBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 2):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1)
        self.bn = BatchNorm(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class Encoder(Module):
    """conv -> batch norm -> relu blocks, then global average pooling.

    Each block halves the spatial extent; the embedding width equals the
    last block's channel count.
    """

    def __init__(self, widths=(16, 32, 64, 128), in_channels: int = 1, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = tuple(int(w) for w in widths)
        prev = in_channels
        for i, w in enumerate(self.widths):
            setattr(self, f"block{i}", ConvBlock(prev, w, rng))
            prev = w
        self.embed_dim = prev

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
        for i in range(len(self.widths)):
            x = getattr(self, f"block{i}")(x)
        return ops.global_avg_pool(x)


class MLPHead(Module):
    """One hidden relu layer (optionally batch-normalised) followed by a linear output."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator,
                 hidden_norm: bool = False):
        super().__init__()
        self.fc1 = Linear(in_dim, hidden, rng)
        self.norm = BatchNorm(hidden) if hidden_norm else None
        self.fc2 = Linear(hidden, out_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        if self.norm is not None:
            h = self.norm(h)
        return self.fc2(relu(h))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ContractError(f"model width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def forward(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        B, T, D = x.shape
        H, dh = self.heads, D // self.heads

        def split(t):
            return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if key_mask is not None:
            # key_mask[B,T] is True for real positions; padding keys get no weight
            bias = np.where(key_mask, 0.0, -1e9).astype(x.dtype)[:, None, None, :]
            scores = scores + Tensor(bias)
        attn = ops.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return self.out(ctx)


class TransformerLayer(Module):
    """Post-norm encoder layer: self-attention and a relu feed-forward block."""

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_dim, rng)
        self.ff2 = Linear(ff_dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.dropout = dropout

    def forward(self, x: Tensor, key_mask=None, rng=None) -> Tensor:
        a = ops.dropout(self.attn(x, key_mask), self.dropout, rng, self.training)
        x = self.norm1(x + a)
        f = ops.dropout(self.ff2(relu(self.ff1(x))), self.dropout, rng, self.training)
        return self.norm2(x + f)


class TransformerEncoder(Module):
    def __init__(self, dim: int, layers: int, heads: int, ff_dim: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.n_layers = layers
        for i in range(layers):
            setattr(self, f"layer{i}", TransformerLayer(dim, heads, ff_dim, dropout, rng))

    def forward(self, x: Tensor, key_mask=None, rng=None) -> Tensor:
        for i in range(self.n_layers):
            x = getattr(self, f"layer{i}")(x, key_mask, rng)
        return x


def copy_module_state(src: Module, dst: Module) -> None:
    dst.load_state_dict(src.state_dict())


__all__ = [
    "Parameter", "Module", "Linear", "Conv2d", "BatchNorm", "LayerNorm", "ConvBlock", "Encoder",
    "MLPHead", "MultiHeadAttention", "TransformerLayer", "TransformerEncoder", "kaiming_uniform",
    "copy_module_state",
]
