"""Layer containers built on :mod:`mfconv.ops`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mfconv import dropblock, ops
from mfconv.tensor import Tensor


@dataclass
class ForwardContext:
    """Per-call settings threaded through a network's layers."""

    mode: str = "eval"  # batch-norm statistics: "train" or "eval"
    rng: np.random.Generator | None = None
    drop_p: float = 0.0

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.drop_p > 0 and self.rng is None:
            raise ValueError("an rng is required when DropBlock is active (drop_p > 0)")


class Module:
    """Base class; parameters and submodules are discovered from attributes."""

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self._buffer_slots())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, (owner, attr) in buffers.items():
            setattr(owner, attr, np.array(state[name], dtype=np.float64))

    def _buffer_slots(self, prefix: str = ""):
        for name, child in self.children():
            yield from child._buffer_slots(prefix + name + ".")


class Conv(Module):
    """Same-size convolution (stride 1) with zero padding; even kernels pad on the right."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, dims: int = 2, bias: bool = True):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.dims = dims
        self.weight = Tensor(np.zeros((out_channels, in_channels) + (kernel_size,) * dims), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None
        lo = (kernel_size - 1) // 2
        self.padding = [(lo, kernel_size - 1 - lo)] * dims

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_forward(x, self.weight, self.bias, 1, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = ops.BatchNormState(channels, momentum, eps)

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, ctx.mode, self.state)

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.state.running_mean
        yield prefix + "running_var", self.state.running_var

    def _buffer_slots(self, prefix: str = ""):
        yield prefix + "running_mean", (self.state, "running_mean")
        yield prefix + "running_var", (self.state, "running_var")


class DropBlock(Module):
    """DropBlock site. Active whenever the context's drop probability is positive."""

    def __init__(self, spec: dropblock.DropBlockSpec):
        self.spec = spec

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if ctx.drop_p <= 0.0:
            return x
        mask = dropblock.sample_mask(ctx.rng, x.shape, self.spec, ctx.drop_p)
        if mask.kept_count == 0:
            mask = dropblock.sample_mask(ctx.rng, x.shape, self.spec, ctx.drop_p)
        return dropblock.apply(x, mask, rescale=self.spec.rescale)


class ConvBlock(Module):
    """Convolution, optional batch norm, activation, optional DropBlock (C[B][act][D])."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        dims: int,
        activation: str,
        batchnorm: bool = True,
        drop: dropblock.DropBlockSpec | None = None,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        self.conv = Conv(in_channels, out_channels, kernel_size, dims)
        self.bn = BatchNorm(out_channels, bn_momentum, bn_eps) if batchnorm else None
        self.activation = activation
        self.drop = DropBlock(drop) if drop is not None else None

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        h = self.conv(x)
        if self.bn is not None:
            h = self.bn(h, ctx)
        h = ops.activation(h, self.activation)
        if self.drop is not None:
            h = self.drop(h, ctx)
        return h
