"""Parameter containers for the network building blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, F.BatchNormState]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, F.BatchNormState):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
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
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data for k, p in self.named_parameters()}
        for k, bn in self.named_buffers():
            out[f"buffer/{k}.mean"] = bn.mean
            out[f"buffer/{k}.var"] = bn.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters():
            src = arrays[f"param/{k}"]
            if src.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {p.shape}")
            p.data = src.astype(p.dtype).copy()
        for k, bn in self.named_buffers():
            bn.mean = arrays[f"buffer/{k}.mean"].astype(bn.mean.dtype).copy()
            bn.var = arrays[f"buffer/{k}.var"].astype(bn.var.dtype).copy()


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Conv(Module):
    def __init__(self, rng, k: int, cin: int, cout: int, stride: int = 1, dtype=np.float32):
        self.weight = _param(F.he_uniform(rng, (k, k, cin, cout), k * k * cin, dtype))
        self.bias = _param(np.zeros(cout, dtype=dtype))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.9):
        self.gamma = _param(np.ones(channels, dtype=dtype))
        self.beta = _param(np.zeros(channels, dtype=dtype))
        self.stats = F.BatchNormState(channels, dtype, momentum)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.stats, self.training, mask)


class ConvBNReLU(Module):
    def __init__(self, rng, k: int, cin: int, cout: int, stride: int = 1, dtype=np.float32):
        self.conv = Conv(rng, k, cin, cout, stride, dtype)
        self.bn = BatchNorm(cout, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return self.bn(self.conv(x), mask).relu()


class Linear(Module):
    def __init__(self, rng, din: int, dout: int, bias: bool = True, dtype=np.float32):
        self.weight = _param(F.he_uniform(rng, (din, dout), din, dtype))
        self.bias = _param(np.zeros(dout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class GRU(Module):
    """GRU cell parameters; gates ordered ``[reset, update, candidate]``."""

    def __init__(self, rng, din: int, dh: int, dtype=np.float32):
        bound = 1.0 / math.sqrt(dh)
        self.w_x = _param(rng.uniform(-bound, bound, (din, 3 * dh)).astype(dtype))
        self.w_h = _param(rng.uniform(-bound, bound, (dh, 3 * dh)).astype(dtype))
        self.b_x = _param(np.zeros(3 * dh, dtype=dtype))
        self.b_h = _param(np.zeros(3 * dh, dtype=dtype))
        self.hidden = dh

    def as_dict(self) -> dict:
        return {"w_x": self.w_x, "w_h": self.w_h, "b_x": self.b_x, "b_h": self.b_h}

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return F.gru_cell(x, h, self.as_dict())

    def project(self, x: Tensor) -> Tensor:
        return x @ self.w_x + self.b_x

    def step(self, gx: Tensor, h: Tensor) -> Tensor:
        return F.gru_step(gx, h, self.w_h, self.b_h)
