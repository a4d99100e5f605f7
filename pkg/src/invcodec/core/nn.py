"""Module container and the few layers the codec is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Buffer:
    """Non-trainable array stored alongside the weights (e.g. init flags)."""

    __slots__ = ("data",)

    def __init__(self, value):
        self.data = np.asarray(value)


class Module:
    """Attribute-registered tree of parameters, buffers and submodules.

    Names are dotted attribute paths from the root.
    """

    def _walk(self, kind, prefix: str = ""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(value, kind):
                yield path, value
            elif isinstance(value, Module):
                yield from value._walk(kind, path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(kind, f"{path}.{i}.")
                    elif isinstance(item, kind):
                        yield f"{path}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        return self._walk(Parameter, prefix)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        return self._walk(Buffer, prefix)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    @property
    def dtype(self) -> np.dtype:
        for _, p in self.named_parameters():
            return p.data.dtype
        return np.dtype(np.float32)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.version += 1
            if p.adam_m is not None:
                p.adam_m = p.adam_m.astype(dtype)
                p.adam_v = p.adam_v.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b.data for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.size != p.data.size:
                    raise ValueError(f"{name}: {arr.shape} does not fit {p.shape}")
                p.assign(arr.reshape(p.shape).astype(p.data.dtype))
        for name, buf in self.named_buffers():
            if name in state:
                buf.data = np.asarray(state[name]).reshape(buf.data.shape).astype(buf.data.dtype)
            elif strict:
                raise KeyError(f"missing buffer: {name}")


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * (gain * np.sqrt(2.0 / fan_in))


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator | None = None,
                 stride: int = 1, mask=None, zero_init: bool = False, bias: bool = True,
                 dtype=np.float32):
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, k, stride
        self.pad = k // 2
        self.mask = None if mask is None else np.asarray(mask, dtype=np.float64)
        if zero_init or rng is None:
            w = np.zeros((out_ch, in_ch, k, k))
        else:
            fan_in = in_ch * k * k
            if self.mask is not None:
                fan_in = max(1, int(in_ch * self.mask.sum()))
            w = he_normal(rng, (out_ch, in_ch, k, k), fan_in)
        self.weight = Parameter("weight", w, dtype=dtype)
        self.bias = Parameter("bias", np.zeros(out_ch), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad,
                          mask=self.mask)
