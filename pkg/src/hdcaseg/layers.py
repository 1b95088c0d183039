"""Parameter containers shared by the backbone, the HDCA head and the classifier."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, batch_norm, conv2d, relu


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], dtype=np.float32) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    return Tensor((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype))


class Module:
    """Minimal parameter/buffer bookkeeping with dotted names."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self.params.items()}
        for name, child in self.children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self.buffers.items()}
        for name, child in self.children.items():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = Tensor(np.ones(channels, dtype=dtype))
        self.params["beta"] = Tensor(np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.params["gamma"], self.params["beta"],
                          self.buffers["running_mean"], self.buffers["running_var"], training)


class ConvBNReLU(Module):
    """conv (no bias, the norm absorbs it) -> batch norm -> relu."""

    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 dilation: int = 1, dtype=np.float32):
        super().__init__()
        self.stride, self.dilation = stride, dilation
        self.params["weight"] = kaiming(rng, (c_out, c_in, kernel, kernel), dtype)
        self.bn = BatchNorm(c_out, dtype)
        self.children["bn"] = self.bn

    @property
    def in_channels(self) -> int:
        return self.params["weight"].shape[1]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = conv2d(x, self.params["weight"], dilation=self.dilation, stride=self.stride)
        return relu(self.bn(y, training))


def cast_module(module: Module, dtype) -> None:
    """Convert every parameter and buffer of ``module`` to ``dtype`` in place."""
    for t in module.named_parameters().values():
        t.data = t.data.astype(dtype)
    stack = [module]
    while stack:
        m = stack.pop()
        for k in list(m.buffers):
            m.buffers[k] = m.buffers[k].astype(dtype)
        stack.extend(m.children.values())
