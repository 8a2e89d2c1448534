"""Network building blocks on top of the autodiff tensor."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, add, batch_norm_train, conv2d, matmul, mul, relu


class Module:
    """Minimal parameter container with named parameters and buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, "Module"] = {}
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def add_param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        self._buffers[name] = array
        return array

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.named_parameters(prefix + cname + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for cname, child in self._children.items():
            out.update(child.named_buffers(prefix + cname + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self):
        self.training = True
        for child in self._children.values():
            child.train()
        return self

    def eval(self):
        self.training = False
        for child in self._children.values():
            child.eval()
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.named_parameters().items()}
        out.update({"buffer:" + k: v for k, v in self.named_buffers().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        buffers = self.named_buffers()
        for key, arr in state.items():
            if key.startswith("buffer:"):
                name = key[len("buffer:") :]
                if name not in buffers:
                    raise KeyError(f"unknown buffer {name!r}")
                buffers[name][...] = arr
            else:
                if key not in params:
                    raise KeyError(f"unknown parameter {key!r}")
                if params[key].data.shape != arr.shape:
                    raise ValueError(
                        f"shape mismatch for {key!r}: {params[key].data.shape} vs {arr.shape}"
                    )
                params[key].data = arr.astype(params[key].data.dtype, copy=True)

    def __call__(self, x):
        return self.forward(x)


def set_requires_grad(module: Module, flag: bool):
    for p in module.parameters():
        p.requires_grad = flag


class Conv2d(Module):
    """3x3-style convolution in NHWC layout; weights are (k, k, Cin, Cout)."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, padding: int = 1,
                 bias: bool = True, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.stride = stride
        self.padding = padding
        scale = np.sqrt(2.0 / (cin * k * k))
        self.w = self.add_param("w", (rng.standard_normal((k, k, cin, cout)) * scale).astype(dtype))
        self.b = self.add_param("b", np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """Per-channel batch norm, channels-last layout."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.add_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            out, mu, var = batch_norm_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mu
            self.running_var[...] = (1 - m) * self.running_var + m * var
            return out
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        shift = self.beta.data - self.running_mean * scale
        return add(mul(x, scale), shift)


class Linear(Module):
    def __init__(self, nin: int, nout: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        scale = np.sqrt(2.0 / nin)
        self.w = self.add_param("w", (rng.standard_normal((nin, nout)) * scale).astype(dtype))
        self.b = self.add_param("b", np.zeros(nout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return relu(x)


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        self.steps = list(modules)
        for i, m in enumerate(modules):
            self._children[str(i)] = m

    def forward(self, x):
        for m in self.steps:
            x = m(x)
        return x


class ResidualBlock(Module):
    """Two 3x3 conv+BN layers with an identity skip connection."""

    def __init__(self, channels: int, rng=None, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(channels, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return relu(add(y, x))
