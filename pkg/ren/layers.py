"""
Trainable building blocks: a parameter-collecting Module base, dense and
convolutional layers, and the MLP used by every network in the package.
"""
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ren import autodiff as ad
from ren.autodiff import Parameter, Tensor

ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
}

_GAINS = {"relu": math.sqrt(2.0), "tanh": 5.0 / 3.0}


def kaiming_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator,
                    activation: Optional[str] = "relu") -> np.ndarray:
    gain = _GAINS.get(activation, 1.0)
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    def forward(self, *inputs: Tensor):
        raise NotImplementedError

    def __call__(self, *inputs: Tensor):
        return self.forward(*inputs)

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        out: Dict[str, Parameter] = {}
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                out[prefix + attr] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{attr}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{attr}.{i}."))
        return out

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 activation: Optional[str] = "relu", head: bool = False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(kaiming_uniform((in_dim, out_dim), in_dim, rng, None if head else activation))
        if head:
            self.bias = Parameter(np.zeros(out_dim))
        else:
            bound = 1.0 / math.sqrt(in_dim)
            self.bias = Parameter(rng.uniform(-bound, bound, size=out_dim))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return ad.affine(x, self.weight, self.bias)
        return ad.matmul(x, self.weight) + self.bias


class MLP(Module):
    """Dense stack; the activation follows every layer except the last."""

    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int, rng: np.random.Generator,
                 activation: str = "relu", out_activation: Optional[str] = None):
        sizes = [in_dim, *hidden, out_dim]
        self.activation = activation
        self.out_activation = out_activation
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng, activation, head=(i == len(sizes) - 2))
            for i in range(len(sizes) - 1)
        ]

    def forward(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            x = act(layer(x))
        x = self.layers[-1](x)
        if self.out_activation:
            x = ACTIVATIONS[self.out_activation](x)
        return x


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(kaiming_uniform((out_ch, in_ch, kernel, kernel), fan_in, rng))
        self.bias = Parameter(rng.uniform(-1.0, 1.0, size=out_ch) / math.sqrt(fan_in))

    def forward(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.weight, self.stride, self.padding)
        return out + ad.reshape(self.bias, (1, -1, 1, 1))


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(kaiming_uniform((in_ch, out_ch, kernel, kernel), fan_in, rng))
        self.bias = Parameter(rng.uniform(-1.0, 1.0, size=out_ch) / math.sqrt(fan_in))

    def forward(self, x: Tensor) -> Tensor:
        out = ad.conv_transpose2d(x, self.weight, self.stride, self.padding)
        return out + ad.reshape(self.bias, (1, -1, 1, 1))


class Activation(Module):
    def __init__(self, name: str):
        self.name = name

    def forward(self, x: Tensor) -> Tensor:
        return ACTIVATIONS[self.name](x)


class Reshape(Module):
    """Reshape every row to `shape`, keeping the batch axis."""

    def __init__(self, *shape: int):
        self.shape = shape

    def forward(self, x: Tensor) -> Tensor:
        return ad.reshape(x, (x.shape[0], *self.shape))


class Sequential(Module):
    def __init__(self, *modules: Module):
        self.modules = list(modules)

    def forward(self, x: Tensor) -> Tensor:
        for module in self.modules:
            x = module(x)
        return x
