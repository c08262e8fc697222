"""Parameter-holding layer modules on top of :mod:`nve.ops`.

``Module`` gives recursive, insertion-ordered (name, Tensor) iteration so
optimizers and the weight snapshot format see a stable naming scheme.
Buffers (batchnorm running stats) are plain ndarrays listed in the class's
``_buffer_names`` and serialize alongside parameters but take no gradient.
"""

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor


def he_init(rng, shape, fan_in):
    """He/Kaiming normal fan-in init, float32."""
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Module:
    _buffer_names = ()

    def __init__(self):
        self.training = True

    def forward(self, *args):
        raise NotImplementedError

    def __call__(self, *args):
        return self.forward(*args)

    def _children(self):
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            if isinstance(value, Module):
                yield attr, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{attr}.{i}", item

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + attr, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix=""):
        """Parameters plus buffers, as (name, ndarray); snapshot payload."""
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + attr, value.data
        for attr in type(self)._buffer_names:
            yield prefix + attr, getattr(self, attr)
        for name, child in self._children():
            yield from child.named_state(prefix + name + ".")

    def load_state(self, arrays):
        """Copy a {name: ndarray} mapping into this module, strictly.

        Every entry must match an existing parameter/buffer name and shape;
        every parameter/buffer must be covered.
        """
        own = dict(self.named_state())
        missing = sorted(set(own) - set(arrays))
        unexpected = sorted(set(arrays) - set(own))
        if missing or unexpected:
            raise ShapeError(
                f"state mismatch: missing={missing} unexpected={unexpected}"
            )
        lookup = self._state_targets()
        for name, arr in arrays.items():
            holder, attr = lookup[name]
            current = getattr(holder, attr)
            if isinstance(current, Tensor):
                if current.data.shape != arr.shape:
                    raise ShapeError(
                        f"state '{name}': shape {arr.shape} != {current.data.shape}"
                    )
                current.data = arr.astype(current.data.dtype).copy()
            else:
                if current.shape != arr.shape:
                    raise ShapeError(
                        f"state '{name}': shape {arr.shape} != {current.shape}"
                    )
                setattr(holder, attr, arr.astype(current.dtype).copy())

    def _state_targets(self, prefix=""):
        table = {}
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                table[prefix + attr] = (self, attr)
        for attr in type(self)._buffer_names:
            table[prefix + attr] = (self, attr)
        for name, child in self._children():
            table.update(child._state_targets(prefix + name + "."))
        return table

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def parameter_count(self):
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel, rng, stride=1, padding=0,
                 bias=True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel, kernel)
        self.weight = Tensor(
            he_init(rng, shape, in_channels * kernel * kernel), requires_grad=True
        )
        # A disabled bias stays a constant zero tensor: no grad, not serialized.
        self.bias = Tensor(np.zeros(out_channels, np.float32), requires_grad=bias)

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            he_init(rng, (channels, kernel, kernel), kernel * kernel),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(channels, np.float32), requires_grad=bias)

    def forward(self, x):
        return ops.depthwise_conv2d(x, self.weight, self.bias, self.stride,
                                    self.padding)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def forward(self, x):
        return ops.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Linear(Module):
    def __init__(self, in_features, out_features, rng):
        super().__init__()
        self.weight = Tensor(
            he_init(rng, (out_features, in_features), in_features),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, np.float32), requires_grad=True)

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)
