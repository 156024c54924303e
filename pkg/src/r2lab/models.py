"""Desk-scale models: an ordered list of linear / conv2d / activation layers."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ConsistencyError
from . import tensor as T


class Linear:
    kind = "linear"

    def __init__(self, name, n_in, n_out, rng=None):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        std = np.sqrt(2.0 / n_in)
        w = rng.normal(0.0, std, (n_in, n_out)) if rng is not None else np.zeros((n_in, n_out))
        self.weight = T.Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = T.Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x, w):
        if x.ndim != 2:
            x = T.flatten(x)
        return T.add_bias(T.matmul(x, w), self.bias)

    def spec(self):
        return {"kind": self.kind, "name": self.name, "n_in": self.n_in, "n_out": self.n_out}


class Conv2d:
    kind = "conv2d"

    def __init__(self, name, c_in, c_out, k=3, stride=1, pad=1, rng=None):
        self.name = name
        self.c_in, self.c_out, self.k, self.stride, self.pad = c_in, c_out, k, stride, pad
        shape = (c_out, c_in, k, k)
        std = np.sqrt(2.0 / (c_in * k * k))
        w = rng.normal(0.0, std, shape) if rng is not None else np.zeros(shape)
        self.weight = T.Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = T.Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x, w):
        return T.add_bias(T.conv2d(x, w, self.stride, self.pad), self.bias)

    def spec(self):
        return {"kind": self.kind, "name": self.name, "c_in": self.c_in, "c_out": self.c_out,
                "k": self.k, "stride": self.stride, "pad": self.pad}


class ReLU:
    kind = "relu"

    def __init__(self, name):
        self.name = name

    def spec(self):
        return {"kind": self.kind, "name": self.name}


class Model:
    """Sequential network.

    ``forward`` accepts two hooks: ``weight_fn(layer_name, W)`` swaps in the
    weight actually used (fake-quantized or palettized) and
    ``act_fn(layer_name, h)`` transforms each ReLU output (PACT).
    """

    def __init__(self, layers, arch="custom"):
        self.layers = layers
        self.arch = arch
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ConfigError("model.layers", "duplicate layer names")

    def forward(self, x, weight_fn=None, act_fn=None):
        h = T.as_tensor(x)
        for layer in self.layers:
            if layer.kind == "relu":
                h = T.relu(h)
                if act_fn is not None:
                    h = act_fn(layer.name, h)
            else:
                w = layer.weight if weight_fn is None else weight_fn(layer.name, layer.weight)
                h = layer(h, w)
        return h

    __call__ = forward

    def weight_layers(self):
        return [l for l in self.layers if l.kind != "relu"]

    def weights(self):
        """Regularized / quantized tensors: conv and linear weights, by layer name."""
        return {l.name: l.weight for l in self.weight_layers()}

    def named_parameters(self):
        out = []
        for l in self.weight_layers():
            out.append((f"{l.name}.weight", l.weight))
            out.append((f"{l.name}.bias", l.bias))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def activation_names(self):
        return [l.name for l in self.layers if l.kind == "relu"]

    def spec(self):
        return {"arch": self.arch, "layers": [l.spec() for l in self.layers]}

    @classmethod
    def from_spec(cls, spec):
        layers = []
        for s in spec["layers"]:
            if s["kind"] == "linear":
                layers.append(Linear(s["name"], s["n_in"], s["n_out"]))
            elif s["kind"] == "conv2d":
                layers.append(Conv2d(s["name"], s["c_in"], s["c_out"], s["k"], s["stride"], s["pad"]))
            elif s["kind"] == "relu":
                layers.append(ReLU(s["name"]))
            else:
                raise ConfigError("model.layers", f"unknown layer kind {s['kind']!r}")
        return cls(layers, spec.get("arch", "custom"))

    def state(self):
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state(self, state):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ConsistencyError("parameter names do not match the architecture")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ConsistencyError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()
            t.grad = None


def mlp(sizes=(784, 128, 64, 10), seed=0):
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        layers.append(Linear(f"fc{i}", a, b, rng))
        if i < len(sizes) - 1:
            layers.append(ReLU(f"act{i}"))
    return Model(layers, "mlp-" + "-".join(map(str, sizes)))


def cnn(in_shape=(1, 28, 28), channels=(16, 32), classes=10, seed=0):
    """conv3x3 -> relu -> conv3x3 -> relu -> fc, both convs stride 2."""
    rng = np.random.default_rng(seed)
    c, h, w = in_shape
    c1, c2 = channels
    h1, w1 = (h + 1) // 2, (w + 1) // 2
    h2, w2 = (h1 + 1) // 2, (w1 + 1) // 2
    layers = [
        Conv2d("conv1", c, c1, 3, 2, 1, rng), ReLU("act1"),
        Conv2d("conv2", c1, c2, 3, 2, 1, rng), ReLU("act2"),
        Linear("fc", c2 * h2 * w2, classes, rng),
    ]
    return Model(layers, f"cnn-{c1}-{c2}")


def build(arch, input_shape, classes, seed=0, hidden=(128, 64), channels=(16, 32)):
    if arch == "mlp":
        return mlp((int(np.prod(input_shape)), *hidden, classes), seed)
    if arch == "cnn":
        return cnn(tuple(input_shape), tuple(channels), classes, seed)
    raise ConfigError("model.arch", f"unknown architecture {arch!r}")
