"""Small seeded model builders used by tests, examples and benchmarks."""

from __future__ import annotations

import numpy as np

from .model import Layer, Model, WeightStore


class GraphBuilder:
    """Accumulates layers and seeded weights, then builds a validated Model."""

    def __init__(self, name: str, seed: int = 0):
        self.name = name
        self.rng = np.random.default_rng(seed)
        self.layers = []
        self.weights = WeightStore()

    def _w(self, name, shape, scale):
        self.weights.add(name, (self.rng.standard_normal(shape) * scale).astype(np.float32))
        return name

    def add(self, name, op, inputs=(), attrs=None, weights=()):
        self.layers.append(Layer(name, op, dict(attrs or {}), tuple(inputs), tuple(weights)))
        return name

    def input(self, shape, name="input"):
        return self.add(name, "Input", attrs={"shape": list(shape)})

    def output(self, src, name="output"):
        return self.add(name, "Output", [src])

    def conv(self, name, src, cin, cout, k, stride=1, padding=0):
        scale = 1.0 / np.sqrt(cin * k * k)
        w = self._w(f"{name}.weight", (cout, cin, k, k), scale)
        b = self._w(f"{name}.bias", (cout,), 0.1)
        attrs = {"kernel": k, "stride": stride, "padding": padding}
        return self.add(name, "Conv2D", [src], attrs, [w, b])

    def fc(self, name, src, nin, nout):
        w = self._w(f"{name}.weight", (nout, nin), 1.0 / np.sqrt(nin))
        b = self._w(f"{name}.bias", (nout,), 0.1)
        return self.add(name, "FullyConnected", [src], weights=[w, b])

    def bn(self, name, src, c, eps=1e-5):
        scale, var = f"{name}.scale", f"{name}.var"
        self.weights.add(scale, (1.0 + 0.1 * self.rng.standard_normal(c)).astype(np.float32))
        bias = self._w(f"{name}.bias", (c,), 0.1)
        mean = self._w(f"{name}.mean", (c,), 0.1)
        self.weights.add(var, (0.5 + self.rng.random(c)).astype(np.float32))
        return self.add(name, "BatchNorm", [src], {"epsilon": eps}, [scale, bias, mean, var])

    def build(self) -> Model:
        return Model(self.name, self.layers, self.weights)


def diamond_model(seed: int = 0) -> Model:
    """Input -> MaxPool1 -> {Conv1, FC1} -> Add1 -> Relu1 -> Output."""
    g = GraphBuilder("diamond", seed)
    x = g.input((1, 4, 4, 4))
    p = g.add("MaxPool1", "MaxPool2D", [x], {"kernel": 2, "stride": 2})
    c = g.conv("Conv1", p, 4, 3, 2)  # -> [1,3,1,1]
    f = g.fc("FC1", p, 16, 3)  # -> [1,3]
    a = g.add("Add1", "Add", [f, c])
    r = g.add("Relu1", "ReLU", [a])
    g.output(r)
    return g.build()


DIAMOND_PLATFORM = """\
# device  cpu arch  core slots  optional gpu
edge01 cpu=ARM slots=0-5 gpu=NVIDIAVolta api=CUDA
edge02 cpu=ARM slots=0-3 gpu=Mali api=VULKAN
edge03 cpu=x86 slots=0-7
edge04 cpu=ARM slots=0-5
"""

# FC1 runs on the edge01 GPU, so rank 0 both feeds and collects from two peers.
DIAMOND_MAPPING = {
    "edge01_arm123": ["MaxPool1", "Add1"],
    "edge01_gpu": ["FC1"],
    "edge04_arm012345": ["Conv1", "Relu1"],
}


def toy_cnn(seed: int = 0) -> Model:
    """13 hidden layers covering every operator family with a branch and a merge."""
    g = GraphBuilder("toy_cnn", seed)
    x = g.input((1, 3, 16, 16))
    c1 = g.conv("conv1", x, 3, 8, 3, padding=1)
    b1 = g.bn("bn1", c1, 8)
    r1 = g.add("relu1", "ReLU", [b1])
    p1 = g.add("pool1", "MaxPool2D", [r1], {"kernel": 2, "stride": 2})
    c2a = g.conv("conv2a", p1, 8, 8, 3, padding=1)
    c2b = g.conv("conv2b", p1, 8, 8, 1)
    a1 = g.add("add1", "Add", [c2a, p1])
    r2 = g.add("relu2", "ReLU", [a1])
    cat = g.add("cat1", "Concat", [r2, c2b], {"axis": 1})
    p2 = g.add("pool2", "AvgPool2D", [cat], {"kernel": 2, "stride": 2})
    fl = g.add("flat", "Flatten", [p2])
    f1 = g.fc("fc1", fl, 16 * 4 * 4, 10)
    sm = g.add("softmax", "Softmax", [f1])
    g.output(sm)
    return g.build()


def chain_model(n_layers: int = 8, channels: int = 4, size: int = 8, seed: int = 0,
                kernel: int = 3) -> Model:
    """Linear chain of same-padded convolutions ``L0 -> L1 -> ...``."""
    g = GraphBuilder(f"chain{n_layers}", seed)
    prev = g.input((1, channels, size, size))
    for i in range(n_layers):
        prev = g.conv(f"L{i}", prev, channels, channels, kernel, padding=kernel // 2)
    g.output(prev)
    return g.build()


def dse_model(seed: int = 0) -> Model:
    """Four hidden layers of different weight and activation sizes."""
    g = GraphBuilder("dse4", seed)
    x = g.input((1, 8, 16, 16))
    c1 = g.conv("c1", x, 8, 16, 3, padding=1)
    p1 = g.add("p1", "MaxPool2D", [c1], {"kernel": 2, "stride": 2})
    c2 = g.conv("c2", p1, 16, 32, 3, padding=1)
    f = g.fc("f1", c2, 32 * 8 * 8, 10)
    g.output(f)
    return g.build()


def synthetic_large(n_layers: int = 900, channels: int = 64, size: int = 4, seed: int = 0) -> Model:
    """Deep residual-style stack: repeated conv/bn/relu blocks with periodic skip adds.

    With the defaults it has 900 hidden layers and about 9.5 M parameters.
    """
    g = GraphBuilder(f"synthetic{n_layers}", seed)
    prev = g.input((1, channels, size, size))
    skip = prev
    i = 0
    while i < n_layers:
        left = n_layers - i
        if left >= 4 and i % 12 == 8:
            prev = g.add(f"add{i}", "Add", [prev, skip])
            skip = prev
            i += 1
            continue
        prev = g.conv(f"conv{i}", prev, channels, channels, 3, padding=1)
        i += 1
        if i < n_layers:
            prev = g.bn(f"bn{i}", prev, channels)
            i += 1
        if i < n_layers:
            prev = g.add(f"relu{i}", "ReLU", [prev])
            i += 1
    g.output(prev)
    return g.build()
