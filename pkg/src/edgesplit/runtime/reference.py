"""Single-process evaluation used as the functional-equivalence oracle."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .kernels import F32, execute_layer


def check_input(m, x) -> np.ndarray:
    x = np.asarray(x)
    want = m.shapes[m.input_name].dims
    if x.shape != want:
        raise ShapeError(m.input_name, f"input has shape {list(x.shape)}, model expects {list(want)}")
    return np.ascontiguousarray(x, dtype=F32)


def infer_reference(m, x) -> np.ndarray:
    """Evaluate the whole model in topological order on one thread."""
    values = {m.input_name: check_input(m, x)}
    for name in m.topo_order():
        layer = m.by_name[name]
        if layer.op == "Input":
            continue
        values[name] = execute_layer(layer, [values[s] for s in layer.inputs], m.weights, 1)
    return values[m.output_name]
