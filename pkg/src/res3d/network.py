"""Layer graph execution: forward in topological order, explicit backward."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from res3d.errors import DimensionError

INPUT = "input"


@dataclass
class Node:
    name: str
    layer: object
    inputs: tuple


class GraphBuilder:
    """Accumulates nodes in insertion order, which is also execution order."""

    def __init__(self):
        self.nodes = []
        self._names = {INPUT}

    def add(self, name, layer, *inputs):
        if name in self._names:
            raise ValueError(f"duplicate node name {name!r}")
        for i in inputs:
            if i not in self._names:
                raise ValueError(f"node {name!r} consumes unknown node {i!r}")
        self.nodes.append(Node(name, layer, tuple(inputs)))
        self._names.add(name)
        return name

    def build(self, output, spec=None, input_shape=None):
        return Network(self.nodes, output, spec=spec, input_shape=input_shape)


@dataclass
class LayerRow:
    name: str
    description: str
    output_shape: tuple
    num_params: int


class Network:
    """An acyclic layer graph with one input node and one output node.

    Parameters are addressed as ``"<node name>.<param name>"``; the same
    naming scheme is used for batch-norm running statistics.
    """

    def __init__(self, nodes, output, spec=None, input_shape=None):
        self.nodes = list(nodes)
        self.output = output
        self.spec = spec
        self.input_shape = input_shape
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ValueError("node names must be unique")
        if output not in names:
            raise ValueError(f"output node {output!r} not in graph")
        seen = {INPUT}
        for n in self.nodes:
            missing = [i for i in n.inputs if i not in seen]
            if missing:
                raise ValueError(f"node {n.name!r} is not in topological order (needs {missing})")
            seen.add(n.name)
        self._consumers = Counter(i for n in self.nodes for i in n.inputs)
        self._has_forward = False

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        return {
            f"{n.name}.{k}": p for n in self.nodes for k, p in n.layer.params.items()
        }

    def buffers(self):
        return {
            f"{n.name}.{k}": v for n in self.nodes for k, v in n.layer.buffers.items()
        }

    def num_params(self):
        return sum(p.size for p in self.parameters().values())

    def set_buffer(self, name, value):
        node_name, key = name.rsplit(".", 1)
        layer = self.node(node_name).layer
        if key not in layer.buffers:
            raise KeyError(name)
        layer.buffers[key][...] = value

    def node(self, name):
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def astype(self, dtype):
        for n in self.nodes:
            n.layer.astype(dtype)
        return self

    @property
    def dtype(self):
        for p in self.parameters().values():
            return p.data.dtype
        return np.dtype(np.float32)

    # -- execution ----------------------------------------------------------

    def forward(self, x, training=False, keep_cache=None):
        """Run the graph. Caches for ``backward`` are kept in training mode
        unless ``keep_cache`` says otherwise."""
        if keep_cache is None:
            keep_cache = training
        if self.input_shape is not None and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise DimensionError(
                f"network expects clips shaped {tuple(self.input_shape)}, got {tuple(x.shape[1:])}"
            )
        values = {INPUT: x}
        remaining = Counter(self._consumers)
        for n in self.nodes:
            args = [values[i] for i in n.inputs]
            values[n.name] = n.layer.forward(*args, training=training, keep_cache=keep_cache)
            for i in n.inputs:
                remaining[i] -= 1
                if remaining[i] == 0 and i != self.output:
                    del values[i]
        self._has_forward = keep_cache
        return values[self.output]

    def backward(self, grad_output):
        """Backpropagate ``grad_output`` and return ``{param name: grad}``."""
        if not self._has_forward:
            raise RuntimeError("backward called without a preceding cached forward")
        grads = {self.output: grad_output}
        for n in reversed(self.nodes):
            g = grads.pop(n.name, None)
            if g is None:
                n.layer.clear_cache()
                continue
            input_grads = n.layer.backward(g)
            for name, gi in zip(n.inputs, input_grads):
                grads[name] = gi if name not in grads else grads[name] + gi
        self._has_forward = False
        self.input_grad = grads.get(INPUT)
        return {k: p.grad for k, p in self.parameters().items()}

    def clear_caches(self):
        for n in self.nodes:
            n.layer.clear_cache()
        self._has_forward = False

    # -- introspection ------------------------------------------------------

    def shapes(self, input_shape):
        shapes = {INPUT: tuple(input_shape)}
        for n in self.nodes:
            shapes[n.name] = tuple(n.layer.output_shape(*[shapes[i] for i in n.inputs]))
        return shapes

    def layer_table(self, batch=1):
        if self.input_shape is None:
            raise ValueError("network has no declared input shape")
        shapes = self.shapes((batch,) + tuple(self.input_shape))
        return [
            LayerRow(n.name, n.layer.describe(), shapes[n.name], n.layer.num_params())
            for n in self.nodes
        ]
