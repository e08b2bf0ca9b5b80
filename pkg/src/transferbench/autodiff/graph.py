"""Static layer graphs: node and model containers plus structural validation.

A model is a list of named nodes in topological order. Every node reads the
activations of earlier nodes (or the pseudo-node ``"input"``) and produces a
single output stored under its own name. Parameters are plain float32 numpy
arrays owned by the node that uses them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError

INPUT = "input"

LAYER_KINDS = frozenset(
    {
        "conv2d",
        "linear",
        "relu",
        "gelu",
        "softmax",
        "layernorm",
        "batchnorm-frozen",
        "maxpool",
        "avgpool",
        "patch-embed",
        "multi-head-attention",
        "residual-add",
        "flatten",
        "if-spike",
        # token selection is needed to read the class token of a transformer;
        # it is the one kind added on top of the core set
        "take-token",
    }
)


@dataclass
class LayerNode:
    kind: str
    name: str
    inputs: list[str]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r} in node {self.name!r}")


@dataclass
class ModelHandle:
    """Architecture-tagged differentiable classifier over a static graph."""

    arch: str
    spec: dict
    graph: list[LayerNode]
    input_spec: tuple[int, int, int]
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_graph(self.graph)
        self._index = {n.name: n for n in self.graph}

    @property
    def output_name(self) -> str:
        return self.graph[-1].name

    def node(self, name: str) -> LayerNode:
        try:
            return self._index[name]
        except KeyError:
            raise ConfigError(f"model has no layer named {name!r}") from None

    def has_node(self, name: str) -> bool:
        return name in self._index

    def nodes_of_kind(self, kind: str) -> list[LayerNode]:
        return [n for n in self.graph if n.kind == kind]

    def named_params(self):
        """Yield (qualified_name, array) for every parameter, graph order."""
        for node in self.graph:
            for pname in sorted(node.params):
                yield f"{node.name}/{pname}", node.params[pname]

    def param_checksum(self) -> float:
        total = 0.0
        for _, arr in self.named_params():
            total += float(np.float64(arr).sum())
        return total

    def topo_index(self, name: str) -> int:
        for i, node in enumerate(self.graph):
            if node.name == name:
                return i
        raise ConfigError(f"model has no layer named {name!r}")


def validate_graph(graph: list[LayerNode]) -> None:
    """Check name uniqueness, topological order and residual-add tagging."""
    seen = {INPUT}
    for node in graph:
        if node.name in seen:
            raise ConfigError(f"duplicate layer name {node.name!r}")
        for ref in node.inputs:
            if ref not in seen:
                raise ConfigError(
                    f"node {node.name!r} reads {ref!r} before it is defined (graph must be acyclic)"
                )
        if node.kind == "residual-add":
            if len(node.inputs) != 2:
                raise ConfigError(f"residual-add {node.name!r} must have exactly two inputs")
            skip = node.attrs.get("skip")
            if skip not in node.inputs:
                raise ConfigError(
                    f"residual-add {node.name!r} must tag one of its inputs as the skip branch"
                )
        seen.add(node.name)
    if not graph:
        raise ConfigError("empty graph")
