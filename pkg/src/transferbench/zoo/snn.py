"""Conversion of trained ReLU networks to integrate-and-fire spiking networks.

Weights are copied bit-for-bit; each ReLU becomes an if-spike node whose
threshold is balanced against the source network's activation range on a
calibration batch (a plain global threshold saturates far too early for
anything but toy nets). The optional light calibration additionally shifts
the bias of the layer feeding each spiking node by the channel-mean gap
between analog and spiking activations.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import engine, spiking
from ..autodiff.graph import LayerNode, ModelHandle
from ..errors import ConfigError, ConversionError

CALIBRATION_MODES = ("none", "bias-light")


def convert_to_snn(cnn: ModelHandle, timesteps: int, calibration: str = "none",
                   calibration_batch=None, theta: float = 1.0,
                   surrogate_slope: float = 1.0) -> ModelHandle:
    """Build a spiking copy of a trained ReLU network."""
    if calibration not in CALIBRATION_MODES:
        raise ConfigError(f"unknown calibration mode {calibration!r}")
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    if cnn.arch in ("snn", "dynn"):
        raise ConversionError(f"cannot convert a {cnn.arch} model")
    relus = cnn.nodes_of_kind("relu")
    if not relus:
        raise ConversionError(f"{cnn.arch} has no ReLU activations to convert")
    for node in cnn.graph:
        if node.kind in ("gelu", "multi-head-attention"):
            raise ConversionError(f"unsupported activation {node.kind!r} for spiking conversion")

    thresholds = _balanced_thresholds(cnn, relus, calibration_batch, theta)
    graph = []
    for node in cnn.graph:
        params = {k: v.copy() for k, v in node.params.items()}
        if node.kind == "relu":
            graph.append(LayerNode("if-spike", node.name, list(node.inputs), {}, {"theta": thresholds[node.name]}))
        else:
            graph.append(LayerNode(node.kind, node.name, list(node.inputs), params, dict(node.attrs)))
    spec = {
        "base_arch": cnn.arch,
        "base_spec": dict(cnn.spec),
        "timesteps": int(timesteps),
        "theta": float(theta),
        "calibration": calibration,
        "surrogate_slope": float(surrogate_slope),
    }
    snn = ModelHandle("snn", spec, graph, cnn.input_spec, cnn.num_classes, dict(cnn.meta))
    if calibration == "bias-light":
        if calibration_batch is None:
            raise ConfigError("bias-light calibration requires a calibration batch")
        _calibrate_biases(snn, cnn, calibration_batch)
    return snn


def _balanced_thresholds(cnn, relus, batch, theta):
    """Per-layer thresholds: theta scales the 99.9th activation percentile."""
    if batch is None:
        return {n.name: float(theta) for n in relus}
    acts, _ = engine._forward_graph(cnn, batch, need_cache=False)
    out = {}
    for node in relus:
        top = float(np.quantile(acts[node.name], 0.999))
        out[node.name] = float(theta) * (top if top > 1e-6 else 1.0)
    return out


def _bias_param(node):
    if "b" in node.params:
        return "b"
    if "beta" in node.params:
        return "beta"
    return None


def _channel_mean(a):
    if a.ndim == 4:
        return a.mean(axis=(0, 2, 3))
    return a.mean(axis=0)


def _calibrate_biases(snn, cnn, batch):
    """Shift feeder biases by the channel-mean analog/spiking activation gap."""
    ann_acts, _ = engine._forward_graph(cnn, batch, need_cache=False)
    for node in snn.graph:
        if node.kind != "if-spike":
            continue
        feeder = snn.node(node.inputs[0])
        key = _bias_param(feeder)
        if key is None:
            continue  # e.g. a pooling or residual feeder owns no bias
        snn_avg = _snn_rates(snn, batch)[node.name]
        gap = _channel_mean(ann_acts[node.name]) - _channel_mean(snn_avg)
        feeder.params[key] = (feeder.params[key] + gap).astype(np.float32)


def _snn_rates(snn, batch):
    """Time-averaged post-spike output of every if-spike node."""
    timesteps = int(snn.spec["timesteps"])
    state: dict[str, np.ndarray] = {}
    totals: dict[str, np.ndarray] = {}
    for _ in range(timesteps):
        acts, _ = engine._forward_graph(snn, batch, need_cache=False, spike_state=state)
        for node in snn.graph:
            if node.kind == "if-spike":
                prev = totals.get(node.name)
                totals[node.name] = acts[node.name] if prev is None else prev + acts[node.name]
    return {k: v / timesteps for k, v in totals.items()}


def snn_attack_gradient(snn: ModelHandle, batch, labels, surrogate_slope: float | None = None):
    """Input gradient of the time-averaged cross-entropy (surrogate BPTT)."""
    if snn.arch != "snn":
        raise ConfigError("snn_attack_gradient expects a converted spiking model")
    slope = snn.spec.get("surrogate_slope", 1.0) if surrogate_slope is None else surrogate_slope
    return spiking.surrogate_grad(snn, batch, labels, float(slope))
