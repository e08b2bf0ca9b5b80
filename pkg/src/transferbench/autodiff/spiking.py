"""Time-stepped simulation of converted integrate-and-fire networks.

Input coding is direct: the analog image is injected as input current at
every timestep. Classification averages the output layer over the run.
Gradients for attacks come from backpropagation through time with a
triangular surrogate in place of the spike derivative.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .graph import INPUT, ModelHandle


def snn_forward(model: ModelHandle, batch: np.ndarray, surgery=None, dtype=None):
    """Average the output over the configured number of timesteps."""
    from . import engine

    timesteps = int(model.spec["timesteps"])
    state: dict[str, np.ndarray] = {}
    total = None
    tap = surgery.tap_layer if surgery is not None else None
    tap_total = None
    for _ in range(timesteps):
        acts, _ = engine._forward_graph(model, batch, dtype=dtype, need_cache=False, spike_state=state)
        out = acts[model.output_name]
        total = out if total is None else total + out
        if tap is not None:
            tap_total = acts[tap] if tap_total is None else tap_total + acts[tap]
    logits = total / timesteps
    trace = engine.ActivationTrace()
    if tap is not None:
        trace.activations[tap] = tap_total / timesteps
    return logits, trace


def surrogate_grad(model: ModelHandle, batch, labels, slope: float, dtype=None) -> np.ndarray:
    """Input gradient of time-averaged cross-entropy via surrogate BPTT."""
    from . import engine

    if slope <= 0:
        raise ConfigError(f"surrogate slope must be positive, got {slope}")
    timesteps = int(model.spec["timesteps"])
    state: dict[str, np.ndarray] = {}
    step_acts = []
    step_caches = []
    total = None
    for _ in range(timesteps):
        acts, caches = engine._forward_graph(model, batch, dtype=dtype, spike_state=state)
        step_acts.append(acts)
        step_caches.append(caches)
        out = acts[model.output_name]
        total = out if total is None else total + out
    _, dlogits = engine.cross_entropy(total / timesteps, labels)
    dlogits = dlogits / timesteps
    carry: dict[str, np.ndarray] = {}
    dx_total = np.zeros_like(step_acts[0][INPUT])
    for t in range(timesteps - 1, -1, -1):
        dx, _ = engine._backward_graph(
            model, step_acts[t], step_caches[t], {model.output_name: dlogits},
            engine.DEFAULT_SURGERY, spike_carry=carry, surrogate_slope=float(slope),
        )
        dx_total += dx
    return dx_total
