"""Confidence-gated glance-and-focus inference over a trained backbone.

Stage 1 classifies a pooled-down glance of the image; if the max class
probability clears the confidence threshold the prediction exits there.
Otherwise full-resolution crops are processed in order of decreasing
stage-1 activation energy, up to max_steps. The prediction is the output of
the last stage that ran.

The handle's own graph is exactly the glance path (downscale + backbone),
so attacks backpropagate through a fixed-step unrolled forward that matches
threshold-0 evaluation.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import engine, softmax
from ..autodiff.graph import LayerNode, ModelHandle
from ..errors import ConfigError


def build_dynn(base: ModelHandle, glance_size: int = 16, max_steps: int = 3,
               confidence_threshold: float = 0.5) -> ModelHandle:
    """Wrap a trained, spatially flexible backbone in a glance-and-focus handle."""
    if base.arch in ("snn", "dynn"):
        raise ConfigError(f"cannot build a dynamic network over a {base.arch} model")
    if any(n.kind == "flatten" for n in base.graph):
        raise ConfigError(f"{base.arch} head is resolution-bound (flatten); use a globally pooled backbone")
    if "saliency_node" not in base.meta:
        raise ConfigError(f"{base.arch} does not expose a saliency feature map")
    size = base.input_spec[1]
    if size % glance_size:
        raise ConfigError(f"glance size {glance_size} must divide input size {size}")
    if max_steps < 1:
        raise ConfigError(f"max_steps must be >= 1, got {max_steps}")
    pool = size // glance_size
    graph = [LayerNode("avgpool", "glance_pool", ["input"], attrs={"kernel": pool})]
    first = True
    for node in base.graph:
        inputs = ["glance_pool" if ref == "input" else ref for ref in node.inputs] if first else list(node.inputs)
        first = False
        graph.append(LayerNode(node.kind, node.name, inputs,
                               {k: v.copy() for k, v in node.params.items()}, dict(node.attrs)))
    spec = {
        "base_arch": base.arch,
        "base_spec": dict(base.spec),
        "glance_size": int(glance_size),
        "max_steps": int(max_steps),
        "confidence_threshold": float(confidence_threshold),
    }
    meta = dict(base.meta)
    meta["backbone_entry"] = base.graph[0].name
    return ModelHandle("dynn", spec, graph, base.input_spec, base.num_classes, meta)


def _backbone_forward(model: ModelHandle, patch):
    """Run only the backbone nodes (skip the glance pooling) on a crop."""
    sliced = model.meta.get("_backbone_handle")
    if sliced is None:
        nodes = [LayerNode(n.kind, n.name, ["input" if r == "glance_pool" else r for r in n.inputs],
                           n.params, n.attrs) for n in model.graph[1:]]
        c = model.input_spec[0]
        g = int(model.spec["glance_size"])
        sliced = ModelHandle(model.spec["base_arch"], dict(model.spec["base_spec"]), nodes, (c, g, g),
                             model.num_classes, {k: v for k, v in model.meta.items() if not k.startswith("_")})
        model.meta["_backbone_handle"] = sliced
    return engine._forward_graph(sliced, patch, need_cache=False)[0]


def _crop_grid(size, crop):
    step = max(crop // 2, 1)
    offs = list(range(0, size - crop + 1, step))
    if offs[-1] != size - crop:
        offs.append(size - crop)
    return [(t, l) for t in offs for l in offs]


def _crop_scores(energy, grid, size, crop):
    """Mean saliency energy of each candidate crop, in full-image coordinates."""
    fh, fw = energy.shape[1], energy.shape[2]
    scores = np.empty((energy.shape[0], len(grid)), dtype=np.float64)
    for gi, (top, left) in enumerate(grid):
        r0 = int(np.floor(top * fh / size))
        r1 = max(int(np.ceil((top + crop) * fh / size)), r0 + 1)
        c0 = int(np.floor(left * fw / size))
        c1 = max(int(np.ceil((left + crop) * fw / size)), c0 + 1)
        scores[:, gi] = energy[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return scores


def dynn_forward(model: ModelHandle, images, confidence_threshold: float | None = None,
                 max_steps: int | None = None):
    """Staged inference; returns (predictions, exit_steps)."""
    if model.arch != "dynn":
        raise ConfigError("dynn_forward expects a dynamic-network handle")
    threshold = model.spec["confidence_threshold"] if confidence_threshold is None else confidence_threshold
    steps = model.spec["max_steps"] if max_steps is None else max_steps
    if threshold < 0.0:
        # values above 1 are allowed: they force full-depth runs in sweeps
        raise ConfigError(f"confidence threshold must be >= 0, got {threshold}")
    if steps < 1:
        raise ConfigError(f"max_steps must be >= 1, got {steps}")
    n = images.shape[0]
    size = model.input_spec[1]
    crop = int(model.spec["glance_size"])

    acts, _ = engine._forward_graph(model, images, need_cache=False)
    glance_logits = acts[model.output_name]
    sal = acts[model.meta["saliency_node"]]
    energy = (sal.astype(np.float64) ** 2).sum(axis=1)

    preds = glance_logits.argmax(axis=1)
    conf = softmax(glance_logits, axis=-1).max(axis=1)
    exit_steps = np.ones(n, dtype=np.int64)
    running = conf < threshold

    grid = _crop_grid(size, crop)
    scores = _crop_scores(energy, grid, size, crop)
    order = np.argsort(-scores, axis=1, kind="stable")  # deterministic tie-break

    for step in range(2, steps + 1):
        if not running.any():
            break
        idx = np.flatnonzero(running)
        sel = order[idx, step - 2 if step - 2 < len(grid) else len(grid) - 1]
        patches = np.empty((len(idx), images.shape[1], crop, crop), dtype=images.dtype)
        for row, (i, gi) in enumerate(zip(idx, sel)):
            top, left = grid[gi]
            patches[row] = images[i, :, top : top + crop, left : left + crop]
        sub_acts = _backbone_forward(model, patches)
        logits = sub_acts[model.output_name]
        preds[idx] = logits.argmax(axis=1)
        conf_sub = softmax(logits, axis=-1).max(axis=1)
        exit_steps[idx] = step
        running[idx] = conf_sub < threshold
    return preds, exit_steps
