"""Reverse-mode differentiation over a static layer graph.

The backward pass supports the three kinds of gradient surgery used by
transfer attacks: scaling the non-skip branch of residual additions,
linearizing ReLU from a cut layer onward, and dropping the gradient through
attention probabilities. Default surgery is the exact reverse-mode gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, InputShapeError, UnsupportedLossError
from . import ops
from .graph import INPUT, LayerNode, ModelHandle


@dataclass
class GradSurgery:
    """Flags controlling nonstandard backpropagation."""

    skip_gamma: float = 1.0
    linbp_after: str | None = None
    pna_skip_attention: bool = False
    tap_layer: str | None = None

    def __post_init__(self):
        if not 0.0 < self.skip_gamma <= 1.0:
            raise ConfigError(f"skip_gamma must be in (0, 1], got {self.skip_gamma}")

    def validate(self, model: ModelHandle) -> None:
        if self.tap_layer is not None and not model.has_node(self.tap_layer):
            raise ConfigError(f"tap layer {self.tap_layer!r} not present in model {model.arch}")
        if self.linbp_after is not None:
            if not model.has_node(self.linbp_after):
                raise ConfigError(f"linbp cut layer {self.linbp_after!r} not present in model {model.arch}")
            if not model.nodes_of_kind("relu"):
                raise ConfigError(f"linbp requires ReLU layers; {model.arch} has none")
        if self.skip_gamma != 1.0 and not model.nodes_of_kind("residual-add"):
            raise ConfigError(f"skip-gradient scaling requires residual connections; {model.arch} has none")
        if self.pna_skip_attention and not model.nodes_of_kind("multi-head-attention"):
            raise ConfigError(f"pna requires attention layers; {model.arch} has none")


DEFAULT_SURGERY = GradSurgery()


@dataclass
class ActivationTrace:
    """Per-call record of requested forward activations."""

    activations: dict[str, np.ndarray] = field(default_factory=dict)

    def get(self, name: str) -> np.ndarray:
        if name not in self.activations:
            raise ConfigError(f"trace does not contain layer {name!r}")
        return self.activations[name]


@dataclass
class LossSpec:
    """Loss selector for grad_input; params depend on the kind."""

    kind: str = "cross-entropy"
    params: dict = field(default_factory=dict)

    KINDS = ("cross-entropy", "targeted-cross-entropy", "se-sum", "ila-projection", "ce-plus-ir")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise UnsupportedLossError(f"unknown loss kind {self.kind!r}")


# ---------------------------------------------------------------------------
# forward


def _cast_params(node: LayerNode, dtype):
    if dtype is None:
        return node.params
    return {k: v.astype(dtype) for k, v in node.params.items()}


def _forward_graph(model: ModelHandle, x: np.ndarray, dtype=None, need_cache=True, spike_state=None):
    """Run every node; returns (activations, caches).

    spike_state holds integrate-and-fire membranes across timesteps; it is
    only supplied by the spiking simulator.
    """
    c, h, w = model.input_spec
    if x.ndim != 4 or x.shape[1:] != (c, h, w):
        raise InputShapeError(f"expected batch of shape (N, {c}, {h}, {w}), got {tuple(x.shape)}")
    if dtype is not None:
        x = x.astype(dtype)
    acts = {INPUT: x}
    caches = {}
    for node in model.graph:
        p = _cast_params(node, dtype)
        a = acts[node.inputs[0]] if node.inputs else None
        kind = node.kind
        if kind == "conv2d":
            out, cache = ops.conv2d_forward(a, p["w"], p["b"], node.attrs.get("stride", 1), node.attrs.get("pad", 0))
        elif kind == "linear":
            out, cache = ops.linear_forward(a, p["w"], p["b"])
        elif kind == "relu":
            out, cache = ops.relu_forward(a)
        elif kind == "gelu":
            out, cache = ops.gelu_forward(a)
        elif kind == "softmax":
            out = ops.softmax(a, axis=-1)
            cache = out
        elif kind == "layernorm":
            out, cache = ops.layernorm_forward(a, p["gamma"], p["beta"], node.attrs.get("eps", 1e-5))
        elif kind == "batchnorm-frozen":
            out, cache = ops.batchnorm_frozen_forward(a, p["gamma"], p["beta"], p["mean"], p["var"], node.attrs.get("eps", 1e-5))
            cache = (cache, a)
        elif kind == "maxpool":
            if spike_state is None:
                out, cache = ops.maxpool_forward(a, node.attrs.get("kernel", 2))
            else:
                out, cache, counts = ops.maxpool_spiking_forward(
                    a, spike_state.get(node.name), node.attrs.get("kernel", 2)
                )
                spike_state[node.name] = counts
        elif kind == "avgpool":
            out, cache = ops.avgpool_forward(a, node.attrs.get("kernel"))
        elif kind == "patch-embed":
            out, cache = ops.patch_embed_forward(a, p["w"], p["b"], p["cls"], p["pos"], node.attrs["patch"])
        elif kind == "multi-head-attention":
            out, cache = ops.attention_forward(a, p, node.attrs["heads"])
        elif kind == "residual-add":
            out = acts[node.inputs[0]] + acts[node.inputs[1]]
            cache = None
        elif kind == "flatten":
            out = a.reshape(a.shape[0], -1)
            cache = a.shape
        elif kind == "take-token":
            out = a[:, node.attrs.get("index", 0), :]
            cache = a.shape
        elif kind == "if-spike":
            if spike_state is None:
                raise ConfigError("spiking graphs require the time-stepped forward (model arch 'snn')")
            theta = np.asarray(node.attrs["theta"], dtype=a.dtype)
            v = a if node.name not in spike_state else spike_state[node.name] + a
            out = np.where(v >= theta, theta, np.asarray(0, dtype=a.dtype))
            spike_state[node.name] = v - out  # soft reset
            cache = v
        else:  # pragma: no cover - guarded by LAYER_KINDS
            raise ConfigError(f"unhandled layer kind {kind!r}")
        acts[node.name] = out
        if need_cache:
            caches[node.name] = (p, cache)
    return acts, caches


def forward(model: ModelHandle, batch: np.ndarray, surgery: GradSurgery | None = None, dtype=None):
    """Evaluate the model; returns (logits, trace).

    Deterministic given (model, batch). The trace stores the tap_layer
    activation when the surgery requests one.
    """
    surgery = surgery or DEFAULT_SURGERY
    surgery.validate(model)
    if model.arch == "snn":
        from . import spiking

        return spiking.snn_forward(model, batch, surgery, dtype=dtype)
    acts, _ = _forward_graph(model, batch, dtype=dtype, need_cache=False)
    trace = ActivationTrace()
    if surgery.tap_layer is not None:
        trace.activations[surgery.tap_layer] = acts[surgery.tap_layer]
    for name in model.meta.get("block_outputs", ()):
        trace.activations[name] = acts[name]
    return acts[model.output_name], trace


def predict_proba(model: ModelHandle, batch: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, batch)
    return ops.softmax(logits, axis=-1)


# ---------------------------------------------------------------------------
# backward


def _backward_graph(model, acts, caches, seeds, surgery, need_param_grads=False, stop_at=None,
                    spike_carry=None, surrogate_slope=None):
    """Walk the graph in reverse, accumulating gradients.

    seeds maps node names to output gradients; stop_at skips nodes that come
    after the last seeded node (used for tap-layer losses). spike_carry holds
    membrane gradients flowing between timesteps of a spiking simulation.
    """
    dtype = acts[INPUT].dtype
    grads: dict[str, np.ndarray] = {}
    for name, g in seeds.items():
        grads[name] = g.astype(dtype, copy=False)
    pgrads: dict[str, np.ndarray] = {}
    linbp_cut = model.topo_index(surgery.linbp_after) if surgery.linbp_after is not None else None
    start = len(model.graph) - 1 if stop_at is None else model.topo_index(stop_at)

    def add(name, g):
        if name in grads:
            grads[name] = grads[name] + g
        else:
            grads[name] = g

    def addp(node, key, g):
        if g is not None:
            pgrads[f"{node.name}/{key}"] = pgrads.get(f"{node.name}/{key}", 0) + g

    for idx in range(start, -1, -1):
        node = model.graph[idx]
        dout = grads.pop(node.name, None)
        if dout is None:
            if node.kind == "if-spike" and spike_carry is not None and node.name in spike_carry:
                dout = np.zeros_like(caches[node.name][1])
            else:
                continue
        p, cache = caches[node.name]
        kind = node.kind
        if kind == "conv2d":
            dx, dw, db = ops.conv2d_backward(dout, p["w"], cache, need_param_grads)
            addp(node, "w", dw)
            addp(node, "b", db)
        elif kind == "linear":
            dx, dw, db = ops.linear_backward(dout, p["w"], cache, need_param_grads)
            addp(node, "w", dw)
            addp(node, "b", db)
        elif kind == "relu":
            linearized = linbp_cut is not None and idx >= linbp_cut
            dx = ops.relu_backward(dout, cache, linearized=linearized)
        elif kind == "gelu":
            dx = ops.gelu_backward(dout, cache)
        elif kind == "softmax":
            dx = ops.softmax_backward(dout, cache)
        elif kind == "layernorm":
            dx, dgamma, dbeta = ops.layernorm_backward(dout, p["gamma"], cache, need_param_grads)
            addp(node, "gamma", dgamma)
            addp(node, "beta", dbeta)
        elif kind == "batchnorm-frozen":
            scale, a = cache
            dx, dgamma, dbeta = ops.batchnorm_frozen_backward(
                dout, scale, a, need_param_grads, p["mean"], p["var"], node.attrs.get("eps", 1e-5)
            )
            addp(node, "gamma", dgamma)
            addp(node, "beta", dbeta)
        elif kind == "maxpool":
            dx = ops.maxpool_backward(dout, cache)
        elif kind == "avgpool":
            dx = ops.avgpool_backward(dout, cache, node.attrs.get("kernel"))
        elif kind == "patch-embed":
            dx, dw, db, dcls, dpos = ops.patch_embed_backward(dout, p["w"], cache, need_param_grads)
            addp(node, "w", dw)
            addp(node, "b", db)
            addp(node, "cls", dcls)
            addp(node, "pos", dpos)
        elif kind == "multi-head-attention":
            dx, pg = ops.attention_backward(
                dout, p, cache, node.attrs["heads"], need_param_grads,
                skip_attention=surgery.pna_skip_attention,
            )
            for key, g in pg.items():
                addp(node, key, g)
        elif kind == "residual-add":
            skip = node.attrs["skip"]
            branch = node.inputs[0] if node.inputs[1] == skip else node.inputs[1]
            add(skip, dout)
            if surgery.skip_gamma == 1.0:
                add(branch, dout)
            else:
                add(branch, dout * np.asarray(surgery.skip_gamma, dtype=dtype))
            continue
        elif kind == "flatten":
            dx = dout.reshape(cache)
        elif kind == "take-token":
            full = np.zeros(cache, dtype=dout.dtype)
            full[:, node.attrs.get("index", 0), :] = dout
            dx = full
        elif kind == "if-spike":
            v = cache
            theta = np.asarray(node.attrs["theta"], dtype=v.dtype)
            psi = surrogate_slope * np.maximum(0.0, 1.0 - np.abs(v - theta))
            dv = dout * psi
            carried = spike_carry.pop(node.name, None) if spike_carry is not None else None
            if carried is not None:
                dv = dv + carried * (1.0 - psi)  # soft reset: u_t = v_t - s_t
            if spike_carry is not None:
                spike_carry[node.name] = dv
            dx = dv.astype(dout.dtype, copy=False)
        else:  # pragma: no cover
            raise ConfigError(f"unhandled layer kind {kind!r}")
        add(node.inputs[0], dx)
    return grads.get(INPUT, np.zeros_like(acts[INPUT])), pgrads


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, labels):
    """Mean cross-entropy over the batch plus its gradient w.r.t. logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits.astype(logits.dtype, copy=False)


def _se_head_nodes(model: ModelHandle):
    meta = model.meta
    if "se_head" not in meta or "block_outputs" not in meta:
        raise UnsupportedLossError(f"se-sum loss requires a transformer with per-block class tokens, not {model.arch}")
    return meta["block_outputs"], meta["se_head"]


def se_sum_loss(model: ModelHandle, acts, labels, dtype=None):
    """Self-ensemble loss: shared head applied to every block's class token.

    Returns (loss, dlogits_for_final_path, seeds_for_earlier_blocks).
    """
    blocks, head = _se_head_nodes(model)
    ln = model.node(head["layernorm"])
    lin = model.node(head["linear"])
    tok = model.node(head["take_token"]).attrs.get("index", 0)
    loss_total = 0.0
    seeds = {}
    final_logits = acts[model.output_name]
    loss_f, dlog_f = cross_entropy(final_logits, labels)
    loss_total += loss_f
    lp = _cast_params(ln, dtype)
    hp = _cast_params(lin, dtype)
    for name in blocks[:-1]:
        cls = acts[name][:, tok, :]
        z, ln_cache = ops.layernorm_forward(cls, lp["gamma"], lp["beta"], ln.attrs.get("eps", 1e-5))
        logits_b, lin_cache = ops.linear_forward(z, hp["w"], hp["b"])
        loss_b, dlog_b = cross_entropy(logits_b, labels)
        loss_total += loss_b
        dz, _, _ = ops.linear_backward(dlog_b, hp["w"], lin_cache, False)
        dcls, _, _ = ops.layernorm_backward(dz, lp["gamma"], ln_cache, False)
        seed = np.zeros_like(acts[name])
        seed[:, tok, :] = dcls
        seeds[name] = seed
    return float(loss_total), dlog_f, seeds


def ila_loss(trace_current: ActivationTrace, trace_clean: ActivationTrace, trace_reference: ActivationTrace, layer: str) -> float:
    """Projection of the current feature displacement onto the reference one."""
    cur = trace_current.get(layer)
    clean = trace_clean.get(layer)
    ref = trace_reference.get(layer)
    return float(np.dot((cur - clean).ravel(), (ref - clean).ravel()))


def interaction_estimate(loss_fn, delta, unit_masks, pairs, contexts):
    """Sampled pairwise-interaction estimate over perturbation units.

    loss_fn maps a perturbation (same shape as delta) to a scalar; unit_masks
    is a list of disjoint {0,1} masks; pairs is a list of (i, j) unit indices
    and contexts a parallel list of boolean unit-membership vectors.
    """
    total = 0.0
    for (i, j), ctx in zip(pairs, contexts):
        base = np.zeros_like(delta)
        for u, inside in enumerate(ctx):
            if inside and u != i and u != j:
                base = base + delta * unit_masks[u]
        l_s = loss_fn(base)
        l_i = loss_fn(base + delta * unit_masks[i])
        l_j = loss_fn(base + delta * unit_masks[j])
        l_ij = loss_fn(base + delta * unit_masks[i] + delta * unit_masks[j])
        total += l_ij - l_i - l_j + l_s
    return total / len(pairs)


def patch_unit_masks(shape, patch):
    """Disjoint square-patch masks covering an NCHW image plane."""
    _, _, h, w = shape
    masks = []
    for top in range(0, h, patch):
        for left in range(0, w, patch):
            m = np.zeros((1, 1, h, w), dtype=np.float32)
            m[:, :, top : top + patch, left : left + patch] = 1.0
            masks.append(m)
    return masks


def sample_interaction_layout(n_units, samples, rng):
    """Sample (pair, context) lists: unit pairs plus random unit subsets."""
    pairs = []
    contexts = []
    for _ in range(samples):
        i, j = rng.choice(n_units, size=2, replace=False)
        ctx = rng.random(n_units) < 0.5
        ctx[i] = ctx[j] = False
        pairs.append((int(i), int(j)))
        contexts.append(ctx)
    return pairs, contexts


def ir_loss(model: ModelHandle, x_adv, x_clean, labels, lam, samples, seed, patch=8):
    """Cross-entropy minus the sampled interaction penalty."""
    logits, _ = forward(model, x_adv)
    ce, _ = cross_entropy(logits, labels)
    if lam == 0.0:
        return ce
    delta = x_adv - x_clean
    masks = patch_unit_masks(x_clean.shape, patch)
    rng = np.random.default_rng(seed)
    pairs, contexts = sample_interaction_layout(len(masks), samples, rng)

    def loss_at(d):
        lg, _ = forward(model, x_clean + d)
        return cross_entropy(lg, labels)[0]

    est = interaction_estimate(loss_at, delta, masks, pairs, contexts)
    return ce - lam * est


def _ir_grad(model, x_adv, x_clean, labels, lam, samples, seed, patch, surgery, dtype):
    g_ce = _plain_grad(model, x_adv, labels, surgery, dtype)
    if lam == 0.0:
        return g_ce
    delta = x_adv - x_clean
    masks = patch_unit_masks(x_clean.shape, patch)
    rng = np.random.default_rng(seed)
    pairs, contexts = sample_interaction_layout(len(masks), samples, rng)
    g_int = np.zeros_like(g_ce)
    for (i, j), ctx in zip(pairs, contexts):
        ctx_mask = np.zeros_like(masks[0])
        for u, inside in enumerate(ctx):
            if inside and u != i and u != j:
                ctx_mask = ctx_mask + masks[u]
        # four corners of the interaction difference, each masked to the
        # units that actually carry perturbation at that corner
        for extra, sign in ((masks[i] + masks[j], 1.0), (masks[i], -1.0), (masks[j], -1.0), (None, 1.0)):
            mask = ctx_mask if extra is None else ctx_mask + extra
            g = _plain_grad(model, x_clean + delta * mask, labels, surgery, dtype)
            g_int += sign * g * mask
    g_int /= len(pairs)
    return g_ce - lam * g_int


def _plain_grad(model, batch, labels, surgery, dtype):
    acts, caches = _forward_graph(model, batch, dtype=dtype)
    _, dlogits = cross_entropy(acts[model.output_name], labels)
    dx, _ = _backward_graph(model, acts, caches, {model.output_name: dlogits}, surgery)
    return dx


# ---------------------------------------------------------------------------
# public gradient entry points


def grad_input(model: ModelHandle, batch: np.ndarray, labels: np.ndarray, loss: LossSpec | None = None,
               surgery: GradSurgery | None = None, dtype=None) -> np.ndarray:
    """Gradient of the selected loss with respect to the input batch."""
    loss = loss or LossSpec()
    surgery = surgery or DEFAULT_SURGERY
    surgery.validate(model)
    if model.arch == "snn":
        from . import spiking

        if loss.kind not in ("cross-entropy", "targeted-cross-entropy"):
            raise UnsupportedLossError(f"{loss.kind} is not defined for spiking networks")
        return spiking.surrogate_grad(model, batch, labels, model.spec.get("surrogate_slope", 1.0), dtype=dtype)
    if loss.kind in ("cross-entropy", "targeted-cross-entropy"):
        return _plain_grad(model, batch, labels, surgery, dtype)
    if loss.kind == "se-sum":
        acts, caches = _forward_graph(model, batch, dtype=dtype)
        _, dlog_f, seeds = se_sum_loss(model, acts, labels, dtype=dtype)
        seeds[model.output_name] = dlog_f
        dx, _ = _backward_graph(model, acts, caches, seeds, surgery)
        return dx
    if loss.kind == "ila-projection":
        layer = loss.params["layer"]
        if not model.has_node(layer):
            raise ConfigError(f"ila layer {layer!r} not present in model {model.arch}")
        ref_disp = loss.params["ref_feats"] - loss.params["clean_feats"]
        acts, caches = _forward_graph(model, batch, dtype=dtype)
        seed = ref_disp.astype(acts[INPUT].dtype, copy=False)
        dx, _ = _backward_graph(model, acts, caches, {layer: seed}, surgery, stop_at=layer)
        return dx
    if loss.kind == "ce-plus-ir":
        p = loss.params
        return _ir_grad(model, batch, p["clean"], labels, p["lam"], p["samples"], p["seed"], p.get("patch", 8), surgery, dtype)
    raise UnsupportedLossError(f"unhandled loss kind {loss.kind!r}")  # pragma: no cover


def loss_value(model: ModelHandle, batch, labels, loss: LossSpec | None = None, dtype=None) -> float:
    """Scalar loss matching grad_input's definition (for finite differences)."""
    loss = loss or LossSpec()
    if model.arch == "snn":
        from . import spiking

        logits, _ = spiking.snn_forward(model, batch, DEFAULT_SURGERY, dtype=dtype)
        return cross_entropy(logits, labels)[0]
    acts, _ = _forward_graph(model, batch, dtype=dtype, need_cache=False)
    if loss.kind in ("cross-entropy", "targeted-cross-entropy"):
        return cross_entropy(acts[model.output_name], labels)[0]
    if loss.kind == "se-sum":
        acts2, _ = _forward_graph(model, batch, dtype=dtype)
        total, _, _ = se_sum_loss(model, acts2, labels, dtype=dtype)
        return total
    if loss.kind == "ila-projection":
        layer = loss.params["layer"]
        cur = acts[layer]
        return float(np.dot((cur - loss.params["clean_feats"]).ravel(),
                            (loss.params["ref_feats"] - loss.params["clean_feats"]).ravel()))
    if loss.kind == "ce-plus-ir":
        p = loss.params
        return ir_loss(model, batch, p["clean"], labels, p["lam"], p["samples"], p["seed"], p.get("patch", 8))
    raise UnsupportedLossError(f"unhandled loss kind {loss.kind!r}")  # pragma: no cover


def finite_diff_grad(model: ModelHandle, batch, labels, loss: LossSpec | None = None,
                     coords=None, h: float = 1e-3, dtype=np.float64) -> np.ndarray:
    """Central-difference gradient at the given flat coordinates (test oracle)."""
    if h <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    flat = batch.reshape(-1)
    coords = list(coords) if coords is not None else list(range(flat.size))
    values = np.empty(len(coords), dtype=np.float64)
    for out_i, ci in enumerate(coords):
        ci = int(np.ravel_multi_index(ci, batch.shape)) if isinstance(ci, tuple) else int(ci)
        if not 0 <= ci < flat.size:
            raise ConfigError(f"coordinate {ci} outside batch of size {flat.size}")
        bumped = flat.astype(np.float64).copy()
        bumped[ci] += h
        up = loss_value(model, bumped.reshape(batch.shape), labels, loss, dtype=dtype)
        bumped[ci] -= 2 * h
        down = loss_value(model, bumped.reshape(batch.shape), labels, loss, dtype=dtype)
        values[out_i] = (up - down) / (2.0 * h)
    return values


def param_grads(model: ModelHandle, batch, labels):
    """Loss, mean-CE logits gradient and parameter gradients (training path)."""
    acts, caches = _forward_graph(model, batch)
    loss, dlogits = cross_entropy(acts[model.output_name], labels)
    _, pgrads = _backward_graph(model, acts, caches, {model.output_name: dlogits}, DEFAULT_SURGERY, need_param_grads=True)
    return loss, acts[model.output_name], pgrads
