"""Builders for the four desk-scale architecture families.

Every builder initializes deterministically from its seed. Widths are kept
small so a full benchmark run stays within a laptop-CPU budget; they are
overridable through the arch spec dict.
"""

from __future__ import annotations

import numpy as np

from ..autodiff.graph import LayerNode, ModelHandle
from ..errors import ConfigError

ARCH_FAMILIES = ("mini-vgg", "mini-resnet", "mini-incept", "mini-vit")


def _he_conv(rng, cout, cin, k):
    scale = np.sqrt(2.0 / (cin * k * k))
    return (rng.standard_normal((cout, cin, k, k)) * scale).astype(np.float32)


def _xavier(rng, fin, fout):
    scale = np.sqrt(2.0 / (fin + fout))
    return (rng.standard_normal((fin, fout)) * scale).astype(np.float32)


def _zeros(*shape):
    return np.zeros(shape, dtype=np.float32)


def _conv(rng, name, cin, cout, inp, stride=1, k=3):
    return LayerNode(
        "conv2d", name, [inp],
        {"w": _he_conv(rng, cout, cin, k), "b": _zeros(cout)},
        {"stride": stride, "pad": k // 2},
    )


def _linear(rng, name, fin, fout, inp):
    return LayerNode("linear", name, [inp], {"w": _xavier(rng, fin, fout), "b": _zeros(fout)})


def _bn(name, c, inp):
    return LayerNode(
        "batchnorm-frozen", name, [inp],
        {"gamma": np.ones(c, dtype=np.float32), "beta": _zeros(c),
         "mean": _zeros(c), "var": np.ones(c, dtype=np.float32)},
    )


def _ln(name, d, inp):
    return LayerNode("layernorm", name, [inp], {"gamma": np.ones(d, dtype=np.float32), "beta": _zeros(d)})


def build_model(arch_spec: dict, seed: int) -> ModelHandle:
    """Instantiate a freshly initialized model from an arch spec dict."""
    spec = dict(arch_spec)
    family = spec.get("family")
    if family == "mini-vgg":
        return _build_vgg(spec, seed)
    if family == "mini-resnet":
        return _build_resnet(spec, seed)
    if family == "mini-incept":
        return _build_incept(spec, seed)
    if family == "mini-vit":
        return _build_vit(spec, seed)
    raise ConfigError(f"unknown architecture family {family!r}")


def _build_vgg(spec, seed):
    rng = np.random.default_rng(seed)
    w = int(spec.setdefault("width", 8))
    size = int(spec.setdefault("image_size", 32))
    k = int(spec.setdefault("num_classes", 10))
    g = [
        _conv(rng, "conv1", 3, w, "input"),
        LayerNode("relu", "relu1", ["conv1"]),
        LayerNode("maxpool", "pool1", ["relu1"]),
        _conv(rng, "conv2", w, 2 * w, "pool1"),
        LayerNode("relu", "relu2", ["conv2"]),
        LayerNode("maxpool", "pool2", ["relu2"]),
        _conv(rng, "conv3", 2 * w, 3 * w, "pool2"),
        LayerNode("relu", "relu3", ["conv3"]),
        LayerNode("maxpool", "pool3", ["relu3"]),
        LayerNode("flatten", "flat", ["pool3"]),
        _linear(rng, "fc1", 3 * w * (size // 8) ** 2, 8 * w, "flat"),
        LayerNode("relu", "relu4", ["fc1"]),
        _linear(rng, "head", 8 * w, k, "relu4"),
    ]
    meta = {"ila_layer": "relu2", "linbp_default": "relu2"}
    return ModelHandle("mini-vgg", spec, g, (3, size, size), k, meta)


def _build_resnet(spec, seed):
    rng = np.random.default_rng(seed)
    w = int(spec.setdefault("width", 12))
    size = int(spec.setdefault("image_size", 32))
    k = int(spec.setdefault("num_classes", 10))
    g = [
        _conv(rng, "stem", 3, w, "input"),
        _bn("stem_bn", w, "stem"),
        LayerNode("relu", "stem_relu", ["stem_bn"]),
        LayerNode("maxpool", "stem_pool", ["stem_relu"]),
        # block 1: identity skip
        _conv(rng, "b1_conv1", w, w, "stem_pool"),
        _bn("b1_bn1", w, "b1_conv1"),
        LayerNode("relu", "b1_relu1", ["b1_bn1"]),
        _conv(rng, "b1_conv2", w, w, "b1_relu1"),
        _bn("b1_bn2", w, "b1_conv2"),
        LayerNode("residual-add", "b1_add", ["b1_bn2", "stem_pool"], attrs={"skip": "stem_pool"}),
        LayerNode("relu", "b1_relu2", ["b1_add"]),
        # block 2: strided, projected skip
        _conv(rng, "b2_conv1", w, 2 * w, "b1_relu2", stride=2),
        _bn("b2_bn1", 2 * w, "b2_conv1"),
        LayerNode("relu", "b2_relu1", ["b2_bn1"]),
        _conv(rng, "b2_conv2", 2 * w, 2 * w, "b2_relu1"),
        _bn("b2_bn2", 2 * w, "b2_conv2"),
        _conv(rng, "b2_proj", w, 2 * w, "b1_relu2", stride=2, k=1),
        _bn("b2_proj_bn", 2 * w, "b2_proj"),
        LayerNode("residual-add", "b2_add", ["b2_bn2", "b2_proj_bn"], attrs={"skip": "b2_proj_bn"}),
        LayerNode("relu", "b2_relu2", ["b2_add"]),
        LayerNode("avgpool", "gap", ["b2_relu2"]),
        _linear(rng, "head", 2 * w, k, "gap"),
    ]
    meta = {"ila_layer": "b1_relu2", "linbp_default": "b1_relu1", "saliency_node": "b2_relu2"}
    return ModelHandle("mini-resnet", spec, g, (3, size, size), k, meta)


def _build_incept(spec, seed):
    rng = np.random.default_rng(seed)
    w = int(spec.setdefault("width", 10))
    size = int(spec.setdefault("image_size", 32))
    k = int(spec.setdefault("num_classes", 10))
    g = [
        _conv(rng, "stem", 3, w, "input"),
        LayerNode("relu", "stem_relu", ["stem"]),
        LayerNode("maxpool", "stem_pool", ["stem_relu"]),
        # parallel filter block: 3x3 and 1x1 branches summed
        _conv(rng, "br3x3", w, 2 * w, "stem_pool"),
        _conv(rng, "br1x1", w, 2 * w, "stem_pool", k=1),
        LayerNode("residual-add", "mix", ["br3x3", "br1x1"], attrs={"skip": "br1x1"}),
        LayerNode("relu", "mix_relu", ["mix"]),
        LayerNode("maxpool", "mix_pool", ["mix_relu"]),
        _conv(rng, "conv3", 2 * w, 3 * w, "mix_pool"),
        LayerNode("relu", "relu3", ["conv3"]),
        LayerNode("avgpool", "gap", ["relu3"]),
        _linear(rng, "head", 3 * w, k, "gap"),
    ]
    meta = {"ila_layer": "mix_relu", "linbp_default": "mix_relu", "saliency_node": "relu3"}
    return ModelHandle("mini-incept", spec, g, (3, size, size), k, meta)


def _build_vit(spec, seed):
    rng = np.random.default_rng(seed)
    patch = int(spec.setdefault("patch_size", 8))
    depth = int(spec.setdefault("depth", 2))
    heads = int(spec.setdefault("heads", 4))
    dim = int(spec.setdefault("dim", 48))
    mlp = int(spec.setdefault("mlp_dim", 2 * dim))
    size = int(spec.setdefault("image_size", 32))
    k = int(spec.setdefault("num_classes", 10))
    if size % patch:
        raise ConfigError(f"patch size {patch} does not divide image size {size}")
    if dim % heads:
        raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
    n_tokens = (size // patch) ** 2 + 1
    g = [
        LayerNode(
            "patch-embed", "embed", ["input"],
            {
                "w": _xavier(rng, 3 * patch * patch, dim),
                "b": _zeros(dim),
                "cls": (rng.standard_normal((1, 1, dim)) * 0.02).astype(np.float32),
                "pos": (rng.standard_normal((n_tokens, dim)) * 0.02).astype(np.float32),
            },
            {"patch": patch},
        )
    ]
    prev = "embed"
    blocks = []
    for b in range(depth):
        attn_params = {
            "wq": _xavier(rng, dim, dim), "bq": _zeros(dim),
            "wk": _xavier(rng, dim, dim), "bk": _zeros(dim),
            "wv": _xavier(rng, dim, dim), "bv": _zeros(dim),
            "wo": _xavier(rng, dim, dim), "bo": _zeros(dim),
        }
        g += [
            _ln(f"blk{b}_ln1", dim, prev),
            LayerNode("multi-head-attention", f"blk{b}_attn", [f"blk{b}_ln1"], attn_params, {"heads": heads}),
            LayerNode("residual-add", f"blk{b}_add1", [f"blk{b}_attn", prev], attrs={"skip": prev}),
            _ln(f"blk{b}_ln2", dim, f"blk{b}_add1"),
            _linear(rng, f"blk{b}_fc1", dim, mlp, f"blk{b}_ln2"),
            LayerNode("gelu", f"blk{b}_gelu", [f"blk{b}_fc1"]),
            _linear(rng, f"blk{b}_fc2", mlp, dim, f"blk{b}_gelu"),
            LayerNode("residual-add", f"blk{b}_add2", [f"blk{b}_fc2", f"blk{b}_add1"], attrs={"skip": f"blk{b}_add1"}),
        ]
        prev = f"blk{b}_add2"
        blocks.append(prev)
    g += [
        _ln("final_ln", dim, prev),
        LayerNode("take-token", "cls_tok", ["final_ln"], attrs={"index": 0}),
        _linear(rng, "head", dim, k, "cls_tok"),
    ]
    meta = {
        "block_outputs": blocks,
        "se_head": {"layernorm": "final_ln", "take_token": "cls_tok", "linear": "head"},
        "ila_layer": blocks[max(0, depth // 2 - 1)],
    }
    return ModelHandle("mini-vit", spec, g, (3, size, size), k, meta)
