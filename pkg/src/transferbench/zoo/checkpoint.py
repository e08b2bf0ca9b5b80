"""Checkpoint format: JSON manifest plus one little-endian float32 raw blob.

The manifest describes the full graph structure and indexes every tensor by
name, dtype, shape and byte offset. Round-trips are bit-exact, which the
benchmark relies on for byte-identical reruns from a warm cache.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from ..autodiff.graph import LayerNode, ModelHandle
from ..errors import DataError

MANIFEST = "manifest.json"
BLOB = "weights.bin"
SCHEMA = 1


def _public_meta(meta: dict) -> dict:
    return {k: v for k, v in meta.items() if not k.startswith("_")}


def save_model(model: ModelHandle, out_dir: str, extra: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    tensors = []
    chunks = []
    offset = 0
    for node in model.graph:
        for pname in sorted(node.params):
            arr = np.ascontiguousarray(node.params[pname], dtype="<f4")
            tensors.append({
                "name": f"{node.name}/{pname}",
                "dtype": "float32",
                "shape": list(arr.shape),
                "offset": offset,
            })
            chunks.append(arr.tobytes())
            offset += len(chunks[-1])
    manifest = {
        "schema": SCHEMA,
        "arch": model.arch,
        "spec": model.spec,
        "input_spec": list(model.input_spec),
        "num_classes": model.num_classes,
        "meta": _public_meta(model.meta),
        "graph": [
            {"kind": n.kind, "name": n.name, "inputs": list(n.inputs), "attrs": n.attrs}
            for n in model.graph
        ],
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, BLOB), "wb") as fh:
        fh.write(b"".join(chunks))


def load_model(ckpt_dir: str) -> ModelHandle:
    mpath = os.path.join(ckpt_dir, MANIFEST)
    bpath = os.path.join(ckpt_dir, BLOB)
    if not (os.path.exists(mpath) and os.path.exists(bpath)):
        raise DataError(f"no checkpoint at {ckpt_dir}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("schema") != SCHEMA:
        raise DataError(f"unsupported checkpoint schema {manifest.get('schema')!r}")
    blob = np.fromfile(bpath, dtype="<f4")
    arrays = {}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        start = t["offset"] // 4
        arrays[t["name"]] = blob[start : start + count].reshape(t["shape"]).copy()
    graph = []
    for spec in manifest["graph"]:
        prefix = spec["name"] + "/"
        params = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        graph.append(LayerNode(spec["kind"], spec["name"], list(spec["inputs"]), params, dict(spec["attrs"])))
    return ModelHandle(
        manifest["arch"], manifest["spec"], graph,
        tuple(manifest["input_spec"]), manifest["num_classes"], dict(manifest["meta"]),
    )


def load_extra(ckpt_dir: str) -> dict:
    with open(os.path.join(ckpt_dir, MANIFEST)) as fh:
        return json.load(fh).get("extra", {})


def content_hash(ckpt_dir: str) -> str:
    h = hashlib.sha256()
    for name in (MANIFEST, BLOB):
        with open(os.path.join(ckpt_dir, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# cache


def cache_root() -> str:
    return os.environ.get("BENCH_CACHE_DIR") or os.path.join(
        os.path.expanduser("~"), ".cache", "transferbench"
    )


def cache_key(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:24]


def cache_dir_for(payload: dict) -> str:
    return os.path.join(cache_root(), cache_key(payload))


def cached(payload: dict) -> str | None:
    d = cache_dir_for(payload)
    if os.path.exists(os.path.join(d, MANIFEST)) and os.path.exists(os.path.join(d, BLOB)):
        return d
    return None
