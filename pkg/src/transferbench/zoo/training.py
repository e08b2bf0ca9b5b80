"""Seeded Adam training loop and accuracy evaluation for zoo members."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import engine
from ..errors import TrainingError


@dataclass
class TrainHyper:
    epochs: int = 6
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0

    def as_dict(self) -> dict:
        return {"epochs": self.epochs, "lr": self.lr, "batch_size": self.batch_size,
                "seed": self.seed, "weight_decay": self.weight_decay}


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    test_accuracy: float = 0.0
    train_accuracy: float = 0.0


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params  # dict qualified name -> array (updated in place)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for key, p in self.params.items():
            g = grads.get(key)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr / b1c) * m / (np.sqrt(v / b2c) + self.eps)


def calibrate_frozen_batchnorm(model, batch) -> None:
    """Set batchnorm buffers from data statistics, sequentially per layer.

    Stats stay fixed afterwards: training only learns the affine terms, and
    attack generation never touches them.
    """
    for node in model.graph:
        if node.kind != "batchnorm-frozen":
            continue
        acts, _ = engine._forward_graph(model, batch, need_cache=False)
        a = acts[node.inputs[0]]
        node.params["mean"] = a.mean(axis=(0, 2, 3)).astype(np.float32)
        node.params["var"] = a.var(axis=(0, 2, 3)).astype(np.float32)


def accuracy(model, images, labels, batch=500) -> float:
    hits = 0
    for i in range(0, len(labels), batch):
        logits, _ = engine.forward(model, images[i : i + batch])
        hits += int((logits.argmax(axis=1) == labels[i : i + batch]).sum())
    return hits / len(labels)


def train_model(model, dataset, hyper: TrainHyper):
    """Train in place; returns (model, TrainReport). Raises on divergence."""
    x_tr, y_tr, x_te, y_te = dataset if isinstance(dataset, tuple) else dataset.load()
    trainable = {
        name: arr
        for name, arr in model.named_params()
        if not (name.endswith("/mean") or name.endswith("/var"))
    }
    opt = Adam(trainable, hyper.lr, weight_decay=hyper.weight_decay)
    rng = np.random.default_rng(hyper.seed)
    report = TrainReport()
    step = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(y_tr))
        epoch_loss = 0.0
        n_batches = 0
        for i in range(0, len(order), hyper.batch_size):
            idx = order[i : i + hyper.batch_size]
            loss, _, pgrads = engine.param_grads(model, x_tr[idx], y_tr[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at step {step} (epoch {epoch})")
            opt.step(pgrads)
            epoch_loss += loss
            n_batches += 1
            step += 1
        report.train_loss.append(epoch_loss / max(n_batches, 1))
    report.test_accuracy = accuracy(model, x_te, y_te)
    report.train_accuracy = accuracy(model, x_tr, y_tr)
    return model, report
