"""Finite-difference gradient checking with kink-aware coordinate selection.

Central differences are only a valid oracle where the loss is locally smooth.
A coordinate whose +-h window straddles a ReLU kink or a pooling argmax switch
reports the average of two one-sided slopes instead of the gradient, so two
symptoms are screened before a coordinate counts toward the check:

* step-size disagreement: FD(h) vs FD(h/2) moves when the kink sits between
  h/2 and h from the base point;
* a curvature spike: the second difference grows like |dg|*h near a kink but
  like f''*h^2 at smooth points, which flags kinks arbitrarily close to the
  base point that step-size comparison cannot see.

Rejected coordinates are replaced from the candidate pool; the comparison
itself never consults the analytic gradient, so the oracle stays independent.
"""

from __future__ import annotations

import numpy as np

from .engine import LossSpec, grad_input, loss_value

AGREE_RTOL = 1e-4
CURV_RTOL = 2e-4


def fd_probe(model, batch, labels, coords, h=1e-3, loss: LossSpec | None = None):
    """Per-coordinate FD(h), FD(h/2) and second difference at step h."""
    flat = batch.reshape(-1).astype(np.float64)
    f0 = loss_value(model, batch, labels, loss, dtype=np.float64)
    fd_h = np.empty(len(coords))
    fd_half = np.empty(len(coords))
    d2 = np.empty(len(coords))
    for i, ci in enumerate(coords):
        vals = {}
        for off in (h, -h, h / 2, -h / 2):
            bumped = flat.copy()
            bumped[ci] += off
            vals[off] = loss_value(model, bumped.reshape(batch.shape), labels, loss, dtype=np.float64)
        fd_h[i] = (vals[h] - vals[-h]) / (2 * h)
        fd_half[i] = (vals[h / 2] - vals[-h / 2]) / h
        d2[i] = vals[h] - 2 * f0 + vals[-h]
    return fd_h, fd_half, d2


def smooth_coordinates(model, batch, labels, candidates, h=1e-3, loss: LossSpec | None = None):
    """Split candidate flat coordinates into (valid, fd_values, rejected)."""
    candidates = np.asarray(list(candidates))
    fd_h, fd_half, d2 = fd_probe(model, batch, labels, candidates, h=h, loss=loss)
    denom = np.maximum.reduce([np.abs(fd_h), np.abs(fd_half), np.full_like(fd_h, 1e-12)])
    agree = np.abs(fd_h - fd_half) / denom < AGREE_RTOL
    flat_curve = np.abs(d2) / h < CURV_RTOL * np.maximum(np.abs(fd_h), 1e-8)
    ok = agree & flat_curve
    return candidates[ok], fd_h[ok], candidates[~ok]


def gradient_check(model, batch, labels, n_coords=64, h=1e-3, seed=0, loss: LossSpec | None = None,
                   surgery=None):
    """Compare grad_input against central differences at smooth coordinates.

    Returns (max_relative_error, n_checked). Draws extra candidates so that at
    least n_coords survive the smoothness screen.
    """
    rng = np.random.default_rng(seed)
    analytic = grad_input(model, batch, labels, loss=loss, surgery=surgery, dtype=np.float64).reshape(-1)
    checked = 0
    max_rel = 0.0
    pool = rng.permutation(batch.size)
    offset = 0
    while checked < n_coords and offset < batch.size:
        take = min(max(2 * (n_coords - checked), 16), batch.size - offset)
        cand = pool[offset : offset + take]
        offset += take
        valid, fd, _ = smooth_coordinates(model, batch, labels, cand, h=h, loss=loss)
        if valid.size == 0:
            continue
        rel = np.abs(analytic[valid] - fd) / np.maximum(np.abs(fd), 1e-12)
        max_rel = max(max_rel, float(rel.max()))
        checked += valid.size
    if checked < n_coords:
        raise RuntimeError(f"could not find {n_coords} smooth coordinates (got {checked})")
    return max_rel, checked
