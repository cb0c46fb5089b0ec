"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor


def numeric_grad(fn, params, h=1e-5, entries=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``params``.

    ``fn`` is called with no tape open and must read the parameters' current
    ``.data``. ``entries`` optionally restricts the check to a list of
    ``(param_index, flat_index)`` pairs; the result is then a flat array in
    that order, otherwise one array per parameter.
    """
    if entries is None:
        grads = []
        for p in params:
            flat = p.data.reshape(-1)
            g = np.zeros_like(flat)
            for k in range(flat.size):
                g[k] = _diff(fn, flat, k, h)
            grads.append(g.reshape(p.shape))
        return grads
    out = np.empty(len(entries))
    for n, (pi, k) in enumerate(entries):
        out[n] = _diff(fn, params[pi].data.reshape(-1), k, h)
    return out


def _diff(fn, flat, k, h):
    old = flat[k]
    flat[k] = old + h
    up = _scalar(fn())
    flat[k] = old - h
    down = _scalar(fn())
    flat[k] = old
    return (up - down) / (2.0 * h)


def _scalar(v):
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).sum())


def tape_grad(fn, params):
    """Gradients of scalar ``fn()`` w.r.t. ``params`` by reverse mode."""
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def relative_error(analytic, numeric, floor=1e-12):
    """||a - n|| / max(||a||, ||n||), the usual gradient-check ratio."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
