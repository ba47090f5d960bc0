"""A small tape-free reverse-mode differentiation engine.

Only the operations used by the score network are provided: 3x3 "same"
convolution with bias, SiLU, channel concatenation and per-sample scaling.
Activations use NHWC layout ``(batch, height, width, channels)``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class Var:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _accumulate(v: Var, g) -> None:
    if not v.requires_grad:
        return
    v.grad = g if v.grad is None else v.grad + g


def conv2d(x: Var, w: Var, b: Var) -> Var:
    """3x3 convolution, zero padding 1, stride 1. ``w`` is ``(3, 3, Cin, Cout)``."""
    B, H, W, C = x.value.shape
    kh, kw, cin, cout = w.value.shape
    if (kh, kw) != (3, 3) or cin != C:
        raise ValueError(f"kernel {w.value.shape} incompatible with input {x.value.shape}")
    xp = np.pad(x.value, ((0, 0), (1, 1), (1, 1), (0, 0)))
    offsets = [(dy, dx) for dy in range(3) for dx in range(3)]
    cols = np.concatenate([xp[:, dy : dy + H, dx : dx + W, :] for dy, dx in offsets], axis=-1)
    cols = cols.reshape(B * H * W, 9 * C)
    wm = w.value.reshape(9 * C, cout)
    out = (cols @ wm + b.value).reshape(B, H, W, cout)

    def backward(g):
        g2 = g.reshape(B * H * W, cout)
        if w.requires_grad:
            _accumulate(w, (cols.T @ g2).reshape(w.value.shape))
        if b.requires_grad:
            _accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wm.T).reshape(B, H, W, 9, C)
            dxp = np.zeros_like(xp)
            for k, (dy, dx) in enumerate(offsets):
                dxp[:, dy : dy + H, dx : dx + W, :] += dcols[:, :, :, k, :]
            _accumulate(x, dxp[:, 1:-1, 1:-1, :])

    return Var(out, (x, w, b), backward)


def silu(x: Var) -> Var:
    sig = expit(x.value)
    out = x.value * sig

    def backward(g):
        _accumulate(x, g * (sig * (1.0 + x.value * (1.0 - sig))))

    return Var(out, (x,), backward)


def concat_channels(*xs: Var) -> Var:
    out = np.concatenate([x.value for x in xs], axis=-1)
    splits = np.cumsum([x.value.shape[-1] for x in xs])[:-1]

    def backward(g):
        for x, gi in zip(xs, np.split(g, splits, axis=-1)):
            _accumulate(x, gi)

    return Var(out, tuple(xs), backward)


def scale(x: Var, s) -> Var:
    """Multiply by a constant broadcastable array (e.g. one scalar per sample)."""
    s = np.asarray(s, dtype=x.value.dtype)
    out = x.value * s

    def backward(g):
        _accumulate(x, g * s)

    return Var(out, (x,), backward)


def backward(out: Var, cotangent) -> None:
    """Propagate ``cotangent`` from ``out`` into every reachable leaf's ``grad``."""
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents)
    out.grad = np.asarray(cotangent, dtype=out.value.dtype)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
