"""Numpy reference implementation of the batched attention kernel.

Shapes: q [B,n,d], k [B,m,d], v [B,m,d]. The softmax is stabilized by
row-max subtraction. ``probs`` is returned so the backward pass does not
recompute it.
"""

import numpy as np


def attention_forward(q, k, v, scale):
    """softmax(q kᵀ · scale) v, batched. Returns (out [B,n,d], probs [B,n,m])."""
    logits = (q @ k.transpose(0, 2, 1)) * scale
    logits -= logits.max(axis=2, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=2, keepdims=True)
    return probs @ v, probs


def attention_backward(q, k, v, probs, d_out, scale):
    """Gradients of attention_forward. Returns (dq, dk, dv)."""
    dv = probs.transpose(0, 2, 1) @ d_out
    dp = d_out @ v.transpose(0, 2, 1)
    ds = probs * (dp - (dp * probs).sum(axis=2, keepdims=True))
    dq = (ds @ k) * scale
    dk = (ds.transpose(0, 2, 1) @ q) * scale
    return dq, dk, dv
