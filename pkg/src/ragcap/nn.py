"""Minimal numpy transformer layers with hand-written backward passes.

Every forward function returns ``(output, cache)`` and the matching backward
takes ``(grad_output, cache)``. Nothing is stored on module objects, so any
number of forward passes can run concurrently over the same frozen weights.

Weights handled here are frozen: backward passes return gradients with respect
to layer *inputs* only.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5


def freeze(params):
    """Mark every array in a nested dict/list read-only, in place."""
    if isinstance(params, np.ndarray):
        params.setflags(write=False)
    elif isinstance(params, dict):
        for v in params.values():
            freeze(v)
    elif isinstance(params, (list, tuple)):
        for v in params:
            freeze(v)
    return params


def checksum(params) -> str:
    """sha256 over a nested dict / list of arrays in deterministic key order."""
    h = hashlib.sha256()

    def walk(prefix, obj):
        if isinstance(obj, dict):
            for key in sorted(obj):
                walk(f"{prefix}/{key}", obj[key])
        elif isinstance(obj, (list, tuple)):
            for i, item in enumerate(obj):
                walk(f"{prefix}/{i}", item)
        elif obj is not None:
            arr = np.ascontiguousarray(obj)
            h.update(prefix.encode())
            h.update(str(arr.dtype).encode() + str(arr.shape).encode())
            h.update(arr.tobytes())

    walk("", params)
    return h.hexdigest()


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, scale: float | None = None) -> dict:
    scale = 1.0 / math.sqrt(n_in) if scale is None else scale
    return {"w": rng.normal(0.0, scale, (n_in, n_out)), "b": np.zeros(n_out)}


def init_layer_norm(d: int) -> dict:
    return {"g": np.ones(d), "b": np.zeros(d)}


def init_attention(rng: np.random.Generator, d: int) -> dict:
    return {name: init_linear(rng, d, d) for name in ("q", "k", "v", "o")}


def init_ffn(rng: np.random.Generator, d: int, hidden: int) -> dict:
    return {"in": init_linear(rng, d, hidden), "out": init_linear(rng, hidden, d)}


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=DTYPE)[:, None]
    i = np.arange(0, d, 2, dtype=DTYPE)
    angle = pos / np.power(10000.0, i / d)
    out = np.zeros((n, d), dtype=DTYPE)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : d // 2])
    return out


def layer_norm(x, p, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * p["g"] + p["b"], (xhat, inv, p["g"])


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def feed_forward(x, p):
    h = x @ p["in"]["w"] + p["in"]["b"]
    a, gcache = gelu(h)
    return a @ p["out"]["w"] + p["out"]["b"], (gcache, p)


def feed_forward_backward(dy, cache):
    gcache, p = cache
    da = dy @ p["out"]["w"].T
    return gelu_backward(da, gcache) @ p["in"]["w"].T


def softmax(s, axis=-1):
    m = np.max(s, axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(s, axis=-1):
    m = np.max(s, axis=axis, keepdims=True)
    z = s - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention(xq, xkv, p, n_heads: int, mask=None):
    """Multi-head attention of ``xq`` (B,Tq,d) over ``xkv`` (B,Tk,d).

    ``mask`` is boolean, broadcastable to (B, H, Tq, Tk); True means attend.
    Every query row must keep at least one key.
    """
    dh = xq.shape[-1] // n_heads
    scale = 1.0 / math.sqrt(dh)
    q = _split_heads(xq @ p["q"]["w"] + p["q"]["b"], n_heads)
    k = _split_heads(xkv @ p["k"]["w"] + p["k"]["b"], n_heads)
    v = _split_heads(xkv @ p["v"]["w"] + p["v"]["b"], n_heads)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    probs = softmax(s)
    out = _merge_heads(probs @ v) @ p["o"]["w"] + p["o"]["b"]
    return out, (q, k, v, probs, scale, p, n_heads)


def attention_backward(dy, cache):
    """Returns (d xq, d xkv)."""
    q, k, v, probs, scale, p, n_heads = cache
    do = _split_heads(dy @ p["o"]["w"].T, n_heads)
    dprobs = do @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ do
    ds = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dxq = _merge_heads(dq) @ p["q"]["w"].T
    dxkv = _merge_heads(dk) @ p["k"]["w"].T + _merge_heads(dv) @ p["v"]["w"].T
    return dxq, dxkv
