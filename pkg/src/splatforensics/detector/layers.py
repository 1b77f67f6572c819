"""Forward/backward pairs for the detector's building blocks.

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the input gradient plus
a dict of parameter gradients keyed like the parameters it consumed.
"""

from __future__ import annotations

import numpy as np

from ..errors import EmptySceneError

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)
_MASKED = -1e30


def layer_norm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    d = xhat.shape[-1]
    dx = rstd / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dg, db


def gelu_forward(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def window_attention_forward(p, h, windows, heads):
    """Multi-head self-attention restricted to each window.

    ``h`` is ``[M, D]``; ``windows`` is ``[nW, K]`` of row ids with -1 pads.
    Rows never attend outside their own window.
    """
    m, d = h.shape
    nw, k = windows.shape
    dh = d // heads
    valid = windows >= 0
    idx = np.where(valid, windows, 0)
    hw = h[idx] * valid[..., None]

    def split(t):
        return t.reshape(nw, k, heads, dh).transpose(0, 2, 1, 3)

    q = split(hw @ p["wq"])
    kk = split(hw @ p["wk"])
    v = split(hw @ p["wv"])
    scale = 1.0 / np.sqrt(dh)
    s = (q @ kk.transpose(0, 1, 3, 2)) * scale
    s = np.where(valid[:, None, None, :], s, _MASKED)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(axis=-1, keepdims=True)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(nw, k, d)
    y = o @ p["wo"] + p["bo"]
    out = np.zeros_like(h)
    out[windows[valid]] = y[valid]
    return out, (hw, q, kk, v, a, o, valid, idx, scale, heads)


def window_attention_backward(dout, p, cache):
    hw, q, kk, v, a, o, valid, idx, scale, heads = cache
    nw, k, d = hw.shape
    dh = d // heads
    dy = dout[idx] * valid[..., None]
    g = {
        "wo": np.einsum("wkd,wke->de", o, dy),
        "bo": dy.sum(axis=(0, 1)),
    }
    do = (dy @ p["wo"].T).reshape(nw, k, heads, dh).transpose(0, 2, 1, 3)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ kk
    dk = ds.transpose(0, 1, 3, 2) @ q

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(nw, k, d)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    g["wq"] = np.einsum("wkd,wke->de", hw, dq)
    g["wk"] = np.einsum("wkd,wke->de", hw, dk)
    g["wv"] = np.einsum("wkd,wke->de", hw, dv)
    dhw = dq @ p["wq"].T + dk @ p["wk"].T + dv @ p["wv"].T
    dh = np.zeros((dout.shape[0], d), dtype=dout.dtype)
    dh[idx[valid]] = dhw[valid]
    return dh, g


def block_forward(p, x, windows, heads):
    """Pre-norm transformer block: x + attn(ln1(x)), then + ffn(ln2(.))."""
    h1, c_ln1 = layer_norm_forward(x, p["ln1.g"], p["ln1.b"])
    att, c_att = window_attention_forward(_sub(p, "attn."), h1, windows, heads)
    x1 = x + att
    h2, c_ln2 = layer_norm_forward(x1, p["ln2.g"], p["ln2.b"])
    z = h2 @ p["ff.w1"] + p["ff.b1"]
    u, c_gelu = gelu_forward(z)
    f = u @ p["ff.w2"] + p["ff.b2"]
    return x1 + f, (c_ln1, c_att, c_ln2, h2, u, c_gelu)


def block_backward(dout, p, cache):
    c_ln1, c_att, c_ln2, h2, u, c_gelu = cache
    g = {}
    g["ff.w2"] = u.T @ dout
    g["ff.b2"] = dout.sum(axis=0)
    du = dout @ p["ff.w2"].T
    dz = gelu_backward(du, c_gelu)
    g["ff.w1"] = h2.T @ dz
    g["ff.b1"] = dz.sum(axis=0)
    dh2 = dz @ p["ff.w1"].T
    dx1_ln, g["ln2.g"], g["ln2.b"] = layer_norm_backward(dh2, c_ln2)
    dx1 = dout + dx1_ln
    dh1, g_att = window_attention_backward(dx1, _sub(p, "attn."), c_att)
    g.update({f"attn.{k}": v for k, v in g_att.items()})
    dx_ln, g["ln1.g"], g["ln1.b"] = layer_norm_backward(dh1, c_ln1)
    return dx1 + dx_ln, g


def scene_mean_pool(features, offsets):
    """Average rows ``offsets[b]:offsets[b+1]`` for every scene ``b``."""
    offsets = np.asarray(offsets)
    counts = np.diff(offsets)
    if offsets[0] != 0 or offsets[-1] != features.shape[0] or np.any(counts <= 0):
        raise EmptySceneError("scene offsets must start at 0, end at M and be strictly increasing")
    sums = np.add.reduceat(features, offsets[:-1], axis=0)
    return sums / counts[:, None]


def scene_mean_pool_backward(dpooled, offsets):
    counts = np.diff(np.asarray(offsets))
    return np.repeat(dpooled / counts[:, None], counts, axis=0)


def _sub(p, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}
