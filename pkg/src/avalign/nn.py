"""Fused network primitives on top of :mod:`avalign.autodiff`.

Each op here has a hand-written backward rule instead of being composed from
smaller ops; that keeps the per-timestep graph small enough for Python.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter, ShapeError, Tensor, _make, _sigmoid_np, add, as_tensor, get_default_dtype, index, matmul

# LSTM gate layout along the 4n axis
GATES = ("input", "forget", "candidate", "output")


class Params(dict):
    """Ordered name -> :class:`Parameter` map with initialisers."""

    def create(self, name: str, shape, rng: np.random.Generator, init: str = "glorot", fill: float = 0.0):
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "glorot":
            fan_in, fan_out = _fans(shape)
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-lim, lim, size=shape)
        elif init == "const":
            data = np.full(shape, fill)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Parameter(name, data.astype(get_default_dtype()))
        self[name] = p
        return p

    def arrays(self) -> dict:
        return {k: p.data for k, p in self.items()}

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise ShapeError(f"{k}: shape {a.shape} != {p.shape}")
            p.data = a.astype(get_default_dtype(), copy=True)


def _fans(shape) -> tuple:
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = int(np.prod(shape[:-2]))
    return shape[-2] * receptive, shape[-1] * receptive


def linear(x, W, b=None) -> Tensor:
    y = matmul(x, W)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# LSTM


def lstm_params(params: Params, prefix: str, n_in: int, n: int, rng, forget_bias: float = 1.0) -> None:
    params.create(f"{prefix}.W", (n_in + n, 4 * n), rng)
    b = params.create(f"{prefix}.b", (4 * n,), rng, init="const")
    b.data[n : 2 * n] = forget_bias


def lstm_cell(x, h, c, W, b, mask=None):
    """One LSTM step.

    ``z = [x; h] W + b`` split into input, forget, candidate and output
    blocks; ``c' = f*c + i*g`` and ``h' = o*tanh(c')``. Rows whose ``mask``
    entry is 0 carry ``(h, c)`` through unchanged (padding past a sequence
    end). Accepts a single vector or a batch of row vectors.
    Returns ``(h', c')``.
    """
    x, h, c, W, b = (as_tensor(t) for t in (x, h, c, W, b))
    single = x.ndim == 1
    xd = np.atleast_2d(x.data)
    hd = np.atleast_2d(h.data)
    cd = np.atleast_2d(c.data)
    n = hd.shape[-1]
    if W.shape != (xd.shape[-1] + n, 4 * n) or b.shape != (4 * n,) or cd.shape != hd.shape:
        raise ShapeError(f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape}, W {W.shape}, b {b.shape}")
    if xd.shape[0] != hd.shape[0]:
        raise ShapeError("lstm_cell: batch sizes differ")
    xh = np.concatenate([xd, hd], axis=1)
    z = xh @ W.data + b.data
    gi = _sigmoid_np(z[:, :n])
    gf = _sigmoid_np(z[:, n : 2 * n])
    gg = np.tanh(z[:, 2 * n : 3 * n])
    go = _sigmoid_np(z[:, 3 * n :])
    c_new = gf * cd + gi * gg
    tc = np.tanh(c_new)
    h_new = go * tc
    if mask is not None:
        m = np.asarray(mask, dtype=xd.dtype).reshape(-1, 1)
        h_out = m * h_new + (1.0 - m) * hd
        c_out = m * c_new + (1.0 - m) * cd
    else:
        m = None
        h_out, c_out = h_new, c_new
    Wd = W.data
    n_in = xd.shape[1]

    def bw(g):
        g = np.atleast_2d(g)
        gh_out, gc_out = g[:, :n], g[:, n:]
        if m is not None:
            gh = m * gh_out
            gc_in = m * gc_out
        else:
            gh, gc_in = gh_out, gc_out
        gc = gc_in + gh * go * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                gc * gg * gi * (1.0 - gi),
                gc * cd * gf * (1.0 - gf),
                gc * gi * (1.0 - gg * gg),
                gh * tc * go * (1.0 - go),
            ],
            axis=1,
        )
        gW = xh.T @ dz
        gb = dz.sum(axis=0)
        gxh = dz @ Wd.T
        gx = gxh[:, :n_in]
        gh_prev = gxh[:, n_in:]
        gc_prev = gc * gf
        if m is not None:
            gh_prev = gh_prev + (1.0 - m) * gh_out
            gc_prev = gc_prev + (1.0 - m) * gc_out
        if single:
            gx, gh_prev, gc_prev = gx[0], gh_prev[0], gc_prev[0]
        return gx, gh_prev, gc_prev, gW, gb

    packed = np.concatenate([h_out, c_out], axis=1)
    if single:
        packed = packed[0]
    node = _make(packed, (x, h, c, W, b), bw, "lstm_cell")
    return index(node, (..., slice(0, n))), index(node, (..., slice(n, 2 * n)))


def lstm_sequence(inputs, params: Params, prefix: str, n: int, mask=None, init_state=None):
    """Run one LSTM layer over a list of per-step ``B x n_in`` inputs.

    ``mask`` is ``B x T`` (1 for valid steps). Returns the list of per-step
    outputs and the final ``(h, c)``.
    """
    W, b = params[f"{prefix}.W"], params[f"{prefix}.b"]
    batch = inputs[0].shape[0]
    if init_state is None:
        dt = get_default_dtype()
        h = Tensor(np.zeros((batch, n), dtype=dt))
        c = Tensor(np.zeros((batch, n), dtype=dt))
    else:
        h, c = init_state
    outs = []
    for t, x in enumerate(inputs):
        h, c = lstm_cell(x, h, c, W, b, None if mask is None else mask[:, t])
        outs.append(h)
    return outs, (h, c)


# ---------------------------------------------------------------------------
# attention primitives


def dot_scores(query, memory) -> Tensor:
    """``scores[b, j] = query[b] . memory[b, j]`` for ``B x n`` and ``B x M x n``."""
    q, mem = as_tensor(query), as_tensor(memory)
    if q.ndim != 2 or mem.ndim != 3 or q.shape[0] != mem.shape[0] or q.shape[1] != mem.shape[2]:
        raise ShapeError(f"dot_scores: query {q.shape} vs memory {mem.shape}")
    qd, md = q.data, mem.data

    def bw(g):
        return np.einsum("bm,bmn->bn", g, md), g[:, :, None] * qd[:, None, :]

    return _make(np.einsum("bn,bmn->bm", qd, md), (q, mem), bw, "dot_scores")


def weighted_sum(weights, memory) -> Tensor:
    """``context[b] = sum_j weights[b, j] * memory[b, j]``."""
    w, mem = as_tensor(weights), as_tensor(memory)
    if w.ndim != 2 or mem.ndim != 3 or w.shape != mem.shape[:2]:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs memory {mem.shape}")
    wd, md = w.data, mem.data

    def bw(g):
        return np.einsum("bn,bmn->bm", g, md), wd[:, :, None] * g[:, None, :]

    return _make(np.einsum("bm,bmn->bn", wd, md), (w, mem), bw, "weighted_sum")


# ---------------------------------------------------------------------------
# convolution


def _same_pads(size: int, k: int, stride: int) -> tuple:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x, k, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of ``B x H x W x Cin`` (or unbatched ``H x W x Cin``)
    with a ``kh x kw x Cin x Cout`` kernel.

    ``same`` zero-pads so the output is ``ceil(H / stride)``; extra padding
    goes to the bottom/right. ``valid`` uses no padding.
    """
    x, k = as_tensor(x), as_tensor(k)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {k.shape}")
    B, H, W_, C = xd.shape
    kh, kw, cin, cout = k.shape
    if cin != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {cin}")
    if padding == "same":
        Ho, pt, pb = _same_pads(H, kh, stride)
        Wo, pl, pr = _same_pads(W_, kw, stride)
    elif padding == "valid":
        if kh > H or kw > W_:
            raise ShapeError("conv2d: kernel larger than input under valid padding")
        Ho, Wo = (H - kh) // stride + 1, (W_ - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=xd.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, :, di, dj, :] = xp[:, di : di + stride * (Ho - 1) + 1 : stride, dj : dj + stride * (Wo - 1) + 1 : stride, :]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * C)
    kmat = k.data.reshape(kh * kw * C, cout)
    out = (cols2 @ kmat).reshape(B, Ho, Wo, cout)
    parents = [x, k]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g4 = g[None] if single else g
        g2 = g4.reshape(-1, cout)
        gk = (cols2.T @ g2).reshape(k.shape)
        gcols = (g2 @ kmat.T).reshape(B, Ho, Wo, kh, kw, C)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, di : di + stride * (Ho - 1) + 1 : stride, dj : dj + stride * (Wo - 1) + 1 : stride, :] += gcols[:, :, :, di, dj, :]
        gx = gxp[:, pt : pt + H, pl : pl + W_, :]
        if single:
            gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out[0] if single else out, parents, bw, "conv2d")


def instance_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over the spatial axes of
    ``B x H x W x C``, followed by a learned per-channel scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    if xd.ndim != 4 or gamma.shape != (xd.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError(f"instance_norm: x {x.shape}, gamma {gamma.shape}")
    mu = xd.mean(axis=(1, 2), keepdims=True)
    var = xd.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data
    npix = xd.shape[1] * xd.shape[2]

    def bw(g):
        gxhat = g * gd
        gx = inv / npix * (
            npix * gxhat
            - gxhat.sum(axis=(1, 2), keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=(1, 2), keepdims=True)
        )
        return gx, (g * xhat).sum(axis=(0, 1, 2)), g.sum(axis=(0, 1, 2))

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw, "instance_norm")
