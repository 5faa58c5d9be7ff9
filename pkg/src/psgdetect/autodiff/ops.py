"""Differentiable operators needed by the detection network.

Layout convention: activations are ``(B, C, T)`` (batch, channels, time). The
unbatched ``(C, T)`` form is accepted everywhere and returned unbatched.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import DegenerateVariance, EmptyTargetSet, ShapeMismatch
from .tensor import Tensor, _sigmoid, as_tensor


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (C, T) or (B, C, T), got {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return y.reshape(y.shape[1:]) if squeeze else y


# -- convolution ----------------------------------------------------------------
def conv_out_len(t: int, k: int, stride: int = 1, padding: int = 0) -> int:
    return (t + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, t_out: int) -> np.ndarray:
    b, c, _ = xp.shape
    sb, sc, st = xp.strides
    view = as_strided(xp, (b, c, k, t_out), (sb, sc, st, st * stride), writeable=False)
    return view.reshape(b, c * k, t_out)


def _col2im(dcols: np.ndarray, c: int, k: int, stride: int, t_out: int, t_pad: int) -> np.ndarray:
    b = dcols.shape[0]
    d = dcols.reshape(b, c, k, t_out)
    dxp = np.zeros((b, c, t_pad), dtype=dcols.dtype)
    if stride == k:
        dxp[:, :, : t_out * k] = d.transpose(0, 1, 3, 2).reshape(b, c, t_out * k)
        return dxp
    span = stride * (t_out - 1) + 1
    for j in range(k):
        dxp[:, :, j : j + span : stride] += d[:, :, j, :]
    return dxp


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B, C_in, T) with ``w`` (C_out, C_in, k)."""
    x, squeeze = _batched(as_tensor(x))
    bsz, c_in, t = x.shape
    c_out, w_in, k = w.shape
    if w_in != c_in:
        raise ShapeMismatch(f"conv1d: input has {c_in} channels, weight expects {w_in}")
    if t + 2 * padding < k:
        raise ShapeMismatch(f"conv1d: length {t} (+2*{padding}) shorter than kernel {k}")
    if b is not None and b.shape != (c_out,):
        raise ShapeMismatch(f"conv1d: bias shape {b.shape} != ({c_out},)")
    t_out = conv_out_len(t, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    w2 = w.data.reshape(c_out, c_in * k)
    if t_out == 1:
        cols = xp[:, :, :k].reshape(bsz, c_in * k)
        y = (cols @ w2.T)[:, :, None]
    else:
        cols = _im2col(np.ascontiguousarray(xp), k, stride, t_out)
        y = np.matmul(w2, cols)
    if b is not None:
        y += b.data[None, :, None]
    t_pad = xp.shape[2]

    def backward(g):
        gw = gx = gb = None
        if t_out == 1:
            g2 = g[:, :, 0]
            if w.requires_grad:
                gw = (g2.T @ cols).reshape(w.shape)
            if x.requires_grad:
                dxp = np.zeros((bsz, c_in, t_pad), dtype=g.dtype)
                dxp[:, :, :k] = (g2 @ w2).reshape(bsz, c_in, k)
                gx = dxp
        else:
            if w.requires_grad:
                gw = np.zeros_like(w2)
                for i in range(bsz):
                    gw += g[i] @ cols[i].T
                gw = gw.reshape(w.shape)
            if x.requires_grad:
                gx = _col2im(np.matmul(w2.T, g), c_in, k, stride, t_out, t_pad)
        if gx is not None and padding:
            gx = gx[:, :, padding : t_pad - padding]
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _unbatch(Tensor._make(y, parents, backward), squeeze)


# -- normalisation / activations -------------------------------------------------
def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over (batch x time).

    In training mode ``running_mean``/``running_var`` are updated in place
    (unbiased variance, as the running estimate of population variance).
    """
    x, squeeze = _batched(as_tensor(x))
    bsz, c, t = x.shape
    gam = gamma.data[None, :, None]
    bet = beta.data[None, :, None]

    if training:
        n = bsz * t
        if n < 2:
            raise DegenerateVariance("batch norm needs at least two values per channel in training mode")
        mean = x.data.mean(axis=(0, 2))
        centered = x.data - mean[None, :, None]
        var = (centered * centered).mean(axis=(0, 2))
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = centered * inv_std[None, :, None]
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var * (n / (n - 1))

        def backward(g):
            gg = g.sum(axis=(0, 2))
            gxh = (g * xhat).sum(axis=(0, 2))
            dxhat_scale = (gamma.data * inv_std)[None, :, None]
            gx = dxhat_scale * (g - gg[None, :, None] / n - xhat * (gxh / n)[None, :, None])
            return gx, gxh, gg

    else:
        rm = running_mean if running_mean is not None else np.zeros(c, x.dtype)
        rv = running_var if running_var is not None else np.ones(c, x.dtype)
        inv_std = (1.0 / np.sqrt(rv + eps)).astype(x.dtype)
        xhat = (x.data - rm[None, :, None].astype(x.dtype)) * inv_std[None, :, None]

        def backward(g):
            return (
                g * (gamma.data * inv_std)[None, :, None],
                (g * xhat).sum(axis=(0, 2)),
                g.sum(axis=(0, 2)),
            )

    y = xhat * gam + bet
    return _unbatch(Tensor._make(y, (x, gamma, beta), backward), squeeze)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def maxpool1d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pool; ties route to the earliest index."""
    if k != stride:
        raise NotImplementedError("only non-overlapping pooling (k == stride) is supported")
    x = as_tensor(x)
    t = x.shape[-1]
    if t % k:
        raise ShapeMismatch(f"maxpool1d: length {t} not divisible by {k}")
    lead = x.shape[:-1]
    blocks = x.data.reshape(*lead, t // k, k)
    if k == 2:
        # pairwise compare is much cheaper than argmax/take/put for the common case
        a, b = blocks[..., 0], blocks[..., 1]
        first = a >= b

        def backward2(g):
            gx = np.empty(blocks.shape, dtype=g.dtype)
            gx[..., 0] = np.where(first, g, 0)
            gx[..., 1] = np.where(first, 0, g)
            return (gx.reshape(x.shape),)

        return Tensor._make(np.where(first, a, b), (x,), backward2)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx.reshape(x.shape),)

    return Tensor._make(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


# -- losses -----------------------------------------------------------------------
def _reduce(loss: Tensor, reduction: str) -> Tensor:
    if reduction == "none":
        return loss
    if loss.data.size == 0:
        raise EmptyTargetSet("loss over an empty target set")
    if reduction == "sum":
        return loss.sum()
    if reduction == "mean":
        return loss.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def cross_entropy(logits: Tensor, targets, axis: int = 1, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy from unnormalised scores.

    ``targets`` has the shape of ``logits`` with ``axis`` removed and holds
    integer class indices.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    z = np.moveaxis(logits.data, axis, -1)
    if z.shape[:-1] != targets.shape:
        raise ShapeMismatch(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    loss = lse - picked

    def backward(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (np.moveaxis(p * g[..., None], -1, axis),)

    return _reduce(Tensor._make(loss, (logits,), backward), reduction)


def cross_entropy_probs(probs: Tensor, targets, axis: int = 1, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of already-normalised class probabilities."""
    probs = as_tensor(probs)
    targets = np.asarray(targets, dtype=np.int64)
    p = np.moveaxis(probs.data, axis, -1)
    picked = np.take_along_axis(p, targets[..., None], axis=-1)[..., 0]
    tiny = np.finfo(p.dtype).tiny
    loss = -np.log(np.maximum(picked, tiny))

    def backward(g):
        gp = np.zeros_like(p)
        np.put_along_axis(gp, targets[..., None], (-g / np.maximum(picked, tiny))[..., None], -1)
        return (np.moveaxis(gp, -1, axis),)

    return _reduce(Tensor._make(loss, (probs,), backward), reduction)


def smooth_l1(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    """Huber loss with unit transition: 0.5 d^2 for |d| < 1, |d| - 0.5 beyond."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeMismatch(f"smooth_l1: {pred.shape} vs {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    small = ad < 1.0
    loss = np.where(small, 0.5 * d * d, ad - 0.5)

    def backward(g):
        return (g * np.where(small, d, np.sign(d)),)

    return _reduce(Tensor._make(loss, (pred,), backward), reduction)


# -- recurrent ----------------------------------------------------------------------
def _gru_forward(xg: np.ndarray, w_hh: np.ndarray, b_hh: np.ndarray):
    """Run one GRU direction given precomputed input projections ``xg`` (B, T, 3H)."""
    bsz, steps, h3 = xg.shape
    hid = h3 // 3
    h = np.zeros((bsz, hid), dtype=xg.dtype)
    w_t = np.ascontiguousarray(w_hh.T)
    hs = np.empty((bsz, steps, hid), dtype=xg.dtype)
    hprev = np.empty_like(hs)
    r_all = np.empty_like(hs)
    z_all = np.empty_like(hs)
    n_all = np.empty_like(hs)
    ghn_all = np.empty_like(hs)
    for t in range(steps):
        gh = h @ w_t + b_hh
        gi = xg[:, t]
        r = _sigmoid(gi[:, :hid] + gh[:, :hid])
        z = _sigmoid(gi[:, hid : 2 * hid] + gh[:, hid : 2 * hid])
        ghn = gh[:, 2 * hid :]
        n = np.tanh(gi[:, 2 * hid :] + r * ghn)
        hprev[:, t] = h
        h = n + z * (h - n)
        hs[:, t] = h
        r_all[:, t], z_all[:, t], n_all[:, t], ghn_all[:, t] = r, z, n, ghn
    return hs, (hprev, r_all, z_all, n_all, ghn_all)


def _gru_backward(dhs: np.ndarray, w_hh: np.ndarray, saved):
    hprev, r_all, z_all, n_all, ghn_all = saved
    bsz, steps, hid = dhs.shape
    dgi = np.empty((bsz, steps, 3 * hid), dtype=dhs.dtype)
    dgh = np.empty_like(dgi)
    dh = np.zeros((bsz, hid), dtype=dhs.dtype)
    for t in range(steps - 1, -1, -1):
        r, z, n, ghn, hp = r_all[:, t], z_all[:, t], n_all[:, t], ghn_all[:, t], hprev[:, t]
        dh = dh + dhs[:, t]
        dn_pre = dh * (1.0 - z) * (1.0 - n * n)
        dz_pre = dh * (hp - n) * z * (1.0 - z)
        dr_pre = dn_pre * ghn * r * (1.0 - r)
        dgi[:, t, :hid] = dr_pre
        dgi[:, t, hid : 2 * hid] = dz_pre
        dgi[:, t, 2 * hid :] = dn_pre
        dgh[:, t, :hid] = dr_pre
        dgh[:, t, hid : 2 * hid] = dz_pre
        dgh[:, t, 2 * hid :] = dn_pre * r
        dh = dh * z + dgh[:, t] @ w_hh
    flat_dgh = dgh.reshape(-1, 3 * hid)
    dw_hh = flat_dgh.T @ hprev.reshape(-1, hid)
    db_hh = flat_dgh.sum(axis=0)
    return dgi, dw_hh, db_hh


def bgru(x: Tensor, params) -> Tensor:
    """Bidirectional single-layer GRU over the time axis.

    ``x`` is (B, D, T); ``params`` is ``(w_ih_f, w_hh_f, b_ih_f, b_hh_f,
    w_ih_b, w_hh_b, b_ih_b, b_hh_b)`` with gate rows ordered (reset, update,
    candidate). Returns (B, 2H, T): forward-direction states then backward.
    """
    x, squeeze = _batched(as_tensor(x))
    params = tuple(params)
    if len(params) != 8:
        raise ShapeMismatch("bgru expects 8 parameter tensors")
    bsz, d, steps = x.shape
    if steps < 1:
        raise ShapeMismatch("bgru needs at least one time step")
    hid = params[1].shape[1]
    for w_ih, w_hh in (params[0:2], params[4:6]):
        if w_ih.shape != (3 * hid, d) or w_hh.shape != (3 * hid, hid):
            raise ShapeMismatch(f"bgru weight shapes {w_ih.shape}, {w_hh.shape} for input dim {d}")

    seq = np.ascontiguousarray(x.data.transpose(0, 2, 1))  # (B, T, D)
    outs, caches = [], []
    for direction in range(2):
        w_ih, w_hh, b_ih, b_hh = (p.data for p in params[4 * direction : 4 * direction + 4])
        s = seq if direction == 0 else np.ascontiguousarray(seq[:, ::-1])
        xg = (s.reshape(-1, d) @ w_ih.T + b_ih).reshape(bsz, steps, 3 * hid)
        hs, saved = _gru_forward(xg, w_hh, b_hh)
        if direction == 1:
            hs = hs[:, ::-1]
        outs.append(hs)
        caches.append((s, saved))
    y = np.concatenate(outs, axis=2).transpose(0, 2, 1)  # (B, 2H, T)
    y = np.ascontiguousarray(y)

    def backward(g):
        gseq = g.transpose(0, 2, 1)  # (B, T, 2H)
        grads = []
        dx = np.zeros_like(seq)
        for direction in range(2):
            w_ih, w_hh = params[4 * direction].data, params[4 * direction + 1].data
            s, saved = caches[direction]
            dhs = gseq[:, :, direction * hid : (direction + 1) * hid]
            if direction == 1:
                dhs = dhs[:, ::-1]
            dgi, dw_hh, db_hh = _gru_backward(np.ascontiguousarray(dhs), w_hh, saved)
            flat = dgi.reshape(-1, 3 * hid)
            dw_ih = flat.T @ s.reshape(-1, d)
            db_ih = flat.sum(axis=0)
            ds = (flat @ w_ih).reshape(bsz, steps, d)
            dx += ds if direction == 0 else ds[:, ::-1]
            grads += [dw_ih, dw_hh, db_ih, db_hh]
        return (dx.transpose(0, 2, 1), *grads)

    return _unbatch(Tensor._make(y, (x, *params), backward), squeeze)
