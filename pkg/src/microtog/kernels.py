"""Convolution hot kernels: numba @njit loops and a pure-numpy im2col fallback.

All kernels take the input already zero-padded and the kernel tensor in
(out_ch, kh, kw, in_ch) layout so the innermost loop runs over contiguous
memory. Partial sums are accumulated in float64 regardless of the array
dtype and cast back on store. Wrappers in `numerics` handle padding,
layout transposes and dtype bookkeeping.

Both implementations are exposed unconditionally (the benchmark compares
them); the module-level CONV_FWD / CONV_BWD_* aliases point at whichever
backend `_backend` selected.
"""

import numpy as np

from ._backend import HAVE_NUMBA, USE_NUMBA


# ---------------------------------------------------------------- numpy path

def _gather_patches(xp, kh, kw, stride, out_h, out_w):
    # patches[oh, ow, i, j, c] = xp[oh*stride + i, ow*stride + j, c]
    rows = (np.arange(out_h) * stride)[:, None] + np.arange(kh)[None, :]
    cols = (np.arange(out_w) * stride)[:, None] + np.arange(kw)[None, :]
    return xp[rows[:, None, :, None], cols[None, :, None, :], :]


def conv_forward_numpy(xp, kt, bias, stride, out_h, out_w):
    """im2col forward. Returns pre-activation (out_h, out_w, out_ch)."""
    out_ch, kh, kw, _ = kt.shape
    patches = _gather_patches(xp, kh, kw, stride, out_h, out_w)
    cols = patches.reshape(out_h * out_w, -1).astype(np.float64)
    wmat = kt.reshape(out_ch, -1).astype(np.float64)
    y = cols @ wmat.T + bias.astype(np.float64)
    return y.reshape(out_h, out_w, out_ch).astype(xp.dtype)


def conv_backward_input_numpy(dz, kt, stride, pad_h, pad_w):
    """Gradient w.r.t. the padded input, returned in float64."""
    out_h, out_w, out_ch = dz.shape
    _, kh, kw, in_ch = kt.shape
    dxp = np.zeros((pad_h, pad_w, in_ch), dtype=np.float64)
    wmat = kt.reshape(out_ch, -1).astype(np.float64)
    dcols = dz.reshape(-1, out_ch).astype(np.float64) @ wmat
    dpatch = dcols.reshape(out_h, out_w, kh, kw, in_ch)
    for i in range(kh):
        for j in range(kw):
            # fixed (i, j): target rows/cols are distinct, plain += is safe
            dxp[i:i + stride * out_h:stride, j:j + stride * out_w:stride, :] += dpatch[:, :, i, j, :]
    return dxp


def conv_backward_weights_numpy(xp, dz, kh, kw, stride):
    """Gradients w.r.t. kernel (hot layout) and bias, in float64."""
    out_h, out_w, out_ch = dz.shape
    in_ch = xp.shape[2]
    patches = _gather_patches(xp, kh, kw, stride, out_h, out_w)
    cols = patches.reshape(out_h * out_w, -1).astype(np.float64)
    dzf = dz.reshape(-1, out_ch).astype(np.float64)
    dkt = (dzf.T @ cols).reshape(out_ch, kh, kw, in_ch)
    db = dzf.sum(axis=0)
    return dkt, db


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:
    from numba import njit

    # 'reassoc' lets LLVM vectorize the float64 reduction; no nan/inf or
    # division shortcuts are enabled, so results stay finite-safe and
    # run-to-run deterministic for a fixed build
    _FASTMATH = {"reassoc", "nsz"}

    @njit(cache=True, fastmath=_FASTMATH)
    def conv_forward_numba(xp, kt, bias, stride, out_h, out_w):
        out_ch, kh, kw, in_ch = kt.shape
        y = np.empty((out_h, out_w, out_ch), dtype=xp.dtype)
        for oh in range(out_h):
            for ow in range(out_w):
                h0 = oh * stride
                w0 = ow * stride
                for oc in range(out_ch):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(in_ch):
                                acc += xp[h0 + i, w0 + j, c] * kt[oc, i, j, c]
                    y[oh, ow, oc] = acc + bias[oc]
        return y

    @njit(cache=True, fastmath=_FASTMATH)
    def conv_backward_input_numba(dz, kt, stride, pad_h, pad_w):
        out_h, out_w, out_ch = dz.shape
        _, kh, kw, in_ch = kt.shape
        dxp = np.zeros((pad_h, pad_w, in_ch), dtype=np.float64)
        for oh in range(out_h):
            for ow in range(out_w):
                h0 = oh * stride
                w0 = ow * stride
                for oc in range(out_ch):
                    g = dz[oh, ow, oc]
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(in_ch):
                                dxp[h0 + i, w0 + j, c] += g * kt[oc, i, j, c]
        return dxp

    @njit(cache=True, fastmath=_FASTMATH)
    def conv_backward_weights_numba(xp, dz, kh, kw, stride):
        out_h, out_w, out_ch = dz.shape
        in_ch = xp.shape[2]
        dkt = np.zeros((out_ch, kh, kw, in_ch), dtype=np.float64)
        db = np.zeros(out_ch, dtype=np.float64)
        for oh in range(out_h):
            for ow in range(out_w):
                h0 = oh * stride
                w0 = ow * stride
                for oc in range(out_ch):
                    g = dz[oh, ow, oc]
                    db[oc] += g
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(in_ch):
                                dkt[oc, i, j, c] += g * xp[h0 + i, w0 + j, c]
        return dkt, db
else:  # pragma: no cover - exercised only when numba is absent
    conv_forward_numba = None
    conv_backward_input_numba = None
    conv_backward_weights_numba = None


if USE_NUMBA:
    CONV_FWD = conv_forward_numba
    CONV_BWD_INPUT = conv_backward_input_numba
    CONV_BWD_WEIGHTS = conv_backward_weights_numba
else:
    CONV_FWD = conv_forward_numpy
    CONV_BWD_INPUT = conv_backward_input_numpy
    CONV_BWD_WEIGHTS = conv_backward_weights_numpy
