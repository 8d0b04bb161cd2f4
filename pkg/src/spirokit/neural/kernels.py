"""Hot numeric kernels: strided 1-D convolution and LSTM recurrences.

Two interchangeable backends compute identical math:

* ``numpy``  — vectorized reference implementation
* ``numba``  — @njit-compiled loops (default when numba imports cleanly)

Select with the environment variable ``SPIROKIT_KERNELS=numpy|numba`` before
import, or pass an explicit backend name to ``get_kernels``.  All arrays are
float64 and time-major: sequences are (T, B, C).

Convolution convention: output row j reads padded input rows
[j*stride, j*stride + K) with zero padding only on the right, so the output
length for a sample of length T is ceil(T / stride) and batched results are
identical to single-sample results.
"""

from __future__ import annotations

import math
import os

import numpy as np

ENV_FLAG = "SPIROKIT_KERNELS"


def conv_output_length(n: int, stride: int) -> int:
    return -(-n // stride)  # ceil division


def padded_input_length(t_max: int, kernel: int, stride: int) -> int:
    return (conv_output_length(t_max, stride) - 1) * stride + kernel


# --------------------------------------------------------------------------
# numpy backend
# --------------------------------------------------------------------------

def _np_conv1d_forward(xp, w, b, stride):
    """xp: (P, B, Cin) zero-padded input; returns pre-activation (L, B, Cout)."""
    kernel, c_in, c_out = w.shape
    length = (xp.shape[0] - kernel) // stride + 1
    batch = xp.shape[1]
    y = np.empty((length, batch, c_out))
    y[:] = b
    for k in range(kernel):
        xs = xp[k: k + (length - 1) * stride + 1: stride]
        y += (xs.reshape(length * batch, c_in) @ w[k]).reshape(length, batch, c_out)
    return y


def _np_conv1d_backward(xp, w, stride, dy):
    kernel, c_in, c_out = w.shape
    length, batch, _ = dy.shape
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    db = dy.sum(axis=(0, 1))
    dy_flat = dy.reshape(length * batch, c_out)
    for k in range(kernel):
        sl = slice(k, k + (length - 1) * stride + 1, stride)
        xs = xp[sl].reshape(length * batch, c_in)
        dw[k] = xs.T @ dy_flat
        dxp[sl] += (dy_flat @ w[k].T).reshape(length, batch, c_in)
    return dxp, dw, db


def _sigmoid(a):
    out = np.empty_like(a)
    np.negative(a, out=out)
    np.exp(out, out=out)
    out += 1.0
    np.reciprocal(out, out=out)
    return out


def _np_lstm_forward(x, w, u, b):
    """x: (T, B, Cin); returns h_all plus gate/cell caches for backward."""
    steps, batch, _ = x.shape
    hidden = u.shape[0]
    h_all = np.zeros((steps, batch, hidden))
    gi = np.zeros((steps, batch, hidden))
    gf = np.zeros((steps, batch, hidden))
    gg = np.zeros((steps, batch, hidden))
    go = np.zeros((steps, batch, hidden))
    cells = np.zeros((steps, batch, hidden))
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    for t in range(steps):
        acts = x[t] @ w + h @ u + b
        i = _sigmoid(acts[:, :hidden])
        f = _sigmoid(acts[:, hidden:2 * hidden])
        g = np.tanh(acts[:, 2 * hidden:3 * hidden])
        o = _sigmoid(acts[:, 3 * hidden:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gi[t], gf[t], gg[t], go[t], cells[t], h_all[t] = i, f, g, o, c, h
    return h_all, gi, gf, gg, go, cells


def _np_lstm_backward(x, w, u, h_all, gi, gf, gg, go, cells, dh_out):
    steps, batch, c_in = x.shape
    hidden = u.shape[0]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    du = np.zeros_like(u)
    db = np.zeros(4 * hidden)
    dh_carry = np.zeros((batch, hidden))
    dc_carry = np.zeros((batch, hidden))
    d_acts = np.empty((batch, 4 * hidden))
    for t in range(steps - 1, -1, -1):
        i, f, g, o, c = gi[t], gf[t], gg[t], go[t], cells[t]
        tanh_c = np.tanh(c)
        dh = dh_out[t] + dh_carry
        dc = dc_carry + dh * o * (1.0 - tanh_c * tanh_c)
        c_prev = cells[t - 1] if t > 0 else np.zeros((batch, hidden))
        h_prev = h_all[t - 1] if t > 0 else np.zeros((batch, hidden))
        d_acts[:, :hidden] = dc * g * i * (1.0 - i)
        d_acts[:, hidden:2 * hidden] = dc * c_prev * f * (1.0 - f)
        d_acts[:, 2 * hidden:3 * hidden] = dc * i * (1.0 - g * g)
        d_acts[:, 3 * hidden:] = dh * tanh_c * o * (1.0 - o)
        dx[t] = d_acts @ w.T
        dw += x[t].T @ d_acts
        du += h_prev.T @ d_acts
        db += d_acts.sum(axis=0)
        dh_carry = d_acts @ u.T
        dc_carry = dc * f
    return dx, dw, du, db


class _NumpyKernels:
    name = "numpy"
    conv1d_forward = staticmethod(_np_conv1d_forward)
    conv1d_backward = staticmethod(_np_conv1d_backward)
    lstm_forward = staticmethod(_np_lstm_forward)
    lstm_backward = staticmethod(_np_lstm_backward)


# --------------------------------------------------------------------------
# numba backend
# --------------------------------------------------------------------------

def _build_numba_kernels():
    from numba import njit

    jit = njit(cache=True, fastmath=False)

    @jit
    def conv1d_forward(xp, w, b, stride):
        kernel, c_in, c_out = w.shape
        length = (xp.shape[0] - kernel) // stride + 1
        batch = xp.shape[1]
        y = np.empty((length, batch, c_out))
        for j in range(length):
            base = j * stride
            acc = np.dot(xp[base], w[0])
            for k in range(1, kernel):
                acc += np.dot(xp[base + k], w[k])
            for bi in range(batch):
                for co in range(c_out):
                    y[j, bi, co] = acc[bi, co] + b[co]
        return y

    @jit
    def conv1d_backward(xp, w, stride, dy):
        kernel, c_in, c_out = w.shape
        length, batch, _ = dy.shape
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        db = np.zeros(c_out)
        for j in range(length):
            base = j * stride
            dy_j = dy[j]
            for co in range(c_out):
                for bi in range(batch):
                    db[co] += dy_j[bi, co]
            dyj_T = np.ascontiguousarray(dy_j.T)
            for k in range(kernel):
                dw[k] += np.dot(dyj_T, xp[base + k]).T
                dxp[base + k] += np.dot(dy_j, w[k].T)
        return dxp, dw, db

    @jit
    def lstm_forward(x, w, u, b):
        steps, batch, _ = x.shape
        hidden = u.shape[0]
        h_all = np.zeros((steps, batch, hidden))
        gi = np.zeros((steps, batch, hidden))
        gf = np.zeros((steps, batch, hidden))
        gg = np.zeros((steps, batch, hidden))
        go = np.zeros((steps, batch, hidden))
        cells = np.zeros((steps, batch, hidden))
        h = np.zeros((batch, hidden))
        c = np.zeros((batch, hidden))
        for t in range(steps):
            acts = np.dot(x[t], w) + np.dot(h, u)
            for bi in range(batch):
                for hj in range(hidden):
                    a_i = acts[bi, hj] + b[hj]
                    a_f = acts[bi, hidden + hj] + b[hidden + hj]
                    a_g = acts[bi, 2 * hidden + hj] + b[2 * hidden + hj]
                    a_o = acts[bi, 3 * hidden + hj] + b[3 * hidden + hj]
                    i = 1.0 / (1.0 + math.exp(-a_i))
                    f = 1.0 / (1.0 + math.exp(-a_f))
                    g = math.tanh(a_g)
                    o = 1.0 / (1.0 + math.exp(-a_o))
                    cv = f * c[bi, hj] + i * g
                    hv = o * math.tanh(cv)
                    gi[t, bi, hj] = i
                    gf[t, bi, hj] = f
                    gg[t, bi, hj] = g
                    go[t, bi, hj] = o
                    cells[t, bi, hj] = cv
                    c[bi, hj] = cv
                    h[bi, hj] = hv
                    h_all[t, bi, hj] = hv
        return h_all, gi, gf, gg, go, cells

    @jit
    def lstm_backward(x, w, u, h_all, gi, gf, gg, go, cells, dh_out):
        steps, batch, c_in = x.shape
        hidden = u.shape[0]
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        du = np.zeros_like(u)
        db = np.zeros(4 * hidden)
        dh_carry = np.zeros((batch, hidden))
        dc_carry = np.zeros((batch, hidden))
        d_acts = np.empty((batch, 4 * hidden))
        for t in range(steps - 1, -1, -1):
            for bi in range(batch):
                for hj in range(hidden):
                    i = gi[t, bi, hj]
                    f = gf[t, bi, hj]
                    g = gg[t, bi, hj]
                    o = go[t, bi, hj]
                    tanh_c = math.tanh(cells[t, bi, hj])
                    dh = dh_out[t, bi, hj] + dh_carry[bi, hj]
                    dc = dc_carry[bi, hj] + dh * o * (1.0 - tanh_c * tanh_c)
                    c_prev = cells[t - 1, bi, hj] if t > 0 else 0.0
                    d_acts[bi, hj] = dc * g * i * (1.0 - i)
                    d_acts[bi, hidden + hj] = dc * c_prev * f * (1.0 - f)
                    d_acts[bi, 2 * hidden + hj] = dc * i * (1.0 - g * g)
                    d_acts[bi, 3 * hidden + hj] = dh * tanh_c * o * (1.0 - o)
                    dc_carry[bi, hj] = dc * f
            xt_T = np.ascontiguousarray(x[t].T)
            dw += np.dot(xt_T, d_acts)
            if t > 0:
                hp_T = np.ascontiguousarray(h_all[t - 1].T)
                du += np.dot(hp_T, d_acts)
            for col in range(4 * hidden):
                for bi in range(batch):
                    db[col] += d_acts[bi, col]
            dx[t] = np.dot(d_acts, w.T)
            dh_carry = np.dot(d_acts, u.T)
        return dx, dw, du, db

    class _NumbaKernels:
        name = "numba"

    _NumbaKernels.conv1d_forward = staticmethod(conv1d_forward)
    _NumbaKernels.conv1d_backward = staticmethod(conv1d_backward)
    _NumbaKernels.lstm_forward = staticmethod(lstm_forward)
    _NumbaKernels.lstm_backward = staticmethod(lstm_backward)
    return _NumbaKernels


_BACKENDS: dict[str, type] = {"numpy": _NumpyKernels}


def _resolve_default() -> str:
    choice = os.environ.get(ENV_FLAG, "").strip().lower()
    if choice in ("numpy", "numba"):
        return choice
    try:
        import numba  # noqa: F401
    except ImportError:
        return "numpy"
    return "numba"


def get_kernels(backend: str | None = None):
    """Kernel namespace for the requested backend (default: env flag / auto)."""
    name = (backend or _resolve_default()).lower()
    if name not in ("numpy", "numba"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and "numba" not in _BACKENDS:
        _BACKENDS["numba"] = _build_numba_kernels()
    return _BACKENDS[name]


def active_backend() -> str:
    return get_kernels().name
