"""Bias-free GRU over packed batches, used by the recurrent baseline.

    z = sig(W_z x + U_z h)
    r = sig(W_r x + U_r h)
    c = tanh(W_h x + U_h (r * h))
    h' = (1 - z) * h + z * c

Same packed layout as the CRU kernels: inputs and gate caches are ``(N, .)``
with step ``s`` at rows ``offs[s]:offs[s] + n_active[s]``; hidden states are
dense ``[T + 1, B, H]``.
"""
import numpy as np

from ._pykernels import offsets

GRU_NAMES = ("W_z", "U_z", "W_r", "U_r", "W_h", "U_h")


def _sig(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def gru_shapes(n_in, n_h):
    return {"W_z": (n_h, n_in), "U_z": (n_h, n_h), "W_r": (n_h, n_in),
            "U_r": (n_h, n_h), "W_h": (n_h, n_in), "U_h": (n_h, n_h)}


def gru_forward(P, x, n_active, h0):
    T = len(n_active)
    B, H = h0.shape
    N = x.shape[0]
    offs = offsets(n_active)
    Wx = np.vstack([P["W_z"], P["W_r"], P["W_h"]])
    Uzr = np.vstack([P["U_z"], P["U_r"]])
    Uh = P["U_h"]
    X = x @ Wx.T
    hs = np.empty((T + 1, B, H))
    hs[0] = h0
    z = np.empty((N, H)); r = np.empty((N, H)); c = np.empty((N, H))
    for s in range(T):
        n = int(n_active[s])
        sl = slice(offs[s], offs[s + 1])
        hp = hs[s, :n]
        g = hp @ Uzr.T
        xs = X[sl]
        zs = _sig(xs[:, :H] + g[:, :H])
        rs = _sig(xs[:, H:2 * H] + g[:, H:])
        cs = np.tanh(xs[:, 2 * H:] + (rs * hp) @ Uh.T)
        hs[s + 1, :n] = hp + zs * (cs - hp)
        hs[s + 1, n:] = hs[s, n:]
        z[sl] = zs; r[sl] = rs; c[sl] = cs
    return {"h": hs, "z": z, "r": r, "c": c}


def gru_backward(P, cache, x, n_active, dh):
    T = len(n_active)
    hs = cache["h"]
    B, H = hs.shape[1], hs.shape[2]
    N = x.shape[0]
    offs = offsets(n_active)
    Wx = np.vstack([P["W_z"], P["W_r"], P["W_h"]])
    Uzr = np.vstack([P["U_z"], P["U_r"]])
    Uh = P["U_h"]
    GX = np.empty((N, 3 * H))
    RH = np.empty((N, H))
    HP = np.empty((N, H))
    g = np.zeros((B, H))
    for s in range(T - 1, -1, -1):
        g += dh[s + 1]
        n = int(n_active[s])
        if n == 0:
            continue
        sl = slice(offs[s], offs[s + 1])
        hp = hs[s, :n]
        HP[sl] = hp
        zs = cache["z"][sl]; rs = cache["r"][sl]; cs = cache["c"][sl]
        dn = g[:n]
        dc_pre = dn * zs * (1.0 - cs * cs)
        t = dc_pre @ Uh
        gx = GX[sl]
        gx[:, :H] = dn * (cs - hp) * zs * (1.0 - zs)
        gx[:, H:2 * H] = t * hp * rs * (1.0 - rs)
        gx[:, 2 * H:] = dc_pre
        RH[sl] = rs * hp
        g[:n] = dn * (1.0 - zs) + t * rs + gx[:, :2 * H] @ Uzr
    g += dh[0]
    dWx = GX.T @ x
    dUzr = GX[:, :2 * H].T @ HP
    grads = {"W_z": dWx[:H], "W_r": dWx[H:2 * H], "W_h": dWx[2 * H:],
             "U_z": dUzr[:H], "U_r": dUzr[H:],
             "U_h": GX[:, 2 * H:].T @ RH}
    return grads, GX @ Wx, g
