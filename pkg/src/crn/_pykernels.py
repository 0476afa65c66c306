"""Pure-numpy packed CRU kernels (fallback for the compiled extension).

Rows of a batch are sorted by sequence length, so at step ``s`` rows
``[0, n_active[s])`` are live. Per-step inputs and gate caches are stored
packed: step ``s`` occupies rows ``offs[s]:offs[s] + n_active[s]`` of an
``(N, .)`` array with ``N = sum(n_active)``. Memories are kept dense as
``[T + 1, B, .]``; finished rows carry their last state forward.
"""
import numpy as np


def _sig(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def offsets(n_active):
    offs = np.zeros(len(n_active) + 1, dtype=np.int64)
    np.cumsum(n_active, out=offs[1:])
    return offs


def _stack(P):
    Wxa = np.vstack([P["W_za"], P["W_ra"], P["W_i"], P["W_a"]])
    Wxo = np.vstack([P["W_zo"], P["W_ro"], P["W_o"]])
    Uha = np.vstack([P["U_za"], P["U_ra"]])
    Uho = np.vstack([P["U_zo"], P["U_ro"], P["U_i"]])
    return Wxa, Wxo, Uha, Uho


def cru_forward(P, xa, xo, n_active, a0, o0):
    """``xa[N, n_a]``, ``xo[N, n_o]`` packed; ``a0[B, n_a]``, ``o0[B, n_o]``."""
    T = len(n_active)
    B, na = a0.shape
    no = o0.shape[1]
    N = xa.shape[0]
    offs = offsets(n_active)
    Wxa, Wxo, Uha, Uho = _stack(P)
    Ua, Uo, Io = P["U_a"], P["U_o"], P["I_o"]
    XA = xa @ Wxa.T
    XO = xo @ Wxo.T
    A = np.empty((T + 1, B, na))
    O = np.empty((T + 1, B, no))
    A[0] = a0
    O[0] = o0
    za = np.empty((N, na)); ra = np.empty((N, na)); ri = np.empty((N, na)); ah = np.empty((N, na))
    zo = np.empty((N, no)); ro = np.empty((N, no)); oh = np.empty((N, no))
    for s in range(T):
        n = int(n_active[s])
        sl = slice(offs[s], offs[s + 1])
        ap = A[s, :n]
        op = O[s, :n]
        ha = ap @ Uha.T
        ho = op @ Uho.T
        xs = XA[sl]
        ys = XO[sl]
        z_a = _sig(xs[:, :na] + ha[:, :na])
        r_a = _sig(xs[:, na:2 * na] + ha[:, na:])
        r_i = _sig(xs[:, 2 * na:3 * na] + ho[:, 2 * no:])
        z_o = _sig(ys[:, :no] + ho[:, :no])
        r_o = _sig(ys[:, no:2 * no] + ho[:, no:2 * no])
        a_h = np.tanh(xs[:, 3 * na:] + (r_a * ap) @ Ua.T)
        o_h = np.tanh(ys[:, 2 * no:] + (r_o * op) @ Uo.T + (r_i * a_h) @ Io.T)
        A[s + 1, :n] = ap + z_a * (a_h - ap)
        O[s + 1, :n] = op + z_o * (o_h - op)
        A[s + 1, n:] = A[s, n:]
        O[s + 1, n:] = O[s, n:]
        za[sl] = z_a; ra[sl] = r_a; ri[sl] = r_i; ah[sl] = a_h
        zo[sl] = z_o; ro[sl] = r_o; oh[sl] = o_h
    return {"A": A, "O": O, "za": za, "ra": ra, "ri": ri, "ah": ah,
            "zo": zo, "ro": ro, "oh": oh}


def cru_backward(P, cache, xa, xo, n_active, dA, dO):
    """``dA``/``dO`` hold loss gradients w.r.t. every stored memory ``[T+1, B, .]``.

    Returns ``(grads, dxa, dxo, da0, do0)`` with ``dxa``/``dxo`` packed.
    """
    T = len(n_active)
    A, O = cache["A"], cache["O"]
    B, na = A.shape[1], A.shape[2]
    no = O.shape[2]
    N = xa.shape[0]
    offs = offsets(n_active)
    Wxa, Wxo, Uha, Uho = _stack(P)
    Ua, Uo, Io = P["U_a"], P["U_o"], P["I_o"]
    GXA = np.empty((N, 4 * na))
    GXO = np.empty((N, 3 * no))
    GHO = np.empty((N, 2 * no + na))
    RAP = np.empty((N, na))
    ROP = np.empty((N, no))
    RIA = np.empty((N, na))
    Aprev = np.empty((N, na))
    Oprev = np.empty((N, no))
    gA = np.zeros((B, na))
    gO = np.zeros((B, no))
    for s in range(T - 1, -1, -1):
        gA += dA[s + 1]
        gO += dO[s + 1]
        n = int(n_active[s])
        if n == 0:
            continue
        sl = slice(offs[s], offs[s + 1])
        ap = A[s, :n]; op = O[s, :n]
        Aprev[sl] = ap; Oprev[sl] = op
        z_a = cache["za"][sl]; r_a = cache["ra"][sl]; r_i = cache["ri"][sl]
        a_h = cache["ah"][sl]
        z_o = cache["zo"][sl]; r_o = cache["ro"][sl]; o_h = cache["oh"][sl]
        dan = gA[:n]; don = gO[:n]

        d_oh_pre = don * z_o * (1.0 - o_h * o_h)
        t_ro = d_oh_pre @ Uo
        t_ri = d_oh_pre @ Io
        d_ah_pre = (dan * z_a + t_ri * r_i) * (1.0 - a_h * a_h)
        t_ra = d_ah_pre @ Ua

        gxa = GXA[sl]
        gxa[:, :na] = dan * (a_h - ap) * z_a * (1.0 - z_a)
        gxa[:, na:2 * na] = t_ra * ap * r_a * (1.0 - r_a)
        gxa[:, 2 * na:3 * na] = t_ri * a_h * r_i * (1.0 - r_i)
        gxa[:, 3 * na:] = d_ah_pre
        gxo = GXO[sl]
        gxo[:, :no] = don * (o_h - op) * z_o * (1.0 - z_o)
        gxo[:, no:2 * no] = t_ro * op * r_o * (1.0 - r_o)
        gxo[:, 2 * no:] = d_oh_pre
        gho = GHO[sl]
        gho[:, :2 * no] = gxo[:, :2 * no]
        gho[:, 2 * no:] = gxa[:, 2 * na:3 * na]
        RAP[sl] = r_a * ap
        ROP[sl] = r_o * op
        RIA[sl] = r_i * a_h

        gA[:n] = dan * (1.0 - z_a) + t_ra * r_a + gxa[:, :2 * na] @ Uha
        gO[:n] = don * (1.0 - z_o) + t_ro * r_o + gho @ Uho
    gA += dA[0]
    gO += dO[0]

    dWxa = GXA.T @ xa
    dWxo = GXO.T @ xo
    dUha = GXA[:, :2 * na].T @ Aprev
    dUho = GHO.T @ Oprev
    g = {
        "W_za": dWxa[:na], "W_ra": dWxa[na:2 * na], "W_i": dWxa[2 * na:3 * na], "W_a": dWxa[3 * na:],
        "U_za": dUha[:na], "U_ra": dUha[na:],
        "U_a": GXA[:, 3 * na:].T @ RAP,
        "W_zo": dWxo[:no], "W_ro": dWxo[no:2 * no], "W_o": dWxo[2 * no:],
        "U_zo": dUho[:no], "U_ro": dUho[no:2 * no], "U_i": dUho[2 * no:],
        "U_o": GXO[:, 2 * no:].T @ ROP,
        "I_o": GXO[:, 2 * no:].T @ RIA,
    }
    return g, GXA @ Wxa, GXO @ Wxo, gA, gO
