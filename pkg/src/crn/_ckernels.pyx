# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled packed CRU kernels.

Same contract and packed cache layout as ``crn._pykernels``; the whole time
loop runs in C with BLAS dgemm for the matrix products.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void gemm(bint ta, bint tb, int m, int n, int k, double alpha,
                      const double* A, int lda, const double* B, int ldb, double beta,
                      double* C, int ldc) noexcept nogil:
    # row-major C = alpha op(A) op(B) + beta C via the column-major routine
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    if m == 0 or n == 0:
        return
    dgemm(&cb, &ca, &n, &m, &k, &alpha, <double*>B, &ldb, <double*>A, &lda, &beta, C, &ldc)


cdef inline double sig(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double tanh_(double x) noexcept nogil:
    # libm tanh dominates the step cost; one exp is several times cheaper
    cdef double e
    if x > 20.0:
        return 1.0
    if x < -20.0:
        return -1.0
    if -1e-3 < x < 1e-3:
        e = x * x
        return x * (1.0 - e * (1.0 / 3.0 - e * (2.0 / 15.0)))
    e = exp(2.0 * x)
    return (e - 1.0) / (e + 1.0)


def _stack(P):
    Wxa = np.ascontiguousarray(np.vstack([P["W_za"], P["W_ra"], P["W_i"], P["W_a"]]))
    Wxo = np.ascontiguousarray(np.vstack([P["W_zo"], P["W_ro"], P["W_o"]]))
    Uha = np.ascontiguousarray(np.vstack([P["U_za"], P["U_ra"]]))
    Uho = np.ascontiguousarray(np.vstack([P["U_zo"], P["U_ro"], P["U_i"]]))
    return Wxa, Wxo, Uha, Uho


cdef inline double* row(double[:, :, ::1] X, int s, int b) noexcept nogil:
    return &X[s, b, 0]


def cru_forward(P, xa_, xo_, n_active_, a0, o0):
    cdef int T = len(n_active_), B = a0.shape[0], na = a0.shape[1], no = o0.shape[1]
    cdef int N = xa_.shape[0]
    Wxa_, Wxo_, Uha_, Uho_ = _stack(P)
    cdef double[:, ::1] Wxa = Wxa_, Wxo = Wxo_, Uha = Uha_, Uho = Uho_
    cdef double[:, ::1] Ua = np.ascontiguousarray(P["U_a"]), Uo = np.ascontiguousarray(P["U_o"])
    cdef double[:, ::1] Io = np.ascontiguousarray(P["I_o"])
    cdef long[::1] n_active = np.ascontiguousarray(n_active_, dtype=np.int64)

    A_ = np.empty((T + 1, B, na)); O_ = np.empty((T + 1, B, no))
    A_[0] = a0; O_[0] = o0
    za_ = np.empty((N, na)); ra_ = np.empty((N, na)); ri_ = np.empty((N, na)); ah_ = np.empty((N, na))
    zo_ = np.empty((N, no)); ro_ = np.empty((N, no)); oh_ = np.empty((N, no))
    out = {"A": A_, "O": O_, "za": za_, "ra": ra_, "ri": ri_, "ah": ah_,
           "zo": zo_, "ro": ro_, "oh": oh_}
    if T == 0 or B == 0:
        return out
    XA_ = np.ascontiguousarray(np.asarray(xa_, dtype=np.float64) @ Wxa_.T)
    XO_ = np.ascontiguousarray(np.asarray(xo_, dtype=np.float64) @ Wxo_.T)
    cdef double[:, :, ::1] A = A_, O = O_
    cdef double[:, ::1] za = za_, ra = ra_, ri = ri_, ah = ah_, zo = zo_, ro = ro_, oh = oh_
    cdef double[:, ::1] XA = XA_, XO = XO_
    cdef double[:, ::1] ha_ = np.empty((B, 2 * na)), ho_ = np.empty((B, 2 * no + na))
    cdef double[:, ::1] rap_ = np.empty((B, na)), rop_ = np.empty((B, no)), ria_ = np.empty((B, na))
    cdef double[:, ::1] pa_ = np.empty((B, na)), po_ = np.empty((B, no))
    cdef int s, n, b, j, off = 0, k
    cdef double x, y
    cdef double *xs
    cdef double *ys
    cdef double *h
    cdef double *g
    cdef double *ap
    cdef double *op
    cdef double *an
    cdef double *on
    cdef double *pza
    cdef double *pra
    cdef double *pri
    cdef double *pah
    cdef double *pzo
    cdef double *pro
    cdef double *poh
    cdef double *rp
    cdef double *ro2
    cdef double *ri2
    cdef double *pa
    cdef double *po

    with nogil:
        for s in range(T):
            n = <int>n_active[s]
            if n > 0:
                gemm(False, True, n, 2 * na, na, 1.0, row(A, s, 0), na, &Uha[0, 0], na, 0.0, &ha_[0, 0], 2 * na)
                gemm(False, True, n, 2 * no + na, no, 1.0, row(O, s, 0), no, &Uho[0, 0], no, 0.0, &ho_[0, 0], 2 * no + na)
                for b in range(n):
                    k = off + b
                    xs = &XA[k, 0]; ys = &XO[k, 0]
                    h = &ha_[b, 0]; g = &ho_[b, 0]
                    ap = row(A, s, b); op = row(O, s, b)
                    pza = &za[k, 0]; pra = &ra[k, 0]; pri = &ri[k, 0]
                    pzo = &zo[k, 0]; pro = &ro[k, 0]
                    rp = &rap_[b, 0]; ro2 = &rop_[b, 0]; pa = &pa_[b, 0]; po = &po_[b, 0]
                    for j in range(na):
                        pza[j] = sig(xs[j] + h[j])
                        pra[j] = sig(xs[na + j] + h[na + j])
                        pri[j] = sig(xs[2 * na + j] + g[2 * no + j])
                        rp[j] = pra[j] * ap[j]
                        pa[j] = xs[3 * na + j]
                    for j in range(no):
                        pzo[j] = sig(ys[j] + g[j])
                        pro[j] = sig(ys[no + j] + g[no + j])
                        ro2[j] = pro[j] * op[j]
                        po[j] = ys[2 * no + j]
                gemm(False, True, n, na, na, 1.0, &rap_[0, 0], na, &Ua[0, 0], na, 1.0, &pa_[0, 0], na)
                for b in range(n):
                    k = off + b
                    pa = &pa_[b, 0]; pah = &ah[k, 0]; pri = &ri[k, 0]; ri2 = &ria_[b, 0]
                    for j in range(na):
                        x = tanh_(pa[j])
                        pah[j] = x
                        ri2[j] = pri[j] * x
                gemm(False, True, n, no, no, 1.0, &rop_[0, 0], no, &Uo[0, 0], no, 1.0, &po_[0, 0], no)
                gemm(False, True, n, no, na, 1.0, &ria_[0, 0], na, &Io[0, 0], na, 1.0, &po_[0, 0], no)
                for b in range(n):
                    k = off + b
                    ap = row(A, s, b); an = row(A, s + 1, b)
                    op = row(O, s, b); on = row(O, s + 1, b)
                    pza = &za[k, 0]; pah = &ah[k, 0]
                    pzo = &zo[k, 0]; poh = &oh[k, 0]; po = &po_[b, 0]
                    for j in range(na):
                        y = ap[j]
                        an[j] = y + pza[j] * (pah[j] - y)
                    for j in range(no):
                        x = tanh_(po[j])
                        poh[j] = x
                        y = op[j]
                        on[j] = y + pzo[j] * (x - y)
            for b in range(n, B):
                ap = row(A, s, b); an = row(A, s + 1, b)
                op = row(O, s, b); on = row(O, s + 1, b)
                for j in range(na):
                    an[j] = ap[j]
                for j in range(no):
                    on[j] = op[j]
            off += n
    return out


def cru_backward(P, cache, xa_, xo_, n_active_, dA_, dO_):
    cdef int T = len(n_active_)
    A_, O_ = cache["A"], cache["O"]
    cdef int B = A_.shape[1], na = A_.shape[2], no = O_.shape[2], N = xa_.shape[0]
    Wxa_, Wxo_, Uha_, Uho_ = _stack(P)
    cdef double[:, ::1] Uha = Uha_, Uho = Uho_
    cdef double[:, ::1] Ua = np.ascontiguousarray(P["U_a"])
    cdef double[:, ::1] UoIo = np.ascontiguousarray(np.hstack([P["U_o"], P["I_o"]]))
    cdef long[::1] n_active = np.ascontiguousarray(n_active_, dtype=np.int64)
    cdef double[:, :, ::1] dA = np.ascontiguousarray(dA_, dtype=np.float64)
    cdef double[:, :, ::1] dO = np.ascontiguousarray(dO_, dtype=np.float64)
    cdef double[:, :, ::1] A = A_, O = O_
    cdef double[:, ::1] za = cache["za"], ra = cache["ra"], ri = cache["ri"], ah = cache["ah"]
    cdef double[:, ::1] zo = cache["zo"], ro = cache["ro"], oh = cache["oh"]

    GXA_ = np.empty((N, 4 * na)); GXO_ = np.empty((N, 3 * no)); GHO_ = np.empty((N, 2 * no + na))
    RAP_ = np.empty((N, na)); ROP_ = np.empty((N, no)); RIA_ = np.empty((N, na))
    AP_ = np.empty((N, na)); OP_ = np.empty((N, no))
    gA_ = np.zeros((B, na)); gO_ = np.zeros((B, no))
    cdef double[:, ::1] GXA = GXA_, GXO = GXO_, GHO = GHO_, RAP = RAP_, ROP = ROP_, RIA = RIA_
    cdef double[:, ::1] AP = AP_, OP = OP_
    cdef double[:, ::1] gA = gA_, gO = gO_
    cdef int Bm = max(B, 1)
    cdef double[:, ::1] t_o = np.empty((Bm, no + na)), t_ra = np.empty((Bm, na))
    cdef int s, n, b, j, k, off = N
    cdef double dan, don, x, y, zz, rr, ii
    cdef double *ga
    cdef double *go
    cdef double *da
    cdef double *do_
    cdef double *gxa
    cdef double *gxo
    cdef double *gho
    cdef double *to
    cdef double *tr
    cdef double *ap
    cdef double *op
    cdef double *pza
    cdef double *pra
    cdef double *pri
    cdef double *pah
    cdef double *pzo
    cdef double *pro
    cdef double *poh
    cdef double *rap
    cdef double *rop
    cdef double *ria
    cdef double *apc
    cdef double *opc

    if B > 0:
        with nogil:
            for s in range(T - 1, -1, -1):
                for b in range(B):
                    ga = &gA[b, 0]; go = &gO[b, 0]; da = row(dA, s + 1, b); do_ = row(dO, s + 1, b)
                    for j in range(na):
                        ga[j] += da[j]
                    for j in range(no):
                        go[j] += do_[j]
                n = <int>n_active[s]
                off -= n
                if n == 0:
                    continue
                for b in range(n):
                    k = off + b
                    go = &gO[b, 0]; gxo = &GXO[k, 0]; pzo = &zo[k, 0]; poh = &oh[k, 0]
                    for j in range(no):
                        x = poh[j]
                        gxo[2 * no + j] = go[j] * pzo[j] * (1.0 - x * x)
                # [t_ro | t_ri] = d_oh_pre @ [U_o | I_o]
                gemm(False, False, n, no + na, no, 1.0, &GXO[off, 0] + 2 * no, 3 * no,
                     &UoIo[0, 0], no + na, 0.0, &t_o[0, 0], no + na)
                for b in range(n):
                    k = off + b
                    ga = &gA[b, 0]; gxa = &GXA[k, 0]; to = &t_o[b, 0]
                    pza = &za[k, 0]; pri = &ri[k, 0]; pah = &ah[k, 0]
                    for j in range(na):
                        x = pah[j]
                        gxa[3 * na + j] = (ga[j] * pza[j] + to[no + j] * pri[j]) * (1.0 - x * x)
                gemm(False, False, n, na, na, 1.0, &GXA[off, 0] + 3 * na, 4 * na, &Ua[0, 0], na, 0.0, &t_ra[0, 0], na)
                for b in range(n):
                    k = off + b
                    ga = &gA[b, 0]; go = &gO[b, 0]
                    gxa = &GXA[k, 0]; gxo = &GXO[k, 0]; gho = &GHO[k, 0]
                    to = &t_o[b, 0]; tr = &t_ra[b, 0]
                    ap = row(A, s, b); op = row(O, s, b)
                    apc = &AP[k, 0]; opc = &OP[k, 0]
                    pza = &za[k, 0]; pra = &ra[k, 0]; pri = &ri[k, 0]; pah = &ah[k, 0]
                    pzo = &zo[k, 0]; pro = &ro[k, 0]; poh = &oh[k, 0]
                    rap = &RAP[k, 0]; rop = &ROP[k, 0]; ria = &RIA[k, 0]
                    for j in range(na):
                        dan = ga[j]
                        y = ap[j]
                        apc[j] = y
                        zz = pza[j]
                        rr = pra[j]
                        ii = pri[j]
                        gxa[j] = dan * (pah[j] - y) * zz * (1.0 - zz)
                        gxa[na + j] = tr[j] * y * rr * (1.0 - rr)
                        x = to[no + j] * pah[j] * ii * (1.0 - ii)
                        gxa[2 * na + j] = x
                        gho[2 * no + j] = x
                        rap[j] = rr * y
                        ria[j] = ii * pah[j]
                        ga[j] = dan * (1.0 - zz) + tr[j] * rr
                    for j in range(no):
                        don = go[j]
                        y = op[j]
                        opc[j] = y
                        zz = pzo[j]
                        rr = pro[j]
                        x = don * (poh[j] - y) * zz * (1.0 - zz)
                        gxo[j] = x
                        gho[j] = x
                        x = to[j] * y * rr * (1.0 - rr)
                        gxo[no + j] = x
                        gho[no + j] = x
                        rop[j] = rr * y
                        go[j] = don * (1.0 - zz) + to[j] * rr
                # gate contributions to the previous memories, added in place
                gemm(False, False, n, na, 2 * na, 1.0, &GXA[off, 0], 4 * na, &Uha[0, 0], na, 1.0, &gA[0, 0], na)
                gemm(False, False, n, no, 2 * no + na, 1.0, &GHO[off, 0], 2 * no + na, &Uho[0, 0], no, 1.0, &gO[0, 0], no)
            for b in range(B):
                ga = &gA[b, 0]; go = &gO[b, 0]; da = row(dA, 0, b); do_ = row(dO, 0, b)
                for j in range(na):
                    ga[j] += da[j]
                for j in range(no):
                    go[j] += do_[j]

    xa2 = np.asarray(xa_, dtype=np.float64)
    xo2 = np.asarray(xo_, dtype=np.float64)
    dWxa = GXA_.T @ xa2
    dWxo = GXO_.T @ xo2
    dUha = GXA_[:, :2 * na].T @ AP_
    dUho = GHO_.T @ OP_
    g = {
        "W_za": dWxa[:na], "W_ra": dWxa[na:2 * na], "W_i": dWxa[2 * na:3 * na], "W_a": dWxa[3 * na:],
        "U_za": dUha[:na], "U_ra": dUha[na:],
        "U_a": GXA_[:, 3 * na:].T @ RAP_,
        "W_zo": dWxo[:no], "W_ro": dWxo[no:2 * no], "W_o": dWxo[2 * no:],
        "U_zo": dUho[:no], "U_ro": dUho[no:2 * no], "U_i": dUho[2 * no:],
        "U_o": GXO_[:, 2 * no:].T @ ROP_,
        "I_o": GXO_[:, 2 * no:].T @ RIA_,
    }
    return g, GXA_ @ Wxa_, GXO_ @ Wxo_, gA_, gO_
