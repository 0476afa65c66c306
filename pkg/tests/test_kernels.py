"""Packed batch kernels against the per-sample reference, on both backends."""
import os
import subprocess
import sys

import numpy as np
import pytest

from crn import _pykernels, kernels
from crn.cru import CRU_NAMES, CruCell, CruState, cru_step, unroll, unroll_backward
from crn.gru import gru_backward, gru_forward, gru_shapes

BACKENDS = [_pykernels] + ([kernels.compiled_impl] if kernels.compiled_impl is not None else [])


def packed_problem(seed, lengths=(6, 4, 4, 1), na=3, no=4):
    rng = np.random.default_rng(seed)
    cell = CruCell.init(na, no, rng, scale=0.7)
    lengths = sorted(lengths, reverse=True)
    T, B = lengths[0], len(lengths)
    n_active = np.array([sum(l > s for l in lengths) for s in range(T)])
    xa_d = rng.normal(size=(T, B, na))
    xo_d = rng.normal(size=(T, B, no))
    ps = np.repeat(np.arange(T), n_active)
    pr = np.concatenate([np.arange(n) for n in n_active])
    a0 = np.zeros((B, na))
    o0 = rng.uniform(-1, 1, (B, no))
    return cell, lengths, n_active, xa_d, xo_d, ps, pr, a0, o0


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_packed_forward_backward_matches_reference(impl, seed):
    cell, lengths, n_active, xa_d, xo_d, ps, pr, a0, o0 = packed_problem(seed)
    rng = np.random.default_rng(100 + seed)
    T, B = len(n_active), len(lengths)
    xa, xo = xa_d[ps, pr], xo_d[ps, pr]
    cache = impl.cru_forward(cell.mats, xa, xo, n_active, a0, o0)
    dA = rng.normal(size=(T + 1, B, 3))
    dO = rng.normal(size=(T + 1, B, 4))
    grads, dxa, dxo, da0, do0 = impl.cru_backward(cell.mats, cache, xa, xo, n_active, dA, dO)

    ref_g = {k: np.zeros_like(v) for k, v in cell.mats.items()}
    for b, L in enumerate(lengths):
        xs = [(xa_d[s, b], xo_d[s, b]) for s in range(L)]
        s = CruState(a0[b], o0[b])
        states = [s]
        for x in xs:
            s, _ = cru_step(cell, *x, s)
            states.append(s)
        for s in range(T + 1):
            k = min(s, L)
            assert np.allclose(cache["A"][s, b], states[k].a, atol=1e-13)
            assert np.allclose(cache["O"][s, b], states[k].o, atol=1e-13)
        # reference backward: inject the dense upstream gradient step by step
        from crn.cru import cru_backward as step_back
        _, caches = unroll(cell, xs, CruState(a0[b], o0[b]))
        g = CruState(dA[L:, b].sum(0), dO[L:, b].sum(0))
        for s in range(L - 1, -1, -1):
            gs, da, do, g = step_back(cell, caches[s], g)
            for k2 in ref_g:
                ref_g[k2] += gs[k2]
            i = np.flatnonzero((ps == s) & (pr == b))[0]
            assert np.allclose(dxa[i], da, atol=1e-12) and np.allclose(dxo[i], do, atol=1e-12)
            g = CruState(g.a + dA[s, b], g.o + dO[s, b])
        assert np.allclose(da0[b], g.a, atol=1e-12) and np.allclose(do0[b], g.o, atol=1e-12)
    for k in CRU_NAMES:
        assert np.allclose(grads[k], ref_g[k], atol=1e-11), k


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")
def test_backends_agree():
    cell, lengths, n_active, xa_d, xo_d, ps, pr, a0, o0 = packed_problem(7, lengths=(9, 9, 7, 5, 5, 2, 1, 1))
    xa, xo = xa_d[ps, pr], xo_d[ps, pr]
    c1 = BACKENDS[0].cru_forward(cell.mats, xa, xo, n_active, a0, o0)
    c2 = BACKENDS[1].cru_forward(cell.mats, xa, xo, n_active, a0, o0)
    for k in c1:
        assert np.allclose(c1[k], c2[k], atol=1e-13), k
    rng = np.random.default_rng(0)
    dA = rng.normal(size=c1["A"].shape)
    dO = rng.normal(size=c1["O"].shape)
    r1 = BACKENDS[0].cru_backward(cell.mats, c1, xa, xo, n_active, dA, dO)
    r2 = BACKENDS[1].cru_backward(cell.mats, c2, xa, xo, n_active, dA, dO)
    for k in CRU_NAMES:
        assert np.allclose(r1[0][k], r2[0][k], atol=1e-12)
    for x, y in zip(r1[1:], r2[1:]):
        assert np.allclose(x, y, atol=1e-12)


def test_pure_python_switch():
    env = dict(os.environ, CRN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from crn import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_packed_gru_matches_step_reference():
    rng = np.random.default_rng(4)
    n_in, H = 3, 4
    P = {k: rng.uniform(-0.7, 0.7, s) for k, s in gru_shapes(n_in, H).items()}
    lengths = [5, 3, 3, 1]
    T, B = 5, 4
    n_active = np.array([sum(l > s for l in lengths) for s in range(T)])
    ps = np.repeat(np.arange(T), n_active)
    pr = np.concatenate([np.arange(n) for n in n_active])
    xd = rng.normal(size=(T, B, n_in))
    h0 = rng.uniform(-1, 1, (B, H))
    c = gru_forward(P, xd[ps, pr], n_active, h0)
    sig = lambda v: 1 / (1 + np.exp(-v))
    for b, L in enumerate(lengths):
        h = h0[b]
        for s in range(L):
            x = xd[s, b]
            z = sig(P["W_z"] @ x + P["U_z"] @ h)
            r = sig(P["W_r"] @ x + P["U_r"] @ h)
            h = (1 - z) * h + z * np.tanh(P["W_h"] @ x + P["U_h"] @ (r * h))
            assert np.allclose(c["h"][s + 1, b], h, atol=1e-13)
        assert np.allclose(c["h"][T, b], h, atol=1e-13)
    # backward against central differences of sum(h_T * w)
    w = rng.normal(size=(B, H))
    dh = np.zeros((T + 1, B, H)); dh[T] = w
    g, dx, dh0 = gru_backward(P, c, xd[ps, pr], n_active, dh)
    eps = 1e-6
    for k in P:
        i = (0, 1)
        P[k][i] += eps; fp = np.sum(gru_forward(P, xd[ps, pr], n_active, h0)["h"][T] * w)
        P[k][i] -= 2 * eps; fm = np.sum(gru_forward(P, xd[ps, pr], n_active, h0)["h"][T] * w)
        P[k][i] += eps
        assert (fp - fm) / (2 * eps) == pytest.approx(g[k][i], rel=1e-6, abs=1e-10)
