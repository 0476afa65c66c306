"""Coupled recurrent unit.

Two memories are carried between steps: the action memory ``a*`` (width
``n_a``) and the response memory ``o*`` (width ``n_o``). One step consumes the
embedding of the previous action and the encoding of the current response set::

    z_a = sig(W_za a + U_za a*)        r_a = sig(W_ra a + U_ra a*)
    z_o = sig(W_zo o + U_zo o*)        r_o = sig(W_ro o + U_ro o*)
    r_i = sig(W_i  a + U_i  o*)
    a^  = tanh(W_a a + U_a (r_a * a*))
    o^  = tanh(W_o o + U_o (r_o * o*) + I_o (r_i * a^))
    a*' = (1 - z_a) * a* + z_a * a^
    o*' = (1 - z_o) * o* + z_o * o^

No biases. ``cru_step``/``cru_backward`` are the per-sample reference; the
packed batch kernels used in training live in ``crn.kernels`` and are checked
against them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .numerics import DTYPE, DimensionError, NumericError, sigmoid

A_NAMES = ("W_za", "W_ra", "W_i", "W_a", "U_za", "U_ra", "U_a")
O_NAMES = ("W_zo", "W_ro", "W_o", "U_zo", "U_ro", "U_o")
CROSS_NAMES = ("U_i", "I_o")
CRU_NAMES = A_NAMES + O_NAMES + CROSS_NAMES


def cru_shapes(n_a: int, n_o: int) -> Dict[str, Tuple[int, int]]:
    shapes = {k: (n_a, n_a) for k in A_NAMES}
    shapes.update({k: (n_o, n_o) for k in O_NAMES})
    shapes["U_i"] = (n_a, n_o)
    shapes["I_o"] = (n_o, n_a)
    return shapes


class CruCell:
    """The fifteen CRU matrices, held by name."""

    def __init__(self, mats: Dict[str, np.ndarray]):
        missing = set(CRU_NAMES) - set(mats)
        if missing:
            raise DimensionError(f"missing CRU matrices: {sorted(missing)}")
        self.n_a = mats["W_a"].shape[0]
        self.n_o = mats["W_o"].shape[0]
        for k, shp in cru_shapes(self.n_a, self.n_o).items():
            if mats[k].shape != shp:
                raise DimensionError(f"{k} has shape {mats[k].shape}, expected {shp}")
        self.mats = {k: np.asarray(mats[k], dtype=DTYPE) for k in CRU_NAMES}

    def __getitem__(self, k):
        return self.mats[k]

    @classmethod
    def init(cls, n_a: int, n_o: int, rng: np.random.Generator, scale=None) -> "CruCell":
        mats = {}
        for k, (r, c) in cru_shapes(n_a, n_o).items():
            lim = np.sqrt(1.0 / c) if scale is None else scale
            mats[k] = rng.uniform(-lim, lim, size=(r, c))
        return cls(mats)

    @classmethod
    def zeros(cls, n_a: int, n_o: int) -> "CruCell":
        return cls({k: np.zeros(s) for k, s in cru_shapes(n_a, n_o).items()})


@dataclass
class CruState:
    a: np.ndarray
    o: np.ndarray

    @classmethod
    def zeros(cls, n_a: int, n_o: int) -> "CruState":
        return cls(np.zeros(n_a), np.zeros(n_o))


@dataclass
class StepCache:
    a_in: np.ndarray
    o_in: np.ndarray
    prev: CruState
    z_a: np.ndarray
    r_a: np.ndarray
    z_o: np.ndarray
    r_o: np.ndarray
    r_i: np.ndarray
    a_hat: np.ndarray
    o_hat: np.ndarray


def cru_step(cell: CruCell, a_in, o_in, prev: CruState) -> Tuple[CruState, StepCache]:
    a_in = np.asarray(a_in, dtype=DTYPE)
    o_in = np.asarray(o_in, dtype=DTYPE)
    if a_in.shape != (cell.n_a,) or o_in.shape != (cell.n_o,):
        raise DimensionError(f"inputs {a_in.shape}/{o_in.shape} do not match n_a={cell.n_a}, n_o={cell.n_o}")
    if prev.a.shape != (cell.n_a,) or prev.o.shape != (cell.n_o,):
        raise DimensionError("previous state does not match the cell")
    if not (np.all(np.isfinite(a_in)) and np.all(np.isfinite(o_in))):
        raise NumericError("non-finite CRU input")
    M = cell.mats
    ap, op = prev.a, prev.o
    z_a = sigmoid(M["W_za"] @ a_in + M["U_za"] @ ap)
    r_a = sigmoid(M["W_ra"] @ a_in + M["U_ra"] @ ap)
    z_o = sigmoid(M["W_zo"] @ o_in + M["U_zo"] @ op)
    r_o = sigmoid(M["W_ro"] @ o_in + M["U_ro"] @ op)
    r_i = sigmoid(M["W_i"] @ a_in + M["U_i"] @ op)
    a_hat = np.tanh(M["W_a"] @ a_in + M["U_a"] @ (r_a * ap))
    o_hat = np.tanh(M["W_o"] @ o_in + M["U_o"] @ (r_o * op) + M["I_o"] @ (r_i * a_hat))
    a_new = (1.0 - z_a) * ap + z_a * a_hat
    o_new = (1.0 - z_o) * op + z_o * o_hat
    cache = StepCache(a_in, o_in, prev, z_a, r_a, z_o, r_o, r_i, a_hat, o_hat)
    return CruState(a_new, o_new), cache


def cru_backward(cell: CruCell, cache: StepCache, grad_next: CruState):
    """Chain rule through one step.

    Returns ``(grads, d_a_in, d_o_in, d_prev)`` where ``grads`` maps every
    matrix name to an array of its shape.
    """
    if cache.a_in.shape != (cell.n_a,) or cache.o_in.shape != (cell.n_o,):
        raise DimensionError("cache does not belong to this cell")
    M = cell.mats
    a_in, o_in = cache.a_in, cache.o_in
    ap, op = cache.prev.a, cache.prev.o
    z_a, r_a, z_o, r_o, r_i = cache.z_a, cache.r_a, cache.z_o, cache.r_o, cache.r_i
    a_hat, o_hat = cache.a_hat, cache.o_hat
    dan, don = grad_next.a, grad_next.o

    g = {}
    # response memory
    d_zo = don * (o_hat - op)
    d_oh = don * z_o
    d_op = don * (1.0 - z_o)
    d_oh_pre = d_oh * (1.0 - o_hat ** 2)
    g["W_o"] = np.outer(d_oh_pre, o_in)
    g["U_o"] = np.outer(d_oh_pre, r_o * op)
    g["I_o"] = np.outer(d_oh_pre, r_i * a_hat)
    t_ro = M["U_o"].T @ d_oh_pre
    d_ro = t_ro * op
    d_op += t_ro * r_o
    t_ri = M["I_o"].T @ d_oh_pre
    d_ri = t_ri * a_hat
    # action memory
    d_za = dan * (a_hat - ap)
    d_ah = dan * z_a + t_ri * r_i
    d_ap = dan * (1.0 - z_a)
    d_ah_pre = d_ah * (1.0 - a_hat ** 2)
    g["W_a"] = np.outer(d_ah_pre, a_in)
    g["U_a"] = np.outer(d_ah_pre, r_a * ap)
    t_ra = M["U_a"].T @ d_ah_pre
    d_ra = t_ra * ap
    d_ap += t_ra * r_a
    # gates
    d_za_pre = d_za * z_a * (1.0 - z_a)
    d_ra_pre = d_ra * r_a * (1.0 - r_a)
    d_zo_pre = d_zo * z_o * (1.0 - z_o)
    d_ro_pre = d_ro * r_o * (1.0 - r_o)
    d_ri_pre = d_ri * r_i * (1.0 - r_i)
    g["W_za"] = np.outer(d_za_pre, a_in)
    g["U_za"] = np.outer(d_za_pre, ap)
    g["W_ra"] = np.outer(d_ra_pre, a_in)
    g["U_ra"] = np.outer(d_ra_pre, ap)
    g["W_zo"] = np.outer(d_zo_pre, o_in)
    g["U_zo"] = np.outer(d_zo_pre, op)
    g["W_ro"] = np.outer(d_ro_pre, o_in)
    g["U_ro"] = np.outer(d_ro_pre, op)
    g["W_i"] = np.outer(d_ri_pre, a_in)
    g["U_i"] = np.outer(d_ri_pre, op)
    d_ap += M["U_za"].T @ d_za_pre + M["U_ra"].T @ d_ra_pre
    d_op += M["U_zo"].T @ d_zo_pre + M["U_ro"].T @ d_ro_pre + M["U_i"].T @ d_ri_pre
    d_a_in = (M["W_a"].T @ d_ah_pre + M["W_za"].T @ d_za_pre
              + M["W_ra"].T @ d_ra_pre + M["W_i"].T @ d_ri_pre)
    d_o_in = M["W_o"].T @ d_oh_pre + M["W_zo"].T @ d_zo_pre + M["W_ro"].T @ d_ro_pre
    grads = {k: g[k] for k in CRU_NAMES}
    return grads, d_a_in, d_o_in, CruState(d_ap, d_op)


def unroll(cell: CruCell, inputs: Sequence[Tuple[np.ndarray, np.ndarray]], init: CruState):
    state = init
    caches: List[StepCache] = []
    for a_in, o_in in inputs:
        state, c = cru_step(cell, a_in, o_in, state)
        caches.append(c)
    return state, caches


def unroll_backward(cell: CruCell, caches: Sequence[StepCache], grad_final: CruState):
    """Backpropagate through a whole unroll; parameter gradients accumulate."""
    grads = {k: np.zeros_like(v) for k, v in cell.mats.items()}
    d_in = []
    g = grad_final
    for c in reversed(caches):
        gs, da, do, g = cru_backward(cell, c, g)
        for k in grads:
            grads[k] += gs[k]
        d_in.append((da, do))
    d_in.reverse()
    return grads, d_in, g
