"""Turning records into packed numeric batches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .domain import (ClientRecord, ClientTuple, DemographicSchema, Demographics,
                     RangeError, SchemaError)


class DemographicEncoder:
    """One-hot categoricals plus standardized numerics (training-set stats)."""

    def __init__(self, schema: DemographicSchema, mean=None, std=None):
        self.schema = schema
        k = schema.n_numeric
        self.mean = np.zeros(k) if mean is None else np.asarray(mean, dtype=float)
        self.std = np.ones(k) if std is None else np.asarray(std, dtype=float)

    @property
    def width(self) -> int:
        return self.schema.encoded_width

    def fit(self, records: Sequence[ClientRecord]) -> "DemographicEncoder":
        k = self.schema.n_numeric
        if k and records:
            X = np.array([r.demographics.numeric for r in records], dtype=float).reshape(-1, k)
            self.mean = X.mean(axis=0)
            sd = X.std(axis=0)
            self.std = np.where(sd > 0, sd, 1.0)
        return self

    def encode(self, d: Demographics) -> np.ndarray:
        errs = d.check(self.schema)
        if errs:
            raise SchemaError("; ".join(errs))
        out = np.zeros(self.width)
        off = 0
        for v, card in zip(d.categorical, self.schema.categorical):
            out[off + v] = 1.0
            off += card
        if self.schema.n_numeric:
            out[off:] = (np.asarray(d.numeric, dtype=float) - self.mean) / self.std
        return out


def multi_hot(codes, n_r: int) -> np.ndarray:
    v = np.zeros(n_r)
    for c in codes:
        if not 0 <= c < n_r:
            raise RangeError(f"response code {c} outside [0,{n_r})")
        v[c] = 1.0
    return v


@dataclass
class ClientArrays:
    """Dense view of one client: per-step inputs and per-labeled-step targets."""
    client_id: str
    prev_actions: np.ndarray  # (L,) int
    mh: np.ndarray  # (L, n_r)
    explicit: np.ndarray  # (L, n_x)
    demo: np.ndarray  # (d,)
    rewards: np.ndarray  # (L-1,) label of the action chosen at step t (nan if absent)
    chosen: np.ndarray  # (L-1,) int, action chosen at step t

    @property
    def length(self) -> int:
        return len(self.prev_actions)

    @property
    def labeled(self) -> np.ndarray:
        return np.nonzero(~np.isnan(self.rewards))[0] + 1


def client_arrays(rec: ClientRecord, demo_enc: DemographicEncoder, n_r: int, n_x: int) -> ClientArrays:
    L = rec.length
    prev = np.array([s.prev_action for s in rec.steps], dtype=np.int64)
    mh = np.zeros((L, n_r))
    ex = np.zeros((L, n_x))
    for i, s in enumerate(rec.steps):
        mh[i] = multi_hot(s.responses, n_r)
        if n_x:
            ex[i] = s.explicit
    rewards = np.array([np.nan if s.reward is None else s.reward for s in rec.steps[:-1]], dtype=float)
    return ClientArrays(rec.client_id, prev, mh, ex, demo_enc.encode(rec.demographics), rewards, prev[1:].copy())


def tuple_arrays(tup: ClientTuple, demo_enc: DemographicEncoder, n_r: int, n_x: int) -> ClientArrays:
    prev = np.array([a for a, _ in tup.cru_inputs()], dtype=np.int64)
    mh = np.array([multi_hot(o, n_r) for o in tup.responses]).reshape(len(prev), n_r)
    ex = np.zeros((len(prev), n_x))
    if n_x:
        ex[-1] = tup.explicit
    return ClientArrays(tup.client_id, prev, mh, ex, demo_enc.encode(tup.demographics),
                        np.full(len(prev) - 1, np.nan), prev[1:].copy())


@dataclass
class Batch:
    """Packed sequences plus readouts.

    Sequence rows are sorted by length (longest first) so step ``s`` is live
    for rows ``[0, n_active[s])``. Each readout reads the state after step
    ``ro_step`` of row ``ro_row`` and scores action ``cand``.
    """
    act: np.ndarray  # (T, n) int
    mh: np.ndarray  # (T, n, n_r)
    n_active: np.ndarray  # (T,)
    demo: np.ndarray  # (n, d)
    ro_row: np.ndarray  # (S,)
    ro_step: np.ndarray  # (S,) 1-based
    explicit: np.ndarray  # (S, n_x)
    cand: np.ndarray  # (S,)
    cur_mh: np.ndarray  # (S, n_r) response set at the readout step
    labels: Optional[np.ndarray] = None  # (S,)
    step_index: Optional[np.ndarray] = None  # (S,) same as ro_step, kept for loss weighting

    @property
    def size(self) -> int:
        return len(self.cand)

    def packed_index(self):
        """(step, row) of every live cell, in packed kernel order."""
        steps = np.repeat(np.arange(len(self.n_active)), self.n_active)
        starts = np.repeat(np.cumsum(self.n_active) - self.n_active, self.n_active)
        return steps, np.arange(len(steps)) - starts


def pack(seqs: Sequence[Tuple[ClientArrays, int]], readouts: Sequence[Tuple[int, int, int, float]]) -> Batch:
    """``seqs``: (client, truncation length). ``readouts``: (seq idx, step, action, label)."""
    lens = np.array([t for _, t in seqs], dtype=np.int64)
    order = np.argsort(-lens, kind="stable")
    pos = np.empty_like(order)
    pos[order] = np.arange(len(order))
    T = int(lens.max()) if len(lens) else 0
    n = len(seqs)
    ca0 = seqs[0][0]
    n_r = ca0.mh.shape[1]
    n_x = ca0.explicit.shape[1]
    act = np.zeros((T, n), dtype=np.int64)
    mh = np.zeros((T, n, n_r))
    demo = np.zeros((n, ca0.demo.shape[0]))
    for i, (ca, t) in enumerate(seqs):
        r = pos[i]
        act[:t, r] = ca.prev_actions[:t]
        mh[:t, r] = ca.mh[:t]
        demo[r] = ca.demo
    n_active = np.array([(lens > s).sum() for s in range(T)], dtype=np.int64)
    S = len(readouts)
    ro_row = np.empty(S, dtype=np.int64)
    ro_step = np.empty(S, dtype=np.int64)
    cand = np.empty(S, dtype=np.int64)
    labels = np.empty(S)
    explicit = np.zeros((S, n_x))
    cur = np.zeros((S, n_r))
    for j, (si, t, a, y) in enumerate(readouts):
        ca = seqs[si][0]
        ro_row[j] = pos[si]
        ro_step[j] = t
        cand[j] = a
        labels[j] = y
        explicit[j] = ca.explicit[t - 1]
        cur[j] = ca.mh[t - 1]
    return Batch(act, mh, n_active, demo, ro_row, ro_step, explicit, cand, cur, labels, ro_step.copy())


def training_batch(items: Sequence[Tuple[ClientArrays, int]]) -> Batch:
    """One sequence per (client, labeled step t), scored on the action chosen at t."""
    seqs = [(ca, t) for ca, t in items]
    ro = [(i, t, int(ca.chosen[t - 1]), float(ca.rewards[t - 1])) for i, (ca, t) in enumerate(items)]
    return pack(seqs, ro)


def client_batch(clients: Sequence[ClientArrays]) -> Batch:
    """Every labeled step of every client, sharing one unroll per client."""
    seqs, ro = [], []
    for ca in clients:
        lab = ca.labeled
        if len(lab) == 0:
            continue
        i = len(seqs)
        seqs.append((ca, int(lab.max())))
        for t in lab:
            ro.append((i, int(t), int(ca.chosen[t - 1]), float(ca.rewards[t - 1])))
    return pack(seqs, ro)


def candidate_batch(ca: ClientArrays, t: int, actions: Sequence[int]) -> Batch:
    """Score several candidate actions for one client state."""
    return pack([(ca, t)], [(0, t, int(a), np.nan) for a in actions])
