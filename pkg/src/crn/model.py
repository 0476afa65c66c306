"""Batched reward models: the CRN, its GRU variant and the Markov feed-forward baseline.

All three share one interface: ``forward(batch, train) -> (pred, cache)`` and
``backward(cache, dpred) -> grads`` over a flat, ordered parameter dict.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from . import kernels
from .cru import CRU_NAMES, cru_shapes
from .domain import DemographicSchema
from .features import Batch, DemographicEncoder
from .gru import GRU_NAMES, gru_backward, gru_forward, gru_shapes
from .layers import (bn_backward, bn_forward, dense, dense_back, init_bn, init_dense,
                     init_mlp3, mlp3_backward, mlp3_forward, uniform_init, zeros_like_params)
from .numerics import make_rng, sigmoid

MODEL_KINDS = ("crn", "gru", "markov_mlp")
N_BLOCKS = 3
EMB_INIT = 0.05


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    m: int
    n_r: int
    schema: DemographicSchema = field(default_factory=DemographicSchema)
    n_x: int = 0
    n_a: int = 16
    n_o: int = 32
    n_s: int = 32
    n_imp: int = 16
    n_exp: int = 16
    hidden: int = 32
    kind: str = "crn"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        for k in ("m", "n_r", "n_a", "n_o", "n_s", "n_imp", "hidden"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        if self.schema.encoded_width < 1:
            raise ConfigError("demographic schema must encode to at least one column")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = {"categorical": list(self.schema.categorical), "n_numeric": self.schema.n_numeric}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        s = d.pop("schema")
        return cls(schema=DemographicSchema(tuple(s["categorical"]), int(s["n_numeric"])), **d)


class RewardModel:
    """Shared plumbing: parameters, batch-norm state and the demographic encoder."""

    def __init__(self, cfg: ModelConfig, params, bn_state, demo_enc: Optional[DemographicEncoder] = None):
        self.cfg = cfg
        self.params: Dict[str, np.ndarray] = params
        self.bn_state = bn_state
        self.demo_enc = demo_enc or DemographicEncoder(cfg.schema)

    @classmethod
    def create(cls, cfg: ModelConfig, seed=0):
        if cfg.kind == "markov_mlp":
            return MarkovModel.init(cfg, seed)
        return CrnModel.init(cfg, seed)

    def predict(self, batch: Batch) -> np.ndarray:
        return self.forward(batch, train=False)[0]

    def zero_grads(self):
        return zeros_like_params(self.params)


class CrnModel(RewardModel):
    """Embedding, demographic-initialized recurrence, fusion to ``s_t``, residual head.

    ``kind="gru"`` swaps the CRU for a single GRU over ``[a_i, o_i]`` whose
    hidden state starts from the demographic encoding.
    """

    @classmethod
    def init(cls, cfg: ModelConfig, seed=0) -> "CrnModel":
        rng = make_rng(seed)
        p, bn = {}, {}
        na, no = cfg.n_a, cfg.n_o
        p["emb"] = rng.uniform(-EMB_INIT, EMB_INIT, size=(cfg.m + 1, na))
        p["resp.W"] = uniform_init(rng, no, cfg.n_r)
        init_mlp3(p, bn, "demo", rng, (cfg.schema.encoded_width, cfg.hidden, cfg.hidden, no))
        if cfg.kind == "crn":
            for k, (r, c) in cru_shapes(na, no).items():
                p[f"cru.{k}"] = uniform_init(rng, r, c)
            init_dense(p, "imp", rng, cfg.n_imp, na + no)
        else:
            for k, (r, c) in gru_shapes(na + no, no).items():
                p[f"gru.{k}"] = uniform_init(rng, r, c)
            init_dense(p, "imp", rng, cfg.n_imp, no)
        fuse_in = cfg.n_imp
        if cfg.n_x:
            init_dense(p, "exp", rng, cfg.n_exp, cfg.n_x)
            fuse_in += cfg.n_exp
        init_mlp3(p, bn, "fuse", rng, (fuse_in, cfg.hidden, cfg.hidden, cfg.n_s))
        w = cfg.n_s + na
        for k in range(1, N_BLOCKS + 1):
            init_dense(p, f"head.blk{k}", rng, w, w)
            init_bn(p, bn, f"head.bn{k}", w)
        init_dense(p, "head.out", rng, 1, w)
        return cls(cfg, p, bn)

    def _sub(self, prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix)}

    # -- encoder -------------------------------------------------------------
    def encode(self, batch: Batch, train: bool):
        """State vectors ``s_t`` for every readout of the batch."""
        P = self.params
        cfg = self.cfg
        n = batch.act.shape[1]
        ps, pr = batch.packed_index()
        act = batch.act[ps, pr]
        mh = batch.mh[ps, pr]
        xa = P["emb"][act]
        xo = mh @ P["resp.W"].T
        o0, demo_c = mlp3_forward(batch.demo, P, self.bn_state, "demo", train, out="tanh")
        if cfg.kind == "crn":
            a0 = np.zeros((n, cfg.n_a))
            rc = kernels.cru_forward(self._sub("cru."), xa, xo, batch.n_active, a0, o0)
            h = np.concatenate([rc["A"][batch.ro_step, batch.ro_row], rc["O"][batch.ro_step, batch.ro_row]], axis=1)
        else:
            x = np.concatenate([xa, xo], axis=1)
            rc = gru_forward(self._sub("gru."), x, batch.n_active, o0)
            h = rc["h"][batch.ro_step, batch.ro_row]
        s_imp = dense(h, P, "imp")
        parts = [s_imp]
        if cfg.n_x:
            parts.append(dense(batch.explicit, P, "exp"))
        u = np.concatenate(parts, axis=1)
        s, fuse_c = mlp3_forward(u, P, self.bn_state, "fuse", train)
        cache = dict(act=act, mh=mh, xa=xa, xo=xo, demo=demo_c, rc=rc, h=h, u=u, fuse=fuse_c)
        return s, cache

    def encode_backward(self, ec, ds, batch: Batch, g):
        P = self.params
        cfg = self.cfg
        du = mlp3_backward(ds, ec["fuse"], P, "fuse", g)
        d_imp = du[:, :cfg.n_imp]
        if cfg.n_x:
            dense_back(du[:, cfg.n_imp:], batch.explicit, P, "exp", g)
        dh = dense_back(d_imp, ec["h"], P, "imp", g)
        T, n = batch.act.shape
        if cfg.kind == "crn":
            na = cfg.n_a
            dA = np.zeros((T + 1, n, na))
            dO = np.zeros((T + 1, n, cfg.n_o))
            np.add.at(dA, (batch.ro_step, batch.ro_row), dh[:, :na])
            np.add.at(dO, (batch.ro_step, batch.ro_row), dh[:, na:])
            cg, dxa, dxo, _, do0 = kernels.cru_backward(self._sub("cru."), ec["rc"], ec["xa"], ec["xo"],
                                                          batch.n_active, dA, dO)
            for k in CRU_NAMES:
                g[f"cru.{k}"] += cg[k]
        else:
            dH = np.zeros((T + 1, n, cfg.n_o))
            np.add.at(dH, (batch.ro_step, batch.ro_row), dh)
            x = np.concatenate([ec["xa"], ec["xo"]], axis=1)
            gg, dx, do0 = gru_backward(self._sub("gru."), ec["rc"], x, batch.n_active, dH)
            for k in GRU_NAMES:
                g[f"gru.{k}"] += gg[k]
            dxa, dxo = dx[:, :cfg.n_a], dx[:, cfg.n_a:]
        np.add.at(g["emb"], ec["act"], dxa)
        g["resp.W"] += dxo.T @ ec["mh"]
        mlp3_backward(do0, ec["demo"], P, "demo", g)

    # -- reward head ---------------------------------------------------------
    def head(self, s, cand, train: bool):
        P = self.params
        x = np.concatenate([s, P["emb"][cand]], axis=1)
        blocks = []
        for k in range(1, N_BLOCKS + 1):
            z = dense(x, P, f"head.blk{k}")
            r = np.maximum(z, 0.0)
            y, bc = bn_forward(r, P, self.bn_state, f"head.bn{k}", train)
            blocks.append((x, z, bc))
            x = x + y
        logit = dense(x, P, "head.out")[:, 0]
        pred = sigmoid(logit)
        return pred, (blocks, x, pred)

    def head_backward(self, hc, dpred, cand, g):
        P = self.params
        blocks, x, pred = hc
        dlogit = (dpred * pred * (1.0 - pred))[:, None]
        dx = dense_back(dlogit, x, P, "head.out", g)
        for k in range(N_BLOCKS, 0, -1):
            x_in, z, bc = blocks[k - 1]
            dr = bn_backward(dx, bc, P, f"head.bn{k}", g)
            dx = dx + dense_back(dr * (z > 0), x_in, P, f"head.blk{k}", g)
        ns = self.cfg.n_s
        np.add.at(g["emb"], cand, dx[:, ns:])
        return dx[:, :ns]

    # -- full model ----------------------------------------------------------
    def forward(self, batch: Batch, train: bool = False):
        s, ec = self.encode(batch, train)
        pred, hc = self.head(s, batch.cand, train)
        return pred, (batch, ec, hc)

    def backward(self, cache, dpred) -> Dict[str, np.ndarray]:
        batch, ec, hc = cache
        g = self.zero_grads()
        ds = self.head_backward(hc, np.asarray(dpred, dtype=float), batch.cand, g)
        self.encode_backward(ec, ds, batch, g)
        return g


class MarkovModel(RewardModel):
    """No history: 3-layer MLP over demographics, explicit features,
    current response set and the candidate's own embedding, then sigmoid."""

    @classmethod
    def init(cls, cfg: ModelConfig, seed=0) -> "MarkovModel":
        rng = make_rng(seed)
        p, bn = {}, {}
        p["emb"] = rng.uniform(-EMB_INIT, EMB_INIT, size=(cfg.m + 1, cfg.n_a))
        d_in = cfg.schema.encoded_width + cfg.n_x + cfg.n_r + cfg.n_a
        init_mlp3(p, bn, "mlp", rng, (d_in, cfg.hidden, cfg.hidden, 1))
        return cls(cfg, p, bn)

    def _inputs(self, batch: Batch):
        demo = batch.demo[batch.ro_row]
        return np.concatenate([demo, batch.explicit, batch.cur_mh, self.params["emb"][batch.cand]], axis=1)

    def forward(self, batch: Batch, train: bool = False):
        x = self._inputs(batch)
        y, mc = mlp3_forward(x, self.params, self.bn_state, "mlp", train)
        pred = sigmoid(y[:, 0])
        return pred, (batch, mc, pred)

    def backward(self, cache, dpred):
        batch, mc, pred = cache
        g = self.zero_grads()
        dy = (np.asarray(dpred, dtype=float) * pred * (1.0 - pred))[:, None]
        dx = mlp3_backward(dy, mc, self.params, "mlp", g)
        np.add.at(g["emb"], batch.cand, dx[:, -self.cfg.n_a:])
        return g
