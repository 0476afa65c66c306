"""Single-client view of the encoder: embedding, response encoding,
demographic memory initialization and the fused state vector ``s_t``.

These run in inference mode and go through the same batched code as
training, so a single client is just a batch of one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import ClientTuple, Demographics, RangeError
from .features import candidate_batch, multi_hot, tuple_arrays
from .layers import mlp3_forward


@dataclass
class StateVector:
    s: np.ndarray
    client_id: str
    t: int


def embed_action(model, action_id: int) -> np.ndarray:
    m = model.cfg.m
    if not 0 <= action_id <= m:
        raise RangeError(f"action id {action_id} outside [0,{m}]")
    return model.params["emb"][action_id].copy()


def encode_responses(model, responses) -> np.ndarray:
    return model.params["resp.W"] @ multi_hot(responses, model.cfg.n_r)


def init_memory(model, demographics: Demographics) -> np.ndarray:
    d = model.demo_enc.encode(demographics)[None, :]
    o0, _ = mlp3_forward(d, model.params, model.bn_state, "demo", train=False, out="tanh")
    return o0[0]


def tuple_batch(model, tup: ClientTuple, actions=(1,)):
    cfg = model.cfg
    ca = tuple_arrays(tup, model.demo_enc, cfg.n_r, cfg.n_x)
    return candidate_batch(ca, tup.t, actions)


def encode_client(model, tup: ClientTuple) -> StateVector:
    s, _ = model.encode(tuple_batch(model, tup), train=False)
    return StateVector(s[0], tup.client_id, tup.t)
