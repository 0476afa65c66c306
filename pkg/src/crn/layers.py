"""Affine, ReLU and batch-norm layers with hand-written backward passes.

Weights are stored ``(out, in)`` and applied to row batches as ``x @ W.T + b``.
Batch-norm running statistics live outside the parameter dict, in a
``bn_state`` mapping keyed by layer name.
"""
from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def uniform_init(rng, out_dim, in_dim):
    lim = np.sqrt(1.0 / in_dim)
    return rng.uniform(-lim, lim, size=(out_dim, in_dim))


def init_dense(params, name, rng, out_dim, in_dim, bias=True):
    params[f"{name}.W"] = uniform_init(rng, out_dim, in_dim)
    if bias:
        params[f"{name}.b"] = np.zeros(out_dim)


def init_bn(params, bn_state, name, dim):
    params[f"{name}.gamma"] = np.ones(dim)
    params[f"{name}.beta"] = np.zeros(dim)
    bn_state[name] = {"mean": np.zeros(dim), "var": np.ones(dim)}


def dense(x, params, name):
    y = x @ params[f"{name}.W"].T
    b = params.get(f"{name}.b")
    if b is not None:
        y = y + b
    return y


def dense_back(dy, x, params, name, grads):
    grads[f"{name}.W"] += dy.T @ x
    if f"{name}.b" in params:
        grads[f"{name}.b"] += dy.sum(axis=0)
    return dy @ params[f"{name}.W"]


def bn_forward(x, params, bn_state, name, train):
    g = params[f"{name}.gamma"]
    b = params[f"{name}.beta"]
    st = bn_state[name]
    if train:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        st["mean"] = (1 - BN_MOMENTUM) * st["mean"] + BN_MOMENTUM * mu
        st["var"] = (1 - BN_MOMENTUM) * st["var"] + BN_MOMENTUM * var
    else:
        mu, var = st["mean"], st["var"]
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, train)


def bn_backward(dy, cache, params, name, grads):
    xhat, inv, train = cache
    g = params[f"{name}.gamma"]
    grads[f"{name}.gamma"] += (dy * xhat).sum(axis=0)
    grads[f"{name}.beta"] += dy.sum(axis=0)
    dxhat = dy * g
    if not train:
        return dxhat * inv
    n = dy.shape[0]
    return inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


def init_mlp3(params, bn_state, name, rng, dims: Tuple[int, int, int, int]):
    d0, d1, d2, d3 = dims
    init_dense(params, f"{name}.l1", rng, d1, d0)
    init_bn(params, bn_state, f"{name}.bn1", d1)
    init_dense(params, f"{name}.l2", rng, d2, d1)
    init_bn(params, bn_state, f"{name}.bn2", d2)
    init_dense(params, f"{name}.l3", rng, d3, d2)


def mlp3_forward(x, params, bn_state, name, train, out="linear"):
    """affine-ReLU-BN, affine-ReLU-BN, affine[-tanh]."""
    caches = []
    h = x
    for k in (1, 2):
        z = dense(h, params, f"{name}.l{k}")
        r = np.maximum(z, 0.0)
        y, bc = bn_forward(r, params, bn_state, f"{name}.bn{k}", train)
        caches.append((h, z, bc))
        h = y
    y = dense(h, params, f"{name}.l3")
    if out == "tanh":
        y = np.tanh(y)
    caches.append((h, y, out))
    return y, caches


def mlp3_backward(dy, caches, params, name, grads):
    h, y, out = caches[-1]
    if out == "tanh":
        dy = dy * (1.0 - y * y)
    dh = dense_back(dy, h, params, f"{name}.l3", grads)
    for k in (2, 1):
        h_in, z, bc = caches[k - 1]
        dr = bn_backward(dh, bc, params, f"{name}.bn{k}", grads)
        dz = dr * (z > 0)
        dh = dense_back(dz, h_in, params, f"{name}.l{k}", grads)
    return dh


def zeros_like_params(params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def param_names_with_prefix(params, prefix) -> List[str]:
    return [k for k in params if k.startswith(prefix)]
