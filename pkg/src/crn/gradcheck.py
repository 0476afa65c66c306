"""End-to-end finite-difference check of a reward model at small dims.

ReLU makes the loss piecewise smooth, so a central difference straddling a
kink is meaningless. The input batch is redrawn until every ReLU
pre-activation sits at least ``KINK_MARGIN`` away from zero, which is far
beyond what an ``h=1e-5`` perturbation can move it.

A ReLU unit that is active on every row feeds batch-norm a pure shift, so the
gradient of its bias is exactly zero and the finite difference returns only
round-off, which the 1e-8 relative-error floor cannot absorb. The batch is
also required to put every ReLU unit on both sides of zero.

A central difference at ``h`` is only accurate to about ``eps * |loss| / h``
in absolute terms, so an entry that cancels to nearly zero across the batch
cannot be resolved to ``tol`` relative error. The batch is redrawn until every
nonzero analytic entry is at least ``RESOLVE_MARGIN`` times that floor divided
by ``tol``. Only the analytic gradient and the loss value are inspected, so the
comparison itself still covers every coordinate, and a backward pass that
kept producing tiny entries would exhaust the redraws and raise instead of
passing. Some weight draws leave a unit that no input batch can condition, so
the weights are redrawn as well after ``PARAM_REDRAW`` rejected batches.
"""
from __future__ import annotations

import numpy as np

from .domain import DemographicSchema
from .features import ClientArrays, client_batch
from .model import ModelConfig, RewardModel
from .numerics import GradCheckReport, finite_diff_check, make_rng

KINK_MARGIN = 1e-3
RESOLVE_MARGIN = 2.0
WEIGHT_SCALE = 0.5
PARAM_REDRAW = 20  # fresh weights after this many rejected batches


def relu_preacts(model, cache):
    zs = []
    if model.cfg.kind == "markov_mlp":
        _, mc, _ = cache
        zs += [z for _, z, _ in mc[:2]]
    else:
        _, ec, hc = cache
        for key in ("demo", "fuse"):
            zs += [z for _, z, _ in ec[key][:2]]
        zs += [z for _, z, _ in hc[0]]
    return zs


def relu_margin(model, cache) -> float:
    """Smallest |pre-activation| over every ReLU in the forward cache."""
    return float(min(np.abs(z).min() for z in relu_preacts(model, cache)))


def units_mixed(model, cache) -> bool:
    return all(((z > 0).any(axis=0) & (z < 0).any(axis=0)).all() for z in relu_preacts(model, cache))


def resolvable(grads, loss: float, h: float, tol: float) -> bool:
    """Every nonzero entry clears the central-difference round-off by a margin.

    Evaluating the loss carries an error of roughly ``eps * |loss|``, so the
    difference quotient is only good to ``eps * |loss| / h`` in absolute terms.
    """
    floor = RESOLVE_MARGIN * np.finfo(float).eps * abs(loss) / (h * tol)
    return all(np.abs(g[g != 0]).min(initial=np.inf) >= floor for g in grads.values())


def random_clients(rng, n, length, m, n_r, n_x, schema: DemographicSchema):
    out = []
    for j in range(n):
        prev = np.r_[0, rng.integers(1, m + 1, length - 1)]
        demo = np.zeros(schema.encoded_width)
        off = 0
        for card in schema.categorical:
            demo[off + (j + rng.integers(card)) % card] = 1.0
            off += card
        demo[off:] = rng.normal(size=schema.n_numeric)
        out.append(ClientArrays(f"g{j}", prev, (rng.random((length, n_r)) < 0.4) * 1.0,
                                rng.normal(size=(length, n_x)), demo,
                                rng.random(length - 1), prev[1:].copy()))
    return out


def gradcheck_model(seed: int, kind: str = "crn", n_a=4, n_o=4, n_s=8, length=5, n_clients=8,
                    m=5, n_r=4, n_x=3, h=1e-5, tol=1e-4, max_tries=200) -> GradCheckReport:
    schema = DemographicSchema((3,), 2)
    cfg = ModelConfig(m, n_r, schema, n_x, n_a=n_a, n_o=n_o, n_s=n_s, n_imp=4, n_exp=4, hidden=6, kind=kind)
    model = RewardModel.create(cfg, seed)
    rng = make_rng(seed)
    for i in range(max_tries):
        if i % PARAM_REDRAW == 0:
            for k, p in model.params.items():
                if k.endswith(".gamma"):
                    p[...] = rng.uniform(0.5, 1.5, size=p.shape)
                elif k.endswith(".b"):
                    p[...] = rng.uniform(-0.05, 0.05, size=p.shape)
                else:
                    p[...] = rng.uniform(-WEIGHT_SCALE, WEIGHT_SCALE, size=p.shape)
        batch = client_batch(random_clients(rng, n_clients, length, m, n_r, n_x, schema))
        pred, cache = model.forward(batch, train=True)
        if relu_margin(model, cache) > KINK_MARGIN and units_mixed(model, cache):
            grads = model.backward(cache, 2.0 * (pred - batch.labels))
            if resolvable(grads, float(np.sum((pred - batch.labels) ** 2)), h, tol):
                break
    else:
        raise RuntimeError("could not draw a well-conditioned gradcheck batch")
    y = batch.labels

    def loss(_p):
        pred, _ = model.forward(batch, train=True)
        return float(np.sum((pred - y) ** 2))

    pred, cache = model.forward(batch, train=True)
    grads = model.backward(cache, 2.0 * (pred - y))
    return finite_diff_check(loss, model.params, grads, h=h, tol=tol)
