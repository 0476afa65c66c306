"""Mini-batch training with the four imbalance strategies.

Per-sample loss is ``w_c[a] * w_r(r) * (pred - label)**2``. Action weights
come from a softmax over inverse training-set action frequencies, reward
weights are ``tanh(r + 0.1)``, and labels may be shrunk to ``r / t**2``.
With loss selection on, only the ``k_loss`` largest per-sample losses in the
batch are averaged and backpropagated. Clients can be drawn with probability
``softmax(length)`` instead of uniformly over labeled steps.
"""
from __future__ import annotations

import copy
import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .domain import ActionCatalog, ClientRecord, DataError, RangeError
from .features import ClientArrays, DemographicEncoder, client_arrays, client_batch, training_batch
from .model import ModelConfig, RewardModel
from .numerics import AdamState, DimensionError, NumericError, adam_step, make_rng, stable_softmax

STRATEGIES = ("action", "client", "reward", "effect", "topk")


class ConfigError(ValueError):
    pass


@dataclass
class ImbalanceConfig:
    action_weighting: bool = False
    client_sampling: bool = False
    reward_weighting: bool = False
    effectiveness: bool = False
    loss_selection: bool = False
    k_loss: int = 64

    @classmethod
    def none(cls, k_loss=64) -> "ImbalanceConfig":
        return cls(k_loss=k_loss)

    @classmethod
    def all(cls, k_loss=64) -> "ImbalanceConfig":
        return cls(True, True, True, True, True, k_loss)

    @classmethod
    def parse(cls, spec: str, k_loss=64) -> "ImbalanceConfig":
        """``none``, ``all`` or a comma list drawn from action,client,reward,effect,topk."""
        spec = spec.strip().lower()
        if spec == "none":
            return cls.none(k_loss)
        if spec == "all":
            return cls.all(k_loss)
        names = [s.strip() for s in spec.split(",") if s.strip()]
        bad = [s for s in names if s not in STRATEGIES]
        if bad or not names:
            raise ConfigError(f"unknown imbalance strategies {bad or spec!r}; choose from {STRATEGIES}")
        return cls("action" in names, "client" in names, "reward" in names,
                   "effect" in names, "topk" in names, k_loss)

    def check(self, batch_size: int):
        # the upper bound only matters when selection is on
        if self.k_loss < 1 or (self.loss_selection and self.k_loss > batch_size):
            raise ConfigError(f"k_loss={self.k_loss} must lie in [1, batch size {batch_size}]")


@dataclass
class TrainConfig:
    kind: str = "crn"
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_a: int = 16
    n_o: int = 32
    n_s: int = 32
    n_imp: int = 16
    n_exp: int = 16
    hidden: int = 32
    val_frac: float = 0.1
    test_frac: float = 0.2
    restore_best: bool = True  # hand back the weights from the lowest validation loss

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (0 <= self.val_frac < 1 and 0 <= self.test_frac < 1 and self.val_frac + self.test_frac < 1):
            raise ConfigError("validation and test fractions must leave a training share")

    @classmethod
    def from_mapping(cls, d) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
            cur = getattr(cls, k, None)
            if isinstance(cur, bool) and isinstance(v, str):
                if v.strip().lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ConfigError(f"{k} must be a boolean, got {v!r}")
                out[k] = v.strip().lower() in ("true", "1", "yes")
            else:
                out[k] = type(cur)(v) if cur is not None else v
        return cls(**out)

    def model_config(self, m, n_r, schema, n_x) -> ModelConfig:
        return ModelConfig(m, n_r, schema, n_x, n_a=self.n_a, n_o=self.n_o, n_s=self.n_s,
                           n_imp=self.n_imp, n_exp=self.n_exp, hidden=self.hidden, kind=self.kind)


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        return int(np.argmin(self.val_loss)) + 1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
        for i, row in enumerate(zip(self.train_loss, self.val_loss, self.seconds), start=1):
            w.writerow([i, repr(row[0]), repr(row[1]), f"{row[2]:.3f}"])
        return buf.getvalue()


# -- the four strategies ------------------------------------------------------

def action_weights(catalog, present: Optional[Sequence[int]] = None) -> np.ndarray:
    """``softmax(1/f)`` over actions.

    ``catalog`` is an ActionCatalog (``f`` is then the training-set relative
    frequency) or a plain sequence of per-action frequencies used as given.
    Actions with ``f = 0`` get weight 0. Listing an action in ``present``
    while its frequency is 0 is a configuration error.
    """
    if isinstance(catalog, ActionCatalog):
        f = np.asarray(catalog.frequencies(), dtype=float)
    else:
        f = np.asarray(catalog, dtype=float)
        if f.ndim != 1 or np.any(f < 0) or not np.all(np.isfinite(f)):
            raise ConfigError("frequencies must be a vector of finite non-negative values")
    m = len(f)
    if present is None:
        live = f > 0
    else:
        live = np.zeros(m, dtype=bool)
        for a in present:
            if f[a - 1] <= 0:
                raise ConfigError(f"action {a} is present but has zero training frequency")
            live[a - 1] = True
    if not live.any():
        raise ConfigError("no action has a positive training frequency")
    w = np.zeros(m)
    w[live] = stable_softmax(1.0 / f[live])
    return w


def length_probabilities(lengths) -> np.ndarray:
    return stable_softmax(np.asarray(lengths, dtype=float))


def reward_weight(r):
    return np.tanh(np.asarray(r, dtype=float) + 0.1)


def adjust_effectiveness(r, t):
    """``r / t**2``; ``t`` is the 1-based step at which the action was taken."""
    t = np.asarray(t)
    if np.any(t < 1):
        raise RangeError("step index must be >= 1")
    return np.asarray(r, dtype=float) / (t.astype(float) ** 2)


def top_k_indices(losses, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, ties to the lower index."""
    losses = np.asarray(losses)
    order = np.lexsort((np.arange(len(losses)), -losses))
    return np.sort(order[:k])


@dataclass
class LossResult:
    loss: float
    dpred: np.ndarray
    per_sample: np.ndarray
    selected: np.ndarray


def compute_loss(pred, labels, weights, cfg: ImbalanceConfig, raw_labels=None) -> LossResult:
    """``weights`` are per-sample action weights (ignored unless action weighting is on).
    ``raw_labels`` (defaults to ``labels``) feed the reward weight, so label
    adjustment does not also shrink the reward weight."""
    pred = np.asarray(pred, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if pred.shape != labels.shape:
        raise DimensionError(f"{pred.shape[0]} predictions vs {labels.shape[0]} labels")
    n = len(pred)
    if n == 0:
        raise DimensionError("empty batch")
    w = np.ones(n)
    if cfg.action_weighting:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != pred.shape:
            raise DimensionError("weights must align with predictions")
        w = w * weights
    if cfg.reward_weighting:
        w = w * reward_weight(labels if raw_labels is None else raw_labels)
    err = pred - labels
    per = w * err * err
    if cfg.loss_selection:
        sel = top_k_indices(per, min(cfg.k_loss, n))
    else:
        sel = np.arange(n)
    k = len(sel)
    dpred = np.zeros(n)
    dpred[sel] = 2.0 * w[sel] * err[sel] / k
    return LossResult(float(per[sel].sum() / k), dpred, per, sel)


# -- data handling --------------------------------------------------------------

def split_clients(records: Sequence[ClientRecord], seed, val_frac=0.1, test_frac=0.2):
    """Client-level split into (train, validation, test)."""
    n = len(records)
    perm = make_rng(seed).permutation(n)
    n_test = int(round(test_frac * n))
    n_val = int(round(val_frac * n))
    te = sorted(perm[:n_test])
    va = sorted(perm[n_test:n_test + n_val])
    tr = sorted(perm[n_test + n_val:])
    pick = lambda idx: [records[i] for i in idx]
    return pick(tr), pick(va), pick(te)


def labeled_pairs(clients: Sequence[ClientArrays]) -> List[Tuple[int, int]]:
    return [(i, int(t)) for i, ca in enumerate(clients) for t in ca.labeled]


def sample_batch(clients: Sequence[ClientArrays], rng, batch_size: int, length_sampling=False,
                 pairs: Optional[List[Tuple[int, int]]] = None, probs=None):
    """Draw ``batch_size`` (client, step) samples with replacement.

    With ``length_sampling`` a client is drawn with ``softmax(length)``
    (over clients holding a label) and then one of its labeled steps
    uniformly; otherwise labeled steps are drawn uniformly.
    """
    if length_sampling:
        live = [i for i, ca in enumerate(clients) if len(ca.labeled)]
        if not live:
            raise DataError("no labeled steps to sample from")
        if probs is None:
            probs = length_probabilities([clients[i].length for i in live])
        who = rng.choice(len(live), size=batch_size, p=probs)
        out = []
        for j in who:
            ca = clients[live[j]]
            lab = ca.labeled
            out.append((ca, int(lab[rng.integers(len(lab))])))
        return out
    if pairs is None:
        pairs = labeled_pairs(clients)
    if not pairs:
        raise DataError("no labeled steps to sample from")
    idx = rng.integers(len(pairs), size=batch_size)
    return [(clients[pairs[j][0]], pairs[j][1]) for j in idx]


def eval_batches(clients: Sequence[ClientArrays], chunk=256):
    for i in range(0, len(clients), chunk):
        b = client_batch(clients[i:i + chunk])
        if b.size:
            yield b


def mse_on(model, clients: Sequence[ClientArrays]) -> float:
    """Plain MSE on raw labels in inference mode."""
    se, n = 0.0, 0
    for b in eval_batches(clients):
        p = model.predict(b)
        se += float(np.sum((p - b.labels) ** 2))
        n += b.size
    return se / n if n else float("nan")


def _first_bad(model, grads) -> str:
    for k, p in model.params.items():
        if not np.all(np.isfinite(p)):
            return f"parameter {k}"
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            return f"gradient of {k}"
    return "prediction"


@dataclass
class TrainResult:
    model: RewardModel
    history: TrainHistory
    train: List[ClientRecord]
    val: List[ClientRecord]
    test: List[ClientRecord]


def train(records: Sequence[ClientRecord], m: int, n_r: int, schema, n_x: int,
          cfg: TrainConfig, imb: Optional[ImbalanceConfig] = None, split=None, log=None) -> TrainResult:
    imb = imb or ImbalanceConfig.none()
    imb.check(cfg.batch_size)
    if split is None:
        split = split_clients(records, cfg.seed, cfg.val_frac, cfg.test_frac)
    tr, va, te = split
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    model = RewardModel.create(cfg.model_config(m, n_r, schema, n_x), seeds[0])
    model.demo_enc = DemographicEncoder(schema).fit(tr)
    arrs = [client_arrays(r, model.demo_enc, n_r, n_x) for r in tr]
    varrs = [client_arrays(r, model.demo_enc, n_r, n_x) for r in va]
    pairs = labeled_pairs(arrs)
    if not pairs:
        raise DataError("training split has no labeled steps")
    catalog = ActionCatalog.from_records(tr, m)
    w_act = action_weights(catalog) if imb.action_weighting else np.ones(m)
    probs = None
    if imb.client_sampling:
        probs = length_probabilities([ca.length for ca in arrs if len(ca.labeled)])
    rng = np.random.Generator(np.random.PCG64(seeds[1]))
    opt = AdamState.for_params(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    iters = math.ceil(len(pairs) / cfg.batch_size)
    hist = TrainHistory()
    best = None
    for ep in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        tot = 0.0
        for it in range(iters):
            items = sample_batch(arrs, rng, cfg.batch_size, imb.client_sampling, pairs, probs)
            b = training_batch(items)
            raw = b.labels
            y = adjust_effectiveness(raw, b.step_index) if imb.effectiveness else raw
            pred, cache = model.forward(b, train=True)
            res = compute_loss(pred, y, w_act[b.cand - 1], imb, raw_labels=raw)
            grads = model.backward(cache, res.dpred)
            if not math.isfinite(res.loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericError(f"non-finite loss at epoch {ep} batch {it + 1}: {_first_bad(model, grads)}")
            adam_step(model.params, grads, opt)
            tot += res.loss
        hist.train_loss.append(tot / iters)
        hist.val_loss.append(mse_on(model, varrs) if varrs else float("nan"))
        hist.seconds.append(time.perf_counter() - t0)
        if cfg.restore_best and varrs and (best is None or hist.val_loss[-1] < best[0]):
            best = (hist.val_loss[-1], _snapshot(model.params), copy.deepcopy(model.bn_state))
        if log:
            log(f"epoch {ep} train {hist.train_loss[-1]:.5f} val {hist.val_loss[-1]:.5f} "
                f"{hist.seconds[-1]:.1f}s")
    if best is not None:
        model.params, model.bn_state = best[1], best[2]
    return TrainResult(model, hist, list(tr), list(va), list(te))


def _snapshot(d):
    return {k: np.array(v, copy=True) for k, v in d.items()}


def predict_records(model, records: Sequence[ClientRecord]):
    """Predictions, labels, scored actions and step indices for every labeled step."""
    cfg = model.cfg
    arrs = [client_arrays(r, model.demo_enc, cfg.n_r, cfg.n_x) for r in records]
    ps, ys, acts, steps = [], [], [], []
    for b in eval_batches(arrs):
        ps.append(model.predict(b))
        ys.append(b.labels)
        acts.append(b.cand)
        steps.append(b.step_index)
    if not ps:
        raise DataError("no labeled steps to evaluate")
    return np.concatenate(ps), np.concatenate(ys), np.concatenate(acts), np.concatenate(steps)
