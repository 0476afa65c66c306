"""Synthetic interaction world with a known, non-Markovian reward oracle.

Each client has a latent ``z ~ N(0, 1)`` that leaks into the demographics.
Per step the client answers the previous action with a response set whose
codes are Bernoulli in ``(prev action, z)``. The true reward of action ``a``
at step ``t`` comes from a latent score

    u = beta[a] * z + rho * resp(O_t) + kappa * C[a, a_{t-L}] + noise * eps

where ``a_{t-L}`` is the action taken ``L`` steps earlier (the term is absent
when ``L = 0`` or ``t - L < 1``), ``C`` is the fixed table
``C[a, b] = sqrt(2) cos(2 pi a b / p - pi / 4)`` with ``p`` the smallest prime
above ``m`` (unit RMS, and every column distinct: ``a b mod p`` is injective
in ``b`` and no two residues share a value of ``cos(. - pi / 4)``), and
``resp(O) = 2 |O| / n_r - 1``.

``u`` is turned into a reward per action by a monotone calibration map fitted
on the logged scores of that action: the lowest ``zero`` share of scores maps
to 0, the top ``high`` share maps linearly into [0.5, 1] and the band in
between maps linearly into [0, 0.5). The shares are solved from the target
high-reward proportion and mean reward, so the logged labels reproduce those
marginals by construction. Counterfactual actions reuse the same map.

The logged policy is independent of the client: every action slot in the
dataset is filled from an exact frequency quota and shuffled.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .domain import ClientRecord, DemographicSchema, Demographics, InteractionStep, NO_ACTION

# Table 1: action counts, high-reward proportion, reward mean (A1..A10)
TABLE1_COUNTS = (1225, 390, 13592, 1020, 1384, 62263, 15403, 3289, 904, 12044)
TABLE1_HIGH = (0.0242, 0.1175, 0.0753, 0.2750, 0.0328, 0.2585, 0.1767, 0.0665, 0.4059, 0.1201)
TABLE1_MEAN = (0.065, 0.132, 0.125, 0.229, 0.057, 0.223, 0.186, 0.097, 0.311, 0.159)
TABLE1_STD = (0.145, 0.259, 0.221, 0.340, 0.158, 0.333, 0.294, 0.205, 0.355, 0.262)

DEFAULT_BETA = (1.0, -0.8, 0.6, -0.5, 1.2, 0.4, -1.0, 0.8, -0.6, 0.9)
N_Z_BINS = 5
N_NOISE_CAT = 3
N_EXPLICIT = 2


class ProfileError(ValueError):
    pass


@dataclass
class OracleSpec:
    m: int
    n_r: int
    lag: int = 3
    beta: Tuple[float, ...] = DEFAULT_BETA
    rho: float = 0.5
    kappa: float = 1.0
    noise: float = 0.3
    # per action: (score knots, reward knots, tail scale); filled by calibrate
    calibration: Dict[int, Tuple[np.ndarray, np.ndarray, float]] = field(default_factory=dict)

    def coupling(self, a: int, b: int) -> float:
        p = next_prime(self.m)
        return float(np.sqrt(2.0) * np.cos(2.0 * np.pi * ((a * b) % p) / p - 0.25 * np.pi))


def next_prime(n: int) -> int:
    """Smallest prime strictly greater than ``n``."""
    k = n + 1
    while k < 2 or any(k % d == 0 for d in range(2, int(k ** 0.5) + 1)):
        k += 1
    return k


@dataclass
class OracleContext:
    """Everything the oracle reads about a client at step ``t``."""
    z: float
    actions: Tuple[int, ...]  # a_1 .. a_{t-1}
    responses: Tuple[int, ...]  # O_t
    eps: float = 0.0


def oracle_score(spec: OracleSpec, ctx: OracleContext, action: int) -> float:
    u = spec.beta[(action - 1) % len(spec.beta)] * ctx.z
    u += spec.rho * (2.0 * len(ctx.responses) / spec.n_r - 1.0)
    t = len(ctx.actions) + 1
    if spec.lag > 0 and t - spec.lag >= 1:
        u += spec.kappa * spec.coupling(action, ctx.actions[t - spec.lag - 1])
    return u + spec.noise * ctx.eps


def _calibrated(spec: OracleSpec, action: int, u: float) -> float:
    knots = spec.calibration.get(action)
    if knots is None:
        return float(1.0 / (1.0 + np.exp(-u)))
    xs, ys, scale = knots
    if u <= xs[0]:
        return float(ys[0])
    if u >= xs[-1]:
        return float(1.0 - (1.0 - ys[-1]) * np.exp(-(u - xs[-1]) / scale))
    return float(np.interp(u, xs, ys))


def oracle_reward(spec: OracleSpec, ctx: OracleContext, action: int) -> float:
    return _calibrated(spec, action, oracle_score(spec, ctx, action))


def band_shares(high: float, mean: float) -> Tuple[float, float]:
    """(zero share, low-band share) giving mean ``mean`` with top share ``high``.

    Low band rewards average 0.25 and high band rewards average 0.75.
    """
    low = (mean - 0.75 * high) / 0.25
    zero = 1.0 - high - low
    if low < 0 or zero < 0:
        raise ProfileError(f"mean {mean} is infeasible with high-reward share {high}")
    return zero, low


def rank_rewards(n: int, n_zero: int, n_high: int) -> np.ndarray:
    """Rewards for ranks 0..n-1 (ascending score)."""
    r = np.zeros(n)
    n_low = n - n_zero - n_high
    if n_low > 0:
        r[n_zero:n_zero + n_low] = 0.5 * (np.arange(n_low) + 0.5) / n_low
    if n_high > 0:
        r[n - n_high:] = 0.5 + 0.5 * (np.arange(n_high) + 0.5) / n_high
    return r


def ordered_high_counts(n: Sequence[int], high: Sequence[float]) -> List[int]:
    """Round ``high * n`` per action, nudging upward where needed so the
    realized proportions keep the strict order of the targets."""
    k = [int(round(h * c)) for h, c in zip(high, n)]
    order = sorted(range(len(n)), key=lambda a: high[a])
    prev = -1.0
    for a in order:
        if n[a] == 0:
            continue
        while k[a] / n[a] <= prev and k[a] < n[a]:
            k[a] += 1
        prev = k[a] / n[a]
    return k


@dataclass
class SynthProfile:
    name: str = "table1"
    counts: Tuple[float, ...] = TABLE1_COUNTS  # relative action frequencies
    high: Tuple[float, ...] = TABLE1_HIGH
    means: Tuple[float, ...] = TABLE1_MEAN
    stds: Tuple[float, ...] = TABLE1_STD  # reported only, not targeted
    n_r: int = 6
    lag: int = 3
    n_clients: int = 5000
    len_median: float = 4.0
    len_sigma: float = 1.25
    len_max: int = 50
    beta: Tuple[float, ...] = DEFAULT_BETA
    rho: float = 0.5
    kappa: float = 1.0
    noise: float = 0.3
    seed: int = 0

    @property
    def m(self) -> int:
        return len(self.counts)

    @property
    def schema(self) -> DemographicSchema:
        return DemographicSchema((N_Z_BINS, N_NOISE_CAT), 2)

    def frequencies(self) -> np.ndarray:
        c = np.asarray(self.counts, dtype=float)
        return c / c.sum()

    def check(self):
        if self.m < 1:
            raise ProfileError("profile needs at least one action")
        if len(self.high) != self.m or len(self.means) != self.m:
            raise ProfileError("high/means must have one entry per action")
        if any(c <= 0 for c in self.counts):
            raise ProfileError("action frequencies must be positive")
        if any(not 0.0 <= v <= 1.0 for v in self.means):
            raise ProfileError("reward means must lie in [0,1]")
        if self.lag < 0:
            raise ProfileError("lag must be >= 0")
        if self.n_clients < 1 or self.n_r < 1 or self.len_max < 2:
            raise ProfileError("n_clients, n_r >= 1 and len_max >= 2 required")
        for h, mu in zip(self.high, self.means):
            band_shares(h, mu)

    def oracle(self) -> OracleSpec:
        return OracleSpec(self.m, self.n_r, self.lag, tuple(self.beta), self.rho,
                          self.kappa if self.lag > 0 else 0.0, self.noise)


def skewed_counts(counts, floor=0.01, margin=2.0) -> Tuple[float, ...]:
    """Rescale frequencies so the rarest action sits exactly at ``floor``.

    The other actions keep their relative sizes but are held at no less than
    ``margin * floor``, so the pinned action stays the unique rarest.
    """
    f = np.asarray(counts, dtype=float)
    f = f / f.sum()
    lo = int(np.argmin(f))
    rest = np.delete(np.arange(len(f)), lo)
    g = f[rest] / f[rest].sum() * (1.0 - floor)
    fixed = np.zeros(len(g), dtype=bool)
    while True:
        small = ~fixed & (g < margin * floor)
        if not small.any():
            break
        fixed |= small
        g[fixed] = margin * floor
        free = ~fixed
        g[free] = g[free] / g[free].sum() * (1.0 - floor - fixed.sum() * margin * floor)
    out = np.empty(len(f))
    out[lo] = floor
    out[rest] = g
    return tuple(out)


def make_profile(name: str, **overrides) -> SynthProfile:
    if name in ("table1", "default"):
        p = SynthProfile(name=name)
    elif name == "markov":
        p = SynthProfile(name=name, lag=0)
    elif name == "skewed":
        p = SynthProfile(name=name, counts=skewed_counts(TABLE1_COUNTS, 0.01))
    else:
        raise ProfileError(f"unknown profile {name!r}; choose table1, default, markov or skewed")
    return replace(p, **overrides)


PROFILES = ("table1", "default", "markov", "skewed")


@dataclass
class SynthDataset:
    profile: SynthProfile
    oracle: OracleSpec
    records: List[ClientRecord]
    latent: Dict[str, Tuple[float, Tuple[float, ...]]]  # client id -> (z, eps per step)

    @property
    def m(self) -> int:
        return self.profile.m

    @property
    def n_r(self) -> int:
        return self.profile.n_r

    @property
    def schema(self) -> DemographicSchema:
        return self.profile.schema

    @property
    def n_x(self) -> int:
        return N_EXPLICIT

    def context(self, rec: ClientRecord, t: int) -> OracleContext:
        z, eps = self.latent[rec.client_id]
        return OracleContext(z, tuple(s.prev_action for s in rec.steps[1:t]),
                             tuple(rec.steps[t - 1].responses), eps[t - 1])


def response_probs(prev_action: int, z: float, n_r: int) -> np.ndarray:
    j = np.arange(n_r)
    logit = -0.4 + np.cos(1.7 * j + 0.9 * prev_action) + 0.5 * z * np.where(j % 2 == 0, 1.0, -1.0)
    return 1.0 / (1.0 + np.exp(-logit))


def sample_lengths(rng, p: SynthProfile) -> np.ndarray:
    raw = np.exp(np.log(p.len_median) + p.len_sigma * rng.standard_normal(p.n_clients))
    return np.clip(np.round(raw).astype(np.int64), 2, p.len_max)


def quota(freq: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder integer allocation of ``total`` slots."""
    exact = freq * total
    k = np.floor(exact).astype(np.int64)
    rem = total - k.sum()
    order = np.lexsort((np.arange(len(freq)), -(exact - k)))
    k[order[:rem]] += 1
    return k


def generate_dataset(profile: SynthProfile) -> SynthDataset:
    profile.check()
    p = profile
    m, n_r = p.m, p.n_r
    ss = np.random.SeedSequence(p.seed)
    s_global, s_clients = ss.spawn(2)
    g = np.random.Generator(np.random.PCG64(s_global))
    lengths = sample_lengths(g, p)
    n_slots = int((lengths - 1).sum())
    slots = np.repeat(np.arange(1, m + 1), quota(p.frequencies(), n_slots))
    g.shuffle(slots)

    spec = p.oracle()
    streams = s_clients.spawn(p.n_clients)
    raw = []
    pos = 0
    for c in range(p.n_clients):
        r = np.random.Generator(np.random.PCG64(streams[c]))
        L = int(lengths[c])
        acts = slots[pos:pos + L - 1]
        pos += L - 1
        z = float(r.standard_normal())
        zbin = int(np.clip(np.floor((z + 0.5 * r.standard_normal()) + N_Z_BINS / 2), 0, N_Z_BINS - 1))
        demo = Demographics((zbin, int(r.integers(N_NOISE_CAT))),
                            (float(z + 0.3 * r.standard_normal()), float(r.standard_normal())))
        prev = np.r_[NO_ACTION, acts]
        resp = []
        for i in range(L):
            pr = response_probs(int(prev[i]), z, n_r)
            resp.append(tuple(int(j) for j in np.nonzero(r.random(n_r) < pr)[0]))
        eps = tuple(float(e) for e in r.standard_normal(L))
        cands = []
        for i in range(L):
            if i < L - 1:
                chosen = int(acts[i])
                others = [a for a in range(1, m + 1) if a != chosen and r.random() < 0.5]
                cands.append(tuple(sorted(others + [chosen])))
            else:
                cands.append(tuple(a for a in range(1, m + 1) if r.random() < 0.5) or (int(r.integers(1, m + 1)),))
        raw.append((f"c{c:06d}", demo, prev, resp, cands, z, eps))

    # logged latent scores per action, then the per-action calibration map
    scores: Dict[int, List[float]] = {a: [] for a in range(1, m + 1)}
    where = []
    for cid, demo, prev, resp, cands, z, eps in raw:
        L = len(prev)
        for t in range(1, L):
            a = int(prev[t])
            ctx = OracleContext(z, tuple(int(x) for x in prev[1:t]), resp[t - 1], eps[t - 1])
            scores[a].append(oracle_score(spec, ctx, a))
            where.append((a, len(scores[a]) - 1))
    n_per = [len(scores[a]) for a in range(1, m + 1)]
    n_high = ordered_high_counts(n_per, p.high)
    labels: Dict[int, np.ndarray] = {}
    for a in range(1, m + 1):
        u = np.asarray(scores[a])
        n = len(u)
        if n == 0:
            continue
        zero, _ = band_shares(p.high[a - 1], p.means[a - 1])
        k_hi = n_high[a - 1]
        k_zero = min(int(round(zero * n)), n - k_hi)
        order = np.argsort(u, kind="stable")
        rr = rank_rewards(n, k_zero, k_hi)
        xs = u[order]
        # tied scores share the mean of their rank rewards, so labels stay a function of u
        _, inv = np.unique(xs, return_inverse=True)
        rr = (np.bincount(inv, rr) / np.bincount(inv))[inv]
        lab = np.empty(n)
        lab[order] = rr
        labels[a] = lab
        scale = max(float(np.std(u)) * 0.1, 1e-6)
        spec.calibration[a] = (xs, rr, scale)

    records, latent = [], {}
    k = 0
    for cid, demo, prev, resp, cands, z, eps in raw:
        L = len(prev)
        steps = []
        for i in range(L):
            reward = None
            if i < L - 1:
                a, j = where[k]
                k += 1
                reward = float(labels[a][j])
            ex = (float((i + 1) / 10.0), float(len(resp[i]) / n_r))
            steps.append(InteractionStep(i + 1, int(prev[i]), resp[i], cands[i], ex, reward))
        records.append(ClientRecord(cid, demo, tuple(steps)))
        latent[cid] = (z, eps)
    return SynthDataset(profile, spec, records, latent)


def recalibrate(ds: SynthDataset) -> OracleSpec:
    """Rebuild the calibration map from logged labels and latents (after loading)."""
    spec = ds.profile.oracle()
    by_a: Dict[int, Tuple[List[float], List[float]]] = {}
    for rec in ds.records:
        for t in range(1, rec.length):
            a = rec.action_at(t)
            ctx = ds.context(rec, t)
            us, ys = by_a.setdefault(a, ([], []))
            us.append(oracle_score(spec, ctx, a))
            ys.append(rec.steps[t - 1].reward)
    for a, (us, ys) in by_a.items():
        u = np.asarray(us)
        o = np.argsort(u, kind="stable")
        spec.calibration[a] = (u[o], np.asarray(ys)[o], max(float(np.std(u)) * 0.1, 1e-6))
    return spec


# -- dataset summaries -----------------------------------------------------------

@dataclass
class WorldStats:
    counts: np.ndarray
    high_prop: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    median_length: float
    top10_share: float
    frac_below_01: float


def world_stats(records: Sequence[ClientRecord], m: int) -> WorldStats:
    by = [[] for _ in range(m)]
    for r in records:
        for t in range(1, r.length):
            by[r.action_at(t) - 1].append(r.steps[t - 1].reward)
    arr = [np.asarray(v, dtype=float) for v in by]
    lengths = np.array([r.length for r in records])
    inter = np.sort(lengths - 1)[::-1]
    top = inter[:max(1, len(inter) // 10)].sum() / max(inter.sum(), 1)
    allr = np.concatenate([a for a in arr if len(a)]) if any(len(a) for a in arr) else np.zeros(0)
    f = lambda fn: np.array([fn(a) if len(a) else np.nan for a in arr])
    return WorldStats(np.array([len(a) for a in arr]), f(lambda a: np.mean(a >= 0.5)), f(np.mean), f(np.std),
                      float(np.median(lengths)), float(top), float(np.mean(allr < 0.1)) if len(allr) else np.nan)


# -- baselines and evaluation ------------------------------------------------------

BASELINE_KINDS = ("markov_mlp", "gru")


def oracle_policy_lift(model, ds: SynthDataset, records: Sequence[ClientRecord]) -> Dict[str, float]:
    """Mean oracle reward of the model's top-1 candidate versus the logged action."""
    from .domain import build_client_tuple
    from .recommend import recommend_top_k
    chosen, logged = [], []
    for rec in records:
        for t in range(1, rec.length):
            tup = build_client_tuple(rec, t)
            rec_ = recommend_top_k(model, tup, rec.steps[t - 1].candidates, 1)
            ctx = ds.context(rec, t)
            chosen.append(oracle_reward(ds.oracle, ctx, rec_.actions[0]))
            logged.append(rec.steps[t - 1].reward)
    model_mean, logged_mean = float(np.mean(chosen)), float(np.mean(logged))
    return {"model_reward": model_mean, "logged_reward": logged_mean, "oracle_lift": model_mean / logged_mean}


def evaluate_model(model, records: Sequence[ClientRecord]):
    from .metrics import compute_metrics
    from .training import predict_records
    pred, y, acts, _ = predict_records(model, records)
    return compute_metrics(pred, y, acts)


def run_baseline(kind: str, ds: SynthDataset, cfg, imb=None, log=None):
    """Train a ``markov_mlp`` or ``gru`` baseline with the shared loop; returns (model, test metrics)."""
    from dataclasses import replace as _replace
    from .training import train
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINE_KINDS}")
    res = train(ds.records, ds.m, ds.n_r, ds.schema, ds.n_x, _replace(cfg, kind=kind), imb, log=log)
    return res.model, evaluate_model(res.model, res.test)
