"""Dense float64 helpers, Adam, and a central-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class DeterminismError(RuntimeError):
    pass


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def stable_softmax(v) -> np.ndarray:
    """Softmax with max-subtraction.

    Raises DimensionError on empty input and NumericError on non-finite entries.
    """
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError("softmax needs a non-empty 1-d vector")
    if not np.all(np.isfinite(v)):
        raise NumericError("softmax input contains non-finite entries")
    e = np.exp(v - v.max())
    return e / e.sum()


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        st = cls(**hyper)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        return st


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied in place. Returns (params, state)."""
    if set(grads) != set(params):
        raise DimensionError("gradient names do not match parameter names")
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise DimensionError(f"shape mismatch for {k}: {p.shape} vs {g.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class GradCheckReport:
    max_rel_err: Dict[str, float]
    tolerance: float
    h: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def lines(self):
        for k, e in self.max_rel_err.items():
            yield f"{k:<24s} {e:.3e} {'ok' if e < self.tolerance else 'FAIL'}"


def finite_diff_check(
    loss_fn: Callable[[Dict[str, np.ndarray]], float],
    params: Dict[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``loss_fn``.

    ``params`` is perturbed in place and restored coordinate by coordinate.
    Relative error per coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    f0 = loss_fn(params)
    if loss_fn(params) != f0:
        raise DeterminismError("loss_fn returned different values at the same point")
    report = {}
    for name, p in params.items():
        g = np.asarray(analytic[name])
        if g.shape != p.shape:
            raise DimensionError(f"analytic gradient for {name} has shape {g.shape}, expected {p.shape}")
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn(params)
            flat[i] = old - h
            fm = loss_fn(params)
            flat[i] = old
            num = (fp - fm) / (2.0 * h)
            a = gflat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        report[name] = float(worst)
    return GradCheckReport(report, tol, h)
