"""Evaluation metrics: per-action MSE, high-reward precision and reward lift.

``precision`` for an action is the share of its truly high-reward samples
(label >= 0.5) that the model also scores >= 0.5. ``top_decile_reward`` is the
mean true reward over the 10% of samples with the highest predictions (ties to
the lower index), and ``reward_lift`` divides it by the mean logged reward.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .domain import DataError

HIGH = 0.5


def top_fraction(pred, frac=0.1) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    k = max(1, int(math.ceil(frac * len(pred))))
    order = np.lexsort((np.arange(len(pred)), -pred))
    return order[:k]


@dataclass
class ActionMetrics:
    action: int
    count: int
    mse: float
    n_high: int
    precision: float  # nan when the action has no high-reward samples
    top_decile_reward: float
    reward_lift: float


@dataclass
class MetricsReport:
    per_action: List[ActionMetrics]
    total_avg: float
    action_avg: float
    top_decile_reward: float
    reward_lift: float
    extra: Dict[str, float] = field(default_factory=dict)

    def action(self, a: int) -> ActionMetrics:
        for r in self.per_action:
            if r.action == a:
                return r
        raise KeyError(a)

    def to_dict(self) -> dict:
        return {"total_avg": self.total_avg, "action_avg": self.action_avg,
                "top_decile_reward": self.top_decile_reward, "reward_lift": self.reward_lift,
                "per_action": [r.__dict__ for r in self.per_action], **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["action", "count", "mse", "n_high", "precision", "top_decile_reward", "reward_lift"])
        for r in self.per_action:
            w.writerow([r.action, r.count, repr(r.mse), r.n_high, repr(r.precision),
                        repr(r.top_decile_reward), repr(r.reward_lift)])
        w.writerow(["total_avg", sum(r.count for r in self.per_action), repr(self.total_avg), "", "",
                    repr(self.top_decile_reward), repr(self.reward_lift)])
        w.writerow(["action_avg", "", repr(self.action_avg), "", "", "", ""])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'action':>8s} {'count':>7s} {'mse':>9s} {'high':>6s} {'prec':>7s} {'lift':>7s}"]
        for r in self.per_action:
            lines.append(f"{r.action:>8d} {r.count:>7d} {r.mse:>9.5f} {r.n_high:>6d} "
                         f"{r.precision:>7.3f} {r.reward_lift:>7.3f}")
        lines.append(f"{'total':>8s} {sum(r.count for r in self.per_action):>7d} {self.total_avg:>9.5f}"
                     f" {'':>6s} {'':>7s} {self.reward_lift:>7.3f}")
        lines.append(f"{'act_avg':>8s} {'':>7s} {self.action_avg:>9.5f}")
        for k, v in self.extra.items():
            lines.append(f"{k}: {v:.5f}")
        return "\n".join(lines)


def compute_metrics(pred, labels, actions, logged_rewards=None) -> MetricsReport:
    pred = np.asarray(pred, dtype=float)
    labels = np.asarray(labels, dtype=float)
    actions = np.asarray(actions, dtype=np.int64)
    if len(pred) == 0:
        raise DataError("no samples to evaluate")
    if not (len(pred) == len(labels) == len(actions)):
        raise DataError("predictions, labels and actions must align")
    logged = labels if logged_rewards is None else np.asarray(logged_rewards, dtype=float)
    base = float(logged.mean())
    rows = []
    for a in np.unique(actions):
        idx = np.nonzero(actions == a)[0]
        p, y = pred[idx], labels[idx]
        hi = y >= HIGH
        prec = float(np.mean(p[hi] >= HIGH)) if hi.any() else float("nan")
        top = float(y[top_fraction(p)].mean())
        mean_a = float(logged[idx].mean())
        rows.append(ActionMetrics(int(a), len(idx), float(np.mean((p - y) ** 2)), int(hi.sum()), prec, top,
                                  top / mean_a if mean_a > 0 else float("nan")))
    counts = np.array([r.count for r in rows], dtype=float)
    mses = np.array([r.mse for r in rows])
    top = float(labels[top_fraction(pred)].mean())
    return MetricsReport(rows, float((counts * mses).sum() / counts.sum()), float(mses.mean()), top,
                         top / base if base > 0 else float("nan"))


def relative_improvement(new: float, base: float, lower_is_better=True) -> float:
    if lower_is_better:
        return (base - new) / base
    return (new - base) / base
