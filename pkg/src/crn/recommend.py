"""Constrained top-k next-best-action selection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .domain import ClientTuple
from .reward_head import score_actions


class ConstraintError(ValueError):
    pass


@dataclass
class Recommendation:
    ranked: List[Tuple[int, float]]
    client_id: str
    t: int

    @property
    def actions(self) -> List[int]:
        return [a for a, _ in self.ranked]


def rank_scores(actions: Sequence[int], scores) -> List[Tuple[int, float]]:
    """Sort by score descending, ties by smaller action id."""
    acts = np.asarray(actions, dtype=np.int64)
    order = np.lexsort((acts, -np.asarray(scores, dtype=float)))
    return [(int(acts[i]), float(scores[i])) for i in order]


def recommend_top_k(model, tup: ClientTuple, candidates: Sequence[int], k: int) -> Recommendation:
    if k < 1:
        raise ConstraintError("k must be >= 1")
    cands = sorted(set(int(a) for a in candidates))
    if not cands:
        raise ConstraintError("empty candidate set")
    scores = score_actions(model, tup, cands)
    return Recommendation(rank_scores(cands, scores)[:k], tup.client_id, tup.t)
