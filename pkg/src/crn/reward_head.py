"""Reward prediction for one client state and one or more candidate actions."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .domain import ClientTuple, RangeError
from .encoder import tuple_batch


def _check_actions(model, actions):
    m = model.cfg.m
    for a in actions:
        if not 1 <= a <= m:
            raise RangeError(f"action id {a} outside 1..{m}")


def score_actions(model, tup: ClientTuple, actions: Sequence[int]) -> np.ndarray:
    """Predicted rewards for ``actions`` in the given order (inference mode).

    Each candidate is scored in its own one-row pass. BLAS may round a one-row
    product differently from the same row inside a larger matrix, so this keeps
    a candidate's score independent of which other candidates it is ranked with.
    """
    actions = [int(a) for a in actions]
    _check_actions(model, actions)
    return np.array([model.predict(tuple_batch(model, tup, [a]))[0] for a in actions])


def predict_reward(model, tup: ClientTuple, action_id: int) -> float:
    return float(score_actions(model, tup, [action_id])[0])
