"""Clients, interaction steps and the per-step client tuple.

Step ``i`` (1-based) stores the action taken *before* it (``prev_action``, 0 at
step 1), the response set observed at ``i`` and, for every step except the
last, the reward of the action chosen at ``i``. That action is therefore the
``prev_action`` of step ``i + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

NO_ACTION = 0


class RangeError(IndexError):
    pass


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class DemographicSchema:
    categorical: Tuple[int, ...] = ()  # cardinalities
    n_numeric: int = 0

    @property
    def n_fields(self) -> int:
        return len(self.categorical) + self.n_numeric

    @property
    def encoded_width(self) -> int:
        return sum(self.categorical) + self.n_numeric


@dataclass(frozen=True)
class Demographics:
    categorical: Tuple[int, ...]
    numeric: Tuple[float, ...]

    def check(self, schema: DemographicSchema) -> List[str]:
        errs = []
        if len(self.categorical) != len(schema.categorical):
            errs.append(f"expected {len(schema.categorical)} categorical fields, got {len(self.categorical)}")
        else:
            for j, (v, card) in enumerate(zip(self.categorical, schema.categorical)):
                if not 0 <= v < card:
                    errs.append(f"categorical field {j} value {v} outside [0,{card})")
        if len(self.numeric) != schema.n_numeric:
            errs.append(f"expected {schema.n_numeric} numeric fields, got {len(self.numeric)}")
        return errs


@dataclass(frozen=True)
class InteractionStep:
    index: int
    prev_action: int
    responses: Tuple[int, ...]
    candidates: Tuple[int, ...]
    explicit: Tuple[float, ...] = ()
    reward: Optional[float] = None


@dataclass(frozen=True)
class ClientRecord:
    client_id: str
    demographics: Demographics
    steps: Tuple[InteractionStep, ...]

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def n_labeled(self) -> int:
        return sum(1 for s in self.steps if s.reward is not None)

    def action_at(self, t: int) -> int:
        """Action chosen at step ``t`` (the one the step-``t`` reward refers to)."""
        if not 1 <= t < self.length:
            raise RangeError(f"no chosen action recorded for step {t}")
        return self.steps[t].prev_action


@dataclass(frozen=True)
class ClientTuple:
    demographics: Demographics
    actions: Tuple[int, ...]  # a_1 .. a_{t-1}
    responses: Tuple[Tuple[int, ...], ...]  # O_1 .. O_t
    explicit: Tuple[float, ...]
    client_id: str = ""

    @property
    def t(self) -> int:
        return len(self.responses)

    def cru_inputs(self) -> List[Tuple[int, Tuple[int, ...]]]:
        """Aligned (action id, response set) pairs for steps 1..t."""
        prev = (NO_ACTION,) + self.actions
        return list(zip(prev, self.responses))


@dataclass
class ActionCatalog:
    m: int
    counts: List[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.counts:
            self.counts = [0] * self.m
        if len(self.counts) != self.m:
            raise SchemaError("counts must have one entry per action")

    @property
    def ids(self) -> range:
        return range(1, self.m + 1)

    def frequencies(self) -> List[float]:
        total = sum(self.counts)
        if total == 0:
            return [0.0] * self.m
        return [c / total for c in self.counts]

    @classmethod
    def from_records(cls, records: Sequence[ClientRecord], m: int) -> "ActionCatalog":
        counts = [0] * m
        for r in records:
            for t in range(1, r.length):
                if r.steps[t - 1].reward is not None:
                    counts[r.action_at(t) - 1] += 1
        return cls(m, counts)


def validate_record(record: ClientRecord, m: int, n_r: int,
                    schema: Optional[DemographicSchema] = None,
                    n_explicit: Optional[int] = None) -> List[str]:
    """Return human-readable violations; an empty list means the record is valid."""
    out = []
    cid = record.client_id
    if record.length < 1:
        return [f"client {cid}: record has no steps"]
    if schema is not None:
        out += [f"client {cid}: demographics: {e}" for e in record.demographics.check(schema)]
    for pos, st in enumerate(record.steps, start=1):
        where = f"client {cid} step {st.index}"
        if st.index != pos:
            out.append(f"{where}: index: expected {pos} (gap or misordering)")
        if pos == 1 and st.prev_action != NO_ACTION:
            out.append(f"{where}: prev_action: first step must use {NO_ACTION}")
        if pos > 1 and not 1 <= st.prev_action <= m:
            out.append(f"{where}: prev_action: {st.prev_action} outside 1..{m}")
        if len(set(st.responses)) != len(st.responses):
            out.append(f"{where}: responses: duplicate codes")
        if any(not 0 <= c < n_r for c in st.responses):
            out.append(f"{where}: responses: code outside [0,{n_r})")
        if not st.candidates:
            out.append(f"{where}: candidates: empty set")
        elif any(not 1 <= a <= m for a in st.candidates):
            out.append(f"{where}: candidates: action outside 1..{m}")
        if st.reward is not None and not 0.0 <= st.reward <= 1.0:
            out.append(f"{where}: reward: {st.reward} outside [0,1]")
        if pos < record.length and st.reward is None:
            out.append(f"{where}: reward: missing on closed step")
        if pos == record.length and st.reward is not None:
            out.append(f"{where}: reward: final open step must not carry a reward")
        if n_explicit is not None and len(st.explicit) != n_explicit:
            out.append(f"{where}: explicit: width {len(st.explicit)} != {n_explicit}")
    return out


def build_client_tuple(record: ClientRecord, t: int) -> ClientTuple:
    if not 1 <= t <= record.length:
        raise RangeError(f"t={t} outside 1..{record.length}")
    steps = record.steps[:t]
    return ClientTuple(
        demographics=record.demographics,
        actions=tuple(s.prev_action for s in steps[1:]),
        responses=tuple(tuple(s.responses) for s in steps),
        explicit=tuple(steps[-1].explicit),
        client_id=record.client_id,
    )


def labeled_steps(record: ClientRecord) -> List[int]:
    return [t for t in range(1, record.length) if record.steps[t - 1].reward is not None]
