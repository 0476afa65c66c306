"""JSONL datasets and JSON checkpoints.

Dataset: a header object on the first line, then one client per line::

    {"format": "crn-dataset", "version": 1, "m": 10, "n_r": 6, "n_explicit": 2,
     "schema": {"categorical": [5, 3], "n_numeric": 2}}
    {"client_id": "c000000", "demographics": {...}, "steps": [...], "meta": {...}}

``meta`` is optional and carries the synthetic world's latent values
(``z`` and per-step ``eps``) so the oracle can be rebuilt after loading.

Checkpoint: one JSON object holding the model config, the demographic
standardization stats, batch-norm running stats and every parameter as
``{"shape": [...], "data": [...]}`` in the model's fixed parameter order.
Floats are written with ``repr`` precision, so save/load is bit-exact.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from typing import Dict, List, Optional, Tuple

import numpy as np

from .domain import ClientRecord, DataError, DemographicSchema, Demographics, InteractionStep, validate_record
from .features import DemographicEncoder
from .model import CrnModel, MarkovModel, ModelConfig

DATASET_FORMAT = "crn-dataset"
CHECKPOINT_FORMAT = "crn-checkpoint"
VERSION = 1


class DatasetHeader:
    def __init__(self, m: int, n_r: int, n_explicit: int, schema: DemographicSchema, extra=None):
        self.m = m
        self.n_r = n_r
        self.n_explicit = n_explicit
        self.schema = schema
        self.extra = extra or {}

    def to_dict(self):
        d = {"format": DATASET_FORMAT, "version": VERSION, "m": self.m, "n_r": self.n_r,
             "n_explicit": self.n_explicit,
             "schema": {"categorical": list(self.schema.categorical), "n_numeric": self.schema.n_numeric}}
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != DATASET_FORMAT:
            raise DataError("line 1: not a crn-dataset header")
        if d.get("version") != VERSION:
            raise DataError(f"line 1: unsupported dataset version {d.get('version')}")
        try:
            s = d["schema"]
            schema = DemographicSchema(tuple(int(c) for c in s["categorical"]), int(s["n_numeric"]))
            extra = {k: v for k, v in d.items()
                     if k not in ("format", "version", "m", "n_r", "n_explicit", "schema")}
            return cls(int(d["m"]), int(d["n_r"]), int(d["n_explicit"]), schema, extra)
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"line 1: malformed header ({e})") from None


def record_to_dict(rec: ClientRecord, meta=None) -> dict:
    d = {"client_id": rec.client_id,
         "demographics": {"categorical": list(rec.demographics.categorical),
                          "numeric": list(rec.demographics.numeric)},
         "steps": [{"i": s.index, "prev_action": s.prev_action, "responses": list(s.responses),
                    "candidates": list(s.candidates), "explicit": list(s.explicit), "reward": s.reward}
                   for s in rec.steps]}
    if meta is not None:
        d["meta"] = {"z": meta[0], "eps": list(meta[1])}
    return d


def record_from_dict(d) -> Tuple[ClientRecord, Optional[tuple]]:
    dem = d["demographics"]
    steps = tuple(InteractionStep(int(s["i"]), int(s["prev_action"]),
                                  tuple(int(c) for c in s["responses"]),
                                  tuple(int(a) for a in s["candidates"]),
                                  tuple(float(x) for x in s.get("explicit", ())),
                                  None if s.get("reward") is None else float(s["reward"]))
                  for s in d["steps"])
    rec = ClientRecord(str(d["client_id"]),
                       Demographics(tuple(int(v) for v in dem["categorical"]),
                                    tuple(float(v) for v in dem["numeric"])), steps)
    meta = d.get("meta")
    if meta is not None:
        meta = (float(meta["z"]), tuple(float(e) for e in meta["eps"]))
    return rec, meta


def dumps_dataset(header: DatasetHeader, records, latent=None) -> str:
    lines = [json.dumps(header.to_dict())]
    for r in records:
        lines.append(json.dumps(record_to_dict(r, None if latent is None else latent.get(r.client_id))))
    return "\n".join(lines) + "\n"


def save_dataset(path, header: DatasetHeader, records, latent=None):
    with open(path, "w") as f:
        f.write(dumps_dataset(header, records, latent))


def parse_dataset(lines, validate=True):
    """Returns ``(header, records, latent)``; ``latent`` is None unless every record has meta."""
    it = iter(lines)
    try:
        first = next(it)
    except StopIteration:
        raise DataError("line 1: empty dataset") from None
    try:
        header = DatasetHeader.from_dict(json.loads(first))
    except json.JSONDecodeError as e:
        raise DataError(f"line 1: invalid JSON ({e.msg})") from None
    records: List[ClientRecord] = []
    latent: Dict[str, tuple] = {}
    all_meta = True
    seen = set()
    for ln, line in enumerate(it, start=2):
        if not line.strip():
            continue
        try:
            rec, meta = record_from_dict(json.loads(line))
        except json.JSONDecodeError as e:
            raise DataError(f"line {ln}: invalid JSON ({e.msg})") from None
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"line {ln}: malformed record ({e})") from None
        if validate:
            errs = validate_record(rec, header.m, header.n_r, header.schema, header.n_explicit)
            if errs:
                raise DataError(f"line {ln}: {errs[0]}")
        if rec.client_id in seen:
            raise DataError(f"line {ln}: duplicate client id {rec.client_id}")
        seen.add(rec.client_id)
        records.append(rec)
        if meta is None:
            all_meta = False
        else:
            latent[rec.client_id] = meta
    return header, records, (latent if all_meta and records else None)


def load_dataset(path, validate=True):
    try:
        with open(path) as f:
            return parse_dataset(f, validate)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None


# -- checkpoints -----------------------------------------------------------------

def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(x) for x in a.reshape(-1)]}


def _unarr(d) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def checkpoint_dict(model, train_config=None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": VERSION,
        "config": model.cfg.to_dict(),
        "train_config": train_config,
        "demo_stats": {"mean": _arr(model.demo_enc.mean), "std": _arr(model.demo_enc.std)},
        "bn_state": {k: {"mean": _arr(v["mean"]), "var": _arr(v["var"])} for k, v in model.bn_state.items()},
        "param_order": list(model.params),
        "params": {k: _arr(v) for k, v in model.params.items()},
    }


def dumps_checkpoint(model, train_config=None) -> str:
    return json.dumps(checkpoint_dict(model, train_config))


def save_checkpoint(path, model, train_config=None):
    with open(path, "w") as f:
        f.write(dumps_checkpoint(model, train_config))


def model_from_checkpoint(d):
    if d.get("format") != CHECKPOINT_FORMAT:
        raise DataError("not a crn checkpoint")
    if d.get("version") != VERSION:
        raise DataError(f"unsupported checkpoint version {d.get('version')}")
    try:
        cfg = ModelConfig.from_dict(d["config"])
        params = {k: _unarr(d["params"][k]) for k in d["param_order"]}
        bn = {k: {"mean": _unarr(v["mean"]), "var": _unarr(v["var"])} for k, v in d["bn_state"].items()}
        enc = DemographicEncoder(cfg.schema, _unarr(d["demo_stats"]["mean"]), _unarr(d["demo_stats"]["std"]))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed checkpoint ({e})") from None
    cls = MarkovModel if cfg.kind == "markov_mlp" else CrnModel
    return cls(cfg, params, bn, enc)


def loads_checkpoint(text: str):
    try:
        return model_from_checkpoint(json.loads(text))
    except json.JSONDecodeError as e:
        raise DataError(f"checkpoint is not valid JSON ({e.msg})") from None


def load_checkpoint(path):
    try:
        with open(path) as f:
            return loads_checkpoint(f.read())
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
