"""Command line entry point: ``crn <subcommand> [flags]``.

Subcommands: simulate, train, evaluate, recommend, gradcheck, baseline.
Exit codes: 0 success, 1 data or numeric error, 2 usage error. Failures print
one JSON line ``{"error": kind, "message": ...}`` to stderr.
"""
from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .domain import DataError, RangeError, SchemaError, build_client_tuple
from .model import ConfigError as ModelConfigError
from .numerics import NumericError
from .training import ConfigError, ImbalanceConfig, TrainConfig


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors routed through the single-line error channel."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = CliParser(prog="crn", description="Coupled recurrent network reward models for next-best-action.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=CliParser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--profile", default="default")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clients", type=int, default=None, help="override the profile's client count")
    s.add_argument("--out", required=True)

    def train_flags(q, kinds):
        q.add_argument("--data", required=True)
        q.add_argument("--config")
        q.add_argument("--seed", type=int)
        q.add_argument("--kind", choices=kinds)
        q.add_argument("--epochs", type=int)
        q.add_argument("--batch-size", type=int, dest="batch_size")
        q.add_argument("--imbalance", help="none, all, or a comma list of action,client,reward,effect,topk")
        q.add_argument("--out")

    t = sub.add_parser("train", help="train a reward model and write a checkpoint")
    train_flags(t, ("crn", "gru", "markov_mlp"))

    b = sub.add_parser("baseline", help="train a baseline and report its test-split metrics")
    train_flags(b, ("markov_mlp", "gru"))

    e = sub.add_parser("evaluate", help="score a dataset with a checkpoint")
    e.add_argument("--model", required=True, help="checkpoint path")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all",
                   help="restrict to one split of the checkpoint's training seed")
    e.add_argument("--out", help="CSV path; a JSON copy is written next to it")

    r = sub.add_parser("recommend", help="rank candidate actions for one client")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--client", help="client id (default: first record)")
    r.add_argument("--t", type=int, help="step to recommend at (default: last step)")
    r.add_argument("--candidates", help="comma list of action ids (default: the step's logged candidates)")
    r.add_argument("--k", type=int, default=1)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--kind", choices=("crn", "gru", "markov_mlp"), default="crn")
    g.add_argument("--n-a", type=int, default=4, dest="n_a")
    g.add_argument("--n-o", type=int, default=4, dest="n_o")
    g.add_argument("--n-s", type=int, default=8, dest="n_s")
    g.add_argument("--length", type=int, default=5)
    return p


# -- config ------------------------------------------------------------------

def read_config(path) -> dict:
    """Flat key-value file: a JSON object, or ``key = value`` lines with ``#`` comments."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e.strerror}") from None
    if text.lstrip().startswith("{"):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"config {path}: {e.msg} at line {e.lineno}") from None
        if any(isinstance(v, (dict, list)) for v in d.values()):
            raise DataError(f"config {path}: values must be scalars")
        return d
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[config]\n" + text)
    except configparser.Error as e:
        raise DataError(f"config {path}: {e.message.splitlines()[0]}") from None
    return dict(cp["config"])


def resolve_configs(args):
    d = read_config(args.config) if args.config else {}
    imb_spec = str(d.pop("imbalance", "none"))
    k_loss = int(d.pop("k_loss", 64))
    try:
        cfg = TrainConfig.from_mapping(d)
    except (TypeError, ValueError) as e:
        raise DataError(f"config: {e}") from None
    over = {k: getattr(args, k) for k in ("seed", "kind", "epochs", "batch_size") if getattr(args, k) is not None}
    cfg = TrainConfig(**{**asdict(cfg), **over})
    spec = args.imbalance if args.imbalance is not None else imb_spec
    try:
        imb = ImbalanceConfig.parse(spec, k_loss=k_loss)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    imb.check(cfg.batch_size)
    return cfg, imb


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args):
    from .serialization import DatasetHeader, save_dataset
    from .synthworld import ProfileError, generate_dataset, make_profile, world_stats
    over = {"seed": args.seed}
    if args.clients is not None:
        over["n_clients"] = args.clients
    try:
        prof = make_profile(args.profile, **over)
    except ProfileError as e:
        raise UsageError(str(e)) from None
    ds = generate_dataset(prof)
    extra = {"profile": prof.name, "seed": prof.seed, "lag": prof.lag}
    header = DatasetHeader(ds.m, ds.n_r, ds.n_x, ds.schema, extra)
    save_dataset(args.out, header, ds.records, ds.latent)
    st = world_stats(ds.records, ds.m)
    print(json.dumps({"out": args.out, "clients": len(ds.records), "median_length": float(st.median_length),
                      "high_prop": [round(float(x), 4) for x in st.high_prop]}))
    return 0


def _load(path):
    from .serialization import load_dataset
    header, records, _ = load_dataset(path)
    if not records:
        raise DataError(f"{path}: dataset has no clients")
    return header, records


def cmd_train(args):
    from .serialization import save_checkpoint
    from .training import train
    cfg, imb = resolve_configs(args)
    header, records = _load(args.data)
    res = train(records, header.m, header.n_r, header.schema, header.n_explicit, cfg, imb, log=_log)
    out = args.out or "model.json"
    tc = {**asdict(cfg), **{f.name: getattr(imb, f.name) for f in fields(imb)}}
    save_checkpoint(out, res.model, tc)
    hist_path = str(Path(out).with_suffix("")) + ".history.csv"
    Path(hist_path).write_text(res.history.to_csv())
    print(json.dumps({"checkpoint": out, "history": hist_path, "best_epoch": res.history.best_epoch,
                      "final_val_loss": res.history.val_loss[-1]}))
    return 0


def _emit_metrics(report, out):
    print(report.table())
    if out:
        Path(out).write_text(report.to_csv())
        Path(out).with_suffix(".json").write_text(report.to_json())
    else:
        print()
        print(report.to_csv(), end="")


def cmd_baseline(args):
    from .synthworld import evaluate_model
    from .training import train
    if args.kind is None:
        args.kind = "markov_mlp"
    cfg, imb = resolve_configs(args)
    header, records = _load(args.data)
    res = train(records, header.m, header.n_r, header.schema, header.n_explicit, cfg, imb, log=_log)
    _emit_metrics(evaluate_model(res.model, res.test), args.out)
    return 0


def cmd_evaluate(args):
    from .serialization import load_checkpoint
    from .synthworld import evaluate_model
    from .training import split_clients
    model = load_checkpoint(args.model)
    header, records = _load(args.data)
    if (header.m, header.n_r, header.n_explicit) != (model.cfg.m, model.cfg.n_r, model.cfg.n_x):
        raise DataError("dataset dimensions do not match the checkpoint")
    if args.split != "all":
        tc = _train_config(args.model)
        parts = split_clients(records, tc.get("seed", 0), tc.get("val_frac", 0.1), tc.get("test_frac", 0.2))
        records = parts[("train", "val", "test").index(args.split)]
    _emit_metrics(evaluate_model(model, records), args.out)
    return 0


def _train_config(path) -> dict:
    with open(path) as f:
        return json.load(f).get("train_config") or {}


def cmd_recommend(args):
    from .recommend import recommend_top_k
    from .serialization import load_checkpoint
    model = load_checkpoint(args.model)
    header, records = _load(args.data)
    if args.client is None:
        rec = records[0]
    else:
        found = [r for r in records if r.client_id == args.client]
        if not found:
            raise DataError(f"client {args.client!r} not in {args.data}")
        rec = found[0]
    t = rec.length if args.t is None else args.t
    tup = build_client_tuple(rec, t)
    if args.candidates:
        try:
            cands = [int(x) for x in args.candidates.split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"--candidates must be a comma list of integers, got {args.candidates!r}") from None
    else:
        cands = list(rec.steps[t - 1].candidates)
    out = recommend_top_k(model, tup, cands, args.k)
    print(json.dumps({"client_id": rec.client_id, "t": t,
                      "ranked": [{"action": a, "score": s} for a, s in out.ranked]}))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import gradcheck_model
    rep = gradcheck_model(args.seed, args.kind, n_a=args.n_a, n_o=args.n_o, n_s=args.n_s, length=args.length)
    for line in rep.lines():
        print(line)
    print(f"worst {rep.worst:.3e} tolerance {rep.tolerance:g} {'PASS' if rep.passed else 'FAIL'}")
    if not rep.passed:
        raise NumericError(f"gradient check failed: worst relative error {rep.worst:.3e}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
            "recommend": cmd_recommend, "gradcheck": cmd_gradcheck, "baseline": cmd_baseline}


def _fail(kind, msg, code):
    print(json.dumps({"error": kind, "message": str(msg).splitlines()[0] if str(msg) else kind}), file=sys.stderr)
    return code


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.cmd](args)
    except (UsageError, ConfigError, ModelConfigError) as e:
        return _fail("usage", e, 2)
    except (DataError, SchemaError, RangeError, NumericError) as e:
        return _fail(type(e).__name__, e, 1)
    except ValueError as e:
        # ConstraintError and friends from the recommender
        return _fail(type(e).__name__, e, 1)
    except OSError as e:
        return _fail("io", f"{e.filename}: {e.strerror}", 1)


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
