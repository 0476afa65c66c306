import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crn.cli import read_config, run_cli
from crn.domain import DataError
from crn.metrics import compute_metrics, relative_improvement, top_fraction
from crn.serialization import (DatasetHeader, dumps_checkpoint, dumps_dataset, load_checkpoint, loads_checkpoint,
                               parse_dataset, save_checkpoint, save_dataset)
from crn.synthworld import evaluate_model
from crn.model import ModelConfig, RewardModel
from crn.training import TrainConfig, predict_records, train

from conftest import SCHEMA, make_record, small_model

SMALL = dict(n_a=4, n_o=6, n_s=8, n_imp=4, n_exp=4, hidden=8)


# -- metrics ----------------------------------------------------------------------------

def test_perfect_predictor():
    y = np.array([0.1, 0.7, 0.6, 0.0, 0.9])
    rep = compute_metrics(y, y, [1, 1, 2, 2, 3])
    assert all(r.mse == 0 for r in rep.per_action)
    assert all(r.precision == 1.0 for r in rep.per_action if r.n_high)


def test_weighted_and_unweighted_averages():
    # action 1: 100 samples with squared error 0.1, action 2: 300 samples with 0.3
    e1, e2 = np.sqrt(0.1), np.sqrt(0.3)
    pred = np.r_[np.full(100, e1), np.full(300, e2)]
    rep = compute_metrics(pred, np.zeros(400), np.r_[np.ones(100), np.full(300, 2)])
    assert rep.action_avg == pytest.approx(0.2, abs=1e-12)
    assert rep.total_avg == pytest.approx(0.25, abs=1e-12)


def test_constant_predictions_top_decile_is_first_tenth():
    y = np.linspace(0, 1, 50)
    rep = compute_metrics(np.full(50, 0.3), y, np.ones(50))
    assert rep.top_decile_reward == pytest.approx(y[:5].mean())
    rng = np.random.default_rng(0)
    y = rng.random(100)
    rep = compute_metrics(np.full(100, 0.4), y, rng.integers(1, 4, 100))
    assert rep.top_decile_reward == pytest.approx(y[:10].mean())


def test_precision_and_lift_definitions():
    y = np.array([0.9, 0.8, 0.6, 0.1, 0.0])
    p = np.array([0.7, 0.2, 0.55, 0.9, 0.1])
    rep = compute_metrics(p, y, np.ones(5), logged_rewards=np.full(5, 0.2))
    assert rep.action(1).precision == pytest.approx(2 / 3)
    assert rep.action(1).n_high == 3
    assert rep.top_decile_reward == 0.1  # the single top-scored sample
    assert rep.reward_lift == pytest.approx(0.5)
    assert np.isnan(compute_metrics([0.2], [0.1], [4]).action(4).precision)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.integers(1, 5)), min_size=1, max_size=60))
def test_total_avg_recomputable(rows):
    p, y, a = map(np.array, zip(*rows))
    rep = compute_metrics(p, y, a)
    counts = np.array([r.count for r in rep.per_action])
    assert rep.total_avg == pytest.approx(float(np.mean((p - y) ** 2)), abs=1e-12)
    assert rep.total_avg == pytest.approx(sum(r.mse * r.count for r in rep.per_action) / counts.sum(), abs=1e-12)


def test_metrics_errors_and_helpers():
    with pytest.raises(DataError):
        compute_metrics([], [], [])
    with pytest.raises(DataError):
        compute_metrics([0.1], [0.1, 0.2], [1])
    assert list(top_fraction([0.5, 0.9, 0.9, 0.1], 0.5)) == [1, 2]
    assert relative_improvement(0.9, 1.0) == pytest.approx(0.1)
    assert relative_improvement(1.2, 1.0, lower_is_better=False) == pytest.approx(0.2)


def test_report_renderings():
    rep = compute_metrics([0.6, 0.2, 0.7], [0.8, 0.1, 0.4], [1, 2, 2])
    csv_lines = rep.to_csv().splitlines()
    assert csv_lines[0].startswith("action,count,mse") and csv_lines[-2].startswith("total_avg")
    assert json.loads(rep.to_json())["total_avg"] == rep.total_avg
    assert "act_avg" in rep.table()


# -- serialization ---------------------------------------------------------------------

HEADER = DatasetHeader(5, 4, 2, SCHEMA)


def test_dataset_round_trip_fixed_point():
    recs = [make_record(f"c{i}", length=1 + i % 5, seed=i) for i in range(12)]
    text = dumps_dataset(HEADER, recs)
    h, back, latent = parse_dataset(text.splitlines())
    assert back == recs and latent is None
    assert dumps_dataset(h, back) == text


def test_dataset_round_trip_with_latent(tiny_world):
    ds = tiny_world
    h = DatasetHeader(ds.m, ds.n_r, ds.n_x, ds.schema, {"profile": "default"})
    text = dumps_dataset(h, ds.records, ds.latent)
    h2, recs, lat = parse_dataset(text.splitlines())
    assert recs == ds.records and lat == ds.latent and h2.extra == {"profile": "default"}
    assert dumps_dataset(h2, recs, lat) == text


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_dataset_round_trip_property(length, seed):
    recs = [make_record("x", length=length, seed=seed)]
    text = dumps_dataset(HEADER, recs)
    assert dumps_dataset(*parse_dataset(text.splitlines())[:2]) == text


@pytest.mark.parametrize("mutate,msg", [
    (lambda L: ["{not json"] + L[1:], "line 1"),
    (lambda L: [L[0].replace('"crn-dataset"', '"other"')] + L[1:], "line 1"),
    (lambda L: L[:1] + ["{bad"] + L[2:], "line 2: invalid JSON"),
    (lambda L: L[:2] + [L[1]], "line 3: duplicate client id"),
    (lambda L: L[:1] + [L[1].replace('"prev_action": 0', '"prev_action": 3', 1)], "line 2: client c0 step 1"),
    (lambda L: L[:1] + [json.dumps({"client_id": "q"})], "line 2: malformed record"),
    (lambda L: [], "empty"),
])
def test_dataset_errors_name_the_line(mutate, msg):
    lines = dumps_dataset(HEADER, [make_record("c0"), make_record("c1", seed=2)]).splitlines()
    with pytest.raises(DataError, match=msg):
        parse_dataset(mutate(lines))


def test_header_m_mismatch_names_first_offending_record():
    recs = [make_record(f"c{i}", m=5, seed=i) for i in range(3)]
    lines = dumps_dataset(DatasetHeader(3, 4, 2, SCHEMA), recs).splitlines()
    with pytest.raises(DataError, match=r"line \d+: client c\d"):
        parse_dataset(lines)


@pytest.mark.parametrize("kind", ["crn", "gru", "markov_mlp"])
def test_checkpoint_round_trip_bit_exact(kind, tiny_world, tmp_path):
    ds = tiny_world
    res = train(ds.records[:40], ds.m, ds.n_r, ds.schema, ds.n_x,
                TrainConfig(epochs=1, batch_size=16, kind=kind, **SMALL))
    path = tmp_path / "m.json"
    save_checkpoint(path, res.model)
    back = load_checkpoint(path)
    assert list(back.params) == list(res.model.params)
    for k in res.model.params:
        assert np.array_equal(back.params[k], res.model.params[k])
    assert dumps_checkpoint(back) == dumps_checkpoint(res.model)
    before = evaluate_model(res.model, ds.records[40:80])
    after = evaluate_model(back, ds.records[40:80])
    assert before.to_json() == after.to_json()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        loads_checkpoint("{")
    with pytest.raises(DataError):
        loads_checkpoint(json.dumps({"format": "other"}))
    good = json.loads(dumps_checkpoint(small_model()))
    with pytest.raises(DataError):
        loads_checkpoint(json.dumps({**good, "version": 99}))
    del good["params"]["emb"]
    with pytest.raises(DataError):
        loads_checkpoint(json.dumps(good))
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.json")


def test_evaluate_never_reads_labels(tiny_world):
    ds = tiny_world
    model = RewardModel.create(ModelConfig(ds.m, ds.n_r, ds.schema, ds.n_x, **SMALL), 0)
    recs = ds.records[:30]
    rng = np.random.default_rng(0)
    corrupted = []
    for r in recs:
        steps = tuple(replace(s, reward=None if s.reward is None else float(rng.random())) for s in r.steps)
        corrupted.append(replace(r, steps=steps))
    p1 = predict_records(model, recs)[0]
    p2 = predict_records(model, corrupted)[0]
    assert np.array_equal(p1, p2)


# -- config ------------------------------------------------------------------------------

def test_read_config_formats(tmp_path):
    kv = tmp_path / "c.cfg"
    kv.write_text("# comment\nepochs = 3\nlr = 0.01  # inline\nimbalance = reward,topk\n")
    assert read_config(kv) == {"epochs": "3", "lr": "0.01", "imbalance": "reward,topk"}
    js = tmp_path / "c.json"
    js.write_text('{"epochs": 2, "kind": "gru"}')
    assert read_config(js) == {"epochs": 2, "kind": "gru"}
    js.write_text('{"epochs": [2]}')
    with pytest.raises(DataError):
        read_config(js)


# -- CLI ----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data = d / "ds.jsonl"
    assert run_cli(["simulate", "--profile", "default", "--seed", "3", "--clients", "80", "--out", str(data)]) == 0
    cfg = d / "cfg.txt"
    cfg.write_text("".join(f"{k} = {v}\n" for k, v in SMALL.items()) + "batch_size = 16\nk_loss = 8\n")
    ckpt = d / "model.json"
    rc = run_cli(["train", "--data", str(data), "--config", str(cfg), "--epochs", "1", "--seed", "2",
                  "--imbalance", "all", "--out", str(ckpt)])
    assert rc == 0
    return d, data, cfg, ckpt


def _err(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


def test_cli_simulate_train_outputs(cli_data):
    d, data, cfg, ckpt = cli_data
    assert ckpt.exists() and (d / "model.history.csv").read_text().startswith("epoch,train_loss")
    tc = json.loads(ckpt.read_text())["train_config"]
    assert tc["epochs"] == 1 and tc["seed"] == 2 and tc["loss_selection"] and tc["n_a"] == 4


def test_cli_evaluate(cli_data, capsys):
    d, data, cfg, ckpt = cli_data
    out = d / "metrics.csv"
    assert run_cli(["evaluate", "--model", str(ckpt), "--data", str(data), "--split", "test",
                    "--out", str(out)]) == 0
    assert "total" in capsys.readouterr().out
    assert out.read_text().startswith("action,count") and json.loads(out.with_suffix(".json").read_text())
    assert run_cli(["evaluate", "--model", str(ckpt), "--data", str(data)]) == 0
    assert "action_avg" in capsys.readouterr().out


def test_cli_recommend_k_beyond_candidates(cli_data, capsys):
    d, data, cfg, ckpt = cli_data
    assert run_cli(["recommend", "--model", str(ckpt), "--data", str(data), "--candidates", "3,1,7",
                    "--k", "10"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert sorted(r["action"] for r in out["ranked"]) == [1, 3, 7]
    assert run_cli(["recommend", "--model", str(ckpt), "--data", str(data), "--client", "c000001", "--t", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["client_id"] == "c000001" and out["t"] == 1 and len(out["ranked"]) == 1


def test_cli_recommend_errors(cli_data, capsys):
    d, data, cfg, ckpt = cli_data
    assert run_cli(["recommend", "--model", str(ckpt), "--data", str(data), "--client", "zz"]) == 1
    assert _err(capsys)["error"] == "DataError"
    assert run_cli(["recommend", "--model", str(ckpt), "--data", str(data), "--candidates", "1,x"]) == 2
    assert run_cli(["recommend", "--model", str(ckpt), "--data", str(data), "--candidates", "99"]) == 1
    assert _err(capsys)["error"] == "RangeError"


def test_cli_gradcheck(capsys):
    assert run_cli(["gradcheck", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    worst = float(out.strip().splitlines()[-1].split()[1])
    assert worst < 1e-4 and "PASS" in out


def test_cli_baseline(cli_data, capsys):
    d, data, cfg, ckpt = cli_data
    assert run_cli(["baseline", "--kind", "markov_mlp", "--data", str(data), "--config", str(cfg),
                    "--epochs", "1"]) == 0
    assert "action,count,mse" in capsys.readouterr().out


def test_cli_usage_errors(capsys, cli_data):
    d, data, cfg, ckpt = cli_data
    assert run_cli(["frobnicate"]) == 2
    assert _err(capsys)["error"] == "usage"
    assert run_cli(["train", "--data", str(data), "--bogus"]) == 2
    assert run_cli(["train", "--data", str(data), "--imbalance", "sideways"]) == 2
    assert run_cli(["simulate", "--profile", "nope", "--out", str(d / "x")]) == 2
    assert run_cli([]) == 2


def test_cli_data_errors(tmp_path, capsys, cli_data):
    d, data, cfg, ckpt = cli_data
    recs = [make_record(f"c{i}", m=5, seed=i) for i in range(3)]
    bad = tmp_path / "bad.jsonl"
    save_dataset(bad, DatasetHeader(3, 4, 2, SCHEMA), recs)
    assert run_cli(["train", "--data", str(bad), "--epochs", "1"]) == 1
    err = _err(capsys)
    assert err["error"] == "DataError" and "line 2: client c0" in err["message"]
    assert run_cli(["train", "--data", str(tmp_path / "none.jsonl")]) == 1
    assert run_cli(["evaluate", "--model", str(data), "--data", str(data)]) == 1
    badcfg = tmp_path / "c.cfg"
    badcfg.write_text("wings = 2\n")
    assert run_cli(["train", "--data", str(data), "--config", str(badcfg)]) == 1
    assert "wings" in _err(capsys)["message"]
