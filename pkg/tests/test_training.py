import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crn.domain import ActionCatalog, DataError, RangeError
from crn.features import client_arrays, DemographicEncoder
from crn.numerics import DimensionError, NumericError
from crn.serialization import dumps_checkpoint
from crn.synthworld import TABLE1_COUNTS
from crn.training import (ConfigError, ImbalanceConfig, TrainConfig, action_weights, adjust_effectiveness,
                          compute_loss, labeled_pairs, length_probabilities, reward_weight, sample_batch,
                          split_clients, top_k_indices, train)

from conftest import SCHEMA, make_record

NONE = ImbalanceConfig.none()


def mp_softmax(v):
    mpmath.mp.dps = 40
    e = [mpmath.exp(mpmath.mpf(x)) for x in v]
    return [float(x / sum(e)) for x in e]


# -- action weights -------------------------------------------------------------

def test_action_weights_uniform_when_frequencies_equal():
    assert np.allclose(action_weights(ActionCatalog(4, [5, 5, 5, 5])), 0.25)


def test_action_weights_match_arbitrary_precision_oracle():
    w = action_weights((1.0, 3.0))
    assert np.allclose(w, mp_softmax([1.0, 1.0 / 3.0]), atol=1e-15)


def test_action_weights_table1_rare_beats_common():
    w = action_weights(ActionCatalog(10, list(TABLE1_COUNTS)))
    assert w[1] > w[5]  # A2 (390 rows) above A6 (62,263 rows)
    assert abs(w.sum() - 1) < 1e-12


@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(0.05, 1.0)), st.randoms())
def test_action_weights_permutation_equivariant_and_monotone(f, rnd):
    perm = list(range(len(f)))
    rnd.shuffle(perm)
    w = action_weights(f)
    assert np.allclose(action_weights(f[perm]), w[perm], atol=1e-15)
    order = np.argsort(f)
    assert np.all(np.diff(w[order]) <= 1e-15)


def test_action_weights_absent_and_present_checks():
    w = action_weights(ActionCatalog(3, [0, 2, 6]))
    assert w[0] == 0 and w[1] > w[2] > 0
    with pytest.raises(ConfigError):
        action_weights(ActionCatalog(3, [0, 2, 6]), present=[1, 2])
    with pytest.raises(ConfigError):
        action_weights(ActionCatalog(2, [0, 0]))


# -- sampling ---------------------------------------------------------------------

def test_length_probabilities_examples():
    assert np.allclose(length_probabilities([2, 4]), mp_softmax([2, 4]), atol=1e-15)
    assert np.allclose(length_probabilities([2, 4]), [0.1192, 0.8808], atol=1e-4)
    assert np.allclose(length_probabilities([1, 1, 1]), 1 / 3)


def _arrays(recs):
    enc = DemographicEncoder(SCHEMA)
    return [client_arrays(r, enc, 4, 2) for r in recs]


def test_length_sampling_matches_probabilities_statistically():
    arrs = _arrays([make_record("a", length=3, seed=1), make_record("b", length=5, seed=2)])
    rng = np.random.default_rng(0)
    n = 100_000
    draws = sample_batch(arrs, rng, n, length_sampling=True)
    share_b = sum(ca is arrs[1] for ca, _ in draws) / n
    p = math.exp(5) / (math.exp(3) + math.exp(5))
    assert abs(share_b - p) < 3 * math.sqrt(p * (1 - p) / n)
    assert all(1 <= t < ca.length for ca, t in draws[:1000])


def test_uniform_sampling_and_empty_dataset():
    arrs = _arrays([make_record("a", length=1), make_record("b", length=4)])
    draws = sample_batch(arrs, np.random.default_rng(1), 50)
    assert all(ca is arrs[1] for ca, _ in draws)
    with pytest.raises(DataError):
        sample_batch(_arrays([make_record("a", length=1)]), np.random.default_rng(0), 4)
    with pytest.raises(DataError):
        sample_batch(_arrays([make_record("a", length=1)]), np.random.default_rng(0), 4, length_sampling=True)


# -- loss -----------------------------------------------------------------------------

def test_loss_examples():
    assert compute_loss([0.2, 0.7], [0.2, 0.7], None, NONE).loss == 0.0
    assert compute_loss([0.8], [0.3], None, NONE).loss == pytest.approx(0.25, abs=1e-15)
    rw = compute_loss([0.5], [0.0], None, ImbalanceConfig(reward_weighting=True))
    mpmath.mp.dps = 30
    assert rw.loss == pytest.approx(float(mpmath.tanh(mpmath.mpf("0.1"))) * 0.25, abs=1e-15)
    assert float(reward_weight(0.0)) == pytest.approx(0.09967, abs=1e-5)


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1)), st.integers(0, 2**31))
def test_all_off_is_plain_mse(pred, seed):
    y = np.random.default_rng(seed).random(len(pred))
    r = compute_loss(pred, y, np.full(len(pred), 7.0), NONE)
    assert r.loss == pytest.approx(float(np.mean((pred - y) ** 2)), abs=1e-15)
    assert np.allclose(r.dpred, 2 * (pred - y) / len(pred))


def test_factors_multiply():
    cfg = ImbalanceConfig(action_weighting=True, reward_weighting=True)
    r = compute_loss([0.9, 0.1], [0.5, 0.2], np.array([0.3, 0.7]), cfg)
    exp_ = np.array([0.3 * np.tanh(0.6) * 0.16, 0.7 * np.tanh(0.3) * 0.01])
    assert np.allclose(r.per_sample, exp_) and r.loss == pytest.approx(exp_.mean())


@settings(max_examples=60)
@given(arrays(np.float64, st.integers(1, 50), elements=st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.9])),
       st.integers(1, 60))
def test_top_k_matches_sort_oracle(losses, k):
    k = min(k, len(losses))
    idx = top_k_indices(losses, k)
    oracle = sorted(range(len(losses)), key=lambda i: (-losses[i], i))[:k]
    assert list(idx) == sorted(oracle)


def test_gradient_only_through_selected():
    rng = np.random.default_rng(2)
    p, y = rng.random(20), rng.random(20)
    r = compute_loss(p, y, None, ImbalanceConfig(loss_selection=True, k_loss=5))
    assert len(r.selected) == 5
    mask = np.zeros(20, bool); mask[r.selected] = True
    assert np.all(r.dpred[~mask] == 0) and np.all(r.dpred[mask] != 0)
    assert r.loss == pytest.approx(np.sort(r.per_sample)[-5:].mean())


def test_loss_errors():
    with pytest.raises(DimensionError):
        compute_loss([0.1, 0.2], [0.1], None, NONE)
    with pytest.raises(DimensionError):
        compute_loss([0.1], [0.1], np.ones(2), ImbalanceConfig(action_weighting=True))


# -- effectiveness ---------------------------------------------------------------------

@pytest.mark.parametrize("r,t,exp_", [(0.8, 1, 0.8), (0.8, 2, 0.2), (1.0, 4, 0.0625)])
def test_adjust_effectiveness_examples(r, t, exp_):
    assert float(adjust_effectiveness(r, t)) == exp_


@given(st.floats(0, 1), st.integers(1, 200))
def test_adjust_effectiveness_bounds(r, t):
    v = float(adjust_effectiveness(r, t))
    assert 0 <= v <= r


def test_adjust_effectiveness_range_error():
    with pytest.raises(RangeError):
        adjust_effectiveness(0.5, 0)


# -- configs --------------------------------------------------------------------------

def test_imbalance_parse_and_check():
    assert ImbalanceConfig.parse("none") == NONE
    allc = ImbalanceConfig.parse("all")
    assert allc.action_weighting and allc.client_sampling and allc.loss_selection
    c = ImbalanceConfig.parse("reward, topk")
    assert c.reward_weighting and c.loss_selection and not c.action_weighting
    with pytest.raises(ConfigError):
        ImbalanceConfig.parse("reward,bogus")
    with pytest.raises(ConfigError):
        ImbalanceConfig(loss_selection=True, k_loss=200).check(128)
    ImbalanceConfig(k_loss=200).check(128)
    with pytest.raises(ConfigError):
        ImbalanceConfig(k_loss=0).check(128)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"nope": 1})
    assert TrainConfig.from_mapping({"epochs": "3", "lr": "0.01"}).epochs == 3
    assert TrainConfig.from_mapping({"restore_best": "false"}).restore_best is False
    assert TrainConfig.from_mapping({"restore_best": "Yes"}).restore_best is True
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"restore_best": "maybe"})


def test_split_is_client_level_and_complete():
    recs = [make_record(f"c{i}", seed=i) for i in range(50)]
    tr, va, te = split_clients(recs, 3)
    ids = [r.client_id for r in tr + va + te]
    assert sorted(ids) == sorted(r.client_id for r in recs)
    assert (len(tr), len(va), len(te)) == (35, 5, 10)
    assert split_clients(recs, 3)[2] == te


# -- the loop -----------------------------------------------------------------------------

def small_cfg(**kw):
    base = dict(epochs=2, seed=3, batch_size=16, n_a=4, n_o=6, n_s=8, n_imp=4, n_exp=4, hidden=8)
    base.update(kw)
    return TrainConfig(**base)


def test_no_labeled_steps_is_data_error():
    recs = [make_record(f"c{i}", length=1, seed=i) for i in range(10)]
    with pytest.raises(DataError):
        train(recs, 5, 4, SCHEMA, 2, small_cfg())


def test_learning_progress_on_tiny_world(tiny_world):
    ds = tiny_world
    recs = ds.records[:50]
    res = train(recs, ds.m, ds.n_r, ds.schema, ds.n_x, small_cfg(epochs=20, batch_size=32, val_frac=0.2))
    h = res.history
    assert len(h.train_loss) == len(h.val_loss) == len(h.seconds) == 20
    assert h.val_loss[19] < h.val_loss[0]
    assert h.to_csv().splitlines()[0] == "epoch,train_loss,val_loss,seconds"


def test_restore_best_returns_lowest_validation_weights(tiny_world):
    from crn.training import mse_on
    from crn.features import client_arrays
    ds = tiny_world
    recs = ds.records[:60]
    kept = train(recs, ds.m, ds.n_r, ds.schema, ds.n_x, small_cfg(epochs=6, batch_size=32, val_frac=0.2))
    last = train(recs, ds.m, ds.n_r, ds.schema, ds.n_x,
                 small_cfg(epochs=6, batch_size=32, val_frac=0.2, restore_best=False))
    assert kept.history.val_loss == last.history.val_loss  # the recorded curve is unchanged
    va = [client_arrays(r, kept.model.demo_enc, ds.n_r, ds.n_x) for r in kept.val]
    assert mse_on(kept.model, va) == min(kept.history.val_loss)
    assert mse_on(last.model, va) == last.history.val_loss[-1]


@pytest.mark.parametrize("imb", ["none", "all"])
def test_same_seed_same_checkpoint(tiny_world, imb):
    ds = tiny_world
    cfg = small_cfg()
    i = ImbalanceConfig.parse(imb, k_loss=8)
    a = train(ds.records[:40], ds.m, ds.n_r, ds.schema, ds.n_x, cfg, i)
    b = train(ds.records[:40], ds.m, ds.n_r, ds.schema, ds.n_x, cfg, i)
    assert dumps_checkpoint(a.model) == dumps_checkpoint(b.model)
    c = train(ds.records[:40], ds.m, ds.n_r, ds.schema, ds.n_x, replace(cfg, seed=4), i)
    assert dumps_checkpoint(c.model) != dumps_checkpoint(a.model)


def test_non_finite_loss_names_batch_and_parameter(tiny_world, monkeypatch):
    from crn import training
    ds = tiny_world
    real = training.adam_step
    calls = {"n": 0}

    def poisoned(params, grads, state):
        calls["n"] += 1
        out = real(params, grads, state)
        if calls["n"] == 2:
            params["fuse.l1.W"][0, 0] = np.nan
        return out

    monkeypatch.setattr(training, "adam_step", poisoned)
    with pytest.raises(NumericError, match=r"epoch 1 batch 3: parameter fuse\.l1\.W"):
        train(ds.records[:40], ds.m, ds.n_r, ds.schema, ds.n_x, small_cfg())
