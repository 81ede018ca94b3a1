import math

import numpy as np
import pytest

from snm import autograd as ad
from snm.autograd import Parameter, Tensor
from snm.dataio import NeighborhoodIndex
from snm.model import ModelParams, forward, init_params, load_checkpoint
from snm.training import (
    AdamState,
    Batch,
    ConfigError,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    clip_gradients,
    fit,
    loss_bce,
    loss_total,
    loss_user_neighbor,
    lr_at,
    make_batch,
)

from conftest import dense_store, ranked_store, toy_store


# ---------------------------------------------------------------- losses


def test_bce_values():
    assert loss_bce(0.5, 1.0).value == pytest.approx(math.log(2), abs=1e-15)
    assert loss_bce(0.9, 0.0).value == pytest.approx(-math.log(0.1), abs=1e-14)
    assert loss_bce(1.0, 1.0).value == pytest.approx(0.0, abs=1e-9)
    assert loss_bce(0.0, 1.0).value == pytest.approx(-math.log(1e-10))


def test_bce_vectorized():
    out = loss_bce(np.array([0.5, 0.9]), np.array([1.0, 0.0])).value
    np.testing.assert_allclose(out, [math.log(2), -math.log(0.1)], rtol=1e-14)


def test_user_neighbor_zero_dots():
    d, K = 4, 5
    u, p = np.zeros(d), np.ones(d)
    loss = loss_user_neighbor(u, p, np.zeros((K, d))).value
    assert loss == pytest.approx((K + 1) * math.log(2), abs=1e-14)
    assert loss == pytest.approx(4.1588830833596715, abs=1e-12)


def test_user_neighbor_asymptote_and_empty_negatives():
    p = np.array([1.0, 0.0])
    loss = loss_user_neighbor(np.array([50.0, 0.0]), p, -np.array([[50.0, 0.0]] * 3)).value
    assert loss < 1e-20
    u = np.array([0.3, -0.4])
    alone = loss_user_neighbor(u, p, np.zeros((0, 2))).value
    assert alone == pytest.approx(-math.log(1 / (1 + math.exp(-0.3))), abs=1e-15)


def _toy_batch(K=2, seed=0):
    store = toy_store()
    index = NeighborhoodIndex.from_store(store)
    tr = store.train_pairs[:3]
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(d=16, L=1, user_neg=K)
    batch = make_batch(tr[:, 0], tr[:, 1], [1.0, 0.0, 1.0], index, store.n_users, cfg, rng)
    params = init_params(store.n_users, store.n_items, 16, 1, seed=seed, emb_std=0.3)
    return store, params, batch


def test_total_with_zero_alpha_is_bce_sum():
    _, params, batch = _toy_batch()
    cfg = TrainConfig(d=16, L=1, alpha=0.0)
    total, bce, un = loss_total(params, batch, cfg)
    fw = forward(params, batch.users, batch.items, batch.nbr, batch.valid)
    assert total.value == loss_bce(fw.r_hat, batch.labels).value.sum()
    assert un == 0.0


def _sub(batch, rows):
    return Batch(batch.users[rows], batch.items[rows], batch.labels[rows], batch.nbr[rows], batch.valid[rows], batch.neg_users[rows])


def test_total_single_pair_composition():
    _, params, batch = _toy_batch()
    cfg = TrainConfig(d=16, L=1, alpha=0.1)
    one = _sub(batch, [0])
    total, _, _ = loss_total(params, one, cfg)
    fw = forward(params, one.users, one.items, one.nbr, one.valid)
    bce = loss_bce(fw.r_hat, one.labels).value[0]
    un = loss_user_neighbor(fw.u, fw.p, ad.take(params["U"], one.neg_users)).value[0]
    expected = bce + 0.1 * un if fw.has[0] else bce
    assert total.value == pytest.approx(expected, rel=1e-14)


def test_total_has_no_cross_terms():
    _, params, batch = _toy_batch()
    cfg = TrainConfig(d=16, L=1, alpha=0.7)
    total = float(loss_total(params, batch, cfg)[0].value)
    parts = sum(float(loss_total(params, _sub(batch, [i]), cfg)[0].value) for i in range(3))
    assert total == pytest.approx(parts, rel=1e-12)


def test_user_neighbor_term_restricted_to_positives():
    _, params, batch = _toy_batch()
    both = loss_total(params, batch, TrainConfig(d=16, L=1, alpha=1.0))[2]
    pos_only = loss_total(params, batch, TrainConfig(d=16, L=1, alpha=1.0, un_on_negatives=False))[2]
    fw = forward(params, batch.users, batch.items, batch.nbr, batch.valid)
    per = loss_user_neighbor(fw.u, fw.p, ad.take(params["U"], batch.neg_users)).value * fw.has
    assert both == pytest.approx(per.sum()) and pos_only == pytest.approx(per[[0, 2]].sum())


def test_zero_alpha_isolates_negative_users():
    store, params, batch = _toy_batch(K=4)
    touched = set(batch.users.tolist()) | set(batch.nbr[batch.valid].tolist())
    only_neg = sorted(set(batch.neg_users.reshape(-1).tolist()) - touched)
    assert only_neg
    params.zero_grad()
    ad.backward(loss_total(params, batch, TrainConfig(d=16, L=1, alpha=0.0))[0])
    assert (params["U"].grad[only_neg] == 0).all()
    params.zero_grad()
    ad.backward(loss_total(params, batch, TrainConfig(d=16, L=1, alpha=1.0))[0])
    assert (np.abs(params["U"].grad[only_neg]).sum(axis=1) > 0).any()


@pytest.mark.parametrize("mode", ["full", "no-threshold", "no-user-neighbor", "plain"])
def test_loss_gradient_check_all_modes(mode):
    store, params, batch = _toy_batch(K=3)
    params["theta"].value[...] = np.random.default_rng(1).normal(0, 0.05, store.n_users)
    rep = ad.grad_check(
        lambda: loss_total(params, batch, TrainConfig(d=16, L=1, alpha=0.3, mode=mode))[0], params, max_entries=200
    )
    assert rep.passed, rep.violations[:3]


# ---------------------------------------------------------------- optimizer


def _single(value, grad):
    p = Parameter("w", value)
    p.grad[...] = grad
    return ModelParams({"w": p})


def test_adam_first_step():
    params = _single(np.zeros(5), np.ones(5))
    adam_step(params, AdamState(), 0.001)
    np.testing.assert_allclose(params["w"].value, -0.001, rtol=1e-7)


def test_adam_zero_grad():
    params = _single(np.ones(3), np.ones(3))
    state = AdamState()
    adam_step(params, state, 0.001)
    before = params["w"].value.copy()
    m, v = state.m["w"].copy(), state.v["w"].copy()
    params["w"].grad[...] = 0.0
    params["w"].value[...] = before
    state.m["w"][...] = 0.0
    state.v["w"][...] = 0.0
    adam_step(params, state, 0.001)
    np.testing.assert_array_equal(params["w"].value, before)
    # moments of a live parameter decay under zero gradient
    state2 = AdamState(m={"w": m.copy()}, v={"w": v.copy()}, step=1)
    adam_step(params, state2, 0.001)
    np.testing.assert_allclose(state2.m["w"], 0.9 * m)
    np.testing.assert_allclose(state2.v["w"], 0.999 * v)


def test_adam_sign_flip_shrinks_step():
    params = _single(np.zeros(1), np.ones(1))
    state = AdamState()
    adam_step(params, state, 0.001)
    d1 = params["w"].value[0]
    v1 = state.v["w"][0]
    params["w"].grad[...] = -1.0
    adam_step(params, state, 0.001)
    d2 = params["w"].value[0] - d1
    assert state.v["w"][0] > v1
    assert abs(d2) < abs(d1)
    # hand trace: m = -0.01, v = 0.001999; bias-corrected ratio
    m_hat = -0.01 / (1 - 0.9**2)
    v_hat = 0.001999 / (1 - 0.999**2)
    assert d2 == pytest.approx(-0.001 * m_hat / (math.sqrt(v_hat) + 1e-8), rel=1e-9)


def test_adam_non_finite():
    params = _single(np.zeros(1), np.array([np.nan]))
    with pytest.raises(FloatingPointError):
        adam_step(params, AdamState(), 0.001)


def test_lr_schedule():
    assert lr_at(0) == 0.001
    assert lr_at(99) == 0.001
    assert lr_at(250) == pytest.approx(0.00081, rel=1e-12)
    assert lr_at(100) == pytest.approx(0.0009)


def test_clip_gradients_per_example_norm():
    params = _single(np.zeros(2), np.array([30.0, 40.0]))
    norm = clip_gradients(params, 5.0, batch_size=2)
    assert norm == 25.0
    assert np.linalg.norm(params["w"].grad) == pytest.approx(10.0)
    params = _single(np.zeros(2), np.array([3.0, 4.0]))
    clip_gradients(params, 5.0, batch_size=1)
    np.testing.assert_array_equal(params["w"].grad, [3.0, 4.0])


# ---------------------------------------------------------------- config


def test_config_validation():
    TrainConfig(d=16, L=1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(d=20).validate()
    with pytest.raises(ConfigError):
        TrainConfig(L=4).validate()
    with pytest.raises(ConfigError):
        TrainConfig(mode="nope").validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()


def test_mode_alpha_rules():
    assert TrainConfig(mode="no-user-neighbor", alpha=1.0).effective_alpha == 0.0
    assert TrainConfig(mode="plain", alpha=1.0).effective_alpha == 0.0
    assert TrainConfig(mode="full", alpha=0.1).effective_alpha == 0.1
    assert TrainConfig(mode="no-threshold", alpha=0.1).effective_alpha == 0.1


# ---------------------------------------------------------------- fit


def _fit(store, **kw):
    kw.setdefault("d", 16)
    kw.setdefault("L", 1)
    cfg = TrainConfig(**kw)
    return fit(store, NeighborhoodIndex.from_store(store), cfg)


def test_fit_deterministic():
    store = ranked_store()
    a = _fit(store, epochs=3, seed=4)
    b = _fit(store, epochs=3, seed=4)
    assert [h["train_loss"] for h in a.history] == [h["train_loss"] for h in b.history]
    for pa, pb in zip(a.params, b.params):
        np.testing.assert_array_equal(pa.value, pb.value)


def test_no_user_neighbor_equals_full_with_zero_alpha():
    store = ranked_store()
    a = _fit(store, epochs=2, mode="no-user-neighbor", alpha=0.5, seed=1)
    b = _fit(store, epochs=2, mode="full", alpha=0.0, seed=1)
    assert [h["train_loss"] for h in a.history] == [h["train_loss"] for h in b.history]


def test_plain_mode_equals_ablated_forward():
    store = toy_store()
    params = init_params(store.n_users, store.n_items, 16, 1, seed=0)
    users, items = store.pairs[:10, 0], store.pairs[:10, 1]
    plain = forward(params, users, items, mode="plain").r_hat.value
    u = ad.take(params["U"], users)
    v = ad.take(params["V"], items)
    from snm.model import score

    np.testing.assert_array_equal(plain, score(params, u, v).value)


def test_no_threshold_uses_rejected_neighbors():
    store = toy_store()
    index = NeighborhoodIndex.from_store(store)
    params = init_params(store.n_users, store.n_items, 16, 1, seed=0)
    params["theta"].value[...] = 1e6
    tr = store.train_pairs[:8]
    cfg = TrainConfig(d=16, L=1, mode="no-threshold")
    batch = make_batch(tr[:, 0], tr[:, 1], np.ones(8), index, store.n_users, cfg, np.random.default_rng(0))
    fw = forward(params, batch.users, batch.items, batch.nbr, batch.valid, "no-threshold")
    np.testing.assert_array_equal(fw.mask, batch.valid)
    assert fw.has.any()
    params.zero_grad()
    ad.backward(loss_total(params, batch, cfg)[0])
    assert (params["theta"].grad == 0).all()


def test_loss_decreases_early_on_overfit_set():
    monotone = 0
    for seed in range(5):
        res = _fit(dense_store(seed=seed), epochs=5, seed=seed, patience=100)
        losses = [h["train_loss"] for h in res.history]
        monotone += all(b <= a for a, b in zip(losses, losses[1:]))
    assert monotone >= 4


def test_early_stopping_returns_best(tmp_path):
    store = ranked_store()
    cfg = TrainConfig(d=16, L=1, epochs=12, patience=2, seed=3, lr0=0.01, decay=1.0)
    res = fit(store, NeighborhoodIndex.from_store(store), cfg, outdir=tmp_path)
    hrs = [h["val_HR@10"] for h in res.history]
    assert res.best_epoch == int(np.argmax(hrs)) + 1
    assert res.best_hr == max(hrs)
    saved, meta = load_checkpoint(tmp_path / "best.ckpt")
    assert int(meta["epoch"]) == res.best_epoch
    for a, b in zip(res.params, saved):
        np.testing.assert_array_equal(a.value, b.value)
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_HR@10,val_NDCG@10,lr"
    assert len(lines) == len(res.history) + 1


def test_divergence_aborts():
    store = toy_store()
    init = init_params(store.n_users, store.n_items, 16, 1, seed=0)
    init["W_ut"].value[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        fit(store, NeighborhoodIndex.from_store(store), TrainConfig(d=16, L=1, epochs=1), init=init)


def test_warm_start_lowers_first_epoch_loss():
    wins = 0
    for seed in range(3):
        store = ranked_store(seed=seed)
        index = NeighborhoodIndex.from_store(store)
        pre = fit(store, index, TrainConfig(d=16, L=1, mode="plain", epochs=8, seed=seed, lr0=0.005, decay=1.0))
        cold = fit(store, index, TrainConfig(d=16, L=1, epochs=1, seed=seed))
        warm = fit(store, index, TrainConfig(d=16, L=1, epochs=1, seed=seed), init=pre.params)
        wins += warm.history[0]["train_loss"] < cold.history[0]["train_loss"]
    assert wins >= 2
