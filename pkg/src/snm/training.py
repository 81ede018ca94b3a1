"""Joint objective, Adam, the staircase learning-rate schedule and the
training loop."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ad
from .autograd import NonFiniteError, Tensor
from .dataio import (
    TRAIN,
    VALID,
    InteractionStore,
    NeighborhoodIndex,
    neighborhood_batch,
    sample_negative_items,
    sample_negative_users,
)
from .model import MODES, ModelParams, forward, init_params, save_checkpoint, width_groups

log = logging.getLogger(__name__)

DIM_GRID = (16, 32, 64, 128)
LAYER_GRID = (1, 2, 3)
ALPHA_GRID = (0.001, 0.01, 0.1, 1.0)
BCE_EPS = 1e-10

# fixed sub-seed offsets per stage
SEED_INIT, SEED_TRAIN, SEED_VALID = 1, 2, 3


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    d: int = 64
    L: int = 2
    mode: str = "full"
    alpha: float = 0.01
    item_neg_ratio: int = 5
    user_neg: int = 5
    batch_size: int = 256
    lr0: float = 0.001
    decay: float = 0.9
    decay_steps: int = 100
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    cap: int = 50
    clip_norm: float = 5.0
    un_on_negatives: bool = True
    val_cases: int = 0

    def validate(self) -> "TrainConfig":
        if self.d not in DIM_GRID:
            raise ConfigError(f"d={self.d} not in {DIM_GRID}")
        if self.L not in LAYER_GRID:
            raise ConfigError(f"L={self.L} not in {LAYER_GRID}")
        if self.mode not in MODES:
            raise ConfigError(f"mode={self.mode!r} not in {MODES}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.batch_size < 1 or self.item_neg_ratio < 0 or self.user_neg < 0:
            raise ConfigError("batch_size must be >= 1 and negative counts >= 0")
        if self.epochs < 0 or self.patience < 1 or self.cap < 1:
            raise ConfigError("epochs >= 0, patience >= 1 and cap >= 1 required")
        if self.lr0 <= 0 or not 0 < self.decay <= 1 or self.decay_steps < 1:
            raise ConfigError("invalid learning-rate schedule")
        return self

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.mode in ("no-user-neighbor", "plain") else self.alpha

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- losses


def loss_bce(r_hat, r) -> Tensor:
    """Elementwise binary cross-entropy with ``r_hat`` clamped away from 0/1."""
    r = np.asarray(r, dtype=np.float64)
    q = ad.clip(ad.as_tensor(r_hat), BCE_EPS, 1.0 - BCE_EPS)
    pos = ad.mul(ad.log(q), r)
    neg = ad.mul(ad.log(ad.affine(q, -1.0, 1.0)), 1.0 - r)
    return ad.affine(ad.add(pos, neg), -1.0)


def loss_user_neighbor(u, p, negatives) -> Tensor:
    """Negative-sampling skip-gram loss of predicting ``u`` from its pooled
    neighborhood ``p``.

    ``u`` and ``p`` are ``(..., d)``; ``negatives`` is ``(..., K, d)``.
    """
    u, p, negatives = ad.as_tensor(u), ad.as_tensor(p), ad.as_tensor(negatives)
    out = ad.log_sigmoid(ad.dot(u, p))
    if negatives.shape[-2] > 0:
        pe = ad.reshape(p, p.shape[:-1] + (1, p.shape[-1]))
        neg = ad.log_sigmoid(ad.affine(ad.dot(negatives, pe), -1.0))
        out = ad.add(out, ad.sum(neg, axis=-1))
    return ad.affine(out, -1.0)


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    nbr: np.ndarray | None = None
    valid: np.ndarray | None = None
    neg_users: np.ndarray | None = None

    def __len__(self) -> int:
        return self.users.size

    def subset(self, rows, width: int) -> "Batch":
        return Batch(
            self.users[rows], self.items[rows], self.labels[rows],
            self.nbr[rows, :width], self.valid[rows, :width], self.neg_users[rows],
        )


def make_batch(users, items, labels, index: NeighborhoodIndex, n_users: int, config: TrainConfig, rng) -> Batch:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.float64)
    if config.mode == "plain":
        return Batch(users, items, labels)
    nbr, valid = neighborhood_batch(index, users, items, config.cap, rng)
    neg = sample_negative_users(n_users, users, config.user_neg, rng)
    return Batch(users, items, labels, nbr, valid, neg.reshape(users.size, config.user_neg))


def loss_total(params: ModelParams, batch: Batch, config: TrainConfig):
    """Summed joint objective over a batch.

    Returns ``(loss, bce_sum, un_sum)``; the two sums are plain floats.
    """
    if batch.nbr is None or config.mode == "plain":
        return _group_loss(params, batch, config)
    total, bce_sum, un_sum = None, 0.0, 0.0
    for rows, width in width_groups(batch.valid):
        loss, bce, un = _group_loss(params, batch.subset(rows, width), config)
        total = loss if total is None else ad.add(total, loss)
        bce_sum += bce
        un_sum += un
    return total, bce_sum, un_sum


def _group_loss(params: ModelParams, batch: Batch, config: TrainConfig):
    fw = forward(params, batch.users, batch.items, batch.nbr, batch.valid, config.mode)
    bce = ad.sum(loss_bce(fw.r_hat, batch.labels))
    alpha = config.effective_alpha
    if alpha == 0.0 or fw.p is None:
        return bce, float(bce.value), 0.0
    weight = fw.has.astype(float)
    if not config.un_on_negatives:
        weight = weight * (batch.labels > 0)
    neg = ad.take(params["U"], batch.neg_users)
    un = ad.sum(ad.mul(loss_user_neighbor(fw.u, fw.p, neg), weight))
    return ad.add(bce, ad.affine(un, alpha)), float(bce.value), float(un.value)


# ---------------------------------------------------------------- optimizer


def lr_at(step: int, lr0: float = 0.001, decay: float = 0.9, every: int = 100) -> float:
    return lr0 * decay ** (step // every)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ModelParams, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update from the accumulated ``.grad`` arrays."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    step_size = lr / (1.0 - b1**state.step)
    inv_c2 = 1.0 / math.sqrt(1.0 - b2**state.step)
    for p in params:
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        m, v, g = state.m[p.name], state.v[p.name], p.grad
        # in place: the embedding tables dominate the cost of a step
        tmp = np.multiply(g, g)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.multiply(g, 1.0 - b1, out=tmp)
        m *= b1
        m += tmp
        np.sqrt(v, out=tmp)
        tmp *= inv_c2
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        if not np.isfinite(tmp).all():
            raise NonFiniteError(f"non-finite Adam update for {p.name}")
        p.value -= tmp


def clip_gradients(params: ModelParams, max_norm: float, batch_size: int) -> float:
    """Rescale gradients so their per-example global norm is at most ``max_norm``.

    Returns the per-example norm before clipping.
    """
    norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params)) / batch_size
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


# ---------------------------------------------------------------- loop


@dataclass
class FitResult:
    params: ModelParams
    history: list
    best_epoch: int
    best_hr: float


HISTORY_FIELDS = ("epoch", "train_loss", "val_HR@10", "val_NDCG@10", "lr")


def epoch_instances(store: InteractionStore, ratio: int, rng):
    """Shuffled (users, items, labels) for one epoch: every train positive plus
    ``ratio`` fresh negatives per positive."""
    pos = store.train_pairs
    u = pos[:, 0]
    neg = sample_negative_items(store, u, ratio, rng, split=TRAIN).reshape(-1)
    users = np.concatenate([u, np.repeat(u, ratio)])
    items = np.concatenate([pos[:, 1], neg])
    labels = np.concatenate([np.ones(len(u)), np.zeros(neg.size)])
    order = rng.permutation(users.size)
    return users[order], items[order], labels[order]


def train_epoch(params, store, index, config: TrainConfig, adam: AdamState, rng, epoch: int = 0):
    """One pass over the training positives. Returns (mean loss, mean BCE)."""
    users, items, labels = epoch_instances(store, config.item_neg_ratio, rng)
    total = bce_total = 0.0
    for s in range(0, users.size, config.batch_size):
        sl = slice(s, s + config.batch_size)
        batch = make_batch(users[sl], items[sl], labels[sl], index, store.n_users, config, rng)
        params.zero_grad()
        try:
            loss, bce, _ = loss_total(params, batch, config)
            ad.backward(loss)
            if config.clip_norm:
                clip_gradients(params, config.clip_norm, len(batch))
            adam_step(params, adam, lr_at(adam.step, config.lr0, config.decay, config.decay_steps))
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"epoch {epoch}, step {adam.step}: {exc}") from exc
        total += float(loss.value)
        bce_total += bce
    n = max(users.size, 1)
    return total / n, bce_total / n


def fit(
    store: InteractionStore,
    index: NeighborhoodIndex,
    config: TrainConfig,
    init: ModelParams | None = None,
    outdir: str | os.PathLike | None = None,
    validate: bool = True,
) -> FitResult:
    """Train with early stopping on validation HR@10.

    Returns the parameters of the best validation epoch. With ``outdir``,
    ``history.csv`` is rewritten every epoch and ``best.ckpt`` at every
    improvement.
    """
    from .evaluation import build_cases, evaluate_cases, model_scorer

    config.validate()
    if init is None:
        params = init_params(store.n_users, store.n_items, config.d, config.L, config.seed + SEED_INIT)
    else:
        params = init.copy()
    rng = np.random.default_rng(config.seed + SEED_TRAIN)
    adam = AdamState()
    out = Path(outdir) if outdir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    cases = None
    if validate and (store.labels == VALID).any():
        cases = build_cases(store, VALID, seed=config.seed + SEED_VALID, limit=config.val_cases or None)
        if len(cases) == 0:
            log.warning("no usable validation cases; keeping the last epoch")
            cases = None

    history: list[dict] = []
    best_state, best_hr, best_epoch, stale = params.state(), -1.0, 0, 0
    for epoch in range(1, config.epochs + 1):
        lr = lr_at(adam.step, config.lr0, config.decay, config.decay_steps)
        loss, bce = train_epoch(params, store, index, config, adam, rng, epoch)
        row = {"epoch": epoch, "train_loss": loss, "train_bce": bce, "lr": lr}
        if cases is not None:
            scorer = model_scorer(params, index, config.mode, config.cap, config.seed + SEED_VALID)
            rep = evaluate_cases(cases, scorer)
            row["val_HR@10"], row["val_NDCG@10"] = rep.hr[10], rep.ndcg[10]
        else:
            row["val_HR@10"] = row["val_NDCG@10"] = float("nan")
        history.append(row)
        log.info("epoch %d loss %.5f bce %.5f val HR@10 %.4f", epoch, loss, bce, row["val_HR@10"])

        hr = row["val_HR@10"]
        improved = cases is None or hr > best_hr
        if improved:
            best_state, best_epoch, stale = params.state(), epoch, 0
            best_hr = hr if cases is not None else best_hr
            if out is not None:
                save_checkpoint(params, out / "best.ckpt", checkpoint_meta(config, epoch))
        else:
            stale += 1
        if out is not None:
            write_history(history, out / "history.csv")
        if stale >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    params.load_state(best_state)
    return FitResult(params, history, best_epoch, best_hr)


def checkpoint_meta(config: TrainConfig, epoch: int) -> dict:
    return {"mode": config.mode, "cap": config.cap, "epoch": epoch, "seed": config.seed}


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
