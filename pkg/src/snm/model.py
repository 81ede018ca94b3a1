"""Selective neighborhood model: attention with a learned per-user threshold,
confidence-gated fusion and an MLP scoring tower."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ad
from .autograd import Parameter, Tensor
from .dataio import NeighborhoodIndex, neighborhood_batch, neighborhood_of

MODES = ("full", "no-threshold", "no-user-neighbor", "plain")
CKPT_HEADER = "snm-ckpt v1"


class CheckpointError(ValueError):
    pass


class ModelParams:
    """Ordered collection of named :class:`Parameter` objects."""

    def __init__(self, params: dict[str, Parameter]):
        self._params = dict(params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    @property
    def n_users(self) -> int:
        return self["U"].shape[0]

    @property
    def n_items(self) -> int:
        return self["V"].shape[0]

    @property
    def dim(self) -> int:
        return self["U"].shape[1]

    @property
    def layers(self) -> int:
        return sum(1 for n in self._params if n.startswith("tower.W"))

    def tower(self) -> list[tuple[Parameter, Parameter]]:
        return [(self[f"tower.W{l}"], self[f"tower.b{l}"]) for l in range(1, self.layers + 1)]

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self._params.items():
            if state[n].shape != p.shape:
                raise CheckpointError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.value[...] = state[n]

    def copy(self) -> "ModelParams":
        return ModelParams({n: Parameter(n, p.value) for n, p in self._params.items()})


def tower_widths(d: int, L: int) -> list[int]:
    widths = [3 * d]
    for _ in range(L):
        widths.append(widths[-1] // 2)
    return widths


def _truncated_normal(rng, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _glorot(rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_params(M: int, N: int, d: int, L: int, seed: int = 0, emb_std: float = 0.01) -> ModelParams:
    if min(M, N, d, L) <= 0:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    p = {
        "U": _truncated_normal(rng, (M, d), emb_std),
        "V": _truncated_normal(rng, (N, d), emb_std),
        "W_ut": _glorot(rng, d, d),
        "W_tj": _glorot(rng, d, d),
        "v_attn": _glorot(rng, d, 1, shape=(d,)),
        "b_u": np.zeros(d),
        "theta": np.zeros(M),
        "W_g1": _glorot(rng, d, d),
        "W_g2": _glorot(rng, d, d),
        "b_g": np.zeros(d),
    }
    widths = tower_widths(d, L)
    for l in range(1, L + 1):
        p[f"tower.W{l}"] = _glorot(rng, widths[l - 1], widths[l])
        p[f"tower.b{l}"] = np.zeros(widths[l])
    p["out.W"] = _glorot(rng, widths[-1], 1)
    p["out.b"] = np.zeros(1)
    return ModelParams({n: Parameter(n, v) for n, v in p.items()})


# ---------------------------------------------------------------- building blocks


def relevance(params: ModelParams, u: Tensor, v: Tensor, nbrs: Tensor) -> Tensor:
    """Relevance logits ``(B, C)`` from user ``(B, d)``, item ``(B, d)`` and
    neighbor ``(B, C, d)`` embeddings."""
    B, d = u.shape
    ue = ad.reshape(u, (B, 1, d))
    ve = ad.reshape(v, (B, 1, d))
    pre = ad.matmul(ad.mul(ue, nbrs), params["W_ut"])
    pre = ad.add(pre, ad.matmul(ad.mul(nbrs, ve), params["W_tj"]))
    pre = ad.add(pre, params["b_u"])
    return ad.matmul(ad.tanh(pre), params["v_attn"])


def relevance_scores(params: ModelParams, u: int, v: int, neighbors) -> np.ndarray:
    """Relevance score of each neighbor for the (user ``u``, item ``v``) pair."""
    neighbors = np.asarray(neighbors, dtype=np.int64)
    if neighbors.size == 0:
        raise ValueError("relevance_scores: empty neighbor list")
    if u in neighbors:
        raise ValueError("relevance_scores: target user among neighbors")
    U, V = params["U"].value, params["V"].value
    beta = relevance(
        params, Tensor(U[[u]]), Tensor(V[[v]]), Tensor(U[neighbors][None])
    )
    return beta.value[0]


def select_and_aggregate(beta: Tensor, theta_u, nbrs: Tensor, valid, threshold: bool = True):
    """Threshold selection and attention pooling.

    Returns ``(mask, alpha, p, has)`` where ``mask`` (bool ``(B, C)``) marks
    neighbors whose score exceeds the user's threshold, ``alpha`` is the
    softmax over that set (exactly zero elsewhere), ``p`` is the pooled
    neighborhood vector and ``has`` flags rows with a nonempty selection.
    Rows with nothing selected get ``alpha = 0`` and ``p = 0``. With
    ``threshold=False`` every valid neighbor is admitted.

    The mask is a constant for differentiation.
    """
    beta = ad.as_tensor(beta)
    valid = np.asarray(valid, dtype=bool)
    if threshold:
        th = ad.as_tensor(theta_u).value
        mask = valid & (beta.value > th[:, None])
    else:
        mask = valid.copy()
    has = mask.any(axis=1)
    safe = mask.copy()
    safe[~has, 0] = True
    alpha = ad.mul(ad.masked_softmax(beta, safe), has[:, None].astype(float))
    B, C = beta.shape
    p = ad.sum(ad.mul(ad.reshape(alpha, (B, C, 1)), nbrs), axis=1)
    return mask, alpha, p, has


F_MAX = float(np.nextafter(0.5, 0.0))


def gate_confidence(beta: Tensor, mask, valid, theta_u) -> Tensor:
    """Separation confidence in ``[0, 0.5)`` per row.

    Uses the mean score of the selected (``t_s``) and rejected (``t_d``)
    neighbors. No selected neighbor gives 0; no rejected neighbor replaces
    the ``theta - t_d`` margin with 1.
    """
    beta, theta_u = ad.as_tensor(beta), ad.as_tensor(theta_u)
    mask = np.asarray(mask, dtype=bool)
    rejected = np.asarray(valid, dtype=bool) & ~mask
    has_s = mask.any(axis=1).astype(float)
    has_d = rejected.any(axis=1).astype(float)
    t_s = ad.masked_mean(beta, mask)
    t_d = ad.masked_mean(beta, rejected)
    above = ad.sub(t_s, theta_u)
    below = ad.add(ad.mul(ad.sub(theta_u, t_d), has_d), 1.0 - has_d)
    f = ad.affine(ad.sigmoid(ad.mul(above, below)), 1.0, -0.5)
    # the sigmoid rounds to 1 for large separations; keep f strictly below 0.5
    return ad.mul(ad.clip(f, 0.0, F_MAX), has_s)


def fuse(params: ModelParams, u: Tensor, p: Tensor, f: Tensor) -> Tensor:
    g = ad.sigmoid(
        ad.add(ad.add(ad.matmul(u, params["W_g1"]), ad.matmul(p, params["W_g2"])), params["b_g"])
    )
    B = u.shape[0]
    f = ad.reshape(f, (B, 1))
    own = ad.mul(ad.mul(ad.affine(f, -1.0, 1.0), g), u)
    nb = ad.mul(ad.mul(f, ad.affine(g, -1.0, 1.0)), p)
    return ad.add(own, nb)


def score(params: ModelParams, h: Tensor, v: Tensor) -> Tensor:
    """Tower over ``[h; v; h*v]``: halving ReLU layers, then a sigmoid output."""
    z = ad.concat([h, v, ad.mul(h, v)], axis=-1)
    for W, b in params.tower():
        z = ad.relu(ad.add(ad.matmul(z, W), b))
    logit = ad.add(ad.matmul(z, params["out.W"]), params["out.b"])
    return ad.sigmoid(ad.reshape(logit, (h.shape[0],)))


def score_plain(params: ModelParams, u: Tensor, v: Tensor) -> Tensor:
    return score(params, u, v)


@dataclass
class Forward:
    r_hat: Tensor
    u: Tensor
    p: Tensor | None = None
    has: np.ndarray | None = None
    beta: Tensor | None = None
    mask: np.ndarray | None = None
    alpha: Tensor | None = None
    f: Tensor | None = None
    h: Tensor | None = None


def forward(params: ModelParams, users, items, nbr=None, valid=None, mode: str = "full") -> Forward:
    """Batched prediction for (user, item) pairs with padded neighbor lists.

    ``nbr``/``valid`` are ``(B, C)`` arrays as built by
    :func:`snm.dataio.neighborhood_batch`; they are ignored in ``plain`` mode.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    u = ad.take(params["U"], users)
    v = ad.take(params["V"], items)
    if mode == "plain":
        return Forward(score_plain(params, u, v), u)

    valid = np.asarray(valid, dtype=bool)
    nbrs = ad.take(params["U"], nbr)
    beta = relevance(params, u, v, nbrs)
    if mode == "no-threshold":
        mask, alpha, p, has = select_and_aggregate(beta, None, nbrs, valid, threshold=False)
        h = ad.add(ad.affine(u, 0.5), ad.affine(p, 0.5))
        return Forward(score(params, h, v), u, p, has, beta, mask, alpha, None, h)

    theta = ad.take(params["theta"], users)
    mask, alpha, p, has = select_and_aggregate(beta, theta, nbrs, valid)
    f = gate_confidence(beta, mask, valid, theta)
    h = fuse(params, u, p, f)
    return Forward(score(params, h, v), u, p, has, beta, mask, alpha, f, h)


def width_groups(valid, min_rows: int = 32) -> list[tuple[np.ndarray, int]]:
    """Split rows of a left-aligned padded neighbor mask into groups of
    similar neighborhood size, each with the width it needs.

    Per-row results do not depend on the padding, so evaluating each group
    separately only saves work on short neighborhoods. Sizes are bucketed by
    powers of two; buckets under ``min_rows`` rows merge into the next one.
    """
    valid = np.asarray(valid, dtype=bool)
    widths = valid.sum(axis=1)
    keys = np.ceil(np.log2(np.maximum(widths, 1))).astype(np.int64)
    last = keys.max(initial=0)
    groups, pending = [], np.empty(0, dtype=np.int64)
    for k in np.unique(keys):
        rows = np.concatenate([pending, np.flatnonzero(keys == k)])
        if rows.size < min_rows and k != last:
            pending = rows
            continue
        groups.append((rows, max(int(widths[rows].max()), 1)))
        pending = np.empty(0, dtype=np.int64)
    return groups


def predict(
    params: ModelParams,
    index: NeighborhoodIndex,
    users,
    items,
    mode: str = "full",
    cap: int = 50,
    rng=None,
    batch_size: int = 1024,
    audit=None,
) -> np.ndarray:
    """Scores for many pairs; neighborhoods come from the train-only index
    with the target user excluded. ``audit(users, items, nbr, valid)`` is
    called on every gathered neighborhood when given."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    rng = np.random.default_rng(rng)
    out = np.empty(users.size)
    for s in range(0, users.size, batch_size):
        bu, bi = users[s : s + batch_size], items[s : s + batch_size]
        if mode == "plain":
            out[s : s + batch_size] = forward(params, bu, bi, mode=mode).r_hat.value
            continue
        nbr, valid = neighborhood_batch(index, bu, bi, cap, rng)
        if audit is not None:
            audit(bu, bi, nbr, valid)
        for rows, w in width_groups(valid):
            out[s + rows] = forward(params, bu[rows], bi[rows], nbr[rows, :w], valid[rows, :w], mode).r_hat.value
    return out


def heatmap_scores(params: ModelParams, index: NeighborhoodIndex, user: int, item: int, max_neighbors: int = 20):
    """Neighbors (index-truncated) and their relevance scores for one pair."""
    nbrs = neighborhood_of(index, item, user, cap=index.degree(item))[:max_neighbors]
    if nbrs.size == 0:
        return nbrs, np.empty(0)
    return nbrs, relevance_scores(params, user, item, nbrs)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: ModelParams, path: str | os.PathLike, meta: dict | None = None) -> None:
    """Text checkpoint; payloads are little-endian float64 bytes in hex."""
    lines = [CKPT_HEADER]
    for k, v in (meta or {}).items():
        lines.append(f"meta {k} {v}")
    for p in params:
        lines.append(f"tensor {p.name} {p.value.ndim} {' '.join(map(str, p.shape))}".rstrip())
        lines.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes().hex())
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, dict]:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CKPT_HEADER:
        raise CheckpointError(f"{path}: not a {CKPT_HEADER} file")
    meta: dict = {}
    params: dict = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split(" ")
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
            i += 1
        elif parts[0] == "tensor":
            name, ndim = parts[1], int(parts[2])
            shape = tuple(int(x) for x in parts[3 : 3 + ndim])
            raw = bytes.fromhex(lines[i + 1])
            arr = np.frombuffer(raw, dtype="<f8")
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(f"{name}: payload has {arr.size} values for shape {shape}")
            params[name] = Parameter(name, arr.reshape(shape).astype(np.float64))
            i += 2
        else:
            raise CheckpointError(f"{path}: unexpected line {i + 1}")
    return ModelParams(params), meta


def check_shapes(params: ModelParams, n_users: int, n_items: int) -> None:
    if params.n_users != n_users or params.n_items != n_items or params["theta"].shape != (n_users,):
        raise CheckpointError(
            f"checkpoint is for {params.n_users} users x {params.n_items} items, "
            f"data has {n_users} x {n_items}"
        )
