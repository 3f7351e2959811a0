"""Scoring backbones over composed item embeddings.

FedMF scores with a dot product against a local user embedding; FedNCF runs
concat(user, item) through a shared MLP; PFedRec scores items with a
client-private MLP and has no user embedding. User-side state never leaves
the client.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Mlp, init_uniform, mlp_backward, mlp_forward, sgd_step
from .rng import RngStream

BACKBONE_KINDS = ("fedmf", "fedncf", "pfedrec")


@dataclass
class UserState:
    """Client-private parameters; never serialized into uploads."""

    embedding: np.ndarray | None = None
    mlp: Mlp | None = None

    def copy(self) -> "UserState":
        return UserState(None if self.embedding is None else self.embedding.copy(),
                         None if self.mlp is None else self.mlp.copy())


@dataclass
class Backbone:
    """Server-shared scoring parameters (W_g). FedMF and PFedRec have none."""

    kind: str
    mlp: Mlp | None = None

    def copy(self) -> "Backbone":
        return Backbone(self.kind, None if self.mlp is None else self.mlp.copy())

    def upload_bytes(self) -> int:
        return 0 if self.mlp is None else self.mlp.param_bytes()


def make_backbone(kind: str, k: int, streams: RngStream,
                  ncf_hidden: tuple[int, ...] = (128, 64), dropout: float = 0.5,
                  dtype=np.float32) -> Backbone:
    if kind not in BACKBONE_KINDS:
        raise ValueError(f"unknown backbone {kind!r}")
    if kind != "fedncf":
        return Backbone(kind)
    sizes = [2 * k, *ncf_hidden, 1]
    acts = ["relu"] * (len(sizes) - 2) + ["identity"]
    mlp = Mlp.create(sizes, acts, streams.generator("init_ncf"), dropout=dropout, dtype=dtype)
    return Backbone(kind, mlp)


def make_user_state(kind: str, k: int, user: int, streams: RngStream,
                    pfedrec_hidden: tuple[int, ...] = (64, 32), dropout: float = 0.5,
                    scale: float = 0.1, dtype=np.float32) -> UserState:
    if kind in ("fedmf", "fedncf"):
        emb = init_uniform(streams.generator("init_user", user), (k,),
                           scale=scale, dtype=dtype)
        return UserState(embedding=emb)
    if kind == "pfedrec":
        sizes = [k, *pfedrec_hidden, 1]
        acts = ["relu"] * (len(sizes) - 2) + ["identity"]
        mlp = Mlp.create(sizes, acts, streams.generator("init_user", user),
                         dropout=dropout, dtype=dtype)
        return UserState(mlp=mlp)
    raise ValueError(f"unknown backbone {kind!r}")


def score(backbone: Backbone, state: UserState, emb: np.ndarray, mode: str = "eval",
          rng: np.random.Generator | None = None) -> tuple[np.ndarray, dict]:
    """Logits for a batch of composed item embeddings."""
    emb = np.atleast_2d(emb)
    if backbone.kind == "fedmf":
        if state.embedding is None or state.embedding.shape[0] != emb.shape[1]:
            raise ValueError("user embedding missing or dim mismatch")
        return emb @ state.embedding, {"emb": emb}
    if backbone.kind == "fedncf":
        u = np.broadcast_to(state.embedding, emb.shape)
        x = np.concatenate([u, emb], axis=1)
        out, cache = mlp_forward(backbone.mlp, x, mode, rng)
        return out[:, 0], {"mlp": cache, "k": emb.shape[1]}
    if backbone.kind == "pfedrec":
        out, cache = mlp_forward(state.mlp, emb, mode, rng)
        return out[:, 0], {"mlp": cache}
    raise ValueError(f"unknown backbone {backbone.kind!r}")


def score_backward(backbone: Backbone, state: UserState, cache: dict,
                   dlogits: np.ndarray) -> dict:
    """Gradients of the scalar loss w.r.t. user state, W_g, and embeddings.

    Returns a dict with keys among: user_emb, user_mlp (w, b), wg (w, b),
    emb — whatever the backbone kind touches.
    """
    if backbone.kind == "fedmf":
        emb = cache["emb"]
        return {"user_emb": emb.T @ dlogits,
                "emb": np.outer(dlogits, state.embedding)}
    g = dlogits[:, None]
    if backbone.kind == "fedncf":
        wg, bg, dx = mlp_backward(backbone.mlp, cache["mlp"], g)
        k = cache["k"]
        return {"user_emb": dx[:, :k].sum(axis=0), "wg": (wg, bg), "emb": dx[:, k:]}
    wg, bg, demb = mlp_backward(state.mlp, cache["mlp"], g)
    return {"user_mlp": (wg, bg), "emb": demb}


def bce_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample binary cross-entropy over sigmoid scores, stabilized.

    Returns (losses, dloss/dlogit) elementwise; the gradient is
    sigmoid(logit) - label.
    """
    s = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    losses = np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))
    grads = 1.0 / (1.0 + np.exp(-s)) - y
    return losses, grads


def local_step(backbone: Backbone, state: UserState, adapter, base: np.ndarray,
               items: np.ndarray, labels: np.ndarray, lr: float,
               rng: np.random.Generator | None = None, mode: str = "train") -> float:
    """One SGD step on user state, shared weights, and adapter parameters.

    All gradients are taken at the current parameters, then applied together.
    Returns the mean batch loss.
    """
    emb, a_cache = adapter.compose(base, items)
    logits, s_cache = score(backbone, state, emb, mode, rng)
    losses, dlogits = bce_loss(logits, labels)
    dlogits = (dlogits / len(items)).astype(emb.dtype)
    grads = score_backward(backbone, state, s_cache, dlogits)

    a_grads = adapter.grads(a_cache, grads["emb"].astype(emb.dtype))
    adapter.set_trainable(sgd_step(adapter.trainable(), a_grads, lr))
    if "user_emb" in grads:
        state.embedding = sgd_step(state.embedding, grads["user_emb"], lr)
    if "user_mlp" in grads:
        wg, bg = grads["user_mlp"]
        state.mlp.weights = sgd_step(state.mlp.weights, wg, lr)
        state.mlp.biases = sgd_step(state.mlp.biases, bg, lr)
    if "wg" in grads:
        wg, bg = grads["wg"]
        backbone.mlp.weights = sgd_step(backbone.mlp.weights, wg, lr)
        backbone.mlp.biases = sgd_step(backbone.mlp.biases, bg, lr)
    return float(losses.mean())
