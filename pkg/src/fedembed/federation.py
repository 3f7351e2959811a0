"""Round orchestration: client sampling, local training over immutable
snapshots, unweighted FedAvg aggregation, the warm-up -> freeze schedule,
and exact per-round communication accounting.

Clients are simulated in-process. Every random draw is keyed by
(seed, purpose, client, round), so results are bit-identical no matter how
many workers execute the per-client work.
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .backbones import Backbone, UserState, local_step, make_backbone, make_user_state
from .config import ExperimentConfig
from .data import (EvalSplit, InteractionLog, attach_eval_negatives, build_item_features,
                   leave_one_out_split, load_interactions, synthesize_interactions)
from .numerics import init_uniform
from .pretrain import PretrainConfig, train_autoencoder, train_rqvae
from .privacy import apply_cdp, apply_ldp
from .rng import RngStream
from .strategies import (Adapter, FullAdapter, FullEmbeddingTable, make_adapter,
                         save_checkpoint, serialize_upload)


@dataclass
class RoundReport:
    round: int
    phase: str                      # warmup | peft
    clients: list[int]
    bytes_per_client: int
    aggregate_bytes: int
    train_loss: float
    wall_time: float
    base_hash: str                  # sha256 of the full table bytes
    metrics: dict[str, float] | None = None


@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    metric_history: list[tuple[int, dict[str, float]]]
    final_metrics: dict[str, float]
    config_hash: str
    seed: int


@dataclass
class ClientUpdate:
    client: int
    adapter_tensors: list[np.ndarray]
    wg_tensors: list[np.ndarray]
    state: UserState
    upload_bytes: int
    loss: float
    trained: bool


def select_clients(n_users: int, ratio: float, streams: RngStream,
                   round_idx: int) -> np.ndarray:
    """ceil(ratio * n_users) distinct ids, uniform, keyed by round."""
    if not 0 < ratio <= 1:
        raise ValueError("sample ratio must be in (0, 1]")
    count = math.ceil(ratio * n_users)
    rng = streams.generator("select", round_idx)
    return np.sort(rng.choice(n_users, size=count, replace=False))


def aggregate(tensor_lists: list[list[np.ndarray]],
              weights: np.ndarray | None = None,
              reference: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Positionwise mean of client tensors.

    weights: optional per-client weights (normalized here). reference:
    aggregate deltas from this snapshot instead of raw parameters
    (algebraically identical for uniform weights, kept for the
    gradient-aggregation mode).
    """
    if not tensor_lists:
        raise ValueError("no updates to aggregate")
    n = len(tensor_lists)
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if len(weights) != n or weights.sum() <= 0:
            raise ValueError("bad aggregation weights")
        w = weights / weights.sum()
    out = []
    for pos in range(len(tensor_lists[0])):
        stack = np.stack([tl[pos] for tl in tensor_lists])
        wa = w.reshape((n,) + (1,) * (stack.ndim - 1))
        if reference is not None:
            delta = ((stack - reference[pos][None]) * wa).sum(axis=0)
            out.append((reference[pos] + delta).astype(stack.dtype))
        else:
            out.append((stack * wa).sum(axis=0).astype(stack.dtype))
    return out


def _backbone_tensors(backbone: Backbone) -> list[np.ndarray]:
    if backbone.mlp is None:
        return []
    return list(backbone.mlp.weights) + list(backbone.mlp.biases)


def _install_backbone(backbone: Backbone, tensors: list[np.ndarray]) -> None:
    if backbone.mlp is None:
        return
    n_layers = len(backbone.mlp.weights)
    backbone.mlp.weights = [t.astype(np.float32, copy=False) for t in tensors[:n_layers]]
    backbone.mlp.biases = [t.astype(np.float32, copy=False) for t in tensors[n_layers:]]


class Simulation:
    """One experiment: data, pre-training, model state, and the round loop."""

    def __init__(self, config: ExperimentConfig, log: InteractionLog | None = None):
        config.validate()
        self.config = config
        self.streams = RngStream(config.seed)
        self.round = 0
        self.reports: list[RoundReport] = []
        self.metric_history: list[tuple[int, dict[str, float]]] = []

        self.log = log if log is not None else self._load_log()
        self.split: EvalSplit = leave_one_out_split(self.log)
        attach_eval_negatives(self.split, config.eval.negatives, self.streams.child("eval"))

        n, k = self.log.n_items, config.k
        self.codes = None
        if config.pretrain.enabled:
            features = self._features()
            pcfg = PretrainConfig(hidden=config.pretrain.hidden, latent_dim=k,
                                  steps=config.pretrain.steps, lr=config.pretrain.lr,
                                  batch_size=config.pretrain.batch_size,
                                  levels=config.strategy.levels,
                                  codebook_size=config.strategy.d_r,
                                  beta=config.pretrain.beta)
            table, _ = train_autoencoder(features.vectors, pcfg,
                                         self.streams.child("pretrain_ae"))
            if config.strategy.kind == "rqvae":
                rq_cfg = PretrainConfig(**{**pcfg.__dict__, "steps": config.pretrain.rq_steps})
                self.codes, _ = train_rqvae(features.vectors, rq_cfg,
                                            self.streams.child("pretrain_rq"))
        else:
            table = init_uniform(self.streams.generator("init_embeddings"), (n, k))
            if config.strategy.kind == "rqvae":
                code_rng = self.streams.generator("random_codes")
                self.codes = code_rng.integers(0, config.strategy.d_r,
                                               size=(n, config.strategy.levels))

        self.base = FullEmbeddingTable(table)
        self.adapter: Adapter = FullAdapter(self.base.table)
        self.backbone = make_backbone(config.backbone, k, self.streams)
        self.user_states = {u: make_user_state(config.backbone, k, u, self.streams,
                                               scale=config.user_scale)
                            for u in range(self.log.n_users)}

        kind = config.strategy.kind
        self.warmup_rounds = (config.federation.rounds if kind == "full"
                              else min(config.federation.warmup_rounds,
                                       config.federation.rounds))

    def _load_log(self) -> InteractionLog:
        d = self.config.data
        if d.source == "synthetic":
            return synthesize_interactions(
                d.users, d.items, self.config.seed,
                n_user_clusters=d.user_clusters, n_item_clusters=d.item_clusters,
                interactions_range=(d.min_interactions, d.max_interactions),
                affinity=d.affinity)
        return load_interactions(d.path, d.source)

    def _features(self):
        d = self.config.data
        return build_item_features(self.log, d.feature_source, path=d.feature_path or None,
                                   k_p=d.feature_dim, seed=self.config.seed)

    @property
    def phase(self) -> str:
        return "warmup" if self.round < self.warmup_rounds else "peft"

    def _maybe_transition(self) -> None:
        if self.round != self.warmup_rounds or isinstance(self.adapter, FullAdapter) is False:
            return
        if self.config.strategy.kind == "full":
            return
        self.freeze_and_init_adapter()

    def freeze_and_init_adapter(self) -> None:
        """Warm-up -> adapter boundary: freeze the table, build the adapter."""
        if not isinstance(self.adapter, FullAdapter):
            raise RuntimeError("adapter already initialized")
        s = self.config.strategy
        self.base.table = self.adapter.table  # latest aggregate
        self.base.freeze()
        self.adapter = make_adapter(
            s.kind, self.log.n_items, self.config.k, self.streams.child("adapter_init"),
            rank=s.rank, d_h=s.d_h, n_hashes=s.n_hashes, p=s.p, senet=s.senet,
            expansion=s.expansion, levels=s.levels, d_r=s.d_r, codes=self.codes,
            init=s.init)

    def _client_round(self, u: int, round_idx: int) -> ClientUpdate:
        cfg = self.config.federation
        adapter = self.adapter.copy()
        backbone = self.backbone.copy()
        state = self.user_states[u].copy()
        positives = self.split.train_positives[u]

        if len(positives) == 0 or cfg.local_epochs == 0:
            tensors = [t.copy() for t in adapter.trainable()]
            wg = [t.copy() for t in _backbone_tensors(backbone)]
            nbytes = len(serialize_upload(adapter)) + backbone.upload_bytes()
            return ClientUpdate(u, tensors, wg, state, nbytes,
                                float("nan"), trained=False)

        n_items = self.log.n_items
        pool = np.setdiff1d(np.arange(n_items, dtype=np.int64), positives)
        dropout_rng = self.streams.generator("dropout", u, round_idx)
        losses = []
        for epoch in range(cfg.local_epochs):
            neg_rng = self.streams.generator("train_neg", u, round_idx, epoch)
            negs = neg_rng.choice(pool, size=cfg.neg_per_pos * len(positives), replace=True)
            items = np.concatenate([positives, negs])
            labels = np.concatenate([np.ones(len(positives), dtype=np.float32),
                                     np.zeros(len(negs), dtype=np.float32)])
            perm = self.streams.generator("shuffle", u, round_idx, epoch).permutation(len(items))
            items, labels = items[perm], labels[perm]
            for start in range(0, len(items), cfg.batch_size):
                sl = slice(start, start + cfg.batch_size)
                losses.append(local_step(backbone, state, adapter, self.base.table,
                                         items[sl], labels[sl], cfg.lr, dropout_rng))

        tensors = adapter.trainable()
        wg = _backbone_tensors(backbone)
        for t in tensors + wg:
            if not np.all(np.isfinite(t)):
                raise FloatingPointError(
                    f"non-finite client update at round {round_idx} (client {u})")
        nbytes = len(serialize_upload(adapter)) + backbone.upload_bytes()
        if self.config.dp.mode == "ldp":
            noised = apply_ldp(tensors + wg, self.config.dp,
                               self.streams.generator("dp", u, round_idx))
            tensors, wg = noised[:len(tensors)], noised[len(tensors):]
        return ClientUpdate(u, tensors, wg, state, nbytes,
                            float(np.mean(losses)), trained=True)

    def run_round(self) -> RoundReport:
        cfg = self.config.federation
        self._maybe_transition()
        round_idx = self.round
        t0 = time.perf_counter()

        clients = select_clients(self.log.n_users, cfg.sample_ratio, self.streams, round_idx)
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                updates = list(pool.map(lambda u: self._client_round(int(u), round_idx),
                                        clients))
        else:
            updates = [self._client_round(int(u), round_idx) for u in clients]
        updates.sort(key=lambda up: up.client)

        weights = None
        if cfg.aggregation == "weighted":
            weights = np.array([max(len(self.split.train_positives[up.client]), 1)
                                for up in updates], dtype=np.float64)
        reference = None
        if cfg.aggregation == "delta":
            reference = list(self.adapter.trainable()) + _backbone_tensors(self.backbone)

        n_adapter = len(updates[0].adapter_tensors)
        combined = [up.adapter_tensors + up.wg_tensors for up in updates]
        agg = aggregate(combined, weights=weights, reference=reference)
        if self.config.dp.mode == "cdp":
            agg = apply_cdp(agg, self.config.dp, self.streams.generator("dp_server", round_idx))

        for t in agg:
            if not np.all(np.isfinite(t)):
                raise FloatingPointError(f"non-finite aggregate at round {round_idx}")
        self.adapter.set_trainable(agg[:n_adapter])
        _install_backbone(self.backbone, agg[n_adapter:])
        if isinstance(self.adapter, FullAdapter):
            self.base.table = self.adapter.table
        for up in updates:
            self.user_states[up.client] = up.state

        self.round += 1
        trained_losses = [up.loss for up in updates if up.trained]
        report = RoundReport(
            round=round_idx,
            phase="warmup" if round_idx < self.warmup_rounds else "peft",
            clients=[up.client for up in updates],
            bytes_per_client=updates[0].upload_bytes,
            aggregate_bytes=sum(up.upload_bytes for up in updates),
            train_loss=float(np.mean(trained_losses)) if trained_losses else float("nan"),
            wall_time=time.perf_counter() - t0,
            base_hash=hashlib.sha256(self.base.table.tobytes()).hexdigest(),
        )
        self.reports.append(report)
        return report

    def evaluate(self) -> dict[str, float]:
        return metrics.evaluate(self.backbone, self.user_states, self.adapter,
                                self.base.table, self.split, self.config.eval.ks)

    def top_k_lists(self, k: int = 20) -> dict[int, np.ndarray]:
        """Per test user, the top-k recommendation list (training items held out)."""
        out = {}
        for u in split_users(self.split):
            out[u] = metrics.top_k_items(self.backbone, self.user_states[u], self.adapter,
                                         self.base.table, self.split.train_positives[u],
                                         self.log.n_items, k)
        return out

    def run(self, checkpoint_dir: str | Path | None = None) -> ExperimentResult:
        cfg = self.config
        every = max(cfg.eval.every, 1)
        ckpt_every = cfg.federation.checkpoint_every
        m = self.evaluate()
        self.metric_history.append((0, m))
        for _ in range(cfg.federation.rounds):
            report = self.run_round()
            if self.round % every == 0 or self.round == cfg.federation.rounds:
                report.metrics = self.evaluate()
                self.metric_history.append((self.round, report.metrics))
            if checkpoint_dir is not None and ckpt_every > 0 and self.round % ckpt_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"round_{self.round:06d}.fpeb",
                                self.base, self.adapter)
        # a full-strategy run never transitions mid-loop; peft configs with
        # rounds == warmup_rounds freeze at the very end
        if cfg.strategy.kind != "full" and isinstance(self.adapter, FullAdapter) \
                and self.round == self.warmup_rounds:
            self.freeze_and_init_adapter()
        final = self.metric_history[-1][1] if self.metric_history else self.evaluate()
        return ExperimentResult(self.reports, self.metric_history, final,
                                cfg.config_hash(), cfg.seed)


def split_users(split: EvalSplit) -> list[int]:
    return [int(u) for u in split.test_users]


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Build a simulation from the config and run it to completion."""
    return Simulation(config).run()


def save_sim_state(sim: Simulation, out_dir: str | Path) -> None:
    """Persist everything `eval` needs next to the embedding checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "embedding.fpeb", sim.base, sim.adapter)
    arrays: dict[str, np.ndarray] = {"round": np.array([sim.round])}
    if sim.backbone.mlp is not None:
        for l, (w, b) in enumerate(zip(sim.backbone.mlp.weights, sim.backbone.mlp.biases)):
            arrays[f"wg_w{l}"] = w
            arrays[f"wg_b{l}"] = b
    states = sim.user_states
    m = len(states)
    if sim.config.backbone in ("fedmf", "fedncf"):
        arrays["user_emb"] = np.stack([states[u].embedding for u in range(m)])
    else:
        mlp0 = states[0].mlp
        for l in range(len(mlp0.weights)):
            arrays[f"user_w{l}"] = np.stack([states[u].mlp.weights[l] for u in range(m)])
            arrays[f"user_b{l}"] = np.stack([states[u].mlp.biases[l] for u in range(m)])
    np.savez(out / "sim_state.npz", **arrays)


def load_sim_state(sim: Simulation, run_dir: str | Path) -> None:
    """Restore a saved simulation into a freshly constructed one."""
    run_dir = Path(run_dir)
    from .strategies import load_checkpoint
    base, adapter = load_checkpoint(run_dir / "embedding.fpeb")
    sim.base = base
    sim.adapter = adapter
    if not isinstance(adapter, FullAdapter):
        sim.base.freeze()
    with np.load(run_dir / "sim_state.npz") as data:
        sim.round = int(data["round"][0])
        if sim.backbone.mlp is not None:
            n_layers = len(sim.backbone.mlp.weights)
            sim.backbone.mlp.weights = [data[f"wg_w{l}"] for l in range(n_layers)]
            sim.backbone.mlp.biases = [data[f"wg_b{l}"] for l in range(n_layers)]
        if sim.config.backbone in ("fedmf", "fedncf"):
            emb = data["user_emb"]
            for u in range(emb.shape[0]):
                sim.user_states[u].embedding = emb[u]
        else:
            n_layers = len(sim.user_states[0].mlp.weights)
            stacked_w = [data[f"user_w{l}"] for l in range(n_layers)]
            stacked_b = [data[f"user_b{l}"] for l in range(n_layers)]
            for u in range(stacked_w[0].shape[0]):
                sim.user_states[u].mlp.weights = [sw[u] for sw in stacked_w]
                sim.user_states[u].mlp.biases = [sb[u] for sb in stacked_b]


def rounds_csv(reports: list[RoundReport], metric_history: list[tuple[int, dict]],
               ks: tuple[int, ...], config_hash: str, seed: int) -> str:
    """Per-round report CSV; metric columns are filled on evaluation rounds."""
    by_round = dict(metric_history)
    names = [f"n@{k}" for k in ks] + [f"h@{k}" for k in ks]
    lines = [f"# config={config_hash} seed={seed}",
             "round,phase,clients,bytes_per_client,loss," + ",".join(names)]
    for r in reports:
        m = by_round.get(r.round + 1, r.metrics or {})
        vals = [f"{m[name]:.2f}" if name in m else "" for name in names]
        loss = "" if math.isnan(r.train_loss) else f"{r.train_loss:.6f}"
        lines.append(f"{r.round},{r.phase},{len(r.clients)},{r.bytes_per_client},"
                     f"{loss}," + ",".join(vals))
    return "\n".join(lines) + "\n"


def metrics_csv(metric_history: list[tuple[int, dict]], ks: tuple[int, ...],
                config_hash: str, seed: int) -> str:
    names = [f"n@{k}" for k in ks] + [f"h@{k}" for k in ks]
    lines = [f"# config={config_hash} seed={seed}", "round," + ",".join(names)]
    for rnd, m in metric_history:
        lines.append(f"{rnd}," + ",".join(f"{m[name]:.2f}" for name in names))
    return "\n".join(lines) + "\n"
