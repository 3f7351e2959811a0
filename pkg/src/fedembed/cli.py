"""Command-line entry point.

Subcommands: `pretrain` (embedding table + semantic codes), `train` (full
federated run), `eval` (saved run -> metric table), `comm` (strategy cost
report), `sweep` (grid runs). Exit codes: 0 ok, 1 config error, 2 runtime
error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, apply_setting, load_config
from .data import save_id_maps
from .federation import Simulation, metrics_csv, rounds_csv, save_sim_state, load_sim_state
from .pretrain import write_codes
from .strategies import (comm_cost, make_adapter, representation_capacity,
                         save_checkpoint, serialize_upload)
from .rng import RngStream


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--unsafe", action="store_true",
                   help="skip hyperparameter grid validation")


def _build_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    out_env = os.environ.get("FEDEMBED_OUT")
    if out_env:
        overrides.append(f"out_dir={out_env}")
    if args.out_dir:
        overrides.append(f"out_dir={args.out_dir}")
    if args.rounds is not None:
        overrides.append(f"federation.rounds={args.rounds}")
    if args.workers is not None:
        overrides.append(f"federation.workers={args.workers}")
    if args.unsafe:
        overrides.append("unsafe=true")
    return load_config(args.config, overrides)


def _write_run_artifacts(sim: Simulation, result, out: Path) -> None:
    cfg = sim.config
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    (out / "rounds.csv").write_text(
        rounds_csv(result.reports, result.metric_history, cfg.eval.ks,
                   result.config_hash, cfg.seed), encoding="utf-8")
    (out / "metrics.csv").write_text(
        metrics_csv(result.metric_history, cfg.eval.ks, result.config_hash, cfg.seed),
        encoding="utf-8")
    (out / "metrics.json").write_text(json.dumps({
        "config": result.config_hash, "seed": cfg.seed,
        "final": result.final_metrics,
        "history": [{"round": r, **m} for r, m in result.metric_history],
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    save_id_maps(sim.log, out)
    save_sim_state(sim, out)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    out = Path(cfg.out_dir)
    sim = Simulation(cfg)
    result = sim.run(checkpoint_dir=out if cfg.federation.checkpoint_every > 0 else None)
    _write_run_artifacts(sim, result, out)
    print(f"run {result.config_hash} seed={cfg.seed} rounds={sim.round}")
    for name, value in result.final_metrics.items():
        print(f"  {name} = {value:.2f}")
    print(f"artifacts in {out}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    if not cfg.pretrain.enabled:
        raise ConfigError("pretrain.enabled: pretrain subcommand requires true")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = Simulation(cfg)   # construction runs the pre-training
    save_checkpoint(out / "embedding.fpeb", sim.base, sim.adapter)
    save_id_maps(sim.log, out)
    if sim.codes is not None:
        write_codes(out / "codes.tsv", sim.codes)
    print(f"pretrained table {sim.base.table.shape} -> {out / 'embedding.fpeb'}")
    if sim.codes is not None:
        print(f"semantic codes {sim.codes.shape} -> {out / 'codes.tsv'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    cfg = load_config(run_dir / "config.txt", args.set or None)
    sim = Simulation(cfg)
    load_sim_state(sim, run_dir)
    table = sim.evaluate()
    print("metric,value")
    for name, value in table.items():
        print(f"{name},{value:.2f}")
    if args.json_out:
        Path(args.json_out).write_text(
            json.dumps({"config": cfg.config_hash(), "seed": cfg.seed, **table},
                       indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def _comm_rows(n: int, k: int, cfg: ExperimentConfig, ranks: list[int]) -> list[dict]:
    """One verified cost row per strategy configuration."""
    s = cfg.strategy
    streams = RngStream(cfg.seed)
    rows = []

    def add(kind: str, label: str, predicted: int, capacity: int, **kwargs) -> None:
        codes = np.zeros((n, kwargs.get("levels", s.levels)), dtype=np.int64) \
            if kind == "rqvae" else None
        adapter = make_adapter(kind, n, k, streams.child("comm", len(rows)),
                               codes=codes, **kwargs)
        actual = len(serialize_upload(adapter))
        if actual != predicted:
            raise RuntimeError(f"cost model mismatch for {kind}: {predicted} != {actual}")
        rows.append({"strategy": label, "upload_bytes": predicted,
                     "upload_kb": predicted / 1000.0, "representation": capacity})

    add("full", "full", comm_cost("full", n, k), representation_capacity("full", n))
    for r in ranks:
        add("lora", f"lora[rank={r}]", comm_cost("lora", n, k, rank=r),
            representation_capacity("lora", n), rank=r)
    add("rqvae", f"rqvae[levels={s.levels};d_r={s.d_r}]",
        comm_cost("rqvae", n, k, levels=s.levels, d_r=s.d_r),
        representation_capacity("rqvae", n, levels=s.levels, d_r=s.d_r),
        levels=s.levels, d_r=s.d_r)
    add("hash", f"hash[d_h={s.d_h};h={s.n_hashes}]",
        comm_cost("hash", n, k, d_h=s.d_h, n_hashes=s.n_hashes),
        representation_capacity("hash", n, d_h=s.d_h, n_hashes=s.n_hashes),
        d_h=s.d_h, n_hashes=s.n_hashes)
    add("hash", f"hash_senet[d_h={s.d_h};h={s.n_hashes}]",
        comm_cost("hash", n, k, d_h=s.d_h, n_hashes=s.n_hashes, senet=True,
                  expansion=s.expansion),
        representation_capacity("hash", n, d_h=s.d_h, n_hashes=s.n_hashes),
        d_h=s.d_h, n_hashes=s.n_hashes, senet=True, expansion=s.expansion)
    return rows


def cmd_comm(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    ranks = [int(x) for x in args.ranks.split(",")] if args.ranks else [cfg.strategy.rank]
    rows = _comm_rows(args.items, cfg.k, cfg, ranks)
    lines = [f"# config={cfg.config_hash()} n={args.items} k={cfg.k}",
             "strategy,upload_bytes,upload_kb,representation"]
    for row in rows:
        lines.append(f"{row['strategy']},{row['upload_bytes']},"
                     f"{row['upload_kb']:.3f},{row['representation']}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.csv_out:
        Path(args.csv_out).write_text(text, encoding="utf-8")
    return 0


def _strategy_bytes(cfg: ExperimentConfig, n_items: int) -> int:
    s = cfg.strategy
    return comm_cost(s.kind, n_items, cfg.k, rank=s.rank, d_h=s.d_h,
                     n_hashes=s.n_hashes, senet=s.senet, expansion=s.expansion,
                     levels=s.levels, d_r=s.d_r)


def cmd_sweep(args: argparse.Namespace) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    base_cfg = _build_config(args)
    header_metrics: list[str] = []
    rows = []
    for value in values:
        cfg = _build_config(args)
        apply_setting(cfg, args.param, value)
        cfg.validate()
        sim = Simulation(cfg)
        result = sim.run()
        if not header_metrics:
            header_metrics = list(result.final_metrics)
        rows.append((value, result.final_metrics, _strategy_bytes(cfg, sim.log.n_items)))
    lines = [f"# sweep {args.param} config={base_cfg.config_hash()} seed={base_cfg.seed}",
             f"{args.param}," + ",".join(header_metrics) + ",upload_bytes,upload_kb"]
    for value, m, upload in rows:
        vals = ",".join(f"{m[name]:.2f}" for name in header_metrics)
        lines.append(f"{value},{vals},{upload},{upload / 1000.0:.3f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.csv_out:
        Path(args.csv_out).write_text(text, encoding="utf-8")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fedembed", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_train = sub.add_parser("train", help="run a federated experiment")
    _add_common(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_pre = sub.add_parser("pretrain", help="emit embedding table and semantic codes")
    _add_common(p_pre)
    p_pre.set_defaults(fn=cmd_pretrain)

    p_eval = sub.add_parser("eval", help="evaluate a saved run directory")
    p_eval.add_argument("run_dir")
    p_eval.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_eval.add_argument("--json-out", default=None)
    p_eval.set_defaults(fn=cmd_eval)

    p_comm = sub.add_parser("comm", help="per-strategy communication cost report")
    _add_common(p_comm)
    p_comm.add_argument("--items", type=int, default=3706)
    p_comm.add_argument("--ranks", default="2,3,4,5,6")
    p_comm.add_argument("--csv-out", default=None)
    p_comm.set_defaults(fn=cmd_comm)

    p_sweep = sub.add_parser("sweep", help="grid runs over one config key")
    _add_common(p_sweep)
    p_sweep.add_argument("--param", default="strategy.rank")
    p_sweep.add_argument("--values", default="2,3,4,5,6")
    p_sweep.add_argument("--csv-out", default=None)
    p_sweep.set_defaults(fn=cmd_sweep)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
