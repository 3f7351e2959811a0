"""Experiment configuration: dataclasses, flat key=value config files,
validation against the supported hyperparameter grids."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .privacy import DpConfig

# Values outside these grids are rejected unless the config is marked unsafe.
GRIDS = {
    "strategy.rank": {2, 3, 4, 5, 6},
    "strategy.levels": {2, 3, 4, 5, 6},
    "strategy.d_r": {32, 64, 128, 256, 512},
    "strategy.d_h": {256, 512, 1024},
    "strategy.n_hashes": {1, 2, 3, 4},
}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"          # synthetic | ml1m | amazon_csv
    path: str = ""
    users: int = 200                   # synthetic source only
    items: int = 100
    user_clusters: int = 8
    item_clusters: int = 8
    min_interactions: int = 8
    max_interactions: int = 40
    affinity: float = 0.85
    feature_source: str = "synthetic"  # synthetic | file
    feature_path: str = ""
    feature_dim: int = 768


@dataclass
class StrategyConfig:
    kind: str = "lora"                 # full | lora | hash | rqvae
    rank: int = 4
    d_h: int = 512
    n_hashes: int = 2
    p: int = 4096
    senet: bool = False
    expansion: int = 16
    levels: int = 4
    d_r: int = 256
    init: str = "zero"                 # zero | base_distribution


@dataclass
class FederationConfig:
    sample_ratio: float = 0.10
    local_epochs: int = 2
    rounds: int = 1000
    warmup_rounds: int = 10
    lr: float = 0.01
    batch_size: int = 256
    neg_per_pos: int = 4
    workers: int = 1
    aggregation: str = "mean"          # mean | weighted | delta
    checkpoint_every: int = 0


@dataclass
class EvalConfig:
    ks: tuple[int, ...] = (10, 20)
    negatives: int = 99                # -1 ranks against all non-train items
    every: int = 50


@dataclass
class PretrainSection:
    enabled: bool = True
    hidden: tuple[int, ...] = (512, 256, 128)
    steps: int = 10_000
    lr: float = 1e-3
    batch_size: int = 256
    rq_steps: int = 2_000
    beta: float = 0.25


@dataclass
class ExperimentConfig:
    backbone: str = "fedmf"
    k: int = 32
    user_scale: float = 0.1    # init range of local user embeddings
    seed: int = 0
    out_dir: str = "runs/default"
    unsafe: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    dp: DpConfig = field(default_factory=DpConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)

    def validate(self) -> None:
        if self.backbone not in ("fedmf", "fedncf", "pfedrec"):
            raise ConfigError(f"backbone: unknown value {self.backbone!r}")
        if self.strategy.kind not in ("full", "lora", "hash", "rqvae"):
            raise ConfigError(f"strategy.kind: unknown value {self.strategy.kind!r}")
        if self.strategy.init not in ("zero", "base_distribution"):
            raise ConfigError(f"strategy.init: unknown value {self.strategy.init!r}")
        if not 0 < self.federation.sample_ratio <= 1:
            raise ConfigError("federation.sample_ratio: must be in (0, 1]")
        if self.federation.aggregation not in ("mean", "weighted", "delta"):
            raise ConfigError(f"federation.aggregation: unknown value "
                              f"{self.federation.aggregation!r}")
        if self.federation.rounds < 0 or self.federation.warmup_rounds < 0:
            raise ConfigError("federation.rounds/warmup_rounds: must be >= 0")
        if self.dp.mode not in ("none", "ldp", "cdp"):
            raise ConfigError(f"dp.mode: unknown value {self.dp.mode!r}")
        if self.dp.delta < 0:
            raise ConfigError("dp.delta: must be >= 0")
        if self.strategy.p < self.strategy.d_h:
            raise ConfigError("strategy.p: must be >= strategy.d_h")
        if self.unsafe:
            return
        for key, allowed in GRIDS.items():
            section, name = key.split(".")
            value = getattr(getattr(self, section), name)
            if value not in allowed:
                raise ConfigError(f"{key}: {value} outside supported grid "
                                  f"{sorted(allowed)} (use unsafe=true to override)")

    def to_text(self) -> str:
        """Canonical flat key=value dump (sorted); input format and hash basis.

        Runtime-environment keys (out_dir, federation.workers) are excluded:
        they never affect results, so neither artifacts nor the config hash
        should depend on them.
        """
        skip = {"out_dir", "federation.workers"}
        lines = []
        for key, obj, attr in _iter_items(self):
            if key in skip:
                continue
            v = getattr(obj, attr)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                v = ""
            lines.append(f"{key} = {v}")
        return "\n".join(sorted(lines)) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


# fields() on ExperimentConfig itself would recurse into sections; list the
# scalar top-level keys explicitly instead.
_TOP_LEVEL = ("backbone", "k", "user_scale", "seed", "out_dir", "unsafe")


def _iter_items(cfg: ExperimentConfig):
    for name in _TOP_LEVEL:
        yield name, cfg, name
    for prefix, obj in (("data", cfg.data), ("strategy", cfg.strategy),
                        ("federation", cfg.federation), ("eval", cfg.eval),
                        ("dp", cfg.dp), ("pretrain", cfg.pretrain)):
        for f in fields(obj):
            yield f"{prefix}.{f.name}", obj, f.name


def _coerce(current, raw: str):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if current is None or isinstance(current, str):
        return raw
    raise ValueError(f"unsupported config value type {type(current)}")


def apply_setting(cfg: ExperimentConfig, key: str, raw: str) -> None:
    for full_key, obj, attr in _iter_items(cfg):
        if full_key == key:
            try:
                setattr(obj, attr, _coerce(getattr(obj, attr), raw.strip()))
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
            return
    raise ConfigError(f"unknown config key {key!r}")


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> ExperimentConfig:
    """Build a config from an optional key=value file plus override strings.

    Overrides use the same `section.key=value` syntax and win over the file.
    """
    cfg = ExperimentConfig()
    entries: list[tuple[str, str]] = []
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, raw = line.partition("=")
            entries.append((key.strip(), raw.strip()))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, raw = item.partition("=")
        entries.append((key.strip(), raw.strip()))
    for key, raw in entries:
        apply_setting(cfg, key, raw)
    cfg.validate()
    return cfg
