"""Laplace-mechanism noise for local (pre-upload) and central
(post-aggregation) differential privacy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DP_MODES = ("none", "ldp", "cdp")


@dataclass
class DpConfig:
    mode: str = "none"
    delta: float = 0.0      # Laplace scale; larger = more noise
    clip: float | None = None   # optional L2 clip bound per tensor

    def __post_init__(self):
        if self.mode not in DP_MODES:
            raise ValueError(f"dp mode must be one of {DP_MODES}")
        if self.delta < 0:
            raise ValueError("dp delta must be >= 0")


def laplace_noise(shape, delta: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Laplace(0, delta) samples via inverse CDF on uniform draws."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if delta == 0:
        return np.zeros(shape)
    u = rng.random(shape) - 0.5
    return -delta * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def _noised(tensors: list[np.ndarray], delta: float, clip: float | None,
            rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for t in tensors:
        if clip is not None:
            norm = float(np.linalg.norm(t))
            if norm > clip:
                t = t * (clip / norm)
        if delta == 0:
            out.append(t if isinstance(t, np.ndarray) else np.asarray(t))
        else:
            out.append((t + laplace_noise(t.shape, delta, rng).astype(t.dtype)))
    return out


def apply_ldp(update: list[np.ndarray], config: DpConfig,
              rng: np.random.Generator) -> list[np.ndarray]:
    """Noise one client's uploaded tensors before aggregation."""
    if config.mode != "ldp" or config.delta == 0:
        return update
    return _noised(update, config.delta, config.clip, rng)


def apply_cdp(aggregate: list[np.ndarray], config: DpConfig,
              rng: np.random.Generator) -> list[np.ndarray]:
    """Noise the aggregated tensors once, after averaging."""
    if config.mode != "cdp" or config.delta == 0:
        return aggregate
    return _noised(aggregate, config.delta, config.clip, rng)
