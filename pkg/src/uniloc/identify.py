"""LoS/NLoS identification: a label-flip oracle plus the two map-aided rules."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .scene import SceneMap, region_membership


class IdMode(enum.Enum):
    REFINED = "refined"
    CONSERVATIVE = "conservative"


@dataclass(frozen=True)
class IdentifierConfig:
    accuracy: float = 1.0
    mode: IdMode = IdMode.REFINED
    seed: int = 0

    def __post_init__(self):
        if not 0.5 <= self.accuracy <= 1.0:
            raise ValueError("identification accuracy must lie in [0.5, 1]")


def _user_uniform(seed: int, user_index: int) -> float:
    # one uniform per (seed, user); the same draw is reused across accuracies,
    # so the set of flipped users shrinks monotonically as accuracy grows
    return float(np.random.default_rng([seed, user_index]).random())


def base_identify(true_los: bool, cfg: IdentifierConfig, user_index: int) -> bool:
    """Report ``true_los`` with probability ``cfg.accuracy``, its negation otherwise."""
    if _user_uniform(cfg.seed, user_index) < cfg.accuracy:
        return bool(true_los)
    return not true_los


def base_identify_many(true_los, cfg: IdentifierConfig, offset: int = 0) -> np.ndarray:
    true_los = np.asarray(true_los, dtype=bool)
    return np.array([base_identify(t, cfg, offset + i) for i, t in enumerate(true_los)], dtype=bool)


def refine_identify(base: bool, p_mb, scene: SceneMap) -> bool:
    """Map correction: an estimate in the NLoS region (or off the map) forces NLoS."""
    if not region_membership(scene, p_mb):
        return False
    return bool(base)


def conservative_identify(p_mb, scene: SceneMap) -> bool:
    return region_membership(scene, p_mb)


def identify_all(true_los, estimates, scene: SceneMap, cfg: IdentifierConfig,
                 offset: int = 0) -> np.ndarray:
    """Identification flags for a whole dataset under ``cfg.mode``."""
    est = np.asarray(estimates, dtype=float).reshape(-1, 3)
    if cfg.mode is IdMode.CONSERVATIVE:
        return np.array([conservative_identify(p, scene) for p in est], dtype=bool)
    base = base_identify_many(true_los, cfg, offset)
    return np.array([refine_identify(b, p, scene) for b, p in zip(base, est)], dtype=bool)
