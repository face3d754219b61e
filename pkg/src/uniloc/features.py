"""CSI preprocessing: angle-delay transform, delay truncation, feature vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import SystemConfig

LOG_FLOOR = 1e-12


def to_angle_delay(H: np.ndarray) -> np.ndarray:
    """Unitary DFT over antennas after a unitary inverse DFT over subcarriers."""
    return np.fft.fft(np.fft.ifft(H, axis=-1, norm="ortho"), axis=-2, norm="ortho")


def from_angle_delay(Hbar: np.ndarray) -> np.ndarray:
    return np.fft.fft(np.fft.ifft(Hbar, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def delay_window(cfg: SystemConfig, tau_min: float, tau_max: float) -> tuple[int, int]:
    """Inclusive 0-based delay-bin range ``(first, last)`` covering [tau_min, tau_max]."""
    if not 0 <= tau_min <= tau_max:
        raise ValueError("need 0 <= tau_min <= tau_max")
    scale = cfg.subcarrier_spacing * cfg.num_subcarriers
    # absorb round-off so exact bin boundaries map to themselves
    first = math.floor(tau_min * scale + 1e-9)
    last = math.ceil(tau_max * scale - 1e-9)
    if last >= cfg.num_subcarriers:
        raise ValueError(f"delay window ends at bin {last}, beyond N_c = {cfg.num_subcarriers}")
    return first, last


def truncate(Hbar: np.ndarray, tau_min: float, tau_max: float, cfg: SystemConfig) -> np.ndarray:
    first, last = delay_window(cfg, tau_min, tau_max)
    return Hbar[..., first:last + 1]


def feature_vector(Ht: np.ndarray) -> np.ndarray:
    """``vec([log|Ht|, angle(Ht)])`` with column-major ``vec``.

    Magnitudes below 1e-12 clamp to log(1e-12); phases lie in (-pi, pi].
    """
    mag = np.abs(Ht)
    logamp = np.log(np.maximum(mag, LOG_FLOOR))
    phase = np.angle(Ht)
    phase = np.where(phase <= -np.pi, np.pi, phase)
    phase = np.where(mag == 0, 0.0, phase)
    return np.concatenate([logamp.ravel(order="F"), phase.ravel(order="F")])


@dataclass(frozen=True)
class FeatureExtractor:
    """Fixed-window feature map shared by every user of a dataset."""

    cfg: SystemConfig
    tau_min: float
    tau_max: float

    @property
    def width(self) -> int:
        first, last = delay_window(self.cfg, self.tau_min, self.tau_max)
        return last - first + 1

    @property
    def length(self) -> int:
        return 2 * self.cfg.num_antennas * self.width

    def __call__(self, H: np.ndarray) -> np.ndarray:
        return feature_vector(truncate(to_angle_delay(H), self.tau_min, self.tau_max, self.cfg))

    def many(self, Hs, dtype=np.float32) -> np.ndarray:
        out = np.empty((len(Hs), self.length), dtype=dtype)
        for i, H in enumerate(Hs):
            out[i] = self(H)
        return out


def logamp_block(features: np.ndarray) -> np.ndarray:
    """First half of each feature vector (the log-amplitude entries)."""
    f = np.atleast_2d(features)
    return f[:, : f.shape[1] // 2]


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, floor: float = 1e-8) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        return cls(X.mean(0), np.maximum(X.std(0), floor))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean.astype(X.dtype)) / self.std.astype(X.dtype)
