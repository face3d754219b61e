"""Multipath OFDM channel synthesis.

Paths come from a small image-method tracer over the vertical walls of the
scene's building boxes (specular reflections up to second order). Each path is
turned into CSI with the ULA and subcarrier steering vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .scene import SPEED_OF_LIGHT, SceneError, SceneMap, segments_blocked


class NoPathError(RuntimeError):
    """The tracer found no propagation path to the user."""


@dataclass(frozen=True)
class SystemConfig:
    num_antennas: int = 256
    num_subcarriers: int = 416  # floor(50 MHz / 120 kHz)
    subcarrier_spacing: float = 120e3
    carrier_frequency: float = 10e9
    antenna_spacing: float | None = None  # None -> half wavelength
    speed_of_light: float = field(default=SPEED_OF_LIGHT, init=False)

    def __post_init__(self):
        if self.num_antennas < 1 or self.num_subcarriers < 1:
            raise ValueError("need at least one antenna and one subcarrier")
        if not (self.subcarrier_spacing > 0 and self.carrier_frequency > 0):
            raise ValueError("frequencies must be positive")
        if self.antenna_spacing is None:
            object.__setattr__(self, "antenna_spacing", self.wavelength / 2)
        if not self.antenna_spacing > 0:
            raise ValueError("antenna spacing must be positive")

    @property
    def wavelength(self) -> float:
        return self.speed_of_light / self.carrier_frequency

    @property
    def shape(self) -> tuple[int, int]:
        return self.num_antennas, self.num_subcarriers

    def to_dict(self) -> dict:
        return {
            "num_antennas": self.num_antennas,
            "num_subcarriers": self.num_subcarriers,
            "subcarrier_spacing": self.subcarrier_spacing,
            "carrier_frequency": self.carrier_frequency,
            "antenna_spacing": self.antenna_spacing,
        }


class Path(NamedTuple):
    gain: complex
    aoa: float
    toa: float
    order: int = 0


class PathSet(tuple):
    """Tuple of :class:`Path` sorted by ascending ToA."""

    def __new__(cls, paths=()):
        return super().__new__(cls, sorted((Path(*p) for p in paths), key=lambda p: p.toa))

    @property
    def gains(self) -> np.ndarray:
        return np.array([p.gain for p in self], dtype=complex)

    @property
    def aoas(self) -> np.ndarray:
        return np.array([p.aoa for p in self], dtype=float)

    @property
    def toas(self) -> np.ndarray:
        return np.array([p.toa for p in self], dtype=float)

    def has_los(self) -> bool:
        return any(p.order == 0 for p in self)


# -- steering vectors -------------------------------------------------------------

def array_steering(cfg: SystemConfig, theta) -> np.ndarray:
    """ULA response; ``theta`` may be a scalar (M,) or an array (M, K)."""
    theta = np.asarray(theta, dtype=float)
    m = np.arange(cfg.num_antennas)
    phase = 2 * np.pi * (cfg.antenna_spacing / cfg.wavelength) * np.multiply.outer(m, np.sin(theta))
    return np.exp(1j * phase)


def freq_steering(cfg: SystemConfig, tau) -> np.ndarray:
    """Subcarrier response; ``tau`` may be a scalar (N_c,) or an array (N_c, K)."""
    tau = np.asarray(tau, dtype=float)
    n = np.arange(cfg.num_subcarriers)
    return np.exp(-2j * np.pi * cfg.subcarrier_spacing * np.multiply.outer(n, tau))


def arrival_angle(scene: SceneMap, q) -> float:
    """AoA of a ray arriving at the BS from point ``q`` (arcsin convention)."""
    v = np.asarray(q, dtype=float) - scene.bs_position
    s = float(v @ scene.ula_direction / np.linalg.norm(v))
    return float(np.arcsin(np.clip(s, -1.0, 1.0)))


# -- image-method tracer ----------------------------------------------------------

class Wall(NamedTuple):
    box: int
    axis: int       # 0: plane x = c, 1: plane y = c
    coord: float
    sign: float     # outward normal direction along ``axis``
    lo: float       # extent along the other horizontal axis
    hi: float
    height: float

    def front(self, p) -> bool:
        return self.sign * (p[self.axis] - self.coord) > 0

    def mirror(self, p) -> np.ndarray:
        q = np.array(p, dtype=float)
        q[self.axis] = 2 * self.coord - q[self.axis]
        return q

    def hit(self, a, b):
        """Crossing of segment a->b with the wall rectangle, or None."""
        da = a[self.axis] - self.coord
        db = b[self.axis] - self.coord
        if da * db >= 0:
            return None
        t = da / (da - db)
        r = a + t * (b - a)
        other = 1 - self.axis
        if not (self.lo <= r[other] <= self.hi and 0.0 <= r[2] <= self.height):
            return None
        r[self.axis] = self.coord
        return r


def scene_walls(scene: SceneMap) -> list[Wall]:
    walls = []
    for i, b in enumerate(scene.buildings):
        walls.append(Wall(i, 0, b.x_min, -1.0, b.y_min, b.y_max, b.height))
        walls.append(Wall(i, 0, b.x_max, +1.0, b.y_min, b.y_max, b.height))
        walls.append(Wall(i, 1, b.y_min, -1.0, b.x_min, b.x_max, b.height))
        walls.append(Wall(i, 1, b.y_max, +1.0, b.x_min, b.x_max, b.height))
    return walls


def path_gain(cfg: SystemConfig, tau: float, order: int, reflection_coeff: float) -> complex:
    # free-space amplitude lambda / (4 pi distance) with carrier phase
    dist = cfg.speed_of_light * tau
    return complex(cfg.wavelength / (4 * np.pi * dist) * reflection_coeff ** order
                   * np.exp(-2j * np.pi * cfg.carrier_frequency * tau))


def _clear(scene: SceneMap, a, b, exclude=()) -> bool:
    return not segments_blocked(scene, a, b, exclude=exclude)[0]


def trace_paths(scene: SceneMap, cfg: SystemConfig, p, max_order: int = 2,
                reflection_coeff: float = 0.7) -> PathSet:
    """LoS plus specular wall reflections up to ``max_order`` for user ``p``."""
    if max_order not in (0, 1, 2):
        raise ValueError("max_order must be 0, 1 or 2")
    p = np.asarray(p, dtype=float).reshape(3)
    if not scene.in_region(p)[0] or scene.inside_building(p)[0]:
        raise SceneError(f"user {p} is not in the feasible region")
    bs = scene.bs_position
    c = cfg.speed_of_light
    paths = []

    def add(length, first_hop, order):
        tau = length / c
        paths.append(Path(path_gain(cfg, tau, order, reflection_coeff),
                          arrival_angle(scene, first_hop), tau, order))

    if _clear(scene, bs, p):
        add(np.linalg.norm(p - bs), p, 0)

    walls = scene_walls(scene) if max_order >= 1 else []
    for w in walls:
        if not (w.front(bs) and w.front(p)):
            continue
        img = w.mirror(bs)
        r = w.hit(img, p)
        if r is None:
            continue
        if _clear(scene, bs, r, (w.box,)) and _clear(scene, r, p, (w.box,)):
            add(np.linalg.norm(p - img), r, 1)

    if max_order >= 2:
        for w1 in walls:
            if not w1.front(bs):
                continue
            img1 = w1.mirror(bs)
            for w2 in walls:
                if w2 is w1 or not w2.front(p):
                    continue
                img2 = w2.mirror(img1)
                r2 = w2.hit(img2, p)
                if r2 is None or not w1.front(r2):
                    continue
                r1 = w1.hit(img1, r2)
                if r1 is None or not w2.front(r1):
                    continue
                if (_clear(scene, bs, r1, (w1.box,))
                        and _clear(scene, r1, r2, (w1.box, w2.box))
                        and _clear(scene, r2, p, (w2.box,))):
                    add(np.linalg.norm(p - img2), r1, 2)

    if not paths:
        raise NoPathError(f"no propagation path reaches {p}")
    return PathSet(paths)


# -- CSI ----------------------------------------------------------------------------

def synthesize_csi(cfg: SystemConfig, paths: PathSet, noise_std: float = 0.0,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Sum of rank-one path terms ``beta * a(theta) b(tau)^T``, shape (M, N_c).

    ``noise_std`` adds circular complex Gaussian noise per entry (off by default).
    """
    if len(paths) == 0:
        raise ValueError("empty path set")
    g = np.array([p.gain for p in paths], dtype=complex)
    A = array_steering(cfg, np.array([p.aoa for p in paths]))
    B = freq_steering(cfg, np.array([p.toa for p in paths]))
    H = (A * g) @ B.T
    if noise_std > 0:
        rng = rng or np.random.default_rng()
        H = H + noise_std / np.sqrt(2) * (rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape))
    return H
