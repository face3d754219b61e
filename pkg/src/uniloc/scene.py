"""2.5D urban map: building boxes, feasible region and LoS/NLoS partition."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import yaml

SPEED_OF_LIGHT = 299792458.0


class SceneError(ValueError):
    """Raised for queries outside the scene's domain."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned building prism standing on the ground plane z = 0."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    height: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.height > 0):
            raise SceneError(f"degenerate building {self}")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, 0.0])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.height])

    def contains_xy(self, points: np.ndarray) -> np.ndarray:
        """Closed footprint membership for an (N, 2+) array of points."""
        p = np.atleast_2d(points)
        return ((p[:, 0] >= self.x_min) & (p[:, 0] <= self.x_max)
                & (p[:, 1] >= self.y_min) & (p[:, 1] <= self.y_max))


class RegionFilter(enum.Enum):
    ALL = "all"
    LOS_ONLY = "los"
    NLOS_ONLY = "nlos"


@dataclass(frozen=True)
class GridSpec:
    spacing: float
    region_filter: RegionFilter = RegionFilter.ALL

    def __post_init__(self):
        if not self.spacing > 0:
            raise SceneError("grid spacing must be positive")


@dataclass(frozen=True)
class SceneMap:
    """Immutable scene description.

    ``region_bounds`` is ``(x_min, x_max, y_min, y_max)`` in meters.
    """

    buildings: tuple[Box, ...]
    region_bounds: tuple[float, float, float, float]
    bs_position: np.ndarray
    ula_direction: np.ndarray
    user_height: float
    name: str = "scene"
    _lo: np.ndarray = field(init=False, repr=False, compare=False)
    _hi: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        bs = np.asarray(self.bs_position, dtype=float).reshape(3)
        n = np.asarray(self.ula_direction, dtype=float).reshape(3)
        nn = np.linalg.norm(n)
        if nn == 0:
            raise SceneError("ULA direction must be non-zero")
        n = n / nn
        bs.setflags(write=False)
        n.setflags(write=False)
        object.__setattr__(self, "bs_position", bs)
        object.__setattr__(self, "ula_direction", n)
        object.__setattr__(self, "buildings", tuple(self.buildings))
        object.__setattr__(self, "region_bounds", tuple(float(v) for v in self.region_bounds))
        x0, x1, y0, y1 = self.region_bounds
        if not (x0 < x1 and y0 < y1):
            raise SceneError("empty region bounds")
        if not self.user_height > 0:
            raise SceneError("user height must be positive")
        if not bs[2] > self.user_height:
            raise SceneError("base station must be above the user plane")
        for b in self.buildings:
            if b.x_min < x0 or b.x_max > x1 or b.y_min < y0 or b.y_max > y1:
                raise SceneError(f"building {b} leaves the region bounds")
        lo = np.array([b.lo for b in self.buildings]).reshape(-1, 3)
        hi = np.array([b.hi for b in self.buildings]).reshape(-1, 3)
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "_lo", lo)
        object.__setattr__(self, "_hi", hi)

    # -- geometry helpers ----------------------------------------------------

    @property
    def box_lo(self) -> np.ndarray:
        return self._lo

    @property
    def box_hi(self) -> np.ndarray:
        return self._hi

    def in_region(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        x0, x1, y0, y1 = self.region_bounds
        return (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)

    def inside_building(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        mask = np.zeros(len(p), dtype=bool)
        for b in self.buildings:
            mask |= b.contains_xy(p)
        return mask

    def translated(self, offset) -> "SceneMap":
        """Rigidly translate every element of the scene by ``offset`` (3-vector)."""
        o = np.asarray(offset, dtype=float).reshape(3)
        boxes = [Box(b.x_min + o[0], b.x_max + o[0], b.y_min + o[1], b.y_max + o[1], b.height)
                 for b in self.buildings]
        if o[2] != 0:
            raise SceneError("vertical translation would lift buildings off the ground")
        x0, x1, y0, y1 = self.region_bounds
        return SceneMap(tuple(boxes), (x0 + o[0], x1 + o[0], y0 + o[1], y1 + o[1]),
                        self.bs_position + o, self.ula_direction, self.user_height, self.name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "region": list(self.region_bounds),
            "buildings": [[b.x_min, b.x_max, b.y_min, b.y_max, b.height] for b in self.buildings],
            "bs_position": self.bs_position.tolist(),
            "ula_direction": self.ula_direction.tolist(),
            "user_height": self.user_height,
        }


def scene_from_dict(cfg: dict) -> SceneMap:
    buildings = []
    for b in cfg.get("buildings", []):
        if isinstance(b, dict):
            buildings.append(Box(b["x_min"], b["x_max"], b["y_min"], b["y_max"], b["height"]))
        else:
            buildings.append(Box(*map(float, b)))
    return SceneMap(
        buildings=tuple(buildings),
        region_bounds=tuple(cfg["region"]),
        bs_position=np.asarray(cfg["bs_position"], dtype=float),
        ula_direction=np.asarray(cfg["ula_direction"], dtype=float),
        user_height=float(cfg["user_height"]),
        name=cfg.get("name", "scene"),
    )


def load_scene(path: str | Path) -> SceneMap:
    with open(path) as fh:
        return scene_from_dict(yaml.safe_load(fh))


def default_scene() -> SceneMap:
    """The bundled street-canyon scene."""
    return load_scene(Path(__file__).parent / "data" / "street_canyon.yaml")


# -- visibility ------------------------------------------------------------------

def segments_hit_box(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab test of open segments ``a -> b`` (each (N, 3)) against one closed box.

    Touching a face, edge or corner counts as a hit.
    """
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d = b - a
    t_enter = np.zeros(len(a))
    t_exit = np.ones(len(a))
    hit = np.ones(len(a), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for k in range(3):
            dk = d[:, k]
            flat = dk == 0
            inside = (a[:, k] >= lo[k]) & (a[:, k] <= hi[k])
            hit &= ~flat | inside
            t1 = (lo[k] - a[:, k]) / dk
            t2 = (hi[k] - a[:, k]) / dk
            tn = np.where(flat, -np.inf, np.minimum(t1, t2))
            tx = np.where(flat, np.inf, np.maximum(t1, t2))
            t_enter = np.maximum(t_enter, tn)
            t_exit = np.minimum(t_exit, tx)
    # the open segment is t in (0, 1); t_enter/t_exit were clipped to [0, 1]
    hit &= t_enter <= t_exit
    hit &= (t_exit > 0) & (t_enter < 1)
    return hit


def segments_blocked(scene: SceneMap, a, b, exclude: Iterable[int] = ()) -> np.ndarray:
    """True where the open segment a->b touches any building not in ``exclude``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    a, b = np.broadcast_arrays(a, b)
    skip = set(exclude)
    blocked = np.zeros(len(a), dtype=bool)
    for i in range(len(scene.buildings)):
        if i in skip:
            continue
        blocked |= segments_hit_box(a, b, scene.box_lo[i], scene.box_hi[i])
    return blocked


def los_mask(scene: SceneMap, points) -> np.ndarray:
    """Vectorised LoS predicate for points already known to be in the region."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    return ~segments_blocked(scene, scene.bs_position[None, :], p)


def is_los(scene: SceneMap, p) -> bool:
    """True iff the open BS->p segment misses every building."""
    p = np.asarray(p, dtype=float).reshape(3)
    if not scene.in_region(p)[0]:
        raise SceneError(f"point {p} lies outside the region bounds")
    return bool(los_mask(scene, p)[0])


def region_membership(scene: SceneMap, p) -> bool:
    """LoS-region membership tolerant of points outside the map (treated as NLoS)."""
    p = np.asarray(p, dtype=float).reshape(3)
    if not scene.in_region(p)[0]:
        return False
    return bool(los_mask(scene, p)[0])


# -- grids and sampling ---------------------------------------------------------

def _axis(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


def generate_grid(scene: SceneMap, spec: GridSpec) -> np.ndarray:
    """Row-major lattice (y outer, x inner) of feasible points, shape (N, 3)."""
    x0, x1, y0, y1 = scene.region_bounds
    xs = _axis(x0, x1, spec.spacing)
    ys = _axis(y0, y1, spec.spacing)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, scene.user_height)])
    pts = pts[~scene.inside_building(pts)]
    if spec.region_filter is RegionFilter.ALL:
        return pts
    los = los_mask(scene, pts)
    return pts[los] if spec.region_filter is RegionFilter.LOS_ONLY else pts[~los]


def sample_users(scene: SceneMap, n: int, seed: int) -> np.ndarray:
    """Uniform rejection sampling over the first-quadrant feasible region."""
    if n < 0:
        raise SceneError("n must be non-negative")
    x0, x1, y0, y1 = scene.region_bounds
    x0, y0 = max(x0, 0.0), max(y0, 0.0)
    if x0 >= x1 or y0 >= y1:
        raise SceneError("first-quadrant part of the region is empty")
    rng = np.random.default_rng(seed)
    out = np.empty((0, 2))
    tries = 0
    while len(out) < n:
        batch = np.column_stack([rng.uniform(x0, x1, 2 * n + 16), rng.uniform(y0, y1, 2 * n + 16)])
        out = np.vstack([out, batch[~scene.inside_building(batch)]])
        tries += 1
        if tries > 1000 and len(out) == 0:
            raise SceneError("feasible area is empty")
    out = out[:n]
    return np.column_stack([out, np.full(n, scene.user_height)])


def delay_bounds(scene: SceneMap, max_detour: float | None = None) -> tuple[float, float]:
    """Geometric ToA window ``(tau_min, tau_max)`` covering every feasible user.

    ``tau_min`` uses the closest region point to the BS, ``tau_max`` the farthest
    region corner plus twice ``max_detour`` (default: half the region diagonal).
    """
    x0, x1, y0, y1 = scene.region_bounds
    bs = scene.bs_position
    dz = bs[2] - scene.user_height
    cx = np.clip(bs[0], x0, x1)
    cy = np.clip(bs[1], y0, y1)
    d_min = np.sqrt((bs[0] - cx) ** 2 + (bs[1] - cy) ** 2 + dz ** 2)
    corners = np.array([[x, y] for x in (x0, x1) for y in (y0, y1)])
    d_far = np.max(np.sqrt(((corners - bs[:2]) ** 2).sum(1) + dz ** 2))
    if max_detour is None:
        max_detour = 0.5 * np.hypot(x1 - x0, y1 - y0)
    return float(d_min / SPEED_OF_LIGHT), float((d_far + 2 * max_detour) / SPEED_OF_LIGHT)

