"""Model-based localization: OMP channel estimation plus single-path geometry."""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, replace

import numpy as np

from .channel import Path, PathSet, SystemConfig, array_steering, freq_steering
from .scene import SceneMap, delay_bounds


class EstimationError(ValueError):
    pass


class Source(enum.Enum):
    MODEL_BASED = "model_based"
    NEURAL = "neural"


@dataclass(frozen=True)
class DictionaryConfig:
    """OMP dictionary and stopping rule.

    Angles are gridded uniformly over [-pi/2, pi/2] and delays over
    [tau_min, tau_max]; ``None`` bounds fall back to the unambiguous window
    [0, (N_c - 1) / (N_c * df)].
    """

    angle_grid: int = 512
    delay_grid: int = 512
    max_paths: int = 8
    residual_threshold: float = 0.05
    refinement: bool = True
    refine_passes: int = 5
    tau_min: float | None = None
    tau_max: float | None = None

    def __post_init__(self):
        if self.angle_grid < 2 or self.delay_grid < 2:
            raise ValueError("dictionary grids need at least two atoms")
        if not 0 < self.residual_threshold < 1:
            raise ValueError("residual_threshold must lie in (0, 1)")
        if self.max_paths < 1:
            raise ValueError("max_paths must be >= 1")

    def for_scene(self, scene: SceneMap) -> "DictionaryConfig":
        """Fill missing delay bounds from the scene geometry."""
        if self.tau_min is not None and self.tau_max is not None:
            return self
        lo, hi = delay_bounds(scene)
        return replace(self, tau_min=lo, tau_max=hi)


@dataclass(frozen=True)
class PositionEstimate:
    position: np.ndarray
    source: Source
    identified_los: bool = False
    clipped: bool = False


class _Dictionary:
    """Precomputed separable atoms; read-only once built."""

    def __init__(self, cfg: SystemConfig, dcfg: DictionaryConfig):
        t0 = 0.0 if dcfg.tau_min is None else dcfg.tau_min
        t1 = ((cfg.num_subcarriers - 1) / (cfg.num_subcarriers * cfg.subcarrier_spacing)
              if dcfg.tau_max is None else dcfg.tau_max)
        if not t1 > t0:
            raise ValueError("empty delay window")
        self.thetas = np.linspace(-np.pi / 2, np.pi / 2, dcfg.angle_grid)
        self.taus = np.linspace(t0, t1, dcfg.delay_grid)
        self.d_theta = self.thetas[1] - self.thetas[0]
        self.d_tau = self.taus[1] - self.taus[0]
        self.A = array_steering(cfg, self.thetas)          # M x Ga
        self.B = freq_steering(cfg, self.taus)             # Nc x Gd
        self.AH = np.ascontiguousarray(self.A.conj().T)    # Ga x M
        self.Bc = np.ascontiguousarray(self.B.conj())      # Nc x Gd
        M, Nc = cfg.shape
        Ga, Gd = len(self.thetas), len(self.taus)
        self._right_first = M * Nc * Gd + Ga * M * Gd < Ga * M * Nc + Ga * Nc * Gd

    def correlate(self, R: np.ndarray) -> np.ndarray:
        """``A^H R conj(B)``: inner products of R with every atom (Ga x Gd)."""
        if self._right_first:
            return self.AH @ (R @ self.Bc)
        return (self.AH @ R) @ self.Bc


@functools.lru_cache(maxsize=8)
def _dictionary(cfg: SystemConfig, dcfg: DictionaryConfig) -> _Dictionary:
    return _Dictionary(cfg, dcfg)


def _refine(cfg, dic, R, theta, tau):
    steps = np.arange(-10, 11) / 10.0
    th = np.clip(theta + steps * dic.d_theta, -np.pi / 2, np.pi / 2)
    ta = np.maximum(tau + steps * dic.d_tau, 0.0)
    a = array_steering(cfg, th)
    b = freq_steering(cfg, ta)
    c = np.abs(a.conj().T @ R @ b.conj())
    i, k = np.unravel_index(np.argmax(c), c.shape)
    return float(th[i]), float(ta[k])


def _refit(cfg, H, thetas, taus):
    """Joint least-squares gains for the current support and the residual."""
    As = array_steering(cfg, np.array(thetas))
    Bs = freq_steering(cfg, np.array(taus))
    gram = (As.conj().T @ As) * (Bs.conj().T @ Bs)
    rhs = np.einsum("ml,mn,nl->l", As.conj(), H, Bs.conj())
    beta = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    return beta, H - (As * beta) @ Bs.T


def omp_estimate(cfg: SystemConfig, dcfg: DictionaryConfig, H: np.ndarray,
                 return_residuals: bool = False):
    """Greedy OMP over the angle-delay dictionary.

    Returns a :class:`PathSet` (ascending ToA); with ``return_residuals`` also
    the residual Frobenius norm after every iteration (index 0 = ``||H||``).
    """
    H = np.asarray(H)
    if H.shape != cfg.shape:
        raise EstimationError(f"CSI shape {H.shape} does not match system {cfg.shape}")
    H = H.astype(complex, copy=False)
    dic = _dictionary(cfg, dcfg)
    norm0 = float(np.linalg.norm(H))
    history = [norm0]
    if norm0 == 0.0:
        return (PathSet(), history) if return_residuals else PathSet()

    corr_H = dic.correlate(H)
    thetas: list[float] = []
    taus: list[float] = []
    g_cols, h_cols = [], []
    beta = np.zeros(0, dtype=complex)
    R = H
    for _ in range(dcfg.max_paths):
        corr = corr_H.copy()
        for l in range(len(beta)):
            corr -= beta[l] * np.outer(g_cols[l], h_cols[l])
        i, k = np.unravel_index(np.argmax(np.abs(corr)), corr.shape)
        theta, tau = float(dic.thetas[i]), float(dic.taus[k])
        if dcfg.refinement:
            theta, tau = _refine(cfg, dic, R, theta, tau)
        thetas.append(theta)
        taus.append(tau)
        a = array_steering(cfg, theta)
        b = freq_steering(cfg, tau)
        g_cols.append(dic.AH @ a)
        h_cols.append(dic.Bc.T @ b)

        beta, R = _refit(cfg, H, thetas, taus)
        if dcfg.refinement and len(thetas) > 1:
            for _ in range(dcfg.refine_passes):
                moved = False
                for l in range(len(thetas)):
                    R_l = R + beta[l] * np.outer(array_steering(cfg, thetas[l]), freq_steering(cfg, taus[l]))
                    th, ta = _refine(cfg, dic, R_l, thetas[l], taus[l])
                    moved |= (th, ta) != (thetas[l], taus[l])
                    thetas[l], taus[l] = th, ta
                    beta, R = _refit(cfg, H, thetas, taus)
                if not moved:
                    break
            g_cols = [dic.AH @ array_steering(cfg, t) for t in thetas]
            h_cols = [dic.Bc.T @ freq_steering(cfg, t) for t in taus]
        history.append(float(np.linalg.norm(R)))
        if history[-1] < dcfg.residual_threshold * norm0:
            break

    paths = PathSet(Path(complex(b_), t, tau_, -1) for b_, t, tau_ in zip(beta, thetas, taus))
    return (paths, history) if return_residuals else paths


def select_shortest(paths: PathSet) -> tuple[float, float]:
    """(AoA, ToA) of the earliest path; equal delays prefer the stronger gain."""
    if len(paths) == 0:
        raise EstimationError("no paths to select from")
    best = min(paths, key=lambda p: (p.toa, -abs(p.gain)))
    return best.aoa, best.toa


def _feasible_box(scene: SceneMap, first_quadrant: bool):
    x0, x1, y0, y1 = scene.region_bounds
    if first_quadrant:
        x0, y0 = max(x0, 0.0), max(y0, 0.0)
    return x0, x1, y0, y1


def geometric_position_flagged(scene: SceneMap, cfg: SystemConfig, theta: float, tau: float,
                               first_quadrant: bool = True) -> tuple[np.ndarray, bool]:
    """Invert the range/arcsin relations for a point on the user plane.

    Returns ``(position, clipped)``; ``clipped`` is set when no candidate lies
    in the feasible box and the better one had to be projected into it, or when
    the (theta, tau) pair is inconsistent and the cone was touched tangentially.
    """
    bs = scene.bs_position
    n = scene.ula_direction
    r = cfg.speed_of_light * float(tau)
    h = scene.user_height - bs[2]
    if r < abs(h) * (1 - 1e-12):
        raise EstimationError(f"range {r:.3f} m cannot reach the user plane ({abs(h):.3f} m below)")
    rho2 = max(r * r - h * h, 0.0)
    nxy = n[:2]
    nn = float(np.linalg.norm(nxy))
    if nn < 1e-12:
        raise EstimationError("a vertical array cannot resolve the horizontal position")
    m = nxy / nn
    perp = np.array([-m[1], m[0]])
    s = (r * np.sin(theta) - n[2] * h) / nn
    q = rho2 - s * s
    clipped = q < 0
    w = np.sqrt(max(q, 0.0))
    cands = [bs[:2] + s * m + w * perp, bs[:2] + s * m - w * perp]

    x0, x1, y0, y1 = _feasible_box(scene, first_quadrant)
    ok = [x0 <= c[0] <= x1 and y0 <= c[1] <= y1 for c in cands]
    if ok[0] and ok[1]:
        xy = cands[0] if cands[0][0] >= cands[1][0] else cands[1]
    elif ok[0] or ok[1]:
        xy = cands[0] if ok[0] else cands[1]
    else:
        proj = [np.array([np.clip(c[0], x0, x1), np.clip(c[1], y0, y1)]) for c in cands]
        dist = [np.linalg.norm(p - c) for p, c in zip(proj, cands)]
        xy = proj[int(np.argmin(dist))]
        clipped = True
    return np.array([xy[0], xy[1], scene.user_height]), bool(clipped)


def geometric_position(scene: SceneMap, cfg: SystemConfig, theta: float, tau: float,
                       first_quadrant: bool = True) -> np.ndarray:
    return geometric_position_flagged(scene, cfg, theta, tau, first_quadrant)[0]


def forward_geometry(scene: SceneMap, cfg: SystemConfig, p) -> tuple[float, float]:
    """(AoA, ToA) a LoS path from ``p`` would have."""
    v = np.asarray(p, dtype=float) - scene.bs_position
    dist = float(np.linalg.norm(v))
    return float(np.arcsin(np.clip(v @ scene.ula_direction / dist, -1, 1))), dist / cfg.speed_of_light


def model_based_estimate(scene: SceneMap, cfg: SystemConfig, dcfg: DictionaryConfig,
                         H: np.ndarray, first_quadrant: bool = True) -> PositionEstimate:
    paths = omp_estimate(cfg, dcfg.for_scene(scene), H)
    theta, tau = select_shortest(paths)
    pos, clipped = geometric_position_flagged(scene, cfg, theta, tau, first_quadrant)
    return PositionEstimate(pos, Source.MODEL_BASED, clipped=clipped)
