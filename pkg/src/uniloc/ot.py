"""Discrete optimal transport for label self-generation.

Source points are model-based estimates of users identified as NLoS; targets
are the NLoS grid of the map. The entropic solver is a stabilised Sinkhorn
iteration (scalings absorbed into log-domain dual potentials whenever they
grow large); the exact LP is kept for small instances and testing.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .scene import GridSpec, RegionFilter, SceneMap, generate_grid

log = logging.getLogger(__name__)

EXACT_LP_MAX_CELLS = 10_000


class OtError(RuntimeError):
    pass


class OtSolver(enum.Enum):
    SINKHORN = "sinkhorn"
    EXACT_LP = "exact"


@dataclass(frozen=True)
class OtConfig:
    """Solver settings.

    ``regularization`` is the absolute entropic weight; when ``None`` it is
    ``reg_scale * median(C)`` so the default is independent of scene size.
    """

    regularization: float | None = None
    reg_scale: float = 0.01
    max_iterations: int = 5000
    convergence_tol: float = 1e-7
    solver: OtSolver = OtSolver.SINKHORN
    eps_scaling: bool = True
    scaling_factor: float = 0.5

    def __post_init__(self):
        if self.regularization is not None and not self.regularization > 0:
            raise ValueError("regularization must be positive")
        if not self.reg_scale > 0:
            raise ValueError("reg_scale must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.scaling_factor < 1:
            raise ValueError("scaling_factor must lie in (0, 1)")


@dataclass
class TransportPlan:
    gamma: np.ndarray
    source_marginal: np.ndarray
    target_marginal: np.ndarray
    converged: bool = True
    marginal_error: float = 0.0
    iterations: int = 0

    def cost(self, C: np.ndarray) -> float:
        return float(np.sum(self.gamma * C))

    def marginal_residuals(self) -> tuple[float, float]:
        rows = np.max(np.abs(self.gamma.sum(1) - self.source_marginal))
        cols = np.max(np.abs(self.gamma.sum(0) - self.target_marginal))
        return float(rows), float(cols)


def cost_matrix(sources, targets) -> np.ndarray:
    """Squared Euclidean distances, shape (N_s, N_t)."""
    s = np.atleast_2d(np.asarray(sources, dtype=float))
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    if s.size == 0 or t.size == 0:
        raise OtError("cost matrix needs at least one source and one target")
    return cdist(s, t, "sqeuclidean")


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def _check_marginals(C, a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if C.shape != (len(a), len(b)):
        raise OtError(f"cost shape {C.shape} does not match marginals ({len(a)}, {len(b)})")
    if np.any(a <= 0) or np.any(b <= 0):
        raise OtError("marginals must be strictly positive")
    if abs(a.sum() - 1) > 1e-9 or abs(b.sum() - 1) > 1e-9:
        raise OtError("marginals must sum to one")
    return a, b


def _scaling_iterations(C, a, b, f, g, eps, budget, tol, absorb_at, check_every):
    """Diagonal scaling at one fixed ``eps`` around the dual potentials ``(f, g)``.

    Returns updated potentials, the final scalings folded into them, the last
    row-marginal error and the number of iterations spent.
    """
    K = np.exp(-(C - f[:, None] - g[None, :]) / eps)
    u = np.ones(len(a))
    v = np.ones(len(b))
    err = np.inf
    it = 0
    for it in range(1, budget + 1):
        u = a / (K @ v)
        v = b / (K.T @ u)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise OtError(f"Sinkhorn overflow; regularization {eps:g} is too small")
        if np.max(np.abs(np.log(u))) > absorb_at or np.max(np.abs(np.log(v))) > absorb_at:
            f = f + eps * np.log(u)
            g = g + eps * np.log(v)
            K = np.exp(-(C - f[:, None] - g[None, :]) / eps)
            u = np.ones(len(a))
            v = np.ones(len(b))
        if it % check_every == 0 or it == budget:
            # columns are exact right after the v-update; rows carry the error
            err = float(np.max(np.abs(u * (K @ v) - a)))
            if err < tol:
                break
    return f + eps * np.log(u), g + eps * np.log(v), err, it


def sinkhorn(C, a, b, cfg: OtConfig = OtConfig(), absorb_at: float = 50.0,
             check_every: int = 10) -> TransportPlan:
    """Entropic OT by log-stabilised Sinkhorn scaling.

    Scalings are absorbed into dual potentials whenever they leave
    ``exp(+-absorb_at)``. With ``cfg.eps_scaling`` the weight is annealed
    geometrically from the cost range down to the target, warm-starting the
    potentials at every stage; small weights otherwise need a number of
    iterations that grows like ``max(C) / eps``.
    """
    C = np.asarray(C, dtype=float)
    a, b = _check_marginals(C, a, b)
    eps = cfg.regularization if cfg.regularization is not None else cfg.reg_scale * float(np.median(C))
    if not eps > 0:
        # all-zero cost: any positive weight gives the independent coupling
        eps = 1.0

    # c-transform start: every row and column of the kernel holds an entry equal to 1
    f = C.min(axis=1)
    g = (C - f[:, None]).min(axis=0)

    stages = [eps]
    if cfg.eps_scaling:
        e = float(C.max() - C.min())
        while e > eps:
            stages.insert(-1, e)
            e *= cfg.scaling_factor
    budget = cfg.max_iterations
    total = 0
    err = np.inf
    for k, e in enumerate(stages):
        last = k == len(stages) - 1
        tol = cfg.convergence_tol if last else max(cfg.convergence_tol, 1e-3 * float(a.min()))
        f, g, err, used = _scaling_iterations(C, a, b, f, g, e, budget - total if last else
                                              max(1, min(budget - total, budget // 4)),
                                              tol, absorb_at, check_every)
        total += used
        if total >= budget and not last:
            break
    gamma = np.exp(-(C - f[:, None] - g[None, :]) / eps)
    if not np.all(np.isfinite(gamma)):
        raise OtError("non-finite transport plan")
    err = float(max(np.max(np.abs(gamma.sum(1) - a)), np.max(np.abs(gamma.sum(0) - b))))
    converged = err < cfg.convergence_tol
    if not converged:
        log.warning("Sinkhorn stopped after %d iterations with marginal error %.3g", total, err)
    return TransportPlan(gamma, a, b, converged, err, total)


def exact_lp(C, a, b) -> TransportPlan:
    """Exact transport plan by linear programming (HiGHS); small instances only."""
    C = np.asarray(C, dtype=float)
    a, b = _check_marginals(C, a, b)
    ns, nt = C.shape
    if ns * nt > EXACT_LP_MAX_CELLS:
        raise OtError(f"{ns}x{nt} is too large for the exact LP; use the Sinkhorn solver")
    rows = np.kron(np.eye(ns), np.ones((1, nt)))
    cols = np.kron(np.ones((1, ns)), np.eye(nt))
    res = linprog(C.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([a, b]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise OtError(f"LP solver failed: {res.message}")
    gamma = np.maximum(res.x.reshape(ns, nt), 0.0)
    plan = TransportPlan(gamma, a, b)
    plan.marginal_error = max(plan.marginal_residuals())
    return plan


def solve(C, a, b, cfg: OtConfig = OtConfig()) -> TransportPlan:
    if cfg.solver is OtSolver.EXACT_LP:
        return exact_lp(C, a, b)
    return sinkhorn(C, a, b, cfg)


def barycentric_map(plan: TransportPlan, targets) -> np.ndarray:
    """Map every source to the plan-weighted mean of the targets."""
    t = np.asarray(targets, dtype=float)
    mass = plan.gamma.sum(axis=1)
    if np.any(mass <= 0):
        raise OtError("a source row of the plan carries no mass")
    return (plan.gamma @ t) / mass[:, None]


def nlos_targets(scene: SceneMap, delta_d: float, first_quadrant: bool = True) -> np.ndarray:
    pts = generate_grid(scene, GridSpec(delta_d, RegionFilter.NLOS_ONLY))
    if first_quadrant:
        pts = pts[(pts[:, 0] >= 0) & (pts[:, 1] >= 0)]
    return pts


def generate_labels(estimates, identified, scene: SceneMap, delta_d: float = 0.5,
                    cfg: OtConfig = OtConfig(), source_weights=None, snap: bool = False,
                    targets=None) -> np.ndarray:
    """Self-generated training labels for every user.

    Identified-LoS users keep their model-based estimate; the others are moved
    onto the NLoS region by transport to the NLoS grid followed by the
    barycentric map. Output rows follow the input order.
    """
    est = np.array([getattr(e, "position", e) for e in estimates], dtype=float).reshape(-1, 3)
    ident = np.asarray(identified, dtype=bool)
    if len(ident) != len(est):
        raise OtError("estimates and identification flags are not aligned")
    labels = est.copy()
    nlos = np.flatnonzero(~ident)
    if len(nlos) == 0:
        return labels
    if targets is None:
        targets = nlos_targets(scene, delta_d)
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    if len(targets) == 0:
        raise OtError("the NLoS grid is empty")
    src = est[nlos]
    if source_weights is None:
        a = uniform(len(src))
    else:
        a = np.asarray(source_weights, dtype=float)[nlos]
        a = a / a.sum()
    plan = solve(cost_matrix(src, targets), a, uniform(len(targets)), cfg)
    mapped = barycentric_map(plan, targets)
    if snap:
        _, idx = cKDTree(targets[:, :2]).query(mapped[:, :2])
        mapped = targets[idx]
    labels[nlos] = mapped
    return labels
