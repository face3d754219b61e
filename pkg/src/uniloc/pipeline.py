"""End-to-end orchestration: generate, label, train, evaluate, sweep."""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from . import __version__
from .channel import NoPathError, Path, PathSet, SystemConfig, synthesize_csi, trace_paths
from .config import PipelineConfig
from .dataset import Dataset
from .estimator import EstimationError, PositionEstimate, Source, model_based_estimate
from .features import FeatureExtractor
from .identify import IdentifierConfig, IdMode, identify_all
from .nn import MlpModel, Regime, TrainResult, train
from .ot import generate_labels
from .scene import GridSpec, SceneMap, delay_bounds, generate_grid, sample_users

log = logging.getLogger(__name__)

TEST_ID_OFFSET = 1 << 30   # keeps oracle draws for test users apart from training users


class Method(enum.Enum):
    MODEL_BASED = "model_based"
    UNIFIED = "unified"
    CONSERVATIVE = "conservative"
    FINGERPRINT = "fingerprint"
    CHANNEL_CHARTING = "channel_charting"


# -- data generation ------------------------------------------------------------------

def _container_paths(paths: PathSet) -> PathSet:
    # the container stores no reflection order; keep in-memory data identical to a reload
    return PathSet(Path(p.gain, p.aoa, p.toa, 0 if p.order == 0 else 1) for p in paths)


def build_dataset(scene: SceneMap, cfg: PipelineConfig, positions) -> tuple[Dataset, np.ndarray]:
    """Trace and synthesize every position; returns the dataset and a keep-mask.

    Positions the tracer cannot reach are dropped (mask False).
    """
    system, data = cfg.system, cfg.data
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    keep = np.zeros(len(pts), dtype=bool)
    paths, csi = [], []
    rng = np.random.default_rng(data.train_seed) if data.noise_std > 0 else None
    for i, p in enumerate(pts):
        try:
            ps = trace_paths(scene, system, p, data.max_order, data.reflection_coeff)
        except NoPathError:
            continue
        keep[i] = True
        paths.append(_container_paths(ps))
        csi.append(synthesize_csi(system, ps, data.noise_std, rng).astype(np.complex64))
    csi_arr = np.stack(csi) if csi else np.zeros((0,) + system.shape, dtype=np.complex64)
    true_los = np.array([p.has_los() for p in paths], dtype=bool)
    return Dataset(system, scene.user_height, pts[keep], true_los, paths, csi_arr), keep


def sample_reachable(scene: SceneMap, cfg: PipelineConfig, n: int, seed: int) -> Dataset:
    """``n`` random users, redrawing any the tracer cannot reach."""
    parts, got, rnd = [], 0, 0
    while got < n:
        ds, _ = build_dataset(scene, cfg, sample_users(scene, n - got, seed if rnd == 0 else [seed, rnd]))
        parts.append(ds)
        got += len(ds)
        rnd += 1
        if rnd > 50:
            raise RuntimeError("the tracer reaches almost no user of this scene")
    if rnd > 1:
        log.info("redrew %d unreachable users over %d rounds", n - len(parts[0]), rnd - 1)
    return _concat(parts, cfg.system)


def _concat(parts, system: SystemConfig) -> Dataset:
    if len(parts) == 1:
        return parts[0]
    return Dataset(system, parts[0].user_height,
                   np.vstack([p._positions for p in parts]),
                   np.concatenate([p.true_los for p in parts]),
                   [x for p in parts for x in p.paths],
                   np.concatenate([p.csi for p in parts]))


def run_generate(cfg: PipelineConfig, scene: SceneMap | None = None) -> tuple[Dataset, Dataset]:
    """Independent random train and test user sets."""
    scene = scene or cfg.load_scene()
    train_ds = sample_reachable(scene, cfg, cfg.data.n_train, cfg.data.train_seed)
    test_ds = sample_reachable(scene, cfg, cfg.data.n_test, cfg.data.test_seed)
    return train_ds, test_ds


def fingerprint_positions(scene: SceneMap, spacing: float, cap: int = 1800, seed: int = 0,
                          cfg: PipelineConfig | None = None) -> np.ndarray:
    """First-quadrant grid points at ``spacing``; a seeded subsample of ``cap`` if larger.

    With ``cfg`` given, points the tracer cannot reach are removed before capping.
    """
    pts = generate_grid(scene, GridSpec(spacing))
    pts = pts[(pts[:, 0] >= 0) & (pts[:, 1] >= 0)]
    if cfg is not None:
        reachable = np.ones(len(pts), dtype=bool)
        for i, p in enumerate(pts):
            try:
                trace_paths(scene, cfg.system, p, cfg.data.max_order, cfg.data.reflection_coeff)
            except NoPathError:
                reachable[i] = False
        pts = pts[reachable]
    if len(pts) > cap:
        idx = np.sort(np.random.default_rng(seed).choice(len(pts), cap, replace=False))
        pts = pts[idx]
    return pts


def run_fingerprint_grid(scene: SceneMap, cfg: PipelineConfig) -> Dataset:
    fp = cfg.fingerprint
    pts = fingerprint_positions(scene, fp.spacing, fp.cap, fp.seed, cfg)
    return build_dataset(scene, cfg, pts)[0]


# -- model-based stage ------------------------------------------------------------------

def model_based_all(ds: Dataset, scene: SceneMap, cfg: PipelineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Model-based estimates for every user (cached on labelled datasets)."""
    if ds.mb_estimates is not None:
        return ds.mb_estimates, ds.mb_clipped
    dcfg = cfg.dictionary.for_scene(scene)
    est = np.empty((len(ds), 3))
    clipped = np.zeros(len(ds), dtype=bool)
    for i in range(len(ds)):
        try:
            e = model_based_estimate(scene, ds.system, dcfg, ds.csi[i])
            est[i], clipped[i] = e.position, e.clipped
        except EstimationError as exc:
            # keep going; the user is placed at the BS footprint and flagged
            log.warning("user %d: %s", i, exc)
            est[i] = [scene.bs_position[0], scene.bs_position[1], scene.user_height]
            clipped[i] = True
        if (i + 1) % 200 == 0:
            log.info("model-based estimates: %d/%d", i + 1, len(ds))
    return est, clipped


def run_label(ds: Dataset, scene: SceneMap, cfg: PipelineConfig,
              identifier: IdentifierConfig | None = None) -> Dataset:
    """Model-based estimates, identification and OT self-labels for a training set."""
    identifier = identifier or cfg.identify
    est, clipped = model_based_all(ds, scene, cfg)
    ident = identify_all(ds.true_los, est, scene, identifier)
    if np.all(ident):
        labels = est.copy()
    else:
        labels = generate_labels(est, ident, scene, cfg.label.delta_d, cfg.ot, snap=cfg.label.snap)
    return ds.with_labels(est, clipped, ident, labels)


# -- training --------------------------------------------------------------------------

def extractor_for(scene: SceneMap, system: SystemConfig) -> FeatureExtractor:
    lo, hi = delay_bounds(scene)
    return FeatureExtractor(system, lo, hi)


def dataset_features(ds: Dataset, extractor: FeatureExtractor) -> np.ndarray:
    return extractor.many(ds.csi)


def run_train(ds: Dataset, scene: SceneMap, cfg: PipelineConfig, regime: Regime,
              features: np.ndarray | None = None) -> TrainResult:
    """Fit a fresh network under ``regime``.

    Only Fingerprint reads ground-truth positions; the other regimes work from
    the labelling stage alone.
    """
    extractor = extractor_for(scene, ds.system)
    X = dataset_features(ds, extractor) if features is None else features
    tcfg = dataclasses.replace(cfg.train, regime=regime)
    model = MlpModel.for_features(X.shape[1], cfg.hidden, seed=cfg.train.seed)
    model.meta.update(tau_min=extractor.tau_min, tau_max=extractor.tau_max,
                      width=extractor.width, system=ds.system.to_dict())
    if regime is Regime.FINGERPRINT:
        result = train(model, X, tcfg, labels=ds.positions)
    elif regime is Regime.SELF_LABEL:
        if not ds.is_labeled:
            raise ValueError("self-label training needs a labelled dataset")
        result = train(model, X, tcfg, labels=ds.labels)
    else:
        if not ds.is_labeled:
            raise ValueError("channel charting needs model-based estimates and identification")
        result = train(model, X, tcfg, mb_estimates=ds.mb_estimates, identified=ds.identified)
    return result


# -- inference -----------------------------------------------------------------------------

def unified_localize(H: np.ndarray, model: MlpModel, scene: SceneMap, cfg: PipelineConfig,
                     identified_los: bool, extractor: FeatureExtractor | None = None) -> PositionEstimate:
    """Model-based estimate for identified-LoS users, network estimate otherwise.

    ``identified_los`` is the final identification outcome for this CSI.
    """
    system = cfg.system
    if identified_los:
        est = model_based_estimate(scene, system, cfg.dictionary.for_scene(scene), H)
        return dataclasses.replace(est, identified_los=True)
    extractor = extractor or extractor_for(scene, system)
    xy = model.predict(extractor(H)[None, :])[0]
    return PositionEstimate(np.array([xy[0], xy[1], scene.user_height]), Source.NEURAL, False)


def identify_test(test: Dataset, scene: SceneMap, mb: np.ndarray, method: Method,
                  identifier: IdentifierConfig) -> np.ndarray:
    if method is Method.CONSERVATIVE:
        identifier = dataclasses.replace(identifier, mode=IdMode.CONSERVATIVE)
    elif method is Method.UNIFIED:
        identifier = dataclasses.replace(identifier, mode=IdMode.REFINED)
    else:
        raise ValueError(f"{method.value} does not use identification")
    return identify_all(test.true_los, mb, scene, identifier, offset=TEST_ID_OFFSET)


def predict(method: Method, test: Dataset, scene: SceneMap, cfg: PipelineConfig,
            model: MlpModel | None = None, features: np.ndarray | None = None,
            identifier: IdentifierConfig | None = None):
    """Positions (N, 3) and per-user sources for a whole test set."""
    n = len(test)
    if method in (Method.UNIFIED, Method.CONSERVATIVE, Method.MODEL_BASED):
        mb, _ = model_based_all(test, scene, cfg)
    if method is Method.MODEL_BASED:
        return mb.copy(), np.full(n, Source.MODEL_BASED.value, dtype=object)
    if model is None:
        raise ValueError(f"{method.value} needs a trained model")
    if features is None:
        features = dataset_features(test, extractor_for(scene, test.system))
    if method in (Method.FINGERPRINT, Method.CHANNEL_CHARTING):
        xy = model.predict(features)
        pos = np.column_stack([xy, np.full(n, scene.user_height)])
        return pos, np.full(n, Source.NEURAL.value, dtype=object)
    ident = identify_test(test, scene, mb, method, identifier or cfg.identify)
    pos = mb.copy()
    nl = np.flatnonzero(~ident)
    if len(nl):
        xy = model.predict(features[nl])
        pos[nl] = np.column_stack([xy, np.full(len(nl), scene.user_height)])
    sources = np.where(ident, Source.MODEL_BASED.value, Source.NEURAL.value).astype(object)
    return pos, sources


# -- evaluation ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    method: str
    errors: np.ndarray
    true_los: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_los(self) -> int:
        return int(np.count_nonzero(self.true_los))

    @property
    def n_nlos(self) -> int:
        return len(self.errors) - self.n_los

    def _mae(self, mask) -> float:
        e = self.errors[mask]
        return float(e.mean()) if len(e) else float("nan")

    @property
    def mae_all(self) -> float:
        return float(self.errors.mean()) if len(self.errors) else float("nan")

    @property
    def mae_los(self) -> float:
        return self._mae(self.true_los)

    @property
    def mae_nlos(self) -> float:
        return self._mae(~self.true_los)

    def cdf(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted errors and their empirical percentiles (0-100]."""
        e = np.sort(self.errors)
        return e, 100.0 * np.arange(1, len(e) + 1) / max(len(e), 1)

    def summary(self) -> dict:
        return {"method": self.method, "n_users": len(self.errors), "n_los": self.n_los,
                "n_nlos": self.n_nlos, "mae_los": self.mae_los, "mae_nlos": self.mae_nlos,
                "mae_all": self.mae_all, **self.metadata}

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.errors, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.true_los, dtype="u1").tobytes())
        h.update(json.dumps(self.summary(), sort_keys=True, default=str).encode())
        return h.hexdigest()

    def write_cdf_csv(self, path) -> None:
        err, pct = self.cdf()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["error_m", "percentile"])
            for e, p in zip(err, pct):
                w.writerow([repr(float(e)), repr(float(p))])


def evaluate(method: Method, test: Dataset, scene: SceneMap, cfg: PipelineConfig,
             model: MlpModel | None = None, features: np.ndarray | None = None,
             identifier: IdentifierConfig | None = None, extra_meta: dict | None = None) -> EvalReport:
    pos, _ = predict(method, test, scene, cfg, model, features, identifier)
    errors = np.linalg.norm(pos[:, :2] - test.positions[:, :2], axis=1)
    meta = {"config": cfg.digest()}
    if identifier is not None:
        meta["p_i"] = identifier.accuracy
    meta.update(extra_meta or {})
    return EvalReport(method.value, errors, test.true_los.copy(), meta)


# -- p_I sweep ---------------------------------------------------------------------------------

@dataclass
class SweepRow:
    p_i: float
    method: str
    mae_los: float
    mae_nlos: float
    mae_all: float


def run_sweep(train_ds: Dataset, test_ds: Dataset, scene: SceneMap, cfg: PipelineConfig,
              grid=None) -> tuple[list[SweepRow], dict]:
    """Unified method per identification accuracy plus the (p_I-free) conservative one.

    Each grid value relabels and retrains (labels depend on identification).
    Returns the table rows and the reports keyed by ``(method, p_i)``.
    """
    grid = tuple(cfg.sweep.grid if grid is None else grid)
    extractor = extractor_for(scene, train_ds.system)
    X_train = dataset_features(train_ds, extractor)
    X_test = dataset_features(test_ds, extractor)
    train_ds = attach_model_based(train_ds, scene, cfg)
    test_ds = attach_model_based(test_ds, scene, cfg)

    reports = {}
    rows = []
    cons_id = dataclasses.replace(cfg.identify, mode=IdMode.CONSERVATIVE)
    labelled = run_label(train_ds, scene, cfg, cons_id)
    model = run_train(labelled, scene, cfg, Regime.SELF_LABEL, X_train).model
    cons = evaluate(Method.CONSERVATIVE, test_ds, scene, cfg, model, X_test, cons_id)
    shared_model = None
    for p in grid:
        ident = dataclasses.replace(cfg.identify, accuracy=float(p), mode=IdMode.REFINED)
        if cfg.sweep.retrain or shared_model is None:
            labelled = run_label(train_ds, scene, cfg, ident)
            shared_model = run_train(labelled, scene, cfg, Regime.SELF_LABEL, X_train).model
        rep = evaluate(Method.UNIFIED, test_ds, scene, cfg, shared_model, X_test, ident)
        reports[(Method.UNIFIED.value, float(p))] = rep
        rows.append(SweepRow(float(p), Method.UNIFIED.value, rep.mae_los, rep.mae_nlos, rep.mae_all))
        rows.append(SweepRow(float(p), Method.CONSERVATIVE.value, cons.mae_los, cons.mae_nlos, cons.mae_all))
        reports[(Method.CONSERVATIVE.value, float(p))] = cons
        log.info("p_I=%.2f unified MAE %.2f m, conservative %.2f m", p, rep.mae_all, cons.mae_all)
    return rows, reports


def attach_model_based(ds: Dataset, scene: SceneMap, cfg: PipelineConfig) -> Dataset:
    """Copy of ``ds`` carrying its model-based estimates, so later stages reuse them.

    The copy shares raw arrays and the ground-truth audit with ``ds``.
    """
    if ds.mb_estimates is not None:
        return ds
    est, clipped = model_based_all(ds, scene, cfg)
    return Dataset(ds.system, ds.user_height, ds._positions, ds.true_los, ds.paths, ds.csi,
                   mb_estimates=est, mb_clipped=clipped, audit=ds.audit)


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p_i", "method", "mae_los", "mae_nlos", "mae_all"])
        for r in rows:
            w.writerow([r.p_i, r.method, repr(r.mae_los), repr(r.mae_nlos), repr(r.mae_all)])


def crossing_point(rows) -> float | None:
    """Smallest p_I where the unified curve drops to or below the conservative one.

    Linear interpolation between the bracketing grid values; ``None`` when the
    curves never cross on the grid.
    """
    uni = sorted((r.p_i, r.mae_all) for r in rows if r.method == Method.UNIFIED.value)
    con = {r.p_i: r.mae_all for r in rows if r.method == Method.CONSERVATIVE.value}
    diff = [(p, m - con[p]) for p, m in uni]
    for (p0, d0), (p1, d1) in zip(diff[:-1], diff[1:]):
        if d0 > 0 >= d1:
            return p0 + (p1 - p0) * d0 / (d0 - d1)
    if diff and diff[0][1] <= 0:
        return diff[0][0]
    return None


# -- provenance -------------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, cfg: PipelineConfig, inputs=(), outputs=(), extra=None) -> FsPath:
    """JSON record of the command, full configuration, seeds and file hashes."""
    out_dir = FsPath(out_dir)
    manifest = {
        "command": command,
        "package_version": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": {"train_users": cfg.data.train_seed, "test_users": cfg.data.test_seed,
                  "identification": cfg.identify.seed, "training": cfg.train.seed,
                  "fingerprint_grid": cfg.fingerprint.seed},
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(p): file_digest(p) for p in outputs if FsPath(p).exists()},
    }
    manifest.update(extra or {})
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path
