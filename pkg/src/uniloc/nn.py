"""Multilayer perceptron with batch normalisation, trained with Adam.

Everything is plain numpy. The network maps standardised features to a
standardised 2-D position; :meth:`MlpModel.predict` undoes both
standardisations, and the losses are evaluated in meters.
"""

from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import Standardizer, logamp_block

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (1024, 512, 256, 128, 64)
BN_EPS = 1e-5
MODEL_MAGIC = b"UMLP"
MODEL_VERSION = 1


class TrainingError(RuntimeError):
    pass


class Regime(enum.Enum):
    SELF_LABEL = "self_label"
    FINGERPRINT = "fingerprint"
    CHANNEL_CHARTING = "channel_charting"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1600
    batch_size: int = 128
    learning_rate: float = 1e-3
    lr_decay: float = 0.998         # multiplicative, per epoch
    seed: int = 0
    regime: Regime = Regime.SELF_LABEL
    dtype: str = "float32"
    bn_momentum: float = 0.9
    eps_learning_rate: float = 0.05  # Adam step for the charting scale
    eps_init: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch norm needs batches of at least two samples")


class MlpModel:
    """Affine -> batch norm -> ReLU hidden layers and a linear 2-D output."""

    def __init__(self, widths, weights, biases, gammas, betas, running_mean, running_var):
        self.widths = [int(w) for w in widths]
        self.weights = weights
        self.biases = biases
        self.gammas = gammas
        self.betas = betas
        self.running_mean = running_mean
        self.running_var = running_var
        self.feature_norm: Standardizer | None = None
        self.label_mean = np.zeros(2)
        self.label_scale = 1.0
        self.eps_cc: float | None = None
        self.meta: dict = {}

    @classmethod
    def init(cls, widths, seed: int = 0, final_scale: float = 0.1, dtype=np.float64) -> "MlpModel":
        """He-uniform weights, zero biases, identity batch norm."""
        widths = [int(w) for w in widths]
        if len(widths) < 2 or widths[-1] != 2:
            raise ValueError("widths must run from the input size to a 2-D output")
        rng = np.random.default_rng(seed)
        Ws, bs = [], []
        for l, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            limit = np.sqrt(6.0 / fan_in)
            W = rng.uniform(-limit, limit, (fan_in, fan_out))
            if l == len(widths) - 2:
                W *= final_scale
            Ws.append(W.astype(dtype))
            bs.append(np.zeros(fan_out, dtype=dtype))
        hidden = widths[1:-1]
        return cls(widths, Ws, bs,
                   [np.ones(n, dtype=dtype) for n in hidden],
                   [np.zeros(n, dtype=dtype) for n in hidden],
                   [np.zeros(n, dtype=dtype) for n in hidden],
                   [np.ones(n, dtype=dtype) for n in hidden])

    @classmethod
    def for_features(cls, n_inputs: int, hidden=DEFAULT_HIDDEN, **kw) -> "MlpModel":
        return cls.init([n_inputs, *hidden, 2], **kw)

    # -- parameters ------------------------------------------------------------

    @property
    def n_hidden(self) -> int:
        return len(self.widths) - 2

    def params(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order (W, b[, gamma, beta] per layer)."""
        out = []
        for l in range(len(self.weights)):
            out += [self.weights[l], self.biases[l]]
            if l < self.n_hidden:
                out += [self.gammas[l], self.betas[l]]
        return out

    def astype(self, dtype) -> "MlpModel":
        conv = lambda xs: [x.astype(dtype) for x in xs]
        m = MlpModel(self.widths, conv(self.weights), conv(self.biases), conv(self.gammas),
                     conv(self.betas), conv(self.running_mean), conv(self.running_var))
        m.feature_norm = self.feature_norm
        m.label_mean = self.label_mean.copy()
        m.label_scale = self.label_scale
        m.eps_cc = self.eps_cc
        m.meta = dict(self.meta)
        return m

    def copy(self) -> "MlpModel":
        return self.astype(self.weights[0].dtype)

    # -- forward / backward -------------------------------------------------------

    def forward(self, X: np.ndarray, train: bool = False, update_stats: bool = True,
                momentum: float = 0.9):
        """Raw network output (standardised coordinates) for standardised inputs.

        Returns ``(out, cache)``. In training mode batch statistics are used and,
        with ``update_stats``, folded into the running averages.
        """
        X = np.asarray(X)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.widths[0]:
            raise ValueError(f"expected {self.widths[0]} input features, got {X.shape[1]}")
        dtype = self.weights[0].dtype
        h = X.astype(dtype, copy=False)
        cache = []
        for l in range(self.n_hidden):
            z = h @ self.weights[l] + self.biases[l]
            if train:
                mu = z.mean(0)
                var = z.var(0)
                if update_stats:
                    n = len(z)
                    unbiased = var * n / max(n - 1, 1)
                    self.running_mean[l] = momentum * self.running_mean[l] + (1 - momentum) * mu
                    self.running_var[l] = momentum * self.running_var[l] + (1 - momentum) * unbiased
            else:
                mu, var = self.running_mean[l], self.running_var[l]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xh = (z - mu) * inv
            y = self.gammas[l] * xh + self.betas[l]
            cache.append((h, xh, inv, y > 0))
            h = np.maximum(y, 0)
        out = h @ self.weights[-1] + self.biases[-1]
        cache.append(h)
        return out, cache

    def backward(self, cache, dout: np.ndarray) -> list[np.ndarray]:
        """Gradients matching :meth:`params` for a training-mode forward pass."""
        h = cache[-1]
        grads_rev = [dout.sum(0), h.T @ dout]            # b_L, W_L (reversed order)
        dh = dout @ self.weights[-1].T
        for l in reversed(range(self.n_hidden)):
            h_in, xh, inv, active = cache[l]
            dy = dh * active
            dgamma = (dy * xh).sum(0)
            dbeta = dy.sum(0)
            dxh = dy * self.gammas[l]
            n = len(dy)
            dz = inv / n * (n * dxh - dxh.sum(0) - xh * (dxh * xh).sum(0))
            grads_rev += [dbeta, dgamma, dz.sum(0), h_in.T @ dz]
            if l > 0:
                dh = dz @ self.weights[l].T
        return grads_rev[::-1]

    # -- inference -----------------------------------------------------------------

    def to_meters(self, out: np.ndarray) -> np.ndarray:
        return out * self.label_scale + self.label_mean

    def predict(self, features: np.ndarray, batch: int = 1024) -> np.ndarray:
        """Eval-mode (x, y) predictions in meters for raw feature vectors."""
        F = np.atleast_2d(features)
        res = []
        for i in range(0, len(F), batch):
            X = F[i:i + batch]
            if self.feature_norm is not None:
                X = self.feature_norm(X.astype(self.weights[0].dtype))
            res.append(self.to_meters(self.forward(X, train=False)[0]))
        return np.vstack(res) if res else np.zeros((0, 2))


def forward(model: MlpModel, d: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Single-vector convenience wrapper returning the raw 2-D output."""
    out, _ = model.forward(d, train=(mode == "train"))
    return out[0] if np.ndim(d) == 1 else out


# -- losses ---------------------------------------------------------------------------

def loss_mse(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Mean squared Euclidean error over the (x, y) plane."""
    P = np.atleast_2d(predictions)[:, :2]
    Y = np.atleast_2d(labels)[:, :2]
    if len(P) == 0:
        raise ValueError("empty batch")
    return float(np.mean(np.sum((P - Y) ** 2, axis=1)))


def mse_and_grad(P: np.ndarray, Y: np.ndarray):
    diff = P - Y[:, :2]
    n = len(P)
    return float(np.sum(diff ** 2) / n), 2.0 * diff / n


def cosine_dissimilarity(d_i: np.ndarray, d_j: np.ndarray) -> float:
    """``1 - cos`` between the log-amplitude blocks of two feature vectors."""
    a = logamp_block(d_i)[0].astype(np.float64)
    b = logamp_block(d_j)[0].astype(np.float64)
    if a is b or np.array_equal(a, b):
        return 0.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(np.clip(1.0 - a @ b / (na * nb), 0.0, 2.0))


def dissimilarity_matrix(features: np.ndarray) -> np.ndarray:
    """Pairwise cosine dissimilarities of log-amplitude blocks (zero diagonal)."""
    A = logamp_block(features).astype(np.float64)
    norms = np.linalg.norm(A, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = A / safe[:, None]
    D = np.clip(1.0 - U @ U.T, 0.0, 2.0)
    zero = norms == 0
    D[zero, :] = 1.0
    D[:, zero] = 1.0
    np.fill_diagonal(D, 0.0)
    return D


def charting_loss_and_grad(P: np.ndarray, D: np.ndarray, eps: float,
                           anchors: np.ndarray | None = None, anchor_mask: np.ndarray | None = None):
    """Distance-preservation term plus the LoS anchor term.

    Returns ``(total, first_term, anchor_term, dL/dP, dL/d eps)``. Pairs with
    ``i == j`` or zero dissimilarity are left out of the mean.
    """
    n = len(P)
    diff = P[:, None, :] - P[None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=-1))
    valid = (D > 0) & ~np.eye(n, dtype=bool)
    npairs = int(valid.sum())
    dP = np.zeros_like(P)
    first = 0.0
    d_eps = 0.0
    if npairs:
        Dv = np.where(valid, D, 1.0)
        resid = np.where(valid, dist - eps * Dv, 0.0)
        first = float(np.sum(resid ** 2 / Dv) / npairs)
        g = 2.0 * resid / Dv / npairs                   # dL/d dist_ij
        d_eps = float(np.sum(-2.0 * resid) / npairs)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(dist[..., None] > 0, diff / dist[..., None], 0.0)
        dP += np.einsum("ij,ijk->ik", g + g.T, unit)
    anchor = 0.0
    if anchors is not None and anchor_mask is not None and np.any(anchor_mask):
        k = np.flatnonzero(anchor_mask)
        ad = P[k] - anchors[k, :2]
        anchor = float(np.sum(ad ** 2) / len(k))
        dP[k] += 2.0 * ad / len(k)
    return first + anchor, first, anchor, dP, d_eps


def loss_charting(model: MlpModel, features: np.ndarray, mb_estimates: np.ndarray,
                  identified: np.ndarray, eps_cc: float) -> float:
    """Full-dataset charting loss with eval-mode predictions."""
    P = model.predict(features)
    Xs = model.feature_norm(features.astype(np.float64)) if model.feature_norm else features
    return charting_loss_and_grad(P, dissimilarity_matrix(Xs), eps_cc,
                                  np.asarray(mb_estimates), np.asarray(identified, dtype=bool))[0]


# -- training ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


@dataclass
class TrainResult:
    model: MlpModel
    history: list[float] = field(default_factory=list)


def _label_normalisation(reference: np.ndarray):
    ref = np.asarray(reference, dtype=np.float64)[:, :2]
    mean = ref.mean(0)
    scale = float(np.sqrt(np.mean(np.sum((ref - mean) ** 2, axis=1)) / 2))
    return mean, (scale if scale > 0 else 1.0)


def train(model: MlpModel, features: np.ndarray, cfg: TrainConfig, labels: np.ndarray | None = None,
          mb_estimates: np.ndarray | None = None, identified: np.ndarray | None = None) -> TrainResult:
    """Mini-batch Adam training for one of the three regimes.

    SelfLabel and Fingerprint regress ``labels``; ChannelCharting uses the
    dissimilarity-preservation loss anchored on identified-LoS model-based
    estimates. The input model is left untouched; a trained copy is returned
    with its running batch-norm statistics frozen for inference.
    """
    dtype = np.dtype(cfg.dtype)
    X = np.asarray(features)
    n = len(X)
    model = model.astype(dtype)
    if cfg.regime is Regime.CHANNEL_CHARTING:
        if mb_estimates is None or identified is None:
            raise TrainingError("channel charting needs model-based estimates and identification flags")
        anchors = np.asarray(mb_estimates, dtype=np.float64)[:, :2]
        anchor_mask = np.asarray(identified, dtype=bool)
        if not anchor_mask.any():
            log.warning("no identified-LoS users: charting runs without the anchor term")
        reference = anchors
    else:
        if labels is None:
            raise TrainingError(f"regime {cfg.regime.value} needs labels")
        labels = np.asarray(labels, dtype=np.float64)[:, :2]
        reference = labels
    if cfg.epochs == 0:
        return TrainResult(model, [])

    if model.feature_norm is None:
        model.feature_norm = Standardizer.fit(X)
    model.label_mean, model.label_scale = _label_normalisation(reference)
    Xs = model.feature_norm(X.astype(dtype))
    D_full = dissimilarity_matrix(Xs) if cfg.regime is Regime.CHANNEL_CHARTING else None
    eps = cfg.eps_init if model.eps_cc is None else model.eps_cc
    eps_m = eps_v = 0.0

    params = model.params()
    opt = Adam(params)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        order = rng.permutation(n)
        losses, weights = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            out, cache = model.forward(Xs[idx], train=True, momentum=cfg.bn_momentum)
            P = model.to_meters(out.astype(np.float64))
            if cfg.regime is Regime.CHANNEL_CHARTING:
                loss, _, _, dP, d_eps = charting_loss_and_grad(
                    P, D_full[np.ix_(idx, idx)], eps, anchors[idx], anchor_mask[idx])
                eps_m = 0.9 * eps_m + 0.1 * d_eps
                eps_v = 0.999 * eps_v + 0.001 * d_eps ** 2
                t = opt.t + 1
                eps -= cfg.eps_learning_rate * (eps_m / (1 - 0.9 ** t)) / (np.sqrt(eps_v / (1 - 0.999 ** t)) + 1e-8)
            else:
                loss, dP = mse_and_grad(P, labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}; lower the learning rate")
            grads = model.backward(cache, (dP * model.label_scale).astype(dtype))
            opt.step(params, grads, lr)
            losses.append(loss)
            weights.append(len(idx))
        history.append(float(np.average(losses, weights=weights)))
        if (epoch + 1) % 50 == 0:
            log.info("%s epoch %d/%d: loss %.4g", cfg.regime.value, epoch + 1, cfg.epochs, history[-1])
    if cfg.regime is Regime.CHANNEL_CHARTING:
        model.eps_cc = float(eps)
    model.meta["regime"] = cfg.regime.value
    return TrainResult(model, history)


def complexity_estimate(widths, n_users: int) -> int:
    """Multiply-accumulates per epoch: ``N_u * sum(n_{l-1} * n_l)``."""
    w = [int(x) for x in widths]
    return int(n_users) * sum(a * b for a, b in zip(w[:-1], w[1:]))


# -- model file ------------------------------------------------------------------------------

def save_model(model: MlpModel, path) -> None:
    """Little-endian binary: magic, version, widths, parameters, normalisation, metadata."""
    buf = bytearray()
    buf += MODEL_MAGIC
    buf += struct.pack("<II", MODEL_VERSION, len(model.widths))
    buf += struct.pack(f"<{len(model.widths)}I", *model.widths)
    f64 = lambda a: np.ascontiguousarray(a, dtype="<f8").tobytes()
    for l in range(len(model.weights)):
        buf += f64(model.weights[l]) + f64(model.biases[l])
    for l in range(model.n_hidden):
        buf += f64(model.gammas[l]) + f64(model.betas[l])
        buf += f64(model.running_mean[l]) + f64(model.running_var[l])
    has_norm = model.feature_norm is not None
    buf += struct.pack("<B", has_norm)
    if has_norm:
        buf += f64(model.feature_norm.mean) + f64(model.feature_norm.std)
    buf += f64(model.label_mean) + struct.pack("<d", model.label_scale)
    buf += struct.pack("<Bd", model.eps_cc is not None, model.eps_cc or 0.0)
    meta = json.dumps(model.meta, sort_keys=True).encode()
    buf += struct.pack("<I", len(meta)) + meta
    Path(path).write_bytes(bytes(buf))


def load_model(path) -> MlpModel:
    data = memoryview(Path(path).read_bytes())
    if bytes(data[:4]) != MODEL_MAGIC:
        raise ValueError(f"{path} is not a UMLP model file")
    pos = 4
    version, nw = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    widths = list(struct.unpack_from(f"<{nw}I", data, pos))
    pos += 4 * nw

    def take(*shape):
        nonlocal pos
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
        return arr

    Ws, bs = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        Ws.append(take(a, b))
        bs.append(take(b))
    g, be, rm, rv = [], [], [], []
    for n in widths[1:-1]:
        g.append(take(n)); be.append(take(n)); rm.append(take(n)); rv.append(take(n))
    model = MlpModel(widths, Ws, bs, g, be, rm, rv)
    (has_norm,) = struct.unpack_from("<B", data, pos)
    pos += 1
    if has_norm:
        model.feature_norm = Standardizer(take(widths[0]), take(widths[0]))
    model.label_mean = take(2)
    (model.label_scale,) = struct.unpack_from("<d", data, pos)
    pos += 8
    has_eps, eps = struct.unpack_from("<Bd", data, pos)
    pos += 9
    model.eps_cc = eps if has_eps else None
    (mlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    model.meta = json.loads(bytes(data[pos:pos + mlen]).decode())
    return model
