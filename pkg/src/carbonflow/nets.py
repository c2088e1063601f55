"""Feedforward ReLU networks with per-connection activity masks, adaptive
moment training, and magnitude-drop / gradient-grow sparse updates.

Connections dropped on magnitude and grown on gradient keep the per-layer
active count fixed; grown weights start at exactly zero so an update event
never changes the network's output.  The first layer always stays dense.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .data import Dataset, DatasetError, _safe_range


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 40
    delta_t: int = 100          # steps between topology updates
    t_end: int | None = None    # last update step; default 80% of total steps
    alpha: float = 0.3          # initial drop fraction
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: str = "adam"     # "adam" or "sgd"

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")
        if self.delta_t < 1:
            raise ValueError("delta_t must be >= 1")
        if self.t_end is not None and self.t_end < self.delta_t:
            raise ValueError("t_end must be >= delta_t")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


@dataclass
class SparseNet:
    dims: list[int]
    weights: list[np.ndarray]       # layer l: (dims[l+1], dims[l])
    biases: list[np.ndarray]
    masks: list[np.ndarray]         # float 0/1, same shapes as weights
    sparsities: list[float]         # target drop fraction per layer
    x_min: np.ndarray
    x_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def total_weights(self) -> int:
        return sum(w.size for w in self.weights)

    @property
    def active_weights(self) -> int:
        return int(sum(m.sum() for m in self.masks))

    def copy(self) -> "SparseNet":
        return SparseNet(list(self.dims), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], [m.copy() for m in self.masks],
                         list(self.sparsities), self.x_min.copy(), self.x_max.copy(),
                         self.y_min.copy(), self.y_max.copy(), dict(self.meta))

    # normalization helpers -------------------------------------------
    def normalize_x(self, x_phys: np.ndarray) -> np.ndarray:
        return (x_phys - self.x_min) / _safe_range(self.x_min, self.x_max)

    def denormalize_y(self, y_norm: np.ndarray) -> np.ndarray:
        return y_norm * _safe_range(self.y_min, self.y_max) + self.y_min


def init_net(dims, sparsities, seed: int, x_min=None, x_max=None,
             y_min=None, y_max=None) -> SparseNet:
    """He-initialized network; sparse layers start with exactly
    ``round((1-s)*size)`` active connections chosen uniformly."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"bad layer dims {dims}")
    n_layers = len(dims) - 1
    sparsities = [float(s) for s in sparsities]
    if len(sparsities) != n_layers:
        raise ValueError("need one sparsity per weight layer")
    if any(not (0.0 <= s < 1.0) for s in sparsities):
        raise ValueError("sparsities must lie in [0, 1)")
    if sparsities[0] != 0.0:
        raise ValueError("the first layer is always dense (sparsity 0)")
    rng = np.random.default_rng(seed)
    weights, biases, masks = [], [], []
    for l in range(n_layers):
        fan_in = dims[l]
        w = rng.standard_normal((dims[l + 1], dims[l])) * math.sqrt(2.0 / fan_in)
        mask = np.ones_like(w)
        if sparsities[l] > 0.0:
            n_active = int(round((1.0 - sparsities[l]) * w.size))
            n_active = max(1, n_active)
            flat = rng.permutation(w.size)[:w.size - n_active]
            mask.flat[flat] = 0.0
        weights.append(w * mask)
        biases.append(np.zeros(dims[l + 1]))
        masks.append(mask)
    if x_min is None:
        x_min = np.zeros(dims[0])
        x_max = np.ones(dims[0])
    if y_min is None:
        y_min = np.zeros(dims[-1])
        y_max = np.ones(dims[-1])
    return SparseNet(dims, weights, biases, masks, sparsities,
                     np.asarray(x_min, dtype=float), np.asarray(x_max, dtype=float),
                     np.asarray(y_min, dtype=float), np.asarray(y_max, dtype=float))


# ----------------------------------------------------------------------
# forward / backward
# ----------------------------------------------------------------------

def forward(net: SparseNet, x: np.ndarray) -> np.ndarray:
    """Normalized-space forward pass; accepts a single vector or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    v = x.reshape(1, -1) if single else x
    if v.shape[1] != net.dims[0]:
        raise ValueError(f"input width {v.shape[1]} != {net.dims[0]}")
    for l in range(net.n_layers - 1):
        v = np.maximum(v @ net.weights[l].T + net.biases[l], 0.0)
    v = v @ net.weights[-1].T + net.biases[-1]
    return v[0] if single else v


def predict_physical(net: SparseNet, x_phys: np.ndarray) -> np.ndarray:
    return net.denormalize_y(forward(net, net.normalize_x(np.asarray(x_phys, dtype=float))))


def forward_trace(net: SparseNet, x: np.ndarray):
    """Single-sample forward pass returning per-layer pre-activations.

    Returns ``(pre_acts, y)`` with one pre-activation vector per weight layer
    (the last one is the affine output itself).
    """
    v = np.asarray(x, dtype=float)
    if v.shape != (net.dims[0],):
        raise ValueError(f"expected a single input of width {net.dims[0]}")
    pre_acts = []
    for l in range(net.n_layers):
        z = net.weights[l] @ v + net.biases[l]
        pre_acts.append(z)
        v = np.maximum(z, 0.0) if l < net.n_layers - 1 else z
    return pre_acts, v


def loss_and_grads(net: SparseNet, x: np.ndarray, y: np.ndarray):
    """Summed squared error over the batch and its gradients.

    Gradients are computed for every connection, including masked ones: the
    growth step ranks inactive connections by gradient magnitude.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if len(x) == 0:
        raise ValueError("empty batch")
    acts = [x]
    v = x
    for l in range(net.n_layers - 1):
        v = np.maximum(v @ net.weights[l].T + net.biases[l], 0.0)
        acts.append(v)
    out = v @ net.weights[-1].T + net.biases[-1]
    err = out - y
    loss = float(np.sum(err * err))
    grads_w = [None] * net.n_layers
    grads_b = [None] * net.n_layers
    delta = 2.0 * err
    for l in range(net.n_layers - 1, -1, -1):
        grads_w[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ net.weights[l]) * (acts[l] > 0.0)
    return loss, grads_w, grads_b


# ----------------------------------------------------------------------
# optimizer and topology updates
# ----------------------------------------------------------------------

class AdamState:
    def __init__(self, net: SparseNet):
        self.m_w = [np.zeros_like(w) for w in net.weights]
        self.v_w = [np.zeros_like(w) for w in net.weights]
        self.m_b = [np.zeros_like(b) for b in net.biases]
        self.v_b = [np.zeros_like(b) for b in net.biases]
        self.step = 0


def adam_step(net: SparseNet, grads_w, grads_b, state: AdamState, cfg: TrainConfig) -> None:
    """One adaptive-moment update on active connections; masked weights and
    their moments stay exactly zero."""
    state.step += 1
    t = state.step
    b1, b2, lr, eps = cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.eps
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for l in range(net.n_layers):
        mask = net.masks[l]
        gw = grads_w[l] * mask
        state.m_w[l] = b1 * state.m_w[l] + (1 - b1) * gw
        state.v_w[l] = b2 * state.v_w[l] + (1 - b2) * gw * gw
        m_hat = state.m_w[l] / corr1
        v_hat = state.v_w[l] / corr2
        net.weights[l] -= lr * mask * m_hat / (np.sqrt(v_hat) + eps)
        gb = grads_b[l]
        state.m_b[l] = b1 * state.m_b[l] + (1 - b1) * gb
        state.v_b[l] = b2 * state.v_b[l] + (1 - b2) * gb * gb
        net.biases[l] -= lr * (state.m_b[l] / corr1) / (np.sqrt(state.v_b[l] / corr2) + eps)


def sgd_step(net: SparseNet, grads_w, grads_b, cfg: TrainConfig) -> None:
    for l in range(net.n_layers):
        net.weights[l] -= cfg.learning_rate * grads_w[l] * net.masks[l]
        net.biases[l] -= cfg.learning_rate * grads_b[l]


def decay_fraction(t: int, alpha: float, t_end: int) -> float:
    """Cosine-decayed update fraction; defined for 0 <= t <= t_end."""
    if t < 0 or t > t_end:
        raise ValueError(f"update schedule ended: t={t} > t_end={t_end}")
    return (alpha / 2.0) * (1.0 + math.cos(t * math.pi / t_end))


def drop_and_grow(net: SparseNet, grads_w, t: int, cfg: TrainConfig,
                  state: AdamState | None = None) -> None:
    """One topology update: per sparse layer, drop the k smallest-magnitude
    active weights and grow the k largest-gradient inactive connections
    (initialized to zero).  The active count per layer is conserved."""
    t_end = cfg.t_end
    if t_end is None:
        raise ValueError("config.t_end must be resolved before updates")
    frac = decay_fraction(t, cfg.alpha, t_end)
    for l in range(net.n_layers):
        if net.sparsities[l] <= 0.0:
            continue
        mask = net.masks[l]
        w = net.weights[l]
        n_active = int(mask.sum())
        k = int(frac * (1.0 - net.sparsities[l]) * n_active)
        if k <= 0:
            continue
        k = min(k, n_active)
        active_idx = np.flatnonzero(mask.flat)
        # drop: smallest |w| among active, ties at the lowest flat index
        order = np.argsort(np.abs(w.flat[active_idx]), kind="stable")
        drop_idx = active_idx[order[:k]]
        mask.flat[drop_idx] = 0.0
        w.flat[drop_idx] = 0.0
        if state is not None:
            state.m_w[l].flat[drop_idx] = 0.0
            state.v_w[l].flat[drop_idx] = 0.0
        # grow: largest |grad| among currently inactive, ties at lowest index
        inactive_idx = np.flatnonzero(mask.flat == 0.0)
        k_grow = min(k, inactive_idx.size)
        gorder = np.argsort(-np.abs(grads_w[l].flat[inactive_idx]), kind="stable")
        grow_idx = inactive_idx[gorder[:k_grow]]
        mask.flat[grow_idx] = 1.0
        w.flat[grow_idx] = 0.0
        if state is not None:
            state.m_w[l].flat[grow_idx] = 0.0
            state.v_w[l].flat[grow_idx] = 0.0


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------

def train_ssgd(dataset: Dataset, dims, sparsities, cfg: TrainConfig,
               hooks=None) -> tuple[SparseNet, list[dict]]:
    """Mini-batch training with periodic drop-and-grow updates.

    ``dataset`` must be normalized; its scales are copied into the returned
    net.  The history holds one record per epoch (mean sample MSE in
    normalized space).
    """
    if not dataset.normalized:
        raise DatasetError("train_ssgd expects a normalized dataset")
    if dims[0] != dataset.n_features or dims[-1] != dataset.n_outputs:
        raise ValueError(f"dims {dims} do not match dataset "
                         f"({dataset.n_features} -> {dataset.n_outputs})")
    cfg = TrainConfig(**{**cfg.__dict__})
    net = init_net(dims, sparsities, cfg.seed,
                   dataset.x_min, dataset.x_max, dataset.y_min, dataset.y_max)
    n = len(dataset)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.t_end is None:
        cfg.t_end = max(cfg.delta_t, int(0.8 * total_steps))
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(net)
    any_sparse = any(s > 0.0 for s in sparsities)
    history: list[dict] = []
    t = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for bstart in range(0, n, cfg.batch_size):
            idx = perm[bstart:bstart + cfg.batch_size]
            xb, yb = dataset.x[idx], dataset.y[idx]
            t += 1
            loss, gw, gb = loss_and_grads(net, xb, yb)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at step {t}; learning rate {cfg.learning_rate}")
            epoch_loss += loss
            if any_sparse and t % cfg.delta_t == 0 and t <= cfg.t_end:
                drop_and_grow(net, gw, t, cfg, state)
            elif cfg.optimizer == "adam":
                adam_step(net, gw, gb, state, cfg)
            else:
                sgd_step(net, gw, gb, cfg)
            if hooks is not None:
                hooks(net, t)
        history.append({"epoch": epoch,
                        "mean_mse": epoch_loss / (n * dataset.n_outputs)})
    net.meta.update({
        "dataset_hash": dataset.content_hash(),
        "case_hash": dataset.meta.get("case_hash"),
        "kind": dataset.meta.get("kind"),
        "seed": cfg.seed,
        "feature_labels": dataset.feature_labels,
        "output_labels": dataset.output_labels,
    })
    return net, history


# ----------------------------------------------------------------------
# metrics and persistence
# ----------------------------------------------------------------------

def sparsity_rate(net: SparseNet) -> float:
    """Inactive weight fraction, biases excluded."""
    total = net.total_weights
    return (total - net.active_weights) / total if total else 0.0


def eval_metrics(net: SparseNet, ds: Dataset, mape_eps: float = 1e-9) -> dict:
    """MSE/RMSE/MAPE/R2 in physical units on a (normalized) dataset split."""
    if len(ds) == 0:
        raise DatasetError("empty evaluation split")
    if ds.normalized:
        y_true = ds.y * _safe_range(ds.y_min, ds.y_max) + ds.y_min
        y_pred = net.denormalize_y(forward(net, ds.x))
    else:
        y_true = ds.y
        y_pred = predict_physical(net, ds.x)
    err = y_pred - y_true
    mse = float(np.mean(err * err))
    nonzero = np.abs(y_true) > mape_eps
    skipped = int(y_true.size - nonzero.sum())
    mape = float(np.mean(np.abs(err[nonzero] / y_true[nonzero]))) if nonzero.any() else math.nan
    ss_res = float(np.sum(err * err))
    ss_tot = float(np.sum((y_true - y_true.mean(axis=0)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -math.inf)
    return {"mse": mse, "rmse": math.sqrt(mse), "mape": mape, "r2": r2,
            "mape_skipped": skipped}


def save_model(net: SparseNet, path) -> None:
    payload = {
        "dims": net.dims,
        "sparsities": net.sparsities,
        "x_min": net.x_min.tolist(), "x_max": net.x_max.tolist(),
        "y_min": net.y_min.tolist(), "y_max": net.y_max.tolist(),
        "biases": [b.tolist() for b in net.biases],
        "weights": [
            [[int(r), int(c), float(net.weights[l][r, c])]
             for r, c in zip(*np.nonzero(net.masks[l]))]
            for l in range(net.n_layers)
        ],
        "meta": net.meta,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    payload["content_hash"] = hashlib.sha256(blob.encode()).hexdigest()
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_model(path) -> SparseNet:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    stored_hash = payload.pop("content_hash", None)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    if stored_hash is not None and hashlib.sha256(blob.encode()).hexdigest() != stored_hash:
        raise ValueError(f"model file {path} failed its content hash check")
    dims = [int(d) for d in payload["dims"]]
    n_layers = len(dims) - 1
    weights = [np.zeros((dims[l + 1], dims[l])) for l in range(n_layers)]
    masks = [np.zeros((dims[l + 1], dims[l])) for l in range(n_layers)]
    for l, triplets in enumerate(payload["weights"]):
        for r, c, val in triplets:
            weights[l][int(r), int(c)] = float(val)
            masks[l][int(r), int(c)] = 1.0
    biases = [np.asarray(b, dtype=float) for b in payload["biases"]]
    return SparseNet(dims, weights, biases, masks,
                     [float(s) for s in payload["sparsities"]],
                     np.asarray(payload["x_min"], dtype=float),
                     np.asarray(payload["x_max"], dtype=float),
                     np.asarray(payload["y_min"], dtype=float),
                     np.asarray(payload["y_max"], dtype=float),
                     payload.get("meta", {}))


# ----------------------------------------------------------------------
# estimator API
# ----------------------------------------------------------------------

class SparseReluRegressor(BaseEstimator, RegressorMixin):
    """Scikit-learn style wrapper around the sparse trainer.

    ``fit`` min-max scales inputs and targets, trains with drop-and-grow
    updates on the hidden-to-hidden/output layers, and stores the trained
    :class:`SparseNet` as ``net_``.  ``predict`` works in physical units.
    """

    def __init__(self, hidden_dims=(32,), sparsity=0.5, learning_rate=1e-3,
                 batch_size=32, epochs=40, delta_t=100, t_end=None, alpha=0.3,
                 seed=0, optimizer="adam"):
        self.hidden_dims = hidden_dims
        self.sparsity = sparsity
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.delta_t = delta_t
        self.t_end = t_end
        self.alpha = alpha
        self.seed = seed
        self.optimizer = optimizer

    def _check_xy(self, x, y=None):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise ValueError("X must be 2-dimensional")
        if not np.isfinite(x).all():
            raise ValueError("X contains non-finite values")
        if y is None:
            return x
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if len(y) != len(x):
            raise ValueError("X and y row counts differ")
        if not np.isfinite(y).all():
            raise ValueError("y contains non-finite values")
        return x, y

    def fit(self, X, y):
        self._y_was_1d = np.asarray(y).ndim == 1
        X, y = self._check_xy(X, y)
        ds = Dataset(X, y, np.zeros(len(X), dtype=int), np.arange(len(X)),
                     [f"x_{i}" for i in range(X.shape[1])],
                     [f"y_{i}" for i in range(y.shape[1])], {"kind": "estimator"})
        from .data import normalize
        ds = normalize(ds)
        dims = [X.shape[1], *map(int, self.hidden_dims), y.shape[1]]
        sparsities = [0.0] + [float(self.sparsity)] * (len(dims) - 2)
        cfg = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                          epochs=self.epochs, delta_t=self.delta_t, t_end=self.t_end,
                          alpha=self.alpha, seed=self.seed, optimizer=self.optimizer)
        self.net_, self.history_ = train_ssgd(ds, dims, sparsities, cfg)
        return self

    def predict(self, X):
        if not hasattr(self, "net_"):
            raise RuntimeError("estimator is not fitted")
        X = self._check_xy(X)
        out = predict_physical(self.net_, X)
        return out.ravel() if getattr(self, "_y_was_1d", False) and out.shape[1] == 1 else out
