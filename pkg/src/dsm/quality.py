"""Defect-risk quality pipeline: dataset assembly, logistic model training,
risk scoring, and machine-parameter recommendation.

The model is an L2-regularized logistic regression trained by full-batch
gradient descent. Inputs are standardized per feature using moments from
the training rows only. Everything here is deterministic: same inputs,
same model, bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DsmError

log = logging.getLogger(__name__)


class SingleClass(DsmError):
    pass


class TooFewRecords(DsmError):
    pass


class NonFiniteLoss(DsmError):
    def __init__(self, epoch, trace):
        self.epoch = epoch
        self.trace = trace
        super().__init__(f"training loss became non-finite at epoch {epoch}")


class MissingFeature(DsmError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"missing feature '{name}'")


class InvalidModelFile(DsmError):
    pass


MIN_DATASET_ROWS = 20

DEFAULT_LR = 0.1
DEFAULT_L2 = 1e-3
DEFAULT_EPOCHS = 2000
DEFAULT_THRESHOLD = 0.7


@dataclass(frozen=True)
class SessionRecord:
    """One labeled (or unlabeled) feature row from a recorded trimming session."""

    features: dict
    session_id: str
    t_us: int
    label: int | None = None


@dataclass
class QualityModel:
    feature_names: list
    mu: np.ndarray
    sigma: np.ndarray
    w: np.ndarray
    b: float
    threshold: float = DEFAULT_THRESHOLD
    version: str = "v1"
    trained_on: list = field(default_factory=list)
    created_at: str = ""

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        n = len(self.feature_names)
        if not (len(self.w) == len(self.mu) == len(self.sigma) == n):
            raise InvalidModelFile("feature_names, mu, sigma, w must have equal length")
        if n and self.sigma.min() <= 0:
            raise InvalidModelFile("all sigma must be > 0")
        if not (0.0 < self.threshold < 1.0):
            raise InvalidModelFile("threshold must be in (0, 1)")


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=float)))


def build_dataset(records, min_rows: int = MIN_DATASET_ROWS):
    """Assemble (X, y, feature_names, mu, sigma) from labeled session records.

    Columns follow sorted feature names; constant features are dropped with a
    warning (their sigma would be zero). X is standardized to zero mean and
    unit variance per column using moments of these rows.
    """
    records = list(records)
    if len(records) < min_rows:
        raise TooFewRecords(f"need >= {min_rows} records, got {len(records)}")
    labels = [r.label for r in records]
    if any(l is None for l in labels):
        raise TooFewRecords("all records must be labeled")
    if len(set(labels)) < 2:
        raise SingleClass("both classes must be present")

    names = sorted(records[0].features)
    for r in records:
        if sorted(r.features) != names:
            missing = set(names) ^ set(r.features)
            raise MissingFeature(sorted(missing)[0])

    x_full = np.array([[r.features[n] for n in names] for r in records], dtype=float)
    y = np.array(labels, dtype=float)

    keep, dropped = [], []
    for j, n in enumerate(names):
        if x_full[:, j].std() == 0.0:
            dropped.append(n)
        else:
            keep.append(j)
    if dropped:
        log.warning("dropping constant features: %s", ", ".join(dropped))
    names = [names[j] for j in keep]
    x = x_full[:, keep]

    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    x_std = (x - mu) / sigma
    return x_std, y, names, mu, sigma, dropped


def log_loss(x, y, w, b, l2):
    """Regularized mean log loss at (w, b) on standardized rows."""
    p = sigmoid(x @ w + b)
    eps = 1e-12
    ce = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
    return float(ce + 0.5 * l2 * float(w @ w))


def loss_gradient(x, y, w, b, l2):
    """Analytic gradient of the regularized log loss: (dL/dw, dL/db)."""
    n = x.shape[0]
    p = sigmoid(x @ w + b)
    gw = x.T @ (p - y) / n + l2 * w
    gb = float(np.mean(p - y))
    return gw, gb


def train_logistic(
    x,
    y,
    lr: float = DEFAULT_LR,
    l2: float = DEFAULT_L2,
    epochs: int = DEFAULT_EPOCHS,
):
    """Full-batch gradient descent from w=0, b=0. Returns (w, b, loss_trace)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise DsmError("x must be (n, d) and y must be (n,)")
    if lr <= 0 or l2 < 0:
        raise DsmError("lr must be > 0 and l2 >= 0")

    w = np.zeros(x.shape[1])
    b = 0.0
    trace = []
    for epoch in range(epochs):
        loss = log_loss(x, y, w, b, l2)
        if not math.isfinite(loss):
            raise NonFiniteLoss(epoch, trace)
        trace.append(loss)
        gw, gb = loss_gradient(x, y, w, b, l2)
        w = w - lr * gw
        b = b - lr * gb
    trace.append(log_loss(x, y, w, b, l2))
    return w, b, trace


def fit_quality_model(
    records,
    lr: float = DEFAULT_LR,
    l2: float = DEFAULT_L2,
    epochs: int = DEFAULT_EPOCHS,
    threshold: float = DEFAULT_THRESHOLD,
    version: str = "v1",
):
    """End-to-end phase-1 training: dataset, descent, packaged model."""
    x, y, names, mu, sigma, _ = build_dataset(records)
    w, b, trace = train_logistic(x, y, lr=lr, l2=l2, epochs=epochs)
    sessions = sorted({r.session_id for r in records})
    model = QualityModel(
        feature_names=names,
        mu=mu,
        sigma=sigma,
        w=w,
        b=b,
        threshold=threshold,
        version=version,
        trained_on=sessions,
        created_at=_deterministic_stamp(records),
    )
    return model, trace


def _deterministic_stamp(records) -> str:
    # Artifact timestamps come from the data's own timeline so retraining the
    # same inputs reproduces the file byte for byte.
    t = max((r.t_us for r in records), default=0)
    return f"t_us:{t}"


def _risk_row(model: QualityModel, row: np.ndarray) -> float:
    z = float((row - model.mu) / model.sigma @ model.w) + model.b
    return float(sigmoid(z))


def predict_risk(model: QualityModel, features: dict) -> float:
    """Defect risk in [0, 1] for one feature map."""
    row = np.empty(len(model.feature_names))
    for j, name in enumerate(model.feature_names):
        if name not in features:
            raise MissingFeature(name)
        row[j] = features[name]
    return _risk_row(model, row)


def predict_risk_batch(model: QualityModel, x_raw) -> np.ndarray:
    """Risk for rows ordered by model.feature_names.

    Applies the same per-row kernel as predict_risk so batch and single
    scoring agree bit for bit.
    """
    x = np.atleast_2d(np.asarray(x_raw, dtype=float))
    return np.array([_risk_row(model, row) for row in x])


def recommend_parameters(model: QualityModel, context: dict, grid, predictor):
    """Pick the grid candidate (spindle_rpm, feed_mm_s) minimizing predicted risk.

    `predictor(context, rpm, feed)` must return the full feature map the model
    scores. Ties break toward lower feed, then lower rpm.
    """
    grid = list(grid)
    if not grid:
        raise DsmError("candidate grid is empty")
    best = None
    for rpm, feed in grid:
        risk = predict_risk(model, predictor(context, rpm, feed))
        key = (risk, feed, rpm)
        if best is None or key < best[0]:
            best = (key, (rpm, feed), risk)
    return best[1], best[2]


def auc_score(y_true, scores) -> float:
    """Area under the ROC curve by the rank statistic (ties averaged)."""
    y = np.asarray(y_true, dtype=float)
    s = np.asarray(scores, dtype=float)
    pos = s[y == 1]
    neg = s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClass("AUC needs both classes")
    order = np.argsort(np.concatenate([neg, pos]), kind="mergesort")
    ranks = np.empty(order.size, dtype=float)
    sorted_scores = np.concatenate([neg, pos])[order]
    # average ranks over tied groups
    i = 0
    while i < order.size:
        j = i
        while j + 1 < order.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum_pos = ranks[len(neg):].sum()
    u = rank_sum_pos - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


# --------------------------------------------------------------------------
# Model file I/O (JSON, round-trips bit for bit)
# --------------------------------------------------------------------------

def model_to_doc(model: QualityModel) -> dict:
    return {
        "version": model.version,
        "feature_names": list(model.feature_names),
        "mu": model.mu.tolist(),
        "sigma": model.sigma.tolist(),
        "w": model.w.tolist(),
        "b": model.b,
        "threshold": model.threshold,
        "trained_on": list(model.trained_on),
        "created_at": model.created_at,
    }


def model_from_doc(doc: dict) -> QualityModel:
    required = {"version", "feature_names", "mu", "sigma", "w", "b", "threshold", "trained_on", "created_at"}
    if not isinstance(doc, dict) or set(doc) != required:
        raise InvalidModelFile(f"model document must have exactly keys {sorted(required)}")
    try:
        model = QualityModel(
            feature_names=list(doc["feature_names"]),
            mu=doc["mu"],
            sigma=doc["sigma"],
            w=doc["w"],
            b=float(doc["b"]),
            threshold=float(doc["threshold"]),
            version=str(doc["version"]),
            trained_on=list(doc["trained_on"]),
            created_at=str(doc["created_at"]),
        )
    except InvalidModelFile:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidModelFile(str(exc)) from exc
    for arr in (model.mu, model.sigma, model.w):
        if arr.size and not np.isfinite(arr).all():
            raise InvalidModelFile("non-finite model coefficients")
    return model


def save_model(model: QualityModel, path) -> None:
    data = json.dumps(model_to_doc(model), ensure_ascii=False, separators=(",", ":"), allow_nan=False)
    with open(path, "w", encoding="utf-8") as f:
        f.write(data + "\n")


def load_model(path) -> QualityModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidModelFile(str(exc)) from exc
    return model_from_doc(doc)


def split_sessions(session_ids, holdout_every: int = 5):
    """Fixed 80/20 split by session id: every 5th sorted session is held out."""
    ordered = sorted(set(session_ids))
    holdout = {s for i, s in enumerate(ordered) if i % holdout_every == holdout_every - 1}
    train = [s for s in ordered if s not in holdout]
    return train, sorted(holdout)
