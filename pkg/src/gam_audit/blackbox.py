"""A small opaque predictor, and auditing it through its predictions alone.

The stub is a one-hidden-layer ReLU network trained by minibatch SGD with
momentum on squared error. The auditor never looks at its weights: it sees
only the inputs it was queried with and the scores it returned.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import Dataset, ScalingParams, pearson_rank, split_by_group
from .detect import DetectionConfig, DetectionReport, detect
from .errors import ConfigError, DataError, PredictionError, TrainingError

log = logging.getLogger(__name__)

HIDDEN = 64
EPOCHS = 30
LEARNING_RATE = 0.01
MOMENTUM = 0.9
BATCH_SIZE = 256
MIN_SCORE, MAX_SCORE = 0, 4
YHAT = "yhat"


@dataclass(frozen=True, eq=False)
class StubModel:
    features: tuple[str, ...]
    W1: np.ndarray  # (n_in, hidden)
    b1: np.ndarray
    W2: np.ndarray  # (hidden,)
    b2: float
    scaling: ScalingParams
    epochs: int = EPOCHS
    lr: float = LEARNING_RATE
    seed: int = 1
    losses: tuple[float, ...] = ()

    def __post_init__(self):
        if self.W1.shape != (len(self.features), len(self.b1)) or self.W2.shape != self.b1.shape:
            raise ConfigError("stub weight shapes do not match the feature list")
        for arr in (self.W1, self.b1, self.W2, np.asarray(self.b2)):
            if not np.all(np.isfinite(arr)):
                raise ConfigError("stub parameters must be finite")

    @property
    def hidden(self) -> int:
        return len(self.b1)

    def to_dict(self):
        return {
            "features": list(self.features),
            "hidden": self.hidden,
            "W1": self.W1.tolist(),
            "b1": self.b1.tolist(),
            "W2": self.W2.tolist(),
            "b2": self.b2,
            "scaling": self.scaling.to_dict(),
            "training": {"epochs": self.epochs, "lr": self.lr, "seed": self.seed, "momentum": MOMENTUM,
                         "batch_size": BATCH_SIZE, "losses": list(self.losses)},
        }

    @classmethod
    def from_dict(cls, payload):
        try:
            tr = payload.get("training", {})
            return cls(
                features=tuple(payload["features"]),
                W1=np.asarray(payload["W1"], dtype=float).reshape(len(payload["features"]), -1),
                b1=np.asarray(payload["b1"], dtype=float),
                W2=np.asarray(payload["W2"], dtype=float),
                b2=float(payload["b2"]),
                scaling=ScalingParams.from_dict(payload["scaling"]),
                epochs=int(tr.get("epochs", EPOCHS)),
                lr=float(tr.get("lr", LEARNING_RATE)),
                seed=int(tr.get("seed", 1)),
                losses=tuple(tr.get("losses", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid stub model: {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"model file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _forward(W1, b1, W2, b2, Z):
    H = np.maximum(Z @ W1 + b1, 0.0)
    return H @ W2 + b2, H


def _scaled_inputs(d: Dataset, features, scaling: ScalingParams | None = None):
    cols = []
    for name in features:
        try:
            x = d.columns[name]
        except KeyError:
            raise PredictionError(f"input column {name!r} is missing") from None
        cols.append(scaling.forward(name, x) if scaling is not None else x)
    return np.column_stack(cols) if cols else np.empty((d.n_rows, 0))


def train_stub(
    train: Dataset,
    features: Sequence[str] | None = None,
    epochs: int = EPOCHS,
    lr: float = LEARNING_RATE,
    seed: int = 1,
    hidden: int = HIDDEN,
) -> StubModel:
    """Fit the stub to ``train.label`` with seeded minibatch SGD (momentum 0.9, batch 256).

    Inputs are z-scored with the training mean and sd, which are stored in the
    model so that prediction takes raw feature values.
    """
    features = tuple(features if features is not None else train.feature_names)
    if not features:
        raise ConfigError("the stub needs at least one input feature")
    if epochs < 1 or not lr > 0 or hidden < 1:
        raise ConfigError("epochs, lr and hidden width must be positive")
    params = {}
    for name in features:
        x = train.column(name)
        sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
        params[name] = (float(np.mean(x)), sd if sd > 0 else 1.0)
    scaling = ScalingParams(params)
    Z = _scaled_inputs(train, features, scaling)
    y = np.asarray(train.label, dtype=float)
    n, p = Z.shape

    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((p, hidden)) * np.sqrt(2.0 / p)
    b1 = np.zeros(hidden)
    W2 = rng.standard_normal(hidden) * np.sqrt(2.0 / hidden)
    b2 = float(y.mean())
    losses = []
    with np.errstate(over="ignore", invalid="ignore"):
        W1, b1, W2, b2 = _sgd(Z, y, W1, b1, W2, b2, epochs, lr, rng, losses)
    return StubModel(features, W1, b1, W2, float(b2), scaling, epochs, lr, seed, tuple(losses))


def _sgd(Z, y, W1, b1, W2, b2, epochs, lr, rng, losses):
    n = len(y)
    vel = [np.zeros_like(W1), np.zeros_like(b1), np.zeros_like(W2), 0.0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, BATCH_SIZE):
            idx = order[start:start + BATCH_SIZE]
            zb, yb = Z[idx], y[idx]
            out, H = _forward(W1, b1, W2, b2, zb)
            err = out - yb
            total += float(err @ err)
            g_out = 2.0 * err / len(idx)
            gW2 = H.T @ g_out
            gb2 = float(g_out.sum())
            g_h = np.outer(g_out, W2) * (H > 0)
            gW1 = zb.T @ g_h
            gb1 = g_h.sum(axis=0)
            vel[0] = MOMENTUM * vel[0] - lr * gW1
            vel[1] = MOMENTUM * vel[1] - lr * gb1
            vel[2] = MOMENTUM * vel[2] - lr * gW2
            vel[3] = MOMENTUM * vel[3] - lr * gb2
            W1 = W1 + vel[0]
            b1 = b1 + vel[1]
            W2 = W2 + vel[2]
            b2 = b2 + vel[3]
        loss = total / n
        if not np.isfinite(loss):
            raise TrainingError(f"training diverged in epoch {epoch + 1}; try a smaller learning rate than {lr}")
        losses.append(loss)
        log.debug("epoch %d: mse %.6f", epoch + 1, loss)
    return W1, b1, W2, b2


def _as_matrix(m: StubModel, X, ablate: Sequence[str] = ()):
    if isinstance(X, Dataset):
        Z = _scaled_inputs(X, m.features, m.scaling)
    elif isinstance(X, Mapping):
        missing = [f for f in m.features if f not in X]
        if missing:
            raise PredictionError(f"input columns missing: {missing}")
        Z = np.column_stack([m.scaling.forward(f, np.asarray(X[f], dtype=float)) for f in m.features])
    else:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(m.features):
            raise PredictionError(f"expected {len(m.features)} input columns, got {X.shape[1]}")
        Z = np.column_stack([m.scaling.forward(f, X[:, j]) for j, f in enumerate(m.features)])
    for name in ablate:
        Z[:, m.features.index(name)] = 0.0
    return Z


def round_scores(pred) -> np.ndarray:
    """Nearest integer score (halves away from zero), clamped to [0, 4]."""
    pred = np.asarray(pred, dtype=float)
    return np.clip(np.floor(pred + 0.5), MIN_SCORE, MAX_SCORE).astype(int)


def predict_stub(m: StubModel, X, rounded: bool = False, ablate: Sequence[str] = ()) -> np.ndarray:
    """Raw network output, or the clamped integer score when ``rounded``."""
    out, _ = _forward(m.W1, m.b1, m.W2, m.b2, _as_matrix(m, X, ablate))
    return round_scores(out) if rounded else out


def accuracy(m: StubModel, d: Dataset, ablate: Sequence[str] = ()) -> float:
    return float(np.mean(predict_stub(m, d, rounded=True, ablate=ablate) == d.label))


def score_histogram(scores) -> list[int]:
    return np.bincount(np.asarray(scores, dtype=int), minlength=MAX_SCORE + 1).tolist()


@dataclass(frozen=True)
class AblationReport:
    feature: str
    n_rows: int
    accuracy_before: float
    accuracy_after: float
    majority_share: float
    histogram_before: list[int]
    histogram_after: list[int]

    @property
    def mode_share_after(self) -> float:
        return max(self.histogram_after) / self.n_rows

    @property
    def mode_after(self) -> int:
        return int(np.argmax(self.histogram_after))

    def to_dict(self):
        return {
            "feature": self.feature,
            "n_rows": self.n_rows,
            "accuracy_before": self.accuracy_before,
            "accuracy_after": self.accuracy_after,
            "majority_share": self.majority_share,
            "histogram_before": self.histogram_before,
            "histogram_after": self.histogram_after,
            "mode_after": self.mode_after,
            "mode_share_after": self.mode_share_after,
        }

    def to_text(self) -> str:
        lines = [
            f"ablation of {self.feature!r} (standardized value set to 0) on {self.n_rows} rows",
            f"accuracy before: {self.accuracy_before:.4f}",
            f"accuracy after:  {self.accuracy_after:.4f}",
            f"majority-class share of labels: {self.majority_share:.4f}",
            "",
            "score  before  after",
        ]
        for s, (a, b) in enumerate(zip(self.histogram_before, self.histogram_after)):
            lines.append(f"{s:>5}  {a:>6}  {b:>5}")
        lines.append(f"score {self.mode_after} takes {100 * self.mode_share_after:.1f}% of ablated predictions")
        return "\n".join(lines) + "\n"


def ablate(m: StubModel, test: Dataset, feature: str) -> AblationReport:
    """Re-score ``test`` with ``feature`` pinned at its training mean (z = 0).

    A column absent from ``test`` raises :class:`DataError`. A column present
    in the data but not among the model inputs leaves predictions unchanged.
    """
    if feature not in test.columns:
        raise DataError(f"unknown feature {feature!r}")
    before = predict_stub(m, test, rounded=True)
    after = predict_stub(m, test, rounded=True, ablate=[feature] if feature in m.features else [])
    if feature not in m.features:
        log.info("feature %r is not a model input; ablation leaves predictions unchanged", feature)
    labels = np.asarray(test.label)
    _, counts = np.unique(labels, return_counts=True)
    return AblationReport(
        feature=feature,
        n_rows=test.n_rows,
        accuracy_before=float(np.mean(before == labels)),
        accuracy_after=float(np.mean(after == labels)),
        majority_share=float(counts.max() / len(labels)),
        histogram_before=score_histogram(before),
        histogram_after=score_histogram(after),
    )


@dataclass(frozen=True)
class AuditDataset:
    """Inputs the black box was queried with, and what it returned."""

    inputs: Dataset
    yhat: np.ndarray = field(repr=False)

    def __post_init__(self):
        yhat = np.asarray(self.yhat, dtype=float)
        if len(yhat) != self.inputs.n_rows:
            raise DataError("need exactly one prediction per input row")
        if not np.all(np.isfinite(yhat)):
            raise DataError("predictions must be finite")

    def as_dataset(self) -> Dataset:
        return self.inputs.with_label(self.yhat, name=YHAT)


def audit_dataset(inputs: Dataset, predictions) -> AuditDataset:
    """Pair inputs with predictions; any gold label carried by ``inputs`` is discarded."""
    return AuditDataset(replace(inputs, label=np.zeros(inputs.n_rows), label_name=YHAT), predictions)


def audit(
    inputs: Dataset,
    predictions,
    cfg: DetectionConfig = DetectionConfig(),
    candidates: Sequence[str] | None = None,
) -> DetectionReport:
    """Run detection with the predictions as target.

    Candidates are the ``cfg.max_candidates`` features most correlated (in
    absolute value) with the predictions over the whole audit set, unless
    given explicitly.
    """
    data = audit_dataset(inputs, predictions).as_dataset()
    if candidates is None:
        candidates = pearson_rank(data, data.label, cfg.max_candidates).names
    train, held = split_by_group(data, cfg.test_fraction, cfg.seed)
    return detect(train, held, cfg, candidates)
