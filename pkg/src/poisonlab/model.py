"""Hashed n-gram features and a softmax linear text classifier.

The classifier trains with plain minibatch SGD on cross-entropy, either
against hard integer labels or against soft label distributions (vote
fractions).  Both paths share one schedule, so one-hot soft labels
reproduce hard training bit for bit.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .corpus import Example, LabeledDataset, TokenSequence
from .errors import ConfigError, CorruptModel, DegenerateDataset, VersionMismatch
from .hashing import fnv1a64_str

MODEL_MAGIC = b"PLAB"
MODEL_VERSION = 1

DEFAULT_NUM_BUCKETS = 1 << 18
DEFAULT_NGRAM_ORDERS = (1, 2)


def _check_buckets(num_buckets):
    if num_buckets < 2 or num_buckets & (num_buckets - 1):
        raise ConfigError("num_buckets must be a power of two >= 2")


@dataclass
class FeatureVector:
    """Sparse L2-normalized counts over hashed n-gram buckets."""

    indices: np.ndarray  # sorted unique int64 bucket ids
    values: np.ndarray  # float64, unit L2 norm for non-empty inputs


def featurize(ts: TokenSequence, num_buckets=DEFAULT_NUM_BUCKETS, ngram_orders=DEFAULT_NGRAM_ORDERS) -> FeatureVector:
    """Hash n-grams (joined with single spaces) into buckets via FNV-1a64."""
    _check_buckets(num_buckets)
    counts = Counter()
    for order in ngram_orders:
        for start in range(len(ts) - order + 1):
            gram = " ".join(ts[start : start + order])
            counts[fnv1a64_str(gram) % num_buckets] += 1
    if not counts:
        return FeatureVector(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
    indices = np.array(sorted(counts), dtype=np.int64)
    values = np.array([counts[i] for i in indices], dtype=np.float64)
    values /= np.linalg.norm(values)
    return FeatureVector(indices, values)


@dataclass
class LinearTextClassifier:
    """Dense multinomial softmax model over hashed n-gram features."""

    weights: np.ndarray  # (num_classes, num_buckets) float64
    bias: np.ndarray  # (num_classes,) float64
    num_buckets: int
    ngram_orders: tuple = DEFAULT_NGRAM_ORDERS
    version: int = MODEL_VERSION

    @property
    def num_classes(self):
        return self.weights.shape[0]

    def featurize(self, ts: TokenSequence) -> FeatureVector:
        return featurize(ts, self.num_buckets, self.ngram_orders)

    def predict_proba(self, fv: FeatureVector) -> np.ndarray:
        if len(fv.indices) and fv.indices[-1] >= self.num_buckets:
            raise ConfigError("feature index exceeds num_buckets")
        logits = self.weights[:, fv.indices] @ fv.values + self.bias
        return softmax(logits)

    def predict(self, fv: FeatureVector) -> int:
        # np.argmax breaks ties by the lowest class index.
        return int(np.argmax(self.predict_proba(fv)))

    def predict_tokens(self, ts: TokenSequence) -> int:
        return self.predict(self.featurize(ts))

    def predict_example(self, ex: Example) -> int:
        return self.predict_tokens(ex.tokens())


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / e.sum()


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    learning_rate: float = 0.5
    lr_decay: float = 0.0
    l2_penalty: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    num_buckets: int = DEFAULT_NUM_BUCKETS
    ngram_orders: tuple = DEFAULT_NGRAM_ORDERS

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.lr_decay < 0 or self.l2_penalty < 0:
            raise ConfigError("lr_decay and l2_penalty must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        _check_buckets(self.num_buckets)
        if not self.ngram_orders or any(o not in (1, 2) for o in self.ngram_orders):
            raise ConfigError("ngram_orders must be a non-empty subset of {1, 2}")

    def with_seed(self, seed):
        return replace(self, seed=seed)


def feature_matrix(sequences, cfg: TrainConfig) -> sp.csr_matrix:
    """Stack featurized sequences into a CSR matrix of shape (n, num_buckets)."""
    data, cols, indptr = [], [], [0]
    for ts in sequences:
        fv = featurize(ts, cfg.num_buckets, cfg.ngram_orders)
        data.append(fv.values)
        cols.append(fv.indices)
        indptr.append(indptr[-1] + len(fv.indices))
    if not data:
        return sp.csr_matrix((0, cfg.num_buckets))
    return sp.csr_matrix(
        (np.concatenate(data), np.concatenate(cols), np.array(indptr)),
        shape=(len(sequences), cfg.num_buckets),
    )


def _sgd(x: sp.csr_matrix, cfg: TrainConfig, num_classes, residual_fn) -> LinearTextClassifier:
    """Shared SGD loop; residual_fn(probs, batch_rows) returns P minus targets.

    Learning rate decays as lr0 / (1 + lr_decay * t) over global update steps.
    The cross-entropy gradient only touches the batch's feature columns, so
    the update scatters into those columns; the l2 term decays the full
    matrix in place.
    """
    n = x.shape[0]
    # Weights live transposed (buckets x classes, contiguous) so the sparse
    # product below needs no copy, and the l2 decay folds into a scalar
    # (w = scale * raw) instead of touching every weight per step.
    raw = np.zeros((cfg.num_buckets, num_classes))
    scale = 1.0
    b = np.zeros(num_classes)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            rows = order[lo : lo + cfg.batch_size]
            xb = x[rows]
            nb = len(rows)
            probs = _softmax_rows(scale * (xb @ raw) + b)
            resid = residual_fn(probs, rows)
            lr = cfg.learning_rate / (1.0 + cfg.lr_decay * step)
            # per-feature contributions: value * residual row, summed per column
            nnz_rows = np.repeat(np.arange(nb), np.diff(xb.indptr))
            cols, inv = np.unique(xb.indices, return_inverse=True)
            grad = np.zeros((len(cols), num_classes))
            np.add.at(grad, inv, xb.data[:, None] * resid[nnz_rows])
            if cfg.l2_penalty:
                scale *= 1.0 - lr * cfg.l2_penalty
                if scale < 1e-150:
                    raw *= scale
                    scale = 1.0
            raw[cols, :] -= (lr / (nb * scale)) * grad
            b -= lr * resid.mean(axis=0)
            step += 1
    return LinearTextClassifier(np.ascontiguousarray(scale * raw.T), b, cfg.num_buckets, tuple(cfg.ngram_orders))


def train_hard(ds: LabeledDataset, cfg: TrainConfig) -> LinearTextClassifier:
    """Minibatch SGD on cross-entropy + l2_penalty * ||W||^2 / 2."""
    cfg.validate()
    if len(ds) == 0:
        raise DegenerateDataset("empty training set")
    y = ds.labels()
    if len(np.unique(y)) < 2:
        raise DegenerateDataset("training set contains a single class")
    x = feature_matrix([ex.tokens() for ex in ds.examples], cfg)

    def residual(probs, rows):
        resid = probs.copy()
        resid[np.arange(len(rows)), y[rows]] -= 1.0
        return resid

    return _sgd(x, cfg, ds.num_classes, residual)


def check_soft_labels(soft: np.ndarray):
    soft = np.asarray(soft, dtype=np.float64)
    if soft.ndim != 1 or len(soft) < 2:
        raise ConfigError("soft label must be a vector over >= 2 classes")
    if np.any(soft < -1e-12) or np.any(soft > 1.0 + 1e-12):
        raise ConfigError("soft label entries must lie in [0, 1]")
    if abs(float(soft.sum()) - 1.0) > 1e-9:
        raise ConfigError("soft label must sum to 1 within 1e-9")
    return soft


def train_soft(pairs, cfg: TrainConfig) -> LinearTextClassifier:
    """SGD on the soft cross-entropy loss -sum_i sum_c s_c(x_i) log p(c|x_i).

    pairs is a list of (TokenSequence, soft label vector).  Per-example
    gradient is fv (outer) (p - s); the schedule is identical to train_hard.
    """
    cfg.validate()
    if not pairs:
        raise DegenerateDataset("empty training set")
    soft = np.stack([check_soft_labels(s) for _, s in pairs])
    if soft.shape[1] < 2:
        raise DegenerateDataset("soft labels cover a single class")
    if np.count_nonzero(soft.sum(axis=0) > 1e-12) < 2:
        raise DegenerateDataset("soft labels put all mass on a single class")
    x = feature_matrix([ts for ts, _ in pairs], cfg)

    def residual(probs, rows):
        return probs - soft[rows]

    return _sgd(x, cfg, soft.shape[1], residual)


def hard_loss(model: LinearTextClassifier, x: sp.csr_matrix, y: np.ndarray, l2_penalty=0.0) -> float:
    """Summed cross-entropy -sum_i log p(y_i|x_i) plus the l2 term."""
    probs = _softmax_rows(x @ model.weights.T + model.bias)
    nll = -np.log(probs[np.arange(x.shape[0]), y]).sum()
    return float(nll + 0.5 * l2_penalty * np.sum(model.weights**2))


def soft_loss(model: LinearTextClassifier, x: sp.csr_matrix, soft: np.ndarray, l2_penalty=0.0) -> float:
    """Summed soft cross-entropy -sum_i sum_c s_c log p(c|x_i) plus l2 term."""
    probs = _softmax_rows(x @ model.weights.T + model.bias)
    nll = -(soft * np.log(probs)).sum()
    return float(nll + 0.5 * l2_penalty * np.sum(model.weights**2))


def soft_grad(model: LinearTextClassifier, x: sp.csr_matrix, soft: np.ndarray, l2_penalty=0.0):
    """Analytic gradient of soft_loss w.r.t. (weights, bias)."""
    probs = _softmax_rows(x @ model.weights.T + model.bias)
    resid = probs - soft
    gw = (x.T @ resid).T + l2_penalty * model.weights
    gb = resid.sum(axis=0)
    return gw, gb


# ---------------------------------------------------------------------------
# Serialization: magic "PLAB", u32 version, u32 header length, JSON header,
# then dense little-endian float64 weight and bias blocks.


def save_model(model: LinearTextClassifier, path):
    header = json.dumps(
        {
            "num_classes": model.num_classes,
            "num_buckets": model.num_buckets,
            "ngram_orders": list(model.ngram_orders),
            "dtype": "<f8",
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", model.version))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.bias, dtype="<f8").tobytes())


def load_model(path) -> LinearTextClassifier:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MODEL_MAGIC:
        raise CorruptModel("bad magic bytes")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != MODEL_VERSION:
        raise VersionMismatch(f"unsupported model version {version}")
    header_len = struct.unpack("<I", blob[8:12])[0]
    if len(blob) < 12 + header_len:
        raise CorruptModel("truncated header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
        num_classes = int(header["num_classes"])
        num_buckets = int(header["num_buckets"])
        ngram_orders = tuple(int(o) for o in header["ngram_orders"])
    except (ValueError, KeyError, TypeError):
        raise CorruptModel("invalid header")
    body = blob[12 + header_len :]
    expected = (num_classes * num_buckets + num_classes) * 8
    if len(body) != expected:
        raise CorruptModel(f"payload is {len(body)} bytes, expected {expected}")
    w_end = num_classes * num_buckets * 8
    weights = np.frombuffer(body[:w_end], dtype="<f8").reshape(num_classes, num_buckets).copy()
    bias = np.frombuffer(body[w_end:], dtype="<f8").copy()
    if not np.all(np.isfinite(weights)) or not np.all(np.isfinite(bias)):
        raise CorruptModel("non-finite parameters")
    return LinearTextClassifier(weights, bias, num_buckets, ngram_orders, version)
