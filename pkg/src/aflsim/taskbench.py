"""Synthetic tasks: data generation, non-IID partitioning, shallow models, metrics."""

from dataclasses import dataclass, field

import numpy as np

from .numkit import RngStream, as_vector


@dataclass
class TriggerSpec:
    """Feature-space trigger: fixed values at fixed indices imply a target label."""

    indices: tuple
    values: tuple
    target_label: int

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ValueError("trigger indices and values must have equal length")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("trigger indices must be distinct")


@dataclass
class Dataset:
    features: np.ndarray          # (n, p)
    labels: np.ndarray            # (n,) int labels or float targets
    task: str                     # "classification" or "regression"
    n_classes: int | None = None
    triggered: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.task == "classification":
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.n_classes is None:
                raise ValueError("classification dataset needs n_classes")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise ValueError("labels out of range")
        elif self.task == "regression":
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if len(self.labels) and not np.all(np.isfinite(self.labels)):
                raise ValueError("regression targets must be finite")
        else:
            raise ValueError(f"unknown task {self.task!r}")
        if self.triggered is None:
            self.triggered = np.zeros(len(self.labels), dtype=bool)

    def __len__(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def subset(self, idx):
        return Dataset(self.features[idx], self.labels[idx], self.task,
                       self.n_classes, self.triggered[idx])


@dataclass
class Model:
    """Flat-parameter shallow model: softmax regression or linear regression.

    softmax(p, z): params = [W row-major (z*p), b (z)], d = p*z + z
    linear(p):     params = [w (p), b], d = p + 1
    """

    arch: str
    p: int
    z: int | None = None
    params: np.ndarray = None

    def __post_init__(self):
        if self.arch == "softmax":
            if self.z is None or self.z < 2:
                raise ValueError("softmax model needs z >= 2 classes")
            d = self.p * self.z + self.z
        elif self.arch == "linear":
            d = self.p + 1
        else:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.params is None:
            self.params = np.zeros(d)
        else:
            self.params = as_vector(self.params)
            if self.params.shape[0] != d:
                raise ValueError(f"params length {self.params.shape[0]} != arch dim {d}")

    @property
    def dim(self):
        return self.params.shape[0]

    def with_params(self, params):
        return Model(self.arch, self.p, self.z, params)

    def _unpack_softmax(self, params=None):
        w = self.params if params is None else params
        mat = w[: self.p * self.z].reshape(self.z, self.p)
        b = w[self.p * self.z:]
        return mat, b

    def logits(self, features):
        x = np.atleast_2d(features)
        if self.arch == "softmax":
            mat, b = self._unpack_softmax()
            return x @ mat.T + b
        w, b = self.params[:-1], self.params[-1]
        return x @ w + b

    def predict(self, features):
        """Argmax class (first index wins ties) or real-valued prediction."""
        out = self.logits(features)
        if self.arch == "softmax":
            return np.argmax(out, axis=1)
        return out


def _softmax_probs(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss(model, features, labels):
    """Mean loss: cross-entropy for softmax, half squared error for linear."""
    x = np.atleast_2d(features)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if model.arch == "softmax":
        probs = _softmax_probs(model.logits(x))
        picked = probs[np.arange(x.shape[0]), np.asarray(labels, dtype=np.int64)]
        return float(np.mean(-np.log(np.maximum(picked, 1e-300))))
    resid = model.logits(x) - np.asarray(labels, dtype=np.float64)
    return float(np.mean(0.5 * resid**2))


def gradient(model, features, labels):
    """Exact mean gradient of the loss over the batch, flat like params."""
    x = np.atleast_2d(features)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if model.arch == "softmax":
        y = np.asarray(labels, dtype=np.int64)
        probs = _softmax_probs(model.logits(x))
        probs[np.arange(n), y] -= 1.0          # (probs - onehot)
        gw = probs.T @ x / n                   # (z, p)
        gb = probs.mean(axis=0)
        return np.concatenate([gw.ravel(), gb])
    y = np.asarray(labels, dtype=np.float64)
    resid = model.logits(x) - y
    gw = x.T @ resid / n
    gb = resid.mean()
    return np.concatenate([gw, [gb]])


def dataset_gradient(model, ds):
    return gradient(model, ds.features, ds.labels)


def gen_classification(z, p, n, sep, rng: RngStream):
    """Gaussian-mixture classification data: class q centered at sep * e_q.

    Labels are balanced within one sample; rows are shuffled.
    """
    if z < 2:
        raise ValueError("need z >= 2 classes")
    if p < z:
        raise ValueError("need p >= z features")
    if n < z:
        raise ValueError(f"need at least z={z} samples, got {n}")
    if sep < 0:
        raise ValueError("sep must be >= 0")
    counts = [n // z + (1 if q < n % z else 0) for q in range(z)]
    labels = np.concatenate([np.full(c, q, dtype=np.int64) for q, c in enumerate(counts)])
    means = np.zeros((z, p))
    means[np.arange(z), np.arange(z)] = sep
    features = means[labels] + rng.normal(0.0, 1.0, (n, p))
    order = rng.permutation(n)
    return Dataset(features[order], labels[order], "classification", z)


def gen_regression(p, n, noise_std, rng: RngStream):
    """Linear data y = w*.x + b* + noise with hidden ground truth drawn from rng."""
    if p < 1:
        raise ValueError("need p >= 1 features")
    if n == 0:
        raise ValueError("need at least one sample")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    w_true = rng.normal(0.0, 1.0, p)
    b_true = float(rng.normal(0.0, 1.0))
    features = rng.normal(0.0, 1.0, (n, p))
    y = features @ w_true + b_true
    if noise_std > 0:
        y = y + rng.normal(0.0, noise_std, n)
    return Dataset(features, y, "regression")


def partition_noniid(ds, n_clients, x, rng: RngStream):
    """Label-skewed split: clients form z round-robin groups; a sample with
    label q goes to a uniform client of group q with probability x, else to a
    uniform client of a uniformly chosen other group."""
    if ds.task != "classification":
        raise ValueError("non-IID partition is defined for classification data")
    z = ds.n_classes
    if n_clients < z:
        raise ValueError("fewer clients than groups")
    if not (1.0 / z) <= x <= 1.0:
        raise ValueError(f"x must be in [1/z, 1], got {x}")
    groups = [[c for c in range(n_clients) if c % z == q] for q in range(z)]
    assignment = np.empty(len(ds), dtype=np.int64)
    for j in range(len(ds)):
        q = int(ds.labels[j])
        if rng.uniform() < x:
            g = q
        else:
            other = rng.integers(z - 1)
            g = other if other < q else other + 1
        members = groups[g]
        assignment[j] = members[rng.integers(len(members))]
    return [ds.subset(assignment == c) for c in range(n_clients)]


def split_uniform(ds, n_clients, rng: RngStream):
    """Random near-equal split (used for regression shards)."""
    order = rng.permutation(len(ds))
    return [ds.subset(np.sort(order[c::n_clients])) for c in range(n_clients)]


def embed_trigger(features, trig: TriggerSpec):
    """Copy of features (1-D or 2-D) with trigger values written at trigger indices."""
    out = np.array(features, dtype=np.float64, copy=True)
    p = out.shape[-1]
    for i in trig.indices:
        if not 0 <= i < p:
            raise ValueError(f"trigger index {i} out of range for p={p}")
    if trig.indices:
        out[..., list(trig.indices)] = np.asarray(trig.values, dtype=np.float64)
    return out


def apply_trigger(ds, trig, relabel):
    """Dataset copy with the trigger embedded in every row; relabel=True also
    rewrites labels to the trigger's target (poisoning use)."""
    feats = embed_trigger(ds.features, trig)
    labels = np.full(len(ds), trig.target_label, dtype=np.int64) if relabel else ds.labels.copy()
    return Dataset(feats, labels, ds.task, ds.n_classes, np.ones(len(ds), dtype=bool))


def test_error_rate(model, test):
    if test.task != "classification":
        raise ValueError("test error rate needs a classification dataset")
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = model.predict(test.features)
    return float(np.mean(pred != test.labels))


def attack_success_rate(model, test, trig):
    """Fraction of non-target-label test samples classified as the target once
    the trigger is embedded (labels untouched for evaluation)."""
    if test.task != "classification":
        raise ValueError("attack success rate needs a classification dataset")
    if len(test) == 0:
        raise ValueError("empty test set")
    eligible = test.labels != trig.target_label
    if not np.any(eligible):
        raise ValueError("undefined ASR")
    feats = embed_trigger(test.features[eligible], trig)
    pred = model.predict(feats)
    return float(np.mean(pred == trig.target_label))


def rmse(model, test):
    if test.task != "regression":
        raise ValueError("rmse needs a regression dataset")
    if len(test) == 0:
        raise ValueError("empty test set")
    resid = model.predict(test.features) - test.labels
    return float(np.sqrt(np.mean(resid**2)))


def save_csv(ds, path):
    """Debug dump: feature columns then label column. Not a stable format."""
    header = ",".join([f"f{j}" for j in range(ds.feature_dim)] + ["label"])
    data = np.column_stack([ds.features, ds.labels])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def load_csv(path, task, n_classes=None):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Dataset(data[:, :-1], data[:, -1], task, n_classes)
