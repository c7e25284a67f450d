"""Wavelet-kernel classifier, CNN/FCNN baselines, training, and evaluation.

The model pipeline is: front end (wavelet convolution layer, free-kernel
convolution layer, or none) -> per-scale standardization -> top-Q pooling ->
flatten -> ReLU -> dense(hidden) -> ReLU -> dense(classes) -> sigmoid or
softmax.  Training is plain mini-batch Adam on the cross-entropy loss with
full backpropagation through the front end.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import audio
from .errors import ConfigError, DataError, ShapeError, TrainingError
from .transform import (
    STD_MODES,
    conv_backward,
    conv_forward,
    transform_backward,
    transform_forward,
)
from .wavelet import WaveletParams, apply_pole_guard

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1

MODEL_KINDS = ("wknn", "cnn", "fcnn")


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference training protocol."""

    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    folds: int = 5
    split: float = 0.8
    seed: int = 0
    q: int = 32
    kernel_length: int = 32
    m: int = 10
    p: int = 1
    n: int = 10
    hidden: int = 200
    grad_clip: float = 5.0
    std_mode: str = "var"

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split must be in (0, 1), got {self.split}")
        for name in ("epochs", "batch_size", "folds", "q", "kernel_length",
                     "m", "n", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.p < 0:
            raise ConfigError(f"p must be >= 0, got {self.p}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.std_mode not in STD_MODES:
            raise ConfigError(f"std_mode must be one of {STD_MODES}")


@dataclass
class Network:
    """Layer stack with its trainable tensors."""

    kind: str                       # "wknn" | "cnn" | "fcnn"
    n_classes: int
    segment_length: int
    w1: np.ndarray                  # (hidden, features)
    b1: np.ndarray
    w2: np.ndarray                  # (outputs, hidden)
    b2: np.ndarray
    activation: str                 # "sigmoid" | "softmax"
    q: int | None = None
    kernel_length: int | None = None
    params: WaveletParams | None = None   # wknn front end
    kernels: np.ndarray | None = None     # cnn front end, (m, M) free taps
    std_mode: str = "var"

    @property
    def m(self) -> int:
        if self.params is not None:
            return self.params.m
        if self.kernels is not None:
            return self.kernels.shape[0]
        return 0


@dataclass
class EvalReport:
    """Per-fold accuracies with their confusion matrices."""

    fold_accuracies: list[float]
    mean_accuracy: float
    min_accuracy: float
    max_accuracy: float
    confusions: list[np.ndarray]
    class_names: list[str] = field(default_factory=list)

    @classmethod
    def from_folds(cls, accuracies, confusions, class_names=None):
        accs = [float(a) for a in accuracies]
        return cls(accs, float(np.mean(accs)), float(min(accs)), float(max(accs)),
                   list(confusions), list(class_names or []))


def front_end_scalar_count(net: Network) -> int:
    """Learnable scalars ahead of the dense head."""
    if net.kind == "wknn":
        return net.params.n_learnable
    if net.kind == "cnn":
        return int(net.kernels.size)
    return 0


def _he_uniform(rng, fan_in, shape):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


def init_wavelet_params(config: TrainConfig, rng) -> WaveletParams:
    """Starting parameters: zeros in [0.5, 2], poles off the real axis with
    |Im| in [0.2, 1], dilations log-spaced over [1, kernel_length/4]."""
    zeros = rng.uniform(0.5, 2.0, config.p)
    re = rng.uniform(-1.0, 1.0, config.n)
    im = rng.uniform(0.2, 1.0, config.n) * (2.0 * rng.integers(0, 2, config.n) - 1.0)
    top = max(np.log(config.kernel_length / 4.0), 0.0)
    log_dil = np.linspace(0.0, top, config.m)
    return WaveletParams(zeros, np.stack([re, im], axis=1), log_dil)


def build_network(kind: str, config: TrainConfig, n_classes: int,
                  segment_length: int, rng=None) -> Network:
    """Fresh network of the given kind for the given data geometry."""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    rng = np.random.default_rng(config.seed if rng is None else rng)

    params = None
    kernels = None
    if kind == "wknn":
        params = init_wavelet_params(config, rng)
        features = config.m * config.q
    elif kind == "cnn":
        kernels = _he_uniform(rng, config.kernel_length, (config.m, config.kernel_length))
        features = config.m * config.q
    else:
        features = segment_length

    hidden = config.hidden
    outputs = 1 if n_classes == 2 else n_classes
    net = Network(
        kind=kind, n_classes=n_classes, segment_length=segment_length,
        w1=_he_uniform(rng, features, (hidden, features)), b1=np.zeros(hidden),
        w2=_he_uniform(rng, hidden, (outputs, hidden)), b2=np.zeros(outputs),
        activation="sigmoid" if n_classes == 2 else "softmax",
        q=config.q if kind != "fcnn" else None,
        kernel_length=config.kernel_length if kind != "fcnn" else None,
        params=params, kernels=kernels, std_mode=config.std_mode,
    )
    return net


def build_baseline(kind: str, config: TrainConfig, n_classes: int,
                   segment_length: int, rng=None) -> Network:
    """CNN (free kernels, same geometry and pooling) or FCNN (no front end)."""
    if kind not in ("cnn", "fcnn"):
        raise ConfigError(f"baseline kind must be 'cnn' or 'fcnn', got {kind!r}")
    return build_network(kind, config, n_classes, segment_length, rng)


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def _forward_batch(net: Network, x: np.ndarray, want_cache: bool = False):
    if x.ndim != 2 or x.shape[1] != net.segment_length:
        raise ShapeError(
            f"expected segments of shape (B, {net.segment_length}), got {x.shape}"
        )
    front_cache = None
    if net.kind == "wknn":
        pooled, front_cache = transform_forward(
            x, net.params, net.kernel_length, net.q, net.std_mode)
        feats = pooled.reshape(x.shape[0], -1)
    elif net.kind == "cnn":
        pooled, front_cache = conv_forward(x, net.kernels, net.q, net.std_mode)
        feats = pooled.reshape(x.shape[0], -1)
    else:
        feats = x

    a0 = np.maximum(feats, 0.0)
    h = a0 @ net.w1.T + net.b1
    a1 = np.maximum(h, 0.0)
    logits = a1 @ net.w2.T + net.b2
    probs = _sigmoid(logits) if net.activation == "sigmoid" else _softmax(logits)
    if not want_cache:
        return probs
    cache = {"front": front_cache, "feats": feats, "a0": a0, "h": h,
             "a1": a1, "probs": probs}
    return probs, cache


def forward(net: Network, segment) -> np.ndarray:
    """Class probabilities for one segment (length-1 vector for sigmoid)."""
    seg = np.asarray(segment, dtype=float).reshape(1, -1)
    return _forward_batch(net, seg)[0]


def loss(probabilities, label) -> float:
    """Cross-entropy with a 1e-12 probability floor; non-negative."""
    probs = np.asarray(probabilities, dtype=float).reshape(-1)
    if probs.size == 1:
        p1 = float(np.clip(probs[0], PROB_FLOOR, 1.0 - PROB_FLOOR))
        return -(np.log(p1) if label == 1 else np.log(1.0 - p1))
    return float(-np.log(max(float(probs[label]), PROB_FLOOR)))


def _mean_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    if probs.shape[1] == 1:
        p1 = np.clip(probs[:, 0], PROB_FLOOR, 1.0 - PROB_FLOOR)
        per = -np.where(labels == 1, np.log(p1), np.log(1.0 - p1))
    else:
        picked = probs[np.arange(len(labels)), labels]
        per = -np.log(np.maximum(picked, PROB_FLOOR))
    return float(per.mean())


def _backward_batch(net: Network, cache, labels: np.ndarray):
    """Gradients of the mean batch loss for every trainable tensor."""
    probs = cache["probs"]
    batch = probs.shape[0]
    if net.activation == "sigmoid":
        g_logits = (probs - labels[:, None]) / batch
    else:
        g_logits = probs.copy()
        g_logits[np.arange(batch), labels] -= 1.0
        g_logits /= batch

    a1, a0, feats = cache["a1"], cache["a0"], cache["feats"]
    grads = {
        "w2": g_logits.T @ a1,
        "b2": g_logits.sum(axis=0),
    }
    g_a1 = g_logits @ net.w2
    g_h = g_a1 * (cache["h"] > 0.0)
    grads["w1"] = g_h.T @ a0
    grads["b1"] = g_h.sum(axis=0)

    if net.kind == "fcnn":
        return grads

    g_feats = (g_h @ net.w1) * (feats > 0.0)
    g_pooled = g_feats.reshape(batch, net.m, net.q)
    if net.kind == "wknn":
        vec = transform_backward(g_pooled, cache["front"])
        p, n = net.params.p, net.params.n
        grads["poly_zeros"] = vec[:p]
        grads["poles"] = vec[p:p + 2 * n].reshape(n, 2)
        grads["log_dilations"] = vec[p + 2 * n:]
    else:
        grads["kernels"] = conv_backward(g_pooled, cache["front"])
    return grads


def net_parameters(net: Network) -> dict[str, np.ndarray]:
    """Live references to every trainable tensor, in declared order."""
    tensors: dict[str, np.ndarray] = {}
    if net.kind == "wknn":
        tensors["poly_zeros"] = net.params.poly_zeros
        tensors["poles"] = net.params.poles
        tensors["log_dilations"] = net.params.log_dilations
    elif net.kind == "cnn":
        tensors["kernels"] = net.kernels
    tensors.update({"w1": net.w1, "b1": net.b1, "w2": net.w2, "b2": net.b2})
    return tensors


class Adam:
    """Adam with bias correction, keyed by parameter name; updates in place."""

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(params[key])
                self.v[key] = np.zeros_like(params[key])
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[key] -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def train_step(net: Network, segments, labels, optimizer: Adam,
               grad_clip: float = 5.0, batch_index=None) -> float:
    """One optimizer step on a batch; returns the pre-update mean loss."""
    x = np.asarray(segments, dtype=float)
    y = np.asarray(labels)
    probs, cache = _forward_batch(net, x, want_cache=True)
    batch_loss = _mean_loss(probs, y)
    if not np.isfinite(batch_loss):
        raise TrainingError(
            f"non-finite loss at batch {batch_index}", batch_index=batch_index)
    grads = _backward_batch(net, cache, y)
    _clip_gradients(grads, grad_clip)
    optimizer.step(net_parameters(net), grads)
    if net.kind == "wknn":
        net.params.poles[:] = apply_pole_guard(net.params.poles)
    return batch_loss


def fit(net: Network, x: np.ndarray, y: np.ndarray, config: TrainConfig,
        rng) -> list[float]:
    """Mini-batch training; returns the mean loss per epoch."""
    rng = np.random.default_rng(rng)
    optimizer = Adam(config.learning_rate)
    history = []
    count = len(y)
    for _epoch in range(config.epochs):
        perm = rng.permutation(count)
        losses = []
        for start in range(0, count, config.batch_size):
            idx = perm[start:start + config.batch_size]
            losses.append(train_step(net, x[idx], y[idx], optimizer,
                                     config.grad_clip,
                                     batch_index=start // config.batch_size))
        history.append(float(np.mean(losses)))
    return history


def predict(net: Network, segments) -> np.ndarray:
    x = np.asarray(segments, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    probs = _forward_batch(net, x)
    if net.activation == "sigmoid":
        return (probs[:, 0] >= 0.5).astype(np.int64)
    return np.argmax(probs, axis=1)


def evaluate(net: Network, segments, labels, n_classes=None):
    """(accuracy, confusion) with confusion[true, predicted] counts."""
    y = np.asarray(labels)
    n_classes = net.n_classes if n_classes is None else n_classes
    pred = predict(net, segments)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    accuracy = float((pred == y).mean())
    return accuracy, confusion


def _run_fold(x, y, n_classes, config: TrainConfig, kind: str, fold: int):
    """One repetition: fresh seeded 80/20 split, fresh init, train, test."""
    rng = np.random.default_rng(config.seed + fold)
    perm = rng.permutation(len(y))
    n_train = int(config.split * len(y))
    if n_train < 1 or n_train >= len(y):
        raise DataError(f"split {config.split} leaves an empty side for {len(y)} segments")
    train_idx, test_idx = perm[:n_train], perm[n_train:]
    net = build_network(kind, config, n_classes, x.shape[1], rng)
    fit(net, x[train_idx], y[train_idx], config, rng)
    accuracy, confusion = evaluate(net, x[test_idx], y[test_idx], n_classes)
    return accuracy, confusion, net


def cross_validate_arrays(x, y, n_classes: int, config: TrainConfig, kind: str,
                          jobs: int = 1, class_names=None, return_nets=False):
    """Repeated random-split evaluation over `config.folds` repetitions."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    counts = np.bincount(y, minlength=n_classes)
    if np.any(counts == 0):
        empty = [i for i, c in enumerate(counts) if c == 0]
        raise DataError(f"classes with no segments: {empty}")
    if len(y) < config.folds * n_classes:
        raise DataError(
            f"dataset of {len(y)} segments too small for {config.folds} folds "
            f"x {n_classes} classes")
    args = [(x, y, n_classes, config, kind, fold) for fold in range(config.folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_star, args))
    else:
        results = [_run_fold(*a) for a in args]
    accs = [r[0] for r in results]
    confs = [r[1] for r in results]
    report = EvalReport.from_folds(accs, confs, class_names)
    if return_nets:
        return report, [r[2] for r in results]
    return report


def _run_fold_star(args):
    return _run_fold(*args)


def cross_validate(manifest, config: TrainConfig, kind: str = "wknn",
                   jobs: int = 1, return_nets=False):
    """Build the dataset from a manifest and run repeated-split evaluation."""
    segments = audio.build_dataset(manifest)
    x = np.stack([s.samples for s in segments])
    y = np.array([s.label for s in segments], dtype=np.int64)
    return cross_validate_arrays(
        x, y, len(manifest.class_names), config, kind, jobs=jobs,
        class_names=manifest.class_names, return_nets=return_nets)


def save_checkpoint(path, net: Network, config: TrainConfig) -> None:
    """Versioned container: config echo, parameter tensors, random seed."""
    meta = {
        "kind": net.kind, "activation": net.activation,
        "n_classes": net.n_classes, "segment_length": net.segment_length,
        "q": net.q, "kernel_length": net.kernel_length, "std_mode": net.std_mode,
    }
    arrays = {"w1": net.w1, "b1": net.b1, "w2": net.w2, "b2": net.b2}
    if net.kind == "wknn":
        arrays.update(poly_zeros=net.params.poly_zeros, poles=net.params.poles,
                      log_dilations=net.params.log_dilations)
    elif net.kind == "cnn":
        arrays["kernels"] = net.kernels
    np.savez(path, version=np.int64(CHECKPOINT_VERSION),
             meta_json=json.dumps(meta), config_json=json.dumps(asdict(config)),
             seed=np.int64(config.seed), **arrays)


def load_checkpoint(path):
    """Returns (net, config, seed); raises ConfigError on unknown versions."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        meta = json.loads(str(data["meta_json"]))
        config = TrainConfig(**json.loads(str(data["config_json"])))
        seed = int(data["seed"])
        params = None
        kernels = None
        if meta["kind"] == "wknn":
            params = WaveletParams(data["poly_zeros"], data["poles"],
                                   data["log_dilations"])
        elif meta["kind"] == "cnn":
            kernels = data["kernels"]
        net = Network(
            kind=meta["kind"], n_classes=meta["n_classes"],
            segment_length=meta["segment_length"],
            w1=data["w1"], b1=data["b1"], w2=data["w2"], b2=data["b2"],
            activation=meta["activation"], q=meta["q"],
            kernel_length=meta["kernel_length"], params=params, kernels=kernels,
            std_mode=meta["std_mode"],
        )
    return net, config, seed
