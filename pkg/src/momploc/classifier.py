"""Path-order classifier: a small ReLU MLP with a softmax output.

Trained with the order-weighted cross entropy
``-exp(-eta * (c - c_hat)) * log(g^T g_hat)`` where ``c`` is the true and
``c_hat`` the predicted 1-based class index.  The weight is piecewise
constant in the parameters and is treated as a per-sample constant when
differentiating.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError

MODEL_FORMAT = "momploc-mlp"
MODEL_VERSION = 1
FEATURES = ("power_db", "delay", "doa_az", "doa_el", "dod_az", "dod_el")
N_CLASSES = 3
PROB_FLOOR = 1e-12


@dataclass
class Mlp:
    weights: list[np.ndarray]  # each (fan_in, fan_out)
    biases: list[np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    activation: str = "relu"

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.mean.copy(), self.std.copy(), self.activation)


def init_mlp(dims=(6, 64, 64, 3), seed: int = 0) -> Mlp:
    if dims[-1] != N_CLASSES:
        raise ConfigError("output layer must have 3 units")
    rng = np.random.default_rng([int(seed), 0x1217])
    ws = [rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(b) for b in dims[1:]]
    return Mlp(ws, bs, np.zeros(dims[0]), np.ones(dims[0]))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_std(params: Mlp, x: np.ndarray):
    acts = [x]
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    return acts, h @ params.weights[-1] + params.biases[-1]


def forward(params: Mlp, z) -> np.ndarray:
    """Class probabilities for raw feature rows (standardized internally)."""
    x = (np.atleast_2d(np.asarray(z, dtype=float)) - params.mean) / params.std
    _, logits = _forward_std(params, x)
    p = softmax(logits)
    return p[0] if np.ndim(z) == 1 else p


def classify(params: Mlp, z) -> np.ndarray | int:
    """1-based index of the most probable class; ties go to the lowest index."""
    p = forward(params, z)
    c = np.argmax(p, axis=-1) + 1
    return int(c) if np.ndim(c) == 0 else c


def order_weight(c, c_hat, eta: float):
    return np.exp(-eta * (np.asarray(c, dtype=float) - np.asarray(c_hat, dtype=float)))


def weighted_ce_loss(g, g_hat, c: int, c_hat: int, eta: float) -> float:
    """Loss of one sample from its one-hot target, prediction and class indices."""
    gp = max(float(np.dot(g, g_hat)), PROB_FLOOR)
    return float(-order_weight(c, c_hat, eta) * np.log(gp))


def loss_and_grads(params: Mlp, x: np.ndarray, labels: np.ndarray, eta: float, sample_weight=None):
    """Mean weighted CE over standardized rows ``x``; labels are 1-based.

    Returns ``(loss, grads_w, grads_b, probs)``.
    """
    acts, logits = _forward_std(params, x)
    p = softmax(logits)
    n = x.shape[0]
    idx = labels - 1
    if sample_weight is None:
        sample_weight = order_weight(labels, np.argmax(p, axis=1) + 1, eta)
    pt = np.maximum(p[np.arange(n), idx], PROB_FLOOR)
    loss = float(np.mean(-sample_weight * np.log(pt)))

    delta = p.copy()
    delta[np.arange(n), idx] -= 1.0
    delta *= (sample_weight / n)[:, None]
    gw = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    for k in range(len(params.weights) - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ params.weights[k].T) * (acts[k] > 0)
    return loss, gw, gb, p


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    decay: float = 0.95
    decay_every: int = 200
    max_epochs: int = 1000
    patience: int = 100
    min_delta: float = 1e-6
    eta: float = 0.2
    batch_size: int = 64
    train_fraction: float = 0.75
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.decay <= 0 or self.eta < 0:
            raise ConfigError("learning rate and decay must be positive, eta non-negative")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    val_accuracy: float = 0.0
    val_class_accuracy: list[float] = field(default_factory=list)
    train_index: np.ndarray | None = None
    val_index: np.ndarray | None = None

    def to_csv(self, fp) -> None:
        fp.write("epoch,lr,train_loss,val_loss,val_acc,acc_los,acc_first,acc_other\n")
        for r in self.epochs:
            fp.write(
                f"{r['epoch']},{r['lr']:.9g},{r['train_loss']:.9g},{r['val_loss']:.9g},{r['val_acc']:.9g},"
                + ",".join(f"{a:.9g}" for a in r["class_acc"])
                + "\n"
            )


def accuracy(pred: np.ndarray, labels: np.ndarray) -> tuple[float, list[float]]:
    overall = float(np.mean(pred == labels)) if labels.size else float("nan")
    per = []
    for c in range(1, N_CLASSES + 1):
        m = labels == c
        per.append(float(np.mean(pred[m] == c)) if m.any() else float("nan"))
    return overall, per


def split_indices(n: int, train_fraction: float, seed: int):
    rng = np.random.default_rng([int(seed), 0x5B117])
    perm = rng.permutation(n)
    n_tr = int(round(train_fraction * n))
    return np.sort(perm[:n_tr]), np.sort(perm[n_tr:])


def train(features: np.ndarray, labels: np.ndarray, cfg: TrainConfig | None = None, seed: int = 0, log=None) -> tuple[Mlp, TrainReport]:
    """Mini-batch gradient descent with step decay and early stopping on validation loss."""
    cfg = cfg or TrainConfig()
    x_all = np.asarray(features, dtype=float)
    y_all = np.asarray(labels, dtype=int)
    missing = set(range(1, N_CLASSES + 1)) - set(np.unique(y_all).tolist())
    if missing:
        raise ConfigError(f"training data lacks classes {sorted(missing)}")
    tr, va = split_indices(len(y_all), cfg.train_fraction, seed)
    mean = x_all[tr].mean(axis=0)
    std = x_all[tr].std(axis=0)
    std[std == 0] = 1.0

    params = init_mlp((x_all.shape[1], *cfg.hidden, N_CLASSES), seed)
    params.mean, params.std = mean, std
    xtr, ytr = (x_all[tr] - mean) / std, y_all[tr]
    xva, yva = (x_all[va] - mean) / std, y_all[va]
    rng = np.random.default_rng([int(seed), 0xBA7C4])

    report = TrainReport(train_index=tr, val_index=va)
    best, best_loss, stale = params.copy(), np.inf, 0
    for epoch in range(cfg.max_epochs):
        lr = cfg.learning_rate * cfg.decay ** (epoch // cfg.decay_every)
        order = rng.permutation(len(ytr))
        tot, cnt = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            loss, gw, gb, _ = loss_and_grads(params, xtr[b], ytr[b], cfg.eta)
            for k in range(len(gw)):
                params.weights[k] -= lr * gw[k]
                params.biases[k] -= lr * gb[k]
            tot += loss * len(b)
            cnt += len(b)
        val_loss, _, _, pva = loss_and_grads(params, xva, yva, cfg.eta)
        acc, per = accuracy(np.argmax(pva, axis=1) + 1, yva)
        report.epochs.append(
            {"epoch": epoch + 1, "lr": lr, "train_loss": tot / cnt, "val_loss": val_loss, "val_acc": acc, "class_acc": per}
        )
        if log is not None and (epoch + 1) % 50 == 0:
            log(f"epoch {epoch + 1}: train {tot / cnt:.4f} val {val_loss:.4f} acc {acc:.4f}")
        if val_loss < best_loss - cfg.min_delta:
            best, best_loss, stale = params.copy(), val_loss, 0
            report.best_epoch = epoch + 1
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    pred = classify(best, x_all[va])
    report.val_accuracy, report.val_class_accuracy = accuracy(np.asarray(pred), yva)
    return best, report


def model_to_dict(params: Mlp) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "features": list(FEATURES),
        "dims": params.dims,
        "activation": params.activation,
        "output": "softmax",
        "mean": params.mean.tolist(),
        "std": params.std.tolist(),
        "layers": [
            {"weights": w.T.ravel().tolist(), "bias": b.tolist()} for w, b in zip(params.weights, params.biases)
        ],
    }


def model_from_dict(d: dict) -> Mlp:
    if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
        raise ConfigError(f"unsupported model file ({d.get('format')} v{d.get('version')})")
    dims = d["dims"]
    ws, bs = [], []
    for (a, b), layer in zip(zip(dims[:-1], dims[1:]), d["layers"]):
        # stored row-major as (fan_out, fan_in)
        ws.append(np.array(layer["weights"], dtype=float).reshape(b, a).T.copy())
        bs.append(np.array(layer["bias"], dtype=float))
    return Mlp(ws, bs, np.array(d["mean"]), np.array(d["std"]), d.get("activation", "relu"))


def save_model(path, params: Mlp) -> None:
    with open(path, "w") as fp:
        json.dump(model_to_dict(params), fp)


def load_model(path) -> Mlp:
    with open(path) as fp:
        return model_from_dict(json.load(fp))


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
