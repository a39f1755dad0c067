"""Feedforward neural networks: z_i = act_i(W_i z_{i-1} + b_i).

Training is plain minibatch backprop with SGD or Adam; everything is numpy,
deterministic given a seed. Trained networks convert to symbolic Expressions
so they can enter dynamic models and NMPC cost terms.
"""

from __future__ import annotations

import numpy as np

from .. import exprgraph as eg
from .data import Dataset, EmptyDataset

ACTIVATIONS = ("sigmoid", "tanh", "relu", "linear")


class NonFiniteLoss(Exception):
    def __init__(self, epoch):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


def _act(name, x):
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    return x


def _act_deriv(name, x, y):
    # y = act(x) is passed in to reuse the forward value
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "tanh":
        return 1.0 - y * y
    if name == "relu":
        return (x > 0.0).astype(float)
    return np.ones_like(x)


class AnnSpec:
    """Network layout plus weights. ``layers`` excludes the input layer."""

    def __init__(self, input_width, layers, loss="mse", huber_delta=1.0, seed=None):
        if not layers:
            raise ValueError("need at least one layer")
        for width, act in layers:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if width < 1:
                raise ValueError("layer width must be >= 1")
        if loss not in ("mse", "mae", "huber"):
            raise ValueError(f"unknown loss {loss!r}")
        self.input_width = int(input_width)
        self.layers = [(int(w), a) for w, a in layers]
        self.loss = loss
        self.huber_delta = float(huber_delta)
        self.trained = False
        # scaling captured from the training dataset (None if unscaled)
        self.feature_mean = None
        self.feature_std = None
        self.label_mean = None
        self.label_std = None

        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        fan_in = self.input_width
        for width, _ in self.layers:
            bound = np.sqrt(6.0 / (fan_in + width))
            self.weights.append(rng.uniform(-bound, bound, size=(width, fan_in)))
            self.biases.append(np.zeros(width))
            fan_in = width

    @property
    def output_width(self):
        return self.layers[-1][0]

    def copy(self):
        out = AnnSpec(self.input_width, self.layers, self.loss, self.huber_delta)
        out.weights = [W.copy() for W in self.weights]
        out.biases = [b.copy() for b in self.biases]
        out.trained = self.trained
        for name in ("feature_mean", "feature_std", "label_mean", "label_std"):
            v = getattr(self, name)
            setattr(out, name, None if v is None else v.copy())
        return out


def ann_init(input_width, layers, loss="mse", huber_delta=1.0, seed=None):
    return AnnSpec(input_width, layers, loss, huber_delta, seed)


def _forward_raw(spec, v):
    z = v
    for (width, act), W, b in zip(spec.layers, spec.weights, spec.biases):
        z = _act(act, W @ z + b[:, None])
    return z


def ann_forward(spec, v):
    """Evaluate the network; v is a feature vector or n_v x n matrix."""
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    z = v.reshape(spec.input_width, -1)
    if z.shape[0] != spec.input_width:
        raise ValueError(
            f"expected {spec.input_width} features, got {z.shape[0]}"
        )
    if spec.feature_mean is not None:
        z = (z - spec.feature_mean[:, None]) / spec.feature_std[:, None]
    out = _forward_raw(spec, z)
    if spec.label_mean is not None:
        out = out * spec.label_std[:, None] + spec.label_mean[:, None]
    return out[:, 0] if single else out


def _loss_and_grad(spec, pred, target):
    """Mean loss over all outputs and samples, and d(loss)/d(pred)."""
    e = pred - target
    n = e.size
    if spec.loss == "mse":
        return float(np.mean(e * e)), 2.0 * e / n
    if spec.loss == "mae":
        return float(np.mean(np.abs(e))), np.sign(e) / n
    d = spec.huber_delta
    small = np.abs(e) <= d
    vals = np.where(small, 0.5 * e * e, d * (np.abs(e) - 0.5 * d))
    grads = np.where(small, e, d * np.sign(e))
    return float(np.mean(vals)), grads / n


def _backprop(spec, v, target):
    """Gradient of the loss w.r.t. every weight matrix and bias vector."""
    pre = []
    post = [v]
    z = v
    for (width, act), W, b in zip(spec.layers, spec.weights, spec.biases):
        a = W @ z + b[:, None]
        z = _act(act, a)
        pre.append(a)
        post.append(z)
    loss, delta = _loss_and_grad(spec, z, target)
    gW = [None] * len(spec.weights)
    gb = [None] * len(spec.biases)
    for i in reversed(range(len(spec.layers))):
        act = spec.layers[i][1]
        delta = delta * _act_deriv(act, pre[i], post[i + 1])
        gW[i] = delta @ post[i].T
        gb[i] = delta.sum(axis=1)
        delta = spec.weights[i].T @ delta
    return loss, gW, gb


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


class _Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name, **kw):
    if name == "sgd":
        return _Sgd(kw.get("lr", 1e-2))
    if name == "adam":
        return _Adam(
            kw.get("lr", 1e-3),
            kw.get("beta1", 0.9),
            kw.get("beta2", 0.999),
            kw.get("eps", 1e-8),
        )
    raise ValueError(f"unknown optimizer {name!r}")


def ann_train(
    spec: AnnSpec,
    data: Dataset,
    batch_size=32,
    epochs=100,
    validation_split=0.0,
    patience=100,
    scale_data=True,
    optimizer="adam",
    seed=None,
    **optimizer_kw,
):
    """Minibatch backprop training; returns (trained copy, history dict).

    Early stopping: training ends once the validation loss (training loss when
    there is no split) has not improved by more than 1e-8 for `patience`
    epochs; the best weights seen are restored.
    """
    if data.n_d == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if not 0 <= validation_split < 1:
        raise ValueError("validation_split must be in [0, 1)")
    spec = spec.copy()
    history = {"train": [], "validation": []}
    if epochs == 0:
        return spec, history

    rng = np.random.default_rng(seed)
    feats = data.features
    labs = data.labels
    if scale_data:
        if not data.scaled:
            data.enable_scaling()
        spec.feature_mean = data.feature_mean.copy()
        spec.feature_std = data.feature_std.copy()
        spec.label_mean = data.label_mean.copy()
        spec.label_std = data.label_std.copy()
        feats = data.scale_features(feats)
        labs = data.scale_labels(labs)

    n = feats.shape[1]
    perm = rng.permutation(n)
    n_val = int(round(validation_split * n))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise EmptyDataset("validation split left no training samples")
    fv, lv = feats[:, val_idx], labs[:, val_idx]
    ft, lt = feats[:, train_idx], labs[:, train_idx]

    opt = make_optimizer(optimizer, **optimizer_kw)
    params = spec.weights + spec.biases

    best_val = np.inf
    best_snapshot = None
    stall = 0
    for epoch in range(epochs):
        order = rng.permutation(train_idx.size)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, order.size, batch_size):
            idx = order[start : start + batch_size]
            loss, gW, gb = _backprop(spec, ft[:, idx], lt[:, idx])
            opt.step(params, gW + gb)
            epoch_loss += loss
            n_batches += 1
        epoch_loss /= max(n_batches, 1)
        if not np.isfinite(epoch_loss):
            raise NonFiniteLoss(epoch)
        if n_val:
            val_loss, _ = _loss_and_grad(spec, _forward_raw(spec, fv), lv)
        else:
            val_loss = epoch_loss
        history["train"].append(epoch_loss)
        history["validation"].append(val_loss)
        if val_loss < best_val - 1e-8:
            best_val = val_loss
            best_snapshot = (
                [W.copy() for W in spec.weights],
                [b.copy() for b in spec.biases],
            )
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                break
    if best_snapshot is not None:
        spec.weights = [W for W in best_snapshot[0]]
        spec.biases = [b for b in best_snapshot[1]]
    spec.trained = True
    return spec, history


def ann_expressions(spec: AnnSpec, feature_exprs):
    """Symbolic network outputs over the given feature Expressions."""
    if len(feature_exprs) != spec.input_width:
        raise ValueError(
            f"expected {spec.input_width} feature expressions, got {len(feature_exprs)}"
        )
    z = [eg.as_expr(e) for e in feature_exprs]
    if spec.feature_mean is not None:
        z = [
            (zi - spec.feature_mean[i]) / spec.feature_std[i]
            for i, zi in enumerate(z)
        ]
    for (width, act), W, b in zip(spec.layers, spec.weights, spec.biases):
        nxt = []
        for i in range(width):
            acc = eg.as_expr(float(b[i]))
            for j, zj in enumerate(z):
                if W[i, j] != 0.0:
                    acc = acc + float(W[i, j]) * zj
            if act != "linear":
                acc = eg.unary(act, acc)
            nxt.append(acc)
        z = nxt
    if spec.label_mean is not None:
        z = [
            zi * spec.label_std[i] + spec.label_mean[i] for i, zi in enumerate(z)
        ]
    return z


# --- text serialization ------------------------------------------------------


def _fmt(a):
    return " ".join(f"{x:.17g}" for x in np.asarray(a, dtype=float).ravel())


def save_ann(spec: AnnSpec, path):
    lines = [
        "ann 1",
        f"input_width {spec.input_width}",
        f"layers {len(spec.layers)}",
    ]
    for width, act in spec.layers:
        lines.append(f"layer {width} {act}")
    lines.append(f"loss {spec.loss} {spec.huber_delta:.17g}")
    lines.append(f"trained {int(spec.trained)}")
    scaled = spec.feature_mean is not None
    lines.append(f"scaled {int(scaled)}")
    if scaled:
        lines.append("feature_mean " + _fmt(spec.feature_mean))
        lines.append("feature_std " + _fmt(spec.feature_std))
        lines.append("label_mean " + _fmt(spec.label_mean))
        lines.append("label_std " + _fmt(spec.label_std))
    for W, b in zip(spec.weights, spec.biases):
        lines.append("W " + _fmt(W))
        lines.append("b " + _fmt(b))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_ann(path) -> AnnSpec:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    it = iter(lines)
    magic = next(it)
    if not magic.startswith("ann "):
        raise ValueError(f"not an ann file: {path}")
    input_width = int(next(it).split()[1])
    n_layers = int(next(it).split()[1])
    layers = []
    for _ in range(n_layers):
        _, w, act = next(it).split()
        layers.append((int(w), act))
    _, loss, delta = next(it).split()
    spec = AnnSpec(input_width, layers, loss, float(delta))
    spec.trained = bool(int(next(it).split()[1]))
    scaled = bool(int(next(it).split()[1]))
    if scaled:
        for name in ("feature_mean", "feature_std", "label_mean", "label_std"):
            parts = next(it).split()
            setattr(spec, name, np.array([float(x) for x in parts[1:]]))
    fan_in = input_width
    weights, biases = [], []
    for width, _ in layers:
        wvals = [float(x) for x in next(it).split()[1:]]
        weights.append(np.array(wvals).reshape(width, fan_in))
        bvals = [float(x) for x in next(it).split()[1:]]
        biases.append(np.array(bvals))
        fan_in = width
    spec.weights = weights
    spec.biases = biases
    return spec
