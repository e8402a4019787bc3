"""Desk-scale differentiable tasks with analytic gradients and Hessian-vector products.

Parameters are a list of 2-D float64 arrays: weight matrices are (out, in) and
biases are (out, 1) column matrices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import as_matrix

Params = list  # list[np.ndarray]


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (batch, features)
    targets: np.ndarray  # (batch,) integer labels

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise ShapeError("inputs must be (batch, features)")
        if len(self.targets) != self.inputs.shape[0] or len(self.targets) < 1:
            raise ShapeError("inputs and targets must have the same nonzero length")

    def __len__(self) -> int:
        return len(self.targets)

    def take(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.targets[idx])


@dataclass
class LossGradReport:
    loss: float
    grads: list
    correct_count: int = 0


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(len(y)), y]))
    return loss, np.exp(z - logsum[:, None])


def _onehot(y: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


class Model:
    kind = "base"
    classification = True

    def shapes(self) -> list[tuple[int, int]]:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> Params:
        raise NotImplementedError

    def loss_grad(self, params: Params, batch: Batch) -> LossGradReport:
        raise NotImplementedError

    def hvp(self, params: Params, batch: Batch, v: Params) -> Params:
        raise NotImplementedError

    def logits(self, params: Params, inputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def loss(self, params: Params, batch: Batch) -> float:
        return self.loss_grad(params, batch).loss

    def check_params(self, params: Params, what: str = "params") -> list[np.ndarray]:
        params = [as_matrix(p) for p in params]
        shapes = self.shapes()
        if len(params) != len(shapes) or any(p.shape != s for p, s in zip(params, shapes)):
            raise ShapeError(f"{what} shapes {[p.shape for p in params]} do not match model {shapes}")
        return params

    def check_batch(self, batch: Batch) -> None:
        if batch.inputs.shape[1] != self.n_features:
            raise ShapeError(f"batch has {batch.inputs.shape[1]} features, model expects {self.n_features}")


class QuadraticModel(Model):
    """Per-sample loss 0.5 (x - xi)^T H (x - xi), where xi is the sample's input row.

    ``x`` is a single (rows, cols) matrix flattened row-major; ``hessian`` is
    either a vector (diagonal H) or a dense symmetric PSD matrix.
    """

    kind = "quadratic"
    classification = False

    def __init__(self, shape: tuple[int, int], hessian):
        self.shape = tuple(shape)
        d = self.shape[0] * self.shape[1]
        H = np.asarray(hessian, dtype=np.float64)
        if H.ndim == 1:
            H = np.diag(H)
        if H.shape != (d, d):
            raise ShapeError(f"hessian must be {d}x{d}")
        self.H = H
        self.n_features = d

    def shapes(self):
        return [self.shape]

    def init_params(self, rng):
        return [rng.standard_normal(self.shape)]

    def loss_grad(self, params, batch):
        (x,) = self.check_params(params)
        self.check_batch(batch)
        diff = x.reshape(-1)[None, :] - batch.inputs
        Hd = diff @ self.H
        loss = 0.5 * float(np.mean(np.sum(diff * Hd, axis=1)))
        grad = Hd.mean(axis=0).reshape(self.shape)
        return LossGradReport(loss, [grad], 0)

    def hvp(self, params, batch, v):
        self.check_params(params)
        (u,) = self.check_params(v, "v")
        return [(self.H @ u.reshape(-1)).reshape(self.shape)]

    def logits(self, params, inputs):
        raise TypeError("quadratic model has no class scores")


class LogisticModel(Model):
    """Multinomial logistic regression: params [W (classes, features), b (classes, 1)]."""

    kind = "logistic"

    def __init__(self, n_features: int, n_classes: int):
        self.n_features = n_features
        self.n_classes = n_classes

    def shapes(self):
        return [(self.n_classes, self.n_features), (self.n_classes, 1)]

    def init_params(self, rng):
        return [np.zeros(s) for s in self.shapes()]

    def logits(self, params, inputs):
        W, b = params
        return inputs @ W.T + b[:, 0]

    def loss_grad(self, params, batch):
        params = self.check_params(params)
        self.check_batch(batch)
        X, y = batch.inputs, batch.targets
        z = self.logits(params, X)
        loss, p = _cross_entropy(z, y)
        delta = (p - _onehot(y, self.n_classes)) / len(y)
        correct = int(np.sum(np.argmax(z, axis=1) == y))
        return LossGradReport(loss, [delta.T @ X, delta.sum(axis=0)[:, None]], correct)

    def hvp(self, params, batch, v):
        params = self.check_params(params)
        VW, Vb = self.check_params(v, "v")
        X = batch.inputs
        p = _softmax(self.logits(params, X))
        dz = X @ VW.T + Vb[:, 0]
        # (diag(p) - p p^T) dz, row by row
        dp = p * dz - p * np.sum(p * dz, axis=1, keepdims=True)
        dp /= len(X)
        return [dp.T @ X, dp.sum(axis=0)[:, None]]


class MLPModel(Model):
    """Two-layer tanh network: [W1 (hidden, in), b1, W2 (classes, hidden), b2].

    The HVP is a central difference of the analytic gradient along v.
    """

    kind = "mlp"

    def __init__(self, n_features: int, hidden: int, n_classes: int):
        self.n_features = n_features
        self.hidden = hidden
        self.n_classes = n_classes

    def shapes(self):
        return [(self.hidden, self.n_features), (self.hidden, 1), (self.n_classes, self.hidden), (self.n_classes, 1)]

    def init_params(self, rng):
        out = []
        for rows, cols in self.shapes():
            if cols == 1:
                out.append(np.zeros((rows, 1)))
            else:
                limit = np.sqrt(6.0 / (rows + cols))
                out.append(rng.uniform(-limit, limit, size=(rows, cols)))
        return out

    def _forward(self, params, X):
        W1, b1, W2, b2 = params
        A1 = np.tanh(X @ W1.T + b1[:, 0])
        return A1, A1 @ W2.T + b2[:, 0]

    def logits(self, params, inputs):
        return self._forward(params, inputs)[1]

    def loss_grad(self, params, batch):
        params = self.check_params(params)
        self.check_batch(batch)
        W1, b1, W2, b2 = params
        X, y = batch.inputs, batch.targets
        A1, z = self._forward(params, X)
        loss, p = _cross_entropy(z, y)
        d2 = (p - _onehot(y, self.n_classes)) / len(y)
        d1 = (d2 @ W2) * (1.0 - A1 * A1)
        grads = [d1.T @ X, d1.sum(axis=0)[:, None], d2.T @ A1, d2.sum(axis=0)[:, None]]
        correct = int(np.sum(np.argmax(z, axis=1) == y))
        return LossGradReport(loss, grads, correct)

    def hvp(self, params, batch, v):
        params = self.check_params(params)
        v = self.check_params(v, "v")
        vnorm = np.sqrt(sum(float(np.sum(t * t)) for t in v))
        if vnorm == 0.0:
            return [np.zeros_like(t) for t in v]
        xnorm = np.sqrt(sum(float(np.sum(t * t)) for t in params))
        eps = 1e-4 * (1.0 + xnorm)
        step = eps / vnorm
        plus = self.loss_grad([p + step * t for p, t in zip(params, v)], batch).grads
        minus = self.loss_grad([p - step * t for p, t in zip(params, v)], batch).grads
        return [(a - b) / (2.0 * step) for a, b in zip(plus, minus)]


def build_model(kind: str, n_features: int, n_classes: int = 2, hidden: int = 16, shape=None, hessian=None) -> Model:
    if kind == "logistic":
        return LogisticModel(n_features, n_classes)
    if kind == "mlp":
        return MLPModel(n_features, hidden, n_classes)
    if kind == "quadratic":
        return QuadraticModel(shape, hessian)
    raise ValueError(f"unknown model kind {kind!r}")


def loss_grad(model: Model, params: Params, batch: Batch) -> LossGradReport:
    return model.loss_grad(params, batch)


def hvp(model: Model, params: Params, batch: Batch, v: Params) -> Params:
    return model.hvp(params, batch, v)


def evaluate(model: Model, params: Params, dataset: Batch) -> tuple[float, float]:
    """Mean loss and top-1 accuracy (ties go to the lowest class index).

    Regression tasks report accuracy 0.0.
    """
    rep = model.loss_grad(params, dataset)
    if not model.classification:
        return rep.loss, 0.0
    return rep.loss, rep.correct_count / len(dataset)


def flat(tensors: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1) for t in tensors])
