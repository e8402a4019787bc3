"""Brute-force reference computations for the test suite.

Nothing here calls into the kernels it is meant to check: the SVD and
eigendecompositions are one-sided/two-sided Jacobi written from scratch, the
derivative checks only evaluate losses, and the drift oracle works on
flattened vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class OracleReport:
    name: str
    computed: object
    reference: object
    abs_err: float
    rel_err: float

    @classmethod
    def compare(cls, name: str, computed, reference) -> "OracleReport":
        c = np.asarray(computed, dtype=float)
        r = np.asarray(reference, dtype=float)
        abs_err = float(np.max(np.abs(c - r))) if c.size else 0.0
        scale = float(np.max(np.abs(r))) if r.size else 0.0
        return cls(name, computed, reference, abs_err, abs_err / scale if scale > 0 else abs_err)


def jacobi_svd(A, tol: float = 1e-15, max_sweeps: int = 100):
    """Full thin SVD by one-sided Jacobi rotations. Returns (U, s, V), s descending."""
    A = np.array(A, dtype=float)
    transposed = A.shape[0] < A.shape[1]
    if transposed:
        A = A.T
    m, n = A.shape
    U = A.copy()
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = float(U[:, p] @ U[:, p])
                beta = float(U[:, q] @ U[:, q])
                gamma = float(U[:, p] @ U[:, q])
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                off = max(off, abs(gamma) / np.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up, uq = U[:, p].copy(), U[:, q].copy()
                U[:, p], U[:, q] = c * up - s * uq, s * up + c * uq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
        if off <= tol:
            break
    sv = np.sqrt(np.sum(U * U, axis=0))
    order = np.argsort(-sv, kind="stable")
    sv, U, V = sv[order], U[:, order], V[:, order]
    nz = sv > 0
    U[:, nz] /= sv[nz]
    if transposed:
        return V, sv, U
    return U, sv, V


def jacobi_eigh(S, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations (eigenvalues descending)."""
    A = np.array(S, dtype=float)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * max(1.0, np.linalg.norm(np.diag(A))):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if A[p, q] == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
                V = V @ J
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def polar_factor(G):
    U, _, V = jacobi_svd(G)
    return U @ V.T


def tail_energy(A, rank: int) -> float:
    _, s, _ = jacobi_svd(A)
    return float(np.sqrt(np.sum(s[rank:] ** 2)))


def fd_gradient(model, params, batch, eps: float = 1e-6) -> list[np.ndarray]:
    """Central differences of the loss, one coordinate at a time."""
    params = [np.array(p, dtype=float) for p in params]
    out = []
    for li, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            h = eps * (1.0 + abs(p[idx]))
            orig = p[idx]
            p[idx] = orig + h
            fp = model.loss(params, batch)
            p[idx] = orig - h
            fm = model.loss(params, batch)
            p[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def fd_coordinate(model, params, batch, layer: int, idx, eps: float = 1e-6) -> float:
    params = [np.array(p, dtype=float) for p in params]
    p = params[layer]
    h = eps * (1.0 + abs(p[idx]))
    orig = p[idx]
    p[idx] = orig + h
    fp = model.loss(params, batch)
    p[idx] = orig - h
    fm = model.loss(params, batch)
    return (fp - fm) / (2.0 * h)


def fd_hvp(model, params, batch, v, eps: float = 1e-5) -> list[np.ndarray]:
    """H v as a central difference of the analytic gradient along v.

    The analytic gradient is itself checked against :func:`fd_gradient`.
    """
    plus = model.loss_grad([p + eps * t for p, t in zip(params, v)], batch).grads
    minus = model.loss_grad([p - eps * t for p, t in zip(params, v)], batch).grads
    return [(a - b) / (2.0 * eps) for a, b in zip(plus, minus)]


def flatten_state(state, fields) -> np.ndarray:
    parts = []
    for layer in state.layers:
        for name in fields:
            parts.append(np.asarray(layer[name]).reshape(-1))
    return np.concatenate(parts)


def flat_drift(states, fields) -> float:
    """(1/S) sum_i ||flat(theta_i) - mean_j flat(theta_j)||^2."""
    X = np.stack([flatten_state(s, fields) for s in states])
    centered = X - X.mean(axis=0)
    return float(np.sum(centered * centered) / len(states))


class DivergedError(RuntimeError):
    pass


def centralized_descent(task, steps: int, lr: float, x0: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Full-batch gradient descent on F = (1/N) sum_i F_i, the idealized centralized update."""
    model = task.model
    x = [np.zeros(s) for s in model.shapes()] if x0 is None else [np.array(p, dtype=float) for p in x0]
    start = None
    for _ in range(steps):
        loss = 0.0
        grads = [np.zeros_like(p) for p in x]
        for shard in task.client_shards:
            rep = model.loss_grad(x, shard)
            loss += rep.loss
            grads = [g + h for g, h in zip(grads, rep.grads)]
        loss /= task.n_clients
        if start is None:
            start = loss
        if not np.isfinite(loss) or loss > 1e6 * max(1.0, abs(start)):
            raise DivergedError(f"centralized descent diverged (loss={loss})")
        x = [p - lr * g / task.n_clients for p, g in zip(x, grads)]
    return x
