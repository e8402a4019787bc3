"""Dense matrix kernels shared by the optimizers.

All functions take and return float64 numpy arrays and never mutate their inputs.
"""

from __future__ import annotations

import numpy as np

# Quintic Newton-Schulz coefficients used by Muon.
NS_COEFFS = (3.4445, -4.7750, 2.0315)

# Above this size truncated_svd switches from a dense LAPACK SVD to randomized subspace iteration.
_DENSE_SVD_LIMIT = 64


class DegenerateInputError(ValueError):
    pass


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 stream keyed by ``seed`` and any number of integer sub-keys.

    The same (seed, keys) tuple always yields the same stream, which is what
    lets clients run in any order (or in parallel) without changing results.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} has non-finite entries")


def newton_schulz(G, steps: int = 5, eps: float = 1e-7, variant: str = "quintic") -> np.ndarray:
    """Approximate the orthogonal polar factor of ``G``.

    ``variant="quintic"`` runs X <- aX + (bA + cA^2)X with A = XX^T and the
    Muon coefficients. It is fast but does not converge to exactly orthogonal:
    singular values settle in a band around 1 (roughly 0.7 to 1.15).
    ``variant="classic"`` runs X <- (3X - AX)/2, which converges quadratically
    once the singular values are near 1.
    """
    X = as_matrix(G).copy()
    _check_finite(X, "newton_schulz input")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    norm = np.linalg.norm(X)
    if norm == 0.0:
        raise DegenerateInputError("degenerate input: zero matrix")
    if variant not in ("quintic", "classic"):
        raise ValueError(f"unknown Newton-Schulz variant {variant!r}")
    X /= norm + eps
    transposed = X.shape[0] > X.shape[1]
    if transposed:
        X = X.T
    a, b, c = NS_COEFFS
    for _ in range(steps):
        A = X @ X.T
        if variant == "quintic":
            X = a * X + (b * A + c * (A @ A)) @ X
        else:
            X = 0.5 * (3.0 * X - A @ X)
    return np.ascontiguousarray(X.T if transposed else X)


def qr_orthonormal(S: np.ndarray) -> np.ndarray:
    """Q factor of S with the sign convention diag(R) >= 0."""
    Q, R = np.linalg.qr(S)
    signs = np.where(np.diag(R) < 0.0, -1.0, 1.0)
    return Q * signs


def qr_eigenvectors(P, Q) -> np.ndarray:
    """One subspace-iteration refresh of ``Q`` toward the eigenvectors of ``P``."""
    P = as_matrix(P)
    Q = as_matrix(Q)
    if P.shape[0] != P.shape[1]:
        raise ValueError(f"P must be square, got {P.shape}")
    if Q.shape != P.shape:
        raise ValueError(f"dimension mismatch: P {P.shape} vs Q {Q.shape}")
    return qr_orthonormal(P @ Q)


def truncated_svd(A, rank: int, rng: np.random.Generator | None = None):
    """Rank-``rank`` SVD of ``A`` as (U, s, V) with A ~= U @ diag(s) @ V.T."""
    A = as_matrix(A)
    m, n = A.shape
    if not 1 <= rank <= min(m, n):
        raise ValueError(f"rank {rank} out of range [1, {min(m, n)}]")
    if max(m, n) <= _DENSE_SVD_LIMIT:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        return U[:, :rank].copy(), s[:rank].copy(), Vt[:rank].T.copy()
    return _randomized_svd(A, rank, rng if rng is not None else make_rng(0))


def _randomized_svd(A: np.ndarray, rank: int, rng: np.random.Generator, power_iters: int = 2, oversample: int = 10):
    m, n = A.shape
    width = min(n, rank + oversample)
    Y = A @ rng.standard_normal((n, width))
    Qy = qr_orthonormal(Y)
    for _ in range(power_iters):
        Qz = qr_orthonormal(A.T @ Qy)
        Qy = qr_orthonormal(A @ Qz)
    B = Qy.T @ A
    Ub, s, Vt = np.linalg.svd(B, full_matrices=False)
    U = Qy @ Ub
    return U[:, :rank].copy(), s[:rank].copy(), Vt[:rank].T.copy()


def spectral_norm(A, iters: int = 10_000, tol: float = 1e-6, seed: int = 0) -> float:
    """Largest singular value of ``A`` by power iteration on A^T A.

    Stops once the eigen-residual of A^T A relative to the current Rayleigh
    quotient drops below ``tol**2``, which bounds the singular-value error
    well below ``tol`` relative.
    """
    A = as_matrix(A)
    _check_finite(A, "spectral_norm input")
    if not np.any(A):
        return 0.0
    B = A.T @ A
    v = make_rng(seed).standard_normal(B.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = B @ v
        lam = float(v @ w)
        wn = np.linalg.norm(w)
        if wn == 0.0:
            # start vector landed in the null space; restart along a coordinate axis
            v = np.zeros_like(v)
            v[int(np.argmax(np.sum(B * B, axis=0)))] = 1.0
            continue
        if np.linalg.norm(w - lam * v) <= tol * tol * max(lam, 1e-300):
            break
        v = w / wn
    return float(np.sqrt(max(lam, 0.0)))
