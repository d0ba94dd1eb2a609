"""Dense linear algebra and nonlinearities shared by the rest of the package.

Matrices and vectors are plain float64 numpy arrays. The helpers here add
shape checking with readable messages and a generalized symmetric-definite
eigensolver used by the CCA code.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from glstm.errors import DecompositionError, ShapeError


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {arr.shape}")
    return arr


def as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {arr.shape}")
    return arr


def sigmoid(v) -> np.ndarray:
    """Logistic function, evaluated without overflow for large |v|."""
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def tanh_act(v) -> np.ndarray:
    return np.tanh(np.asarray(v, dtype=np.float64))


def softmax(v) -> np.ndarray:
    v = as_vector(v)
    if v.size == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(v - v.max())
    return e / e.sum()


def log_softmax(v) -> np.ndarray:
    v = as_vector(v)
    if v.size == 0:
        raise ShapeError("log_softmax of an empty vector")
    shifted = v - v.max()
    return shifted - np.log(np.exp(shifted).sum())


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matvec(a, v) -> np.ndarray:
    a, v = as_matrix(a), as_vector(v)
    if a.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by vector {v.shape}")
    return a @ v


def outer(u, v) -> np.ndarray:
    return np.outer(as_vector(u), as_vector(v))


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def mul(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot multiply elementwise {a.shape} and {b.shape}")
    return a * b


def sym_generalized_eig(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``A u = lambda B u`` for symmetric A and symmetric positive-definite B.

    B is Cholesky-factored as ``L L^T``; the whitened problem
    ``L^{-1} A L^{-T} y = lambda y`` is handed to a dense symmetric
    eigensolver and ``u = L^{-T} y`` recovers the original directions.

    Returns:
        eigenvalues in descending order, and a matrix whose columns are the
        matching B-orthonormal eigenvectors. Each column's entry of largest
        magnitude is made positive so the output is sign-stable.
    """
    a, b = as_matrix(a), as_matrix(b)
    n = a.shape[0]
    if a.shape != (n, n) or b.shape != (n, n):
        raise ShapeError(f"generalized eigenproblem needs square A, B of equal size, got {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DecompositionError("non-finite entries in eigenproblem inputs")
    try:
        chol = np.linalg.cholesky(0.5 * (b + b.T))
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(
            "B is not positive definite; increase the ridge regularization"
        ) from exc
    tmp = solve_triangular(chol, 0.5 * (a + a.T), lower=True)
    whitened = solve_triangular(chol, tmp.T, lower=True)
    whitened = 0.5 * (whitened + whitened.T)
    vals, vecs = np.linalg.eigh(whitened)
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = solve_triangular(chol.T, vecs[:, order], lower=False)
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(n)])
    signs[signs == 0] = 1.0
    return vals, vecs * signs
