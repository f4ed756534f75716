"""Symmetric-matrix kernel.

Dense symmetric matrices with PSD-aware operations (eigendecomposition,
PSD square roots, Frobenius products of square roots, top eigenvalues)
plus a rank-one outer-product representation used as a fast path by the
coherence and simulation modules.  Every rank-one shortcut has a dense
reference path and the two are held to 1e-9 relative agreement in tests.

All values are immutable once built and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .errors import InvalidMatrix, NotPSD, ShapeError

# Above this dimension lambda_max switches from a full dense
# eigendecomposition to a Lanczos iteration with a fixed start vector
# (deterministic within one build, matches the dense result to well
# below the 1e-9 contract).
_LANCZOS_DIM = 512

DEFAULT_PSD_TOL = 1e-10


def _as_array(matrix) -> np.ndarray:
    if isinstance(matrix, SymMatrix):
        return matrix.a
    return np.asarray(matrix, dtype=float)


@dataclass(frozen=True)
class SymMatrix:
    """Dense symmetric real matrix.

    Construction symmetrizes the input (``0.5 * (A + A.T)``, which makes
    ``entries[i, j] == entries[j, i]`` exact) and rejects non-finite or
    non-square input with :class:`InvalidMatrix`.
    """

    a: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.a, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise InvalidMatrix(f"expected a square matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidMatrix("matrix entries must be finite")
        sym = 0.5 * (arr + arr.T)
        sym.setflags(write=False)
        object.__setattr__(self, "a", sym)

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @staticmethod
    def identity(dim: int) -> "SymMatrix":
        return SymMatrix(np.eye(dim))

    @staticmethod
    def zero(dim: int) -> "SymMatrix":
        return SymMatrix(np.zeros((dim, dim)))

    def trace(self) -> float:
        return float(np.trace(self.a))

    def frobenius(self) -> float:
        return float(np.linalg.norm(self.a, "fro"))

    def __add__(self, other: "SymMatrix") -> "SymMatrix":
        if self.dim != other.dim:
            raise ShapeError(f"dim mismatch: {self.dim} vs {other.dim}")
        return SymMatrix(self.a + other.a)

    def __rmul__(self, scalar: float) -> "SymMatrix":
        return SymMatrix(float(scalar) * self.a)


@dataclass(frozen=True)
class RankOneFactor:
    """Weighted outer product ``weight * v v^T`` with ``weight >= 0``.

    Densification reproduces the corresponding :class:`SymMatrix`; the
    closed forms below are the fast paths for the operations the dense
    representation would go through.
    """

    vector: np.ndarray
    weight: float

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=float)
        if vec.ndim != 1:
            raise InvalidMatrix(f"factor vector must be 1-d, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise InvalidMatrix("factor vector must be finite")
        w = float(self.weight)
        if not np.isfinite(w) or w < 0.0:
            raise NotPSD(f"factor weight must be finite and nonnegative, got {w}")
        vec = vec.copy()
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "weight", w)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def dense(self) -> SymMatrix:
        return SymMatrix(self.weight * np.outer(self.vector, self.vector))

    def lambda_max(self) -> float:
        # single nonzero eigenvalue of w v v^T
        return self.weight * float(self.vector @ self.vector)

    def trace_product(self, other: "RankOneFactor") -> float:
        """Tr[(w1 v1 v1^T)(w2 v2 v2^T)] = w1 w2 <v1, v2>^2."""
        if self.dim != other.dim:
            raise ShapeError(f"dim mismatch: {self.dim} vs {other.dim}")
        ip = float(self.vector @ other.vector)
        return self.weight * other.weight * ip * ip

    def apply(self, w: np.ndarray) -> np.ndarray:
        """Matrix-vector product weight * <v, w> * v without densifying."""
        return (self.weight * float(self.vector @ w)) * self.vector


def as_dense(h) -> SymMatrix:
    """Densify an ensemble member (SymMatrix passes through)."""
    if isinstance(h, RankOneFactor):
        return h.dense()
    if isinstance(h, SymMatrix):
        return h
    return SymMatrix(np.asarray(h, dtype=float))


def sym_eig(matrix):
    """Full eigendecomposition of a symmetric matrix.

    Parameters
    ----------
    matrix : SymMatrix or array_like
        Symmetric input; non-finite entries raise :class:`InvalidMatrix`.

    Returns
    -------
    eigenvalues : ndarray
        Sorted in descending order.
    eigenvectors : ndarray
        Orthonormal columns, ``eigenvectors[:, i]`` pairs with
        ``eigenvalues[i]``; reconstruction ``Q diag(lam) Q^T`` matches the
        input to 1e-9 relative.
    """
    arr = _as_array(matrix)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidMatrix(f"expected a square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidMatrix("matrix entries must be finite")
    evals, evecs = np.linalg.eigh(arr)
    return evals[::-1].copy(), evecs[:, ::-1].copy()


def psd_sqrt(matrix, tol: float = DEFAULT_PSD_TOL) -> SymMatrix:
    """Symmetric PSD square root with round-off clamping.

    Eigenvalues in ``[-tol * max(1, lam_max), 0]`` are clamped to zero;
    anything below that raises :class:`NotPSD`.  The result R satisfies
    ``R @ R ~= M`` on the clamped matrix.
    """
    evals, evecs = sym_eig(matrix)
    lam_max = max(evals[0], 0.0)
    threshold = tol * max(1.0, lam_max)
    if evals[-1] < -threshold:
        raise NotPSD(
            f"eigenvalue {evals[-1]:.6e} below PSD tolerance -{threshold:.6e}"
        )
    clamped = np.clip(evals, 0.0, None)
    root = (evecs * np.sqrt(clamped)) @ evecs.T
    return SymMatrix(root)


def frob_product(a_sqrt, b_sqrt) -> float:
    """Frobenius norm of the product of two (square-root) matrices.

    For PSD square roots this equals ``sqrt(Tr[A B])`` of the originals,
    is symmetric in its arguments, and is always nonnegative.
    """
    a = _as_array(a_sqrt)
    b = _as_array(b_sqrt)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a @ b, "fro"))


def lambda_max(matrix) -> float:
    """Largest eigenvalue of a symmetric matrix (or rank-one factor).

    Agrees with ``sym_eig(...)[0][0]`` to 1e-9 relative; large matrices
    use a Lanczos iteration seeded with a fixed start vector so results
    are deterministic within one build.
    """
    if isinstance(matrix, RankOneFactor):
        return matrix.lambda_max()
    arr = _as_array(matrix)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidMatrix(f"expected a square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidMatrix("matrix entries must be finite")
    n = arr.shape[0]
    if n > _LANCZOS_DIM:
        v0 = np.full(n, 1.0 / np.sqrt(n))
        try:
            vals = eigsh(arr, k=1, which="LA", v0=v0, return_eigenvectors=False)
            return float(vals[0])
        except ArpackNoConvergence:
            pass
    return float(np.linalg.eigvalsh(arr)[-1])
