"""Small dense symmetric linear algebra.

Everything here works on matrices of order <= 8 or so: eigenvalues come from a
cyclic Jacobi sweep written out by hand, so the certificate checks do not
depend on a LAPACK build. numpy is only used as the array container.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TOL = 1e-10
MAX_SWEEPS = 100


class EigenSolverError(RuntimeError):
    """Raised when the Jacobi iteration fails to converge within the sweep cap."""


class CertificateError(ValueError):
    """A matrix that should certify something (PD, NSD, full rank) does not."""


class SymMatrix:
    """Real symmetric matrix. The constructor symmetrizes by averaging."""

    __slots__ = ("_entries",)

    def __init__(self, entries):
        a = np.array(entries, dtype=float)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("matrix has non-finite entries")
        a = 0.5 * (a + a.T)
        a.setflags(write=False)
        self._entries = a

    @classmethod
    def identity(cls, n: int) -> "SymMatrix":
        return cls(np.eye(n))

    @classmethod
    def diag(cls, values) -> "SymMatrix":
        return cls(np.diag(np.asarray(values, dtype=float)))

    @property
    def order(self) -> int:
        return self._entries.shape[0]

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    def __array__(self, dtype=None, copy=None):
        return np.array(self._entries, dtype=dtype)

    def __add__(self, other):
        return SymMatrix(self._entries + np.asarray(other, dtype=float))

    def __sub__(self, other):
        return SymMatrix(self._entries - np.asarray(other, dtype=float))

    def __mul__(self, scalar: float):
        return SymMatrix(self._entries * float(scalar))

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, SymMatrix):
            return NotImplemented
        return np.array_equal(self._entries, other._entries)

    def __hash__(self):
        return hash(self._entries.tobytes())

    def __repr__(self):
        return f"SymMatrix({self._entries.tolist()!r})"


@dataclass(frozen=True)
class EigenReport:
    eigenvalues: np.ndarray
    max_offdiag_residual: float
    tol: float
    sweeps: int
    eigenvectors: np.ndarray = field(repr=False)

    @property
    def min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def max(self) -> float:
        return float(self.eigenvalues[-1])

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _as_sym(S) -> SymMatrix:
    return S if isinstance(S, SymMatrix) else SymMatrix(S)


def _max_offdiag(a: np.ndarray) -> float:
    n = a.shape[0]
    if n == 1:
        return 0.0
    return float(np.max(np.abs(a[~np.eye(n, dtype=bool)])))


def sym_eigenvalues(S, tol: float = DEFAULT_TOL, max_sweeps: int = MAX_SWEEPS) -> EigenReport:
    """Eigenvalues (ascending) of a symmetric matrix by cyclic Jacobi rotations.

    Iterates until every off-diagonal entry is at most ``tol`` in absolute
    value. Rotations whose target entry is already negligible relative to the
    diagonal are skipped (threshold sweep).
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    a = np.array(_as_sym(S).entries, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    sweeps = 0
    off = _max_offdiag(a)
    while off > tol:
        if sweeps >= max_sweeps:
            raise EigenSolverError(
                f"Jacobi did not converge after {max_sweeps} sweeps "
                f"(max off-diagonal {off:.3e} > tol {tol:.1e})"
            )
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app, aqq = a[p, p], a[q, q]
                if abs(apq) <= 1e-18 * (abs(app) + abs(aqq)):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        off = _max_offdiag(a)
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return EigenReport(w[order], off, tol, sweeps, v[:, order])


def min_eigenvalue(S, tol: float = DEFAULT_TOL) -> float:
    return sym_eigenvalues(S, tol).min


def max_eigenvalue(S, tol: float = DEFAULT_TOL) -> float:
    return sym_eigenvalues(S, tol).max


def is_negative_semidefinite(S, tol: float = DEFAULT_TOL) -> bool:
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    return max_eigenvalue(S, tol or DEFAULT_TOL) <= tol


def is_positive_semidefinite(S, tol: float = DEFAULT_TOL) -> bool:
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    return min_eigenvalue(S, tol or DEFAULT_TOL) >= -tol


def _cholesky_ok(a: np.ndarray) -> bool:
    # fast pre-check only; the eigenvalue test is authoritative
    n = a.shape[0]
    lower = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - lower[j, :j] @ lower[j, :j]
        if d <= 0.0:
            return False
        lower[j, j] = math.sqrt(d)
        for i in range(j + 1, n):
            lower[i, j] = (a[i, j] - lower[i, :j] @ lower[j, :j]) / lower[j, j]
    return True


def is_positive_definite(S, tol: float = DEFAULT_TOL) -> bool:
    """True iff the smallest eigenvalue exceeds ``tol``."""
    S = _as_sym(S)
    if not _cholesky_ok(S.entries):
        return False
    return min_eigenvalue(S, tol) > tol


def weighted_norm_sq(x, M) -> float:
    """Return x^T M x."""
    x = np.asarray(x, dtype=float).reshape(-1)
    M = _as_sym(M)
    if x.shape[0] != M.order:
        raise ValueError(f"dimension mismatch: vector of length {x.shape[0]}, matrix of order {M.order}")
    return float(x @ M.entries @ x)


def sqrt_factor(M, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Symmetric square root of a positive definite matrix."""
    M = _as_sym(M)
    rep = sym_eigenvalues(M, tol)
    if rep.min <= tol:
        raise CertificateError(f"matrix is not positive definite (min eigenvalue {rep.min:.3e})")
    v = rep.eigenvectors
    root = (v * np.sqrt(rep.eigenvalues)) @ v.T
    return 0.5 * (root + root.T)
