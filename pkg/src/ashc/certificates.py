"""Quadratic stabilisability certificates V(x, z) = (x - z)^T M (x - z)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .linalg import (
    DEFAULT_TOL,
    CertificateError,
    SymMatrix,
    is_positive_semidefinite,
    sqrt_factor,
    sym_eigenvalues,
    weighted_norm_sq,
)
from .systems import InputAffineSystem, evaluate_dynamics


class UnsupportedPlantError(TypeError):
    """The plant lacks the structure a check relies on."""


def identity_feedback(z, x, u):
    """k(z, x, u) = u."""
    return u


@dataclass(frozen=True)
class QuadraticCertificate:
    M: SymMatrix
    lam: float
    k_base: Callable = identity_feedback
    tol: float = DEFAULT_TOL
    sigma_min: float = field(init=False)
    sigma_max: float = field(init=False)
    sqrt_M: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        M = self.M if isinstance(self.M, SymMatrix) else SymMatrix(self.M)
        object.__setattr__(self, "M", M)
        if not self.lam > 0:
            raise CertificateError(f"decay rate must be positive, got {self.lam}")
        rep = sym_eigenvalues(M, self.tol)
        if rep.min <= 0:
            raise CertificateError(f"M is not positive definite (min eigenvalue {rep.min:.3e})")
        object.__setattr__(self, "sigma_min", rep.min)
        object.__setattr__(self, "sigma_max", rep.max)
        object.__setattr__(self, "sqrt_M", sqrt_factor(M, self.tol))

    @property
    def n(self) -> int:
        return self.M.order

    def value(self, x, z) -> float:
        return lyapunov_value(self, x, z)

    # class-K envelopes of the quadratic family
    def alpha_lower(self, r):
        return self.sigma_min * np.square(r)

    def alpha_upper(self, r):
        return self.sigma_max * np.square(r)

    def alpha(self, r):
        return self.lam * self.sigma_min * np.square(r)

    def check_feedback_identity(self, samples) -> float:
        """Largest |k(x, x, u) - u| over (x, u) samples."""
        worst = 0.0
        for x, u in samples:
            u = np.atleast_1d(np.asarray(u, dtype=float))
            worst = max(worst, float(np.max(np.abs(np.asarray(self.k_base(x, x, u)) - u))))
        return worst


@dataclass(frozen=True)
class LmiReport:
    vertex_max_eigs: tuple
    m_min_eig: float
    lam: float
    tol: float
    feasible: bool

    @property
    def worst(self) -> float:
        return max(self.vertex_max_eigs)

    def to_text(self) -> str:
        lines = [f"polytopic LMI  A^T M + M A + {self.lam:g} M <= {self.tol:g} I"]
        lines.append(f"{'vertex':>6}  {'max eigenvalue':>22}")
        for i, e in enumerate(self.vertex_max_eigs):
            lines.append(f"{i:>6}  {e:>22.15e}")
        lines.append(f"min eigenvalue of M: {self.m_min_eig:.15e}")
        lines.append(f"feasible: {'yes' if self.feasible else 'no'}")
        return "\n".join(lines)


def verify_polytopic_lmi(vertices: Sequence, M, lam: float, tol: float = DEFAULT_TOL) -> LmiReport:
    """Check A_i^T M + M A_i + lam M <= tol I at every vertex, and M > 0."""
    M = M if isinstance(M, SymMatrix) else SymMatrix(M)
    if not lam > 0:
        raise ValueError("lam must be positive")
    eig_tol = min(DEFAULT_TOL, tol) if tol > 0 else DEFAULT_TOL
    Me = M.entries
    worst = []
    for i, A in enumerate(vertices):
        A = np.asarray(A, dtype=float)
        if A.shape != Me.shape:
            raise ValueError(f"vertex {i} has shape {A.shape}, M has order {M.order}")
        worst.append(sym_eigenvalues(A.T @ Me + Me @ A + lam * Me, eig_tol).max)
    m_min = sym_eigenvalues(M, eig_tol).min
    feasible = m_min > 0 and all(w <= tol for w in worst)
    return LmiReport(tuple(worst), m_min, lam, tol, feasible)


def lyapunov_value(cert: QuadraticCertificate, x, z) -> float:
    e = np.asarray(x, dtype=float).reshape(-1) - np.asarray(z, dtype=float).reshape(-1)
    return weighted_norm_sq(e, cert.M)


def check_output_lower_bound(M, C, c0: float, tol: float = DEFAULT_TOL) -> bool:
    """True iff M - c0 C^T C is positive semidefinite (within tol)."""
    if not c0 > 0:
        raise ValueError("c0 must be positive")
    M = M if isinstance(M, SymMatrix) else SymMatrix(M)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != M.order:
        raise ValueError(f"output matrix has {C.shape[1]} columns, M has order {M.order}")
    return is_positive_semidefinite(M.entries - c0 * (C.T @ C), tol)


def decrement_along_pair(cert: QuadraticCertificate, sys: InputAffineSystem, x, z, u) -> float:
    """Time derivative of V along (x, z) driven by u and k(z, x, u).

    With the default feedback this is 2 (x - z)^T M A_bar(u) (x - z); the
    caller compares it against -lam * V.
    """
    if not sys.has_affine_state_form:
        raise UnsupportedPlantError(f"{sys.name} does not expose A_bar(u) x + b_bar")
    x = np.asarray(x, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape[0] != cert.n or z.shape[0] != cert.n:
        raise ValueError("state dimension does not match the certificate")
    e = x - z
    Me = cert.M.entries
    if cert.k_base is identity_feedback:
        return float(2.0 * e @ Me @ (np.asarray(sys.A_bar(u), dtype=float) @ e))
    uz = np.atleast_1d(np.asarray(cert.k_base(z, x, u), dtype=float))
    return float(2.0 * e @ Me @ (evaluate_dynamics(sys, x, u) - evaluate_dynamics(sys, z, uz)))


def search_lmi_certificate(
    vertices: Sequence,
    lam: float,
    *,
    experimental: bool = False,
    iterations: int = 2000,
    step: float = 1e-2,
    seed: int = 0,
) -> SymMatrix:
    """Naive search for M with A_i^T M + M A_i + lam M <= 0, trace(M) = n.

    Projected subgradient descent on the largest vertex eigenvalue, normalized
    by trace. Not a substitute for an SDP solver; disabled unless
    ``experimental=True``.
    """
    if not experimental:
        raise RuntimeError("search_lmi_certificate is experimental; pass experimental=True")
    mats = [np.asarray(A, dtype=float) for A in vertices]
    n = mats[0].shape[0]
    scale = max(1.0, max(np.max(np.abs(A)) for A in mats))
    rng = np.random.default_rng(seed)
    M = np.eye(n)
    for _ in range(iterations):
        vals = []
        for A in mats:
            rep = sym_eigenvalues(A.T @ M + M @ A + lam * M, 1e-12)
            vals.append((rep.max, rep.eigenvectors[:, -1], A))
        top, w, A = max(vals, key=lambda t: t[0])
        if top <= 0:
            break
        # gradient of w^T (A^T M + M A + lam M) w with respect to M
        grad = np.outer(A @ w, w) + np.outer(w, A @ w) + lam * np.outer(w, w)
        M = M - (step / scale) * (grad + 1e-9 * rng.standard_normal((n, n)))
        M = 0.5 * (M + M.T)
        rep = sym_eigenvalues(M, 1e-12)
        clipped = np.maximum(rep.eigenvalues, 1e-6)
        M = (rep.eigenvectors * clipped) @ rep.eigenvectors.T
        M *= n / np.trace(M)
    return SymMatrix(M)
