"""Simulation functions, interfaces, output-error bounds and m-relations.

The abstraction  xi' = phi_bar(xi) + delta(xi) v  is tied to the plant through
an immersion p (with input l) for the simulation-function side, and through a
submersion m (with links b, c) for the m-relation side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .certificates import QuadraticCertificate, identity_feedback, lyapunov_value
from .linalg import CertificateError, SymMatrix, sym_eigenvalues, weighted_norm_sq
from .systems import (
    AbstractSystem,
    Box,
    DomainError,
    GridSpec,
    InputAffineSystem,
    evaluate_dynamics,
    grid_points,
    write_csv,
)

DOMAIN_TOL = 1e-12


def _vec(a) -> np.ndarray:
    return np.atleast_1d(np.asarray(a, dtype=float)).reshape(-1)


@dataclass(frozen=True)
class AbstractionMaps:
    """p, l (immersion side) and m (submersion side) with their Jacobians."""

    p: Callable
    dp_dxi: Callable
    l: Callable
    m: Callable
    dm_dx: Callable
    domain_V: Box
    operating_Xy: Box

    def check_xi(self, xi) -> np.ndarray:
        xi = _vec(xi)
        if not self.domain_V.contains(xi, DOMAIN_TOL):
            raise DomainError(
                f"xi = {xi} outside the certified domain [{self.domain_V.lower}, {self.domain_V.upper}]"
            )
        return xi

    def check_x(self, x) -> np.ndarray:
        x = _vec(x)
        if not self.operating_Xy.contains(x, DOMAIN_TOL):
            raise DomainError(f"x = {x} outside the operating region")
        return x


@dataclass(frozen=True)
class InterfaceSpec:
    """u_w(xi, x, v) = k(x, p(xi), l(xi)) + q(xi, x) v, optionally saturated."""

    gain_q: Callable
    saturation: Optional[tuple] = None
    epsilon: float = 1.0
    k_base: Callable = identity_feedback

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.saturation is not None:
            lo, hi = (_vec(b) for b in self.saturation)
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
                raise ValueError("saturation bounds must be finite with lo < hi")
            object.__setattr__(self, "saturation", (lo, hi))

    def check_against(self, cert: QuadraticCertificate) -> None:
        if not self.epsilon < cert.lam:
            raise ValueError(f"epsilon ({self.epsilon}) must be below the decay rate ({cert.lam})")


@dataclass(frozen=True)
class BoundConstants:
    """alpha_h(r) = c0 r^2, eta(r) = (lam - eps) r, gamma(r) = (d_bar^2 / eps) r^2."""

    c0: float
    lam: float
    epsilon: float
    d_bar: float

    def __post_init__(self):
        if min(self.c0, self.lam, self.epsilon, self.d_bar) <= 0:
            raise ValueError("bound constants must be strictly positive")
        if not self.epsilon < self.lam:
            raise ValueError("epsilon must be below lam")

    def alpha_h(self, r):
        return self.c0 * np.square(r)

    def eta(self, r):
        return (self.lam - self.epsilon) * r

    def gamma(self, r):
        return self.d_bar**2 / self.epsilon * np.square(r)


@dataclass
class ResidualReport:
    name: str
    locations: np.ndarray
    residuals: np.ndarray
    tol: float
    worst_index: int = field(init=False)

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        if self.locations.shape[0] != len(self.residuals) and self.locations.shape[1] == len(self.residuals):
            self.locations = self.locations.T
        self.residuals = np.asarray(self.residuals, dtype=float).reshape(-1)
        # np.argmax returns the lowest index on ties
        self.worst_index = int(np.argmax(self.residuals)) if self.residuals.size else -1

    @property
    def max_residual(self) -> float:
        return float(self.residuals[self.worst_index]) if self.residuals.size else 0.0

    @property
    def worst_location(self) -> np.ndarray:
        return self.locations[self.worst_index]

    @property
    def passed(self) -> bool:
        return bool(np.all(np.isfinite(self.residuals))) and self.max_residual <= self.tol

    def summary(self) -> str:
        loc = ", ".join(f"{v:.6g}" for v in self.worst_location) if self.residuals.size else "-"
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}  {self.name}: max residual {self.max_residual:.3e} "
            f"(tol {self.tol:.1e}) at [{loc}] over {self.residuals.size} samples"
        )

    def to_csv(self, path) -> None:
        k = self.locations.shape[1]
        header = ["sample_id"] + [f"location{i + 1}" for i in range(k)] + ["residual"]
        ids = np.arange(self.residuals.size)
        write_csv(path, header, [ids, *self.locations.T, self.residuals])


def residual_report(name: str, fn: Callable, points, tol: float) -> ResidualReport:
    pts = [np.atleast_1d(np.asarray(p, dtype=float)) for p in points]
    vals = [float(fn(p)) for p in pts]
    return ResidualReport(name, np.array(pts), np.array(vals), tol)


# ---------------------------------------------------------------------------
# simulation function and interface


def simulation_fn_value(maps: AbstractionMaps, cert: QuadraticCertificate, xi, x) -> float:
    """W(xi, x) = V(p(xi), x)."""
    xi = maps.check_xi(xi)
    return lyapunov_value(cert, maps.p(xi), x)


def interface_u(maps: AbstractionMaps, spec: InterfaceSpec, xi, x, v, saturate: bool = True) -> np.ndarray:
    xi = maps.check_xi(xi)
    x = _vec(x)
    v = _vec(v)
    base = _vec(spec.k_base(x, maps.p(xi), _vec(maps.l(xi))))
    q = np.atleast_2d(np.asarray(spec.gain_q(xi, x), dtype=float))
    u = base + q @ v
    if saturate and spec.saturation is not None:
        lo, hi = spec.saturation
        u = np.maximum(lo, np.minimum(hi, u))
    return u


def _input_direction(maps: AbstractionMaps, delta: Callable, xi) -> np.ndarray:
    dp = np.atleast_2d(np.asarray(maps.dp_dxi(xi), dtype=float))
    if dp.shape[0] == 1 and dp.shape[1] != 1:
        dp = dp.T
    return dp @ np.atleast_2d(np.asarray(delta(xi), dtype=float))


def least_squares_gain(maps: AbstractionMaps, cert: QuadraticCertificate, sys_g: Callable, delta: Callable, xi, x,
                       g_tol: float = 0.0) -> np.ndarray:
    """q minimizing ||sqrt(M) (dp/dxi delta - g q)||; zero when g(x) vanishes."""
    xi = _vec(xi)
    g = np.atleast_2d(np.asarray(sys_g(_vec(x)), dtype=float))
    if g.shape[0] == 1 and g.shape[1] != 1:
        g = g.T
    target = _input_direction(maps, delta, xi)
    if np.max(np.abs(g)) <= g_tol:
        return np.zeros((g.shape[1], target.shape[1]))
    Me = cert.M.entries
    gram = g.T @ Me @ g
    return np.linalg.solve(gram, g.T @ Me @ target)


def vartheta(maps, cert, sys_g, delta, xi, x, q) -> np.ndarray:
    """sqrt(M) (dp/dxi(xi) delta(xi) - g(x) q)."""
    xi = _vec(xi)
    g = np.atleast_2d(np.asarray(sys_g(_vec(x)), dtype=float))
    if g.shape[0] == 1 and g.shape[1] != 1:
        g = g.T
    q = np.atleast_2d(np.asarray(q, dtype=float))
    return cert.sqrt_M @ (_input_direction(maps, delta, xi) - g @ q)


def vartheta_norm(maps, cert, sys_g, delta, xi, x, q) -> float:
    """Spectral norm of the cross term; Euclidean norm of one column when m_hat = 1."""
    xi = maps.check_xi(xi)
    g = np.atleast_2d(np.asarray(sys_g(_vec(x)), dtype=float))
    if g.shape[0] == 1 and g.shape[1] != 1:
        g = g.T
    q = np.atleast_2d(np.asarray(q, dtype=float))
    w = _input_direction(maps, delta, xi) - g @ q
    if w.shape[1] == 1:
        return math.sqrt(max(weighted_norm_sq(w[:, 0], cert.M), 0.0))
    gram = w.T @ cert.M.entries @ w
    return math.sqrt(max(sym_eigenvalues(gram, 1e-12).max, 0.0))


@dataclass
class ScanResult:
    d_bar: float
    argmax: np.ndarray
    xi: np.ndarray
    values: np.ndarray

    def to_csv(self, path) -> None:
        k = self.xi.shape[1]
        header = ["xi"] if k == 1 else [f"xi{i + 1}" for i in range(k)]
        write_csv(path, header + ["vartheta_norm"], [*self.xi.T, self.values])


def scan_vartheta_bound(maps, cert, sys_g, delta, q_policy: str, grid: GridSpec, x_samples=None,
                        cap: int = 10_000_000) -> ScanResult:
    """Maximum of ||vartheta|| over a grid of xi.

    For ``q_policy='zero'`` the cross term does not depend on x, so the scan is
    over xi only. For ``'least-squares'`` every grid point is paired with every
    state in ``x_samples`` and the per-xi maximum is kept.
    """
    if q_policy not in ("zero", "least-squares"):
        raise ValueError(f"unknown q policy {q_policy!r}")
    pts = np.array(list(grid_points(grid, cap)))
    for pt in (pts[0], pts[-1]):
        maps.check_xi(pt)
    n = cert.n
    if q_policy == "zero":
        xs = [np.zeros(n)]
    else:
        if x_samples is None:
            raise ValueError("least-squares scan needs x_samples")
        xs = [_vec(x) for x in x_samples]
        if len(xs) * len(pts) > cap:
            raise ValueError(f"scan of {len(xs) * len(pts)} evaluations exceeds cap {cap}")
    values = np.empty(len(pts))
    for i, xi in enumerate(pts):
        best = 0.0
        for x in xs:
            if q_policy == "zero":
                q = np.zeros((1, np.atleast_2d(np.asarray(delta(xi))).shape[1]))
                g_fn = lambda _x: np.zeros((n, 1))  # noqa: E731 - q = 0 makes g irrelevant
            else:
                q = least_squares_gain(maps, cert, sys_g, delta, xi, x)
                g_fn = sys_g
            best = max(best, vartheta_norm(maps, cert, g_fn, delta, xi, x, q))
        values[i] = best
    k = int(np.argmax(values))
    return ScanResult(float(values[k]), pts[k], pts, values)


# ---------------------------------------------------------------------------
# output-error bounds


def asymptotic_error_bound(bc: BoundConstants, v_inf: float) -> float:
    """alpha_h^-1(eta^-1(2 gamma(v_inf))) = sqrt(2 / (c0 (lam - eps) eps)) d_bar v_inf."""
    if v_inf < 0:
        raise ValueError("v_inf must be nonnegative")
    return math.sqrt(2.0 / (bc.c0 * (bc.lam - bc.epsilon) * bc.epsilon)) * bc.d_bar * v_inf


def transient_error_bound(bc: BoundConstants, W0: float, t: float, v_inf: float = 0.0) -> float:
    """Output error bound from the comparison solution of W' <= -(lam - eps) W + gamma(v_inf).

    W(t) <= W0 exp(-(lam - eps) t) + gamma(v_inf) / (lam - eps), and
    |psi - y| <= sqrt(W(t) / c0). As t grows this tends to the asymptotic
    bound divided by sqrt(2).
    """
    if W0 < 0:
        raise ValueError("W0 must be nonnegative")
    if t < 0:
        raise ValueError("t must be nonnegative")
    rate = bc.lam - bc.epsilon
    w = W0 * math.exp(-rate * t) + float(bc.gamma(v_inf)) / rate
    return math.sqrt(w / bc.c0)


def max_form_error_bound(bc: BoundConstants, W0: float, t: float, v_inf: float = 0.0) -> float:
    """max of the decaying initial-condition term and the steady term."""
    rate = bc.lam - bc.epsilon
    decay = math.sqrt(W0 * math.exp(-rate * t) / bc.c0)
    return max(decay, asymptotic_error_bound(bc, v_inf))


# ---------------------------------------------------------------------------
# pointwise dissipation and invariance residuals


def simulation_fn_rate(maps, cert, spec, sys: InputAffineSystem, absys: AbstractSystem, xi, x, v,
                       saturate: bool = False) -> float:
    """dW/dt = 2 (p(xi) - x)^T M (dp/dxi phi(xi, v) - f(x, u_w))."""
    xi = maps.check_xi(xi)
    x = _vec(x)
    v = _vec(v)
    u = interface_u(maps, spec, xi, x, v, saturate=saturate)
    dp = np.atleast_2d(np.asarray(maps.dp_dxi(xi), dtype=float))
    if dp.shape[0] == 1 and dp.shape[1] != 1:
        dp = dp.T
    e = _vec(maps.p(xi)) - x
    return float(2.0 * e @ cert.M.entries @ (dp @ absys.phi(xi, v) - evaluate_dynamics(sys, x, u)))


def dissipation_residual(maps, cert, spec, sys, absys, xi, x, v) -> float:
    """W' - (-(lam - eps) W + ||vartheta||^2 ||v||^2 / eps) with the unsaturated interface.

    Nonpositive values certify the dissipation inequality at (xi, x, v).
    """
    xi = maps.check_xi(xi)
    x = _vec(x)
    v = _vec(v)
    eps = spec.epsilon
    w_dot = simulation_fn_rate(maps, cert, spec, sys, absys, xi, x, v)
    W = lyapunov_value(cert, maps.p(xi), x)
    q = spec.gain_q(xi, x)
    th = vartheta_norm(maps, cert, sys.g, absys.delta, xi, x, q)
    rhs = -(cert.lam - eps) * W + th * th * float(v @ v) / eps
    return w_dot - rhs


def invariance_residual_p(maps: AbstractionMaps, sys: InputAffineSystem, xi, phi_bar: Callable) -> float:
    """|| dp/dxi phi_bar(xi) - f_bar(p(xi)) - g(p(xi)) l(xi) ||."""
    xi = maps.check_xi(xi)
    dp = np.atleast_2d(np.asarray(maps.dp_dxi(xi), dtype=float))
    if dp.shape[0] == 1 and dp.shape[1] != 1:
        dp = dp.T
    lhs = dp @ _vec(phi_bar(xi))
    rhs = evaluate_dynamics(sys, maps.p(xi), maps.l(xi))
    return float(np.linalg.norm(lhs - rhs))


def output_consistency_residual(maps: AbstractionMaps, kappa: Callable, h: Callable, xi) -> float:
    """|| kappa(xi) - h(p(xi)) ||."""
    xi = maps.check_xi(xi)
    return float(np.linalg.norm(_vec(kappa(xi)) - _vec(h(_vec(maps.p(xi))))))


def _right_pseudoinverse(d: np.ndarray, rank_tol: float) -> np.ndarray:
    gram = d @ d.T
    if sym_eigenvalues(SymMatrix(gram), 1e-14).min <= rank_tol:
        raise CertificateError("delta(m(x)) is not of full row rank")
    return d.T @ np.linalg.inv(gram)


def link_coefficients(maps: AbstractionMaps, sys: InputAffineSystem, absys: AbstractSystem, x,
                      rank_tol: float = 1e-14, check: bool = True):
    """b(x), c(x) of the link v = b(x) + c(x) u.

    b = delta^+(m(x)) (dm/dx f_bar(x) - phi_bar(m(x))),  c = delta^+(m(x)) dm/dx g(x),
    with delta^+ the right pseudoinverse. ``check=False`` skips the operating
    region test (simulations flag region exits themselves).
    """
    x = maps.check_x(x) if check else _vec(x)
    xi = _vec(maps.m(x))
    dm = np.atleast_2d(np.asarray(maps.dm_dx(x), dtype=float))
    d = np.atleast_2d(np.asarray(absys.delta(xi), dtype=float))
    d_pinv = _right_pseudoinverse(d, rank_tol)
    fb = _vec(sys.f_bar(x))
    g = np.atleast_2d(np.asarray(sys.g(x), dtype=float)).reshape(sys.n, sys.m)
    b = d_pinv @ (dm @ fb - _vec(absys.phi_bar(xi)))
    c = d_pinv @ (dm @ g)
    return b, c


def mrelation_residuals(maps, sys, absys, x):
    """(r_a, r_b): how far (m, b, c) are from satisfying the two m-relation identities."""
    x = maps.check_x(x)
    xi = _vec(maps.m(x))
    b, c = link_coefficients(maps, sys, absys, x)
    dm = np.atleast_2d(np.asarray(maps.dm_dx(x), dtype=float))
    d = np.atleast_2d(np.asarray(absys.delta(xi), dtype=float))
    g = np.atleast_2d(np.asarray(sys.g(x), dtype=float)).reshape(sys.n, sys.m)
    r_a = np.linalg.norm(dm @ _vec(sys.f_bar(x)) - _vec(absys.phi_bar(xi)) - d @ b)
    r_b = np.linalg.norm(dm @ g - d @ c)
    return float(r_a), float(r_b)


def kernel_condition_residual(maps: AbstractionMaps, h_matrix, x) -> float:
    """|| C (x - p(m(x))) || for a linear output map y = C x."""
    if callable(h_matrix):
        raise TypeError("kernel condition needs a linear output map given by its matrix")
    C = np.atleast_2d(np.asarray(h_matrix, dtype=float))
    x = maps.check_x(x)
    return float(np.linalg.norm(C @ (x - _vec(maps.p(_vec(maps.m(x)))))))


def jacobian_fd_error(fn: Callable, jac: Callable, point, step: float = 1e-6) -> float:
    """Relative difference between an analytic Jacobian and central differences."""
    point = _vec(point)
    J = np.atleast_2d(np.asarray(jac(point), dtype=float))
    cols = []
    for k in range(point.shape[0]):
        e = np.zeros_like(point)
        e[k] = step
        cols.append((_vec(fn(point + e)) - _vec(fn(point - e))) / (2 * step))
    J_fd = np.column_stack(cols)
    if J.shape != J_fd.shape:
        J = J.reshape(J_fd.shape)
    scale = max(float(np.linalg.norm(J)), 1e-300)
    return float(np.linalg.norm(J_fd - J)) / scale


def sample_cloud(rng: np.random.Generator, boxes: Sequence[Box], count: int):
    """Independent uniform samples from each box, zipped."""
    parts = [b.sample(rng, count) for b in boxes]
    return list(zip(*parts))
