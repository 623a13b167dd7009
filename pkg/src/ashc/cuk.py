"""Averaged model of the DC-to-DC Cuk converter and its one-dimensional abstraction.

States are x = (i1, v2, i3, v4), the input u in [0, 1] is the duty cycle and
the output is y = v4. The abstraction has a single state xi (the duty cycle
of the equilibrium it tracks) and a single input v.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .certificates import QuadraticCertificate, verify_polytopic_lmi
from .engine import AbstractionMaps, InterfaceSpec, jacobian_fd_error, least_squares_gain
from .linalg import SymMatrix
from .systems import AbstractSystem, Box, DomainError, InputAffineSystem, affine_form_discrepancy

# Lyapunov weight found for lam = 2 at the two duty-cycle vertices
DEFAULT_M = (
    (0.4804, 0.0102, 0.0002, -0.0093),
    (0.0102, 0.5304, 0.0081, 0.0001),
    (0.0002, 0.0081, 0.4824, -0.0135),
    (-0.0093, 0.0001, -0.0135, 0.5304),
)
DEFAULT_LAMBDA = 2.0
OUTPUT_MATRIX = np.array([[0.0, 0.0, 0.0, 1.0]])
DELTA_VARIANTS = ("unit", "redesigned")


class ConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class CukParams:
    R_i: float = 0.05
    L1: float = 0.010
    L3: float = 0.010
    C2: float = 0.011
    C4: float = 0.011
    G_L: float = 0.0447
    E: float = 12.0

    def __post_init__(self):
        for name in ("R_i", "L1", "L3", "C2", "C4", "G_L", "E"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"parameter {name} must be strictly positive, got {v}")

    @property
    def k(self) -> float:
        """Loss product G_L * R_i."""
        return self.G_L * self.R_i

    @property
    def y_extreme(self) -> float:
        """E / (2 sqrt(R_i G_L)): the largest |v4| any equilibrium reaches."""
        return self.E / (2.0 * math.sqrt(self.k))


# ---------------------------------------------------------------------------
# plant


def f_bar(params: CukParams, x) -> np.ndarray:
    P = params
    x1, x2, x3, x4 = x
    return np.array([
        (-P.R_i * x1 - x2 + P.E) / P.L1,
        x1 / P.C2,
        -x4 / P.L3,
        (x3 - P.G_L * x4) / P.C4,
    ])


def g_col(params: CukParams, x) -> np.ndarray:
    # third row is -v2/L3: it follows from L3 di3/dt = -u v2 - v4
    P = params
    x1, x2, x3, _ = x
    return np.array([[x2 / P.L1], [(x3 - x1) / P.C2], [-x2 / P.L3], [0.0]])


def a_bar(params: CukParams, u) -> np.ndarray:
    P = params
    u = float(np.asarray(u).reshape(-1)[0])
    return np.array([
        [-P.R_i / P.L1, -(1.0 - u) / P.L1, 0.0, 0.0],
        [(1.0 - u) / P.C2, 0.0, u / P.C2, 0.0],
        [0.0, -u / P.L3, 0.0, -1.0 / P.L3],
        [0.0, 0.0, 1.0 / P.C4, -P.G_L / P.C4],
    ])


def b_bar(params: CukParams) -> np.ndarray:
    return np.array([params.E / params.L1, 0.0, 0.0, 0.0])


def storage(params: CukParams, x) -> float:
    """Energy stored in the two inductors and two capacitors."""
    P = params
    x1, x2, x3, x4 = x
    return 0.5 * (P.L1 * x1 * x1 + P.C2 * x2 * x2 + P.L3 * x3 * x3 + P.C4 * x4 * x4)


# ---------------------------------------------------------------------------
# equilibrium family p(xi) and its inverse on the output


def _scalar(xi) -> float:
    if isinstance(xi, float):
        return xi
    return float(np.asarray(xi).reshape(-1)[0])


def _den(params: CukParams, xi: float):
    d = (xi - 1.0) ** 2 + params.k * xi * xi
    dd = 2.0 * (xi - 1.0) + 2.0 * params.k * xi
    return d, dd


def p_map(params: CukParams, xi) -> np.ndarray:
    xi = _scalar(xi)
    E, G = params.E, params.G_L
    D, _ = _den(params, xi)
    return np.array([
        E * G * xi * xi / D,
        -E * (xi - 1.0) / D,
        E * G * xi * (xi - 1.0) / D,
        E * xi * (xi - 1.0) / D,
    ])


def dp_map(params: CukParams, xi) -> np.ndarray:
    """dp/dxi as a 4x1 column (quotient rule)."""
    xi = _scalar(xi)
    E, G = params.E, params.G_L
    D, dD = _den(params, xi)
    D2 = D * D
    s = xi * (xi - 1.0)
    ds = 2.0 * xi - 1.0
    return np.array([
        [E * G * (2.0 * xi * D - xi * xi * dD) / D2],
        [-E * (D - (xi - 1.0) * dD) / D2],
        [E * G * (ds * D - s * dD) / D2],
        [E * (ds * D - s * dD) / D2],
    ])


def kappa_map(params: CukParams, xi) -> float:
    xi = _scalar(xi)
    D, _ = _den(params, xi)
    return params.E * xi * (xi - 1.0) / D


def m_map(params: CukParams, x4, root: str = "principal") -> float:
    """Root of the output-matching quadratic that inverts kappa on [0, 0.95].

    ``root='other'`` selects the second root (used only for fault injection).
    """
    x4 = float(np.asarray(x4).reshape(-1)[-1])
    E, k = params.E, params.k
    chi = E * E - 4.0 * k * x4 * x4
    if chi < 0:
        raise DomainError(f"v4 = {x4} outside the solvable interval [-{params.y_extreme:.2f}, {params.y_extreme:.2f}]")
    sq = math.sqrt(chi) if root == "principal" else -math.sqrt(chi)
    return (-E + 2.0 * x4 + sq) / (2.0 * (k + 1.0) * x4 - 2.0 * E)


def dm_map(params: CukParams, x4) -> float:
    """d m / d v4 for the principal root."""
    x4 = float(np.asarray(x4).reshape(-1)[-1])
    E, k = params.E, params.k
    chi = E * E - 4.0 * k * x4 * x4
    if chi <= 0:
        raise DomainError(f"v4 = {x4} at or beyond the fold of kappa")
    sq = math.sqrt(chi)
    num = -E + 2.0 * x4 + sq
    dnum = 2.0 - 4.0 * k * x4 / sq
    den = 2.0 * (k + 1.0) * x4 - 2.0 * E
    dden = 2.0 * (k + 1.0)
    return (dnum * den - num * dden) / (den * den)


def quadratic_root_check(params: CukParams, x4, m_val) -> float:
    """|[(G_L R_i + 1) v4 - E] m^2 + (E - 2 v4) m + v4|."""
    E, k = params.E, params.k
    return abs(((k + 1.0) * x4 - E) * m_val * m_val + (E - 2.0 * x4) * m_val + x4)


def delta_map(params: CukParams, variant: str, xi) -> float:
    if variant == "unit":
        return 1.0
    if variant == "redesigned":
        D, _ = _den(params, _scalar(xi))
        return D * D
    raise ValueError(f"unknown delta variant {variant!r}; expected one of {DELTA_VARIANTS}")


def link_b_closed_form(params: CukParams, x, reading: str = "printed") -> float:
    """Closed-form b(x) for the redesigned delta as typeset in the source.

    The printed denominator uses chi = E^2 - 4 G_L R_i v4^2 where a square root
    may have been lost; ``reading='sqrt'`` substitutes sqrt(chi) for chi.
    """
    P = params
    _, _, x3, x4 = x
    E, k = P.E, P.k
    chi = E * E - 4.0 * k * x4 * x4
    if reading == "sqrt":
        chi = math.sqrt(chi)
    elif reading != "printed":
        raise ValueError(f"unknown reading {reading!r}")
    num = 2.0 * (x3 - P.G_L * x4) * (x4 - E + k * x4) ** 2
    den = P.C4 * E * chi * (E + chi - k * chi + E * k - 4.0 * k * x4)
    return -num / den


# ---------------------------------------------------------------------------
# assembly


@dataclass(frozen=True)
class CukAbstraction:
    params: CukParams
    delta_variant: str
    plant: InputAffineSystem
    abstract: AbstractSystem
    maps: AbstractionMaps
    cert: QuadraticCertificate
    interface: InterfaceSpec
    output_matrix: np.ndarray
    output_box: Box
    sample_box: Box
    m_root: str = "principal"
    p4_offset: float = 0.0
    notes: dict = field(default_factory=dict)

    def vertices(self):
        return [a_bar(self.params, 0.0), a_bar(self.params, 1.0)]

    def kappa_inverse(self, y: float) -> float:
        return m_map(self.params, y, self.m_root)

    def delta(self, xi) -> float:
        return delta_map(self.params, self.delta_variant, xi)

    def with_interface(self, **changes) -> "CukAbstraction":
        return replace(self, interface=replace(self.interface, **changes))


def build_cuk(
    params: CukParams | None = None,
    delta_variant: str = "redesigned",
    *,
    M=DEFAULT_M,
    lam: float = DEFAULT_LAMBDA,
    epsilon: float = 1.0,
    saturation=(0.0, 1.0),
    domain=(0.0, 0.95),
    output_box=(-120.0, 0.0),
    p4_offset: float = 0.0,
    m_root: str = "principal",
    validate: bool = True,
) -> CukAbstraction:
    """Wire the converter model into the generic abstraction machinery.

    ``p4_offset`` and ``m_root`` exist for fault injection; with ``validate``
    left on, either fault makes construction fail.
    """
    P = params or CukParams()
    if delta_variant not in DELTA_VARIANTS:
        raise ValueError(f"unknown delta variant {delta_variant!r}; expected one of {DELTA_VARIANTS}")
    if m_root not in ("principal", "other"):
        raise ValueError("m_root must be 'principal' or 'other'")

    plant = InputAffineSystem(
        n=4, m=1, p_out=1,
        f_bar=lambda x: f_bar(P, x),
        g=lambda x: g_col(P, x),
        h=lambda x: np.array([x[3]]),
        A_bar=lambda u: a_bar(P, u),
        b_bar=b_bar(P),
        operating_box=Box([-np.inf] * 3 + [output_box[0]], [np.inf] * 3 + [output_box[1]]),
        name="cuk",
    )

    def p(xi):
        out = p_map(P, xi)
        out[3] += p4_offset
        return out

    def kappa(xi):
        return np.array([kappa_map(P, xi)])

    def delta(xi):
        return np.array([[delta_map(P, delta_variant, xi)]])

    abstract = AbstractSystem(
        n_hat=1, m_hat=1,
        phi_bar=lambda xi: np.zeros(1),
        delta=delta,
        kappa=kappa,
        domain=Box([domain[0]], [domain[1]]),
        name=f"cuk-abstraction[{delta_variant}]",
    )

    def dm_dx(x):
        return np.array([[0.0, 0.0, 0.0, dm_map(P, x[3])]])

    maps = AbstractionMaps(
        p=p,
        dp_dxi=lambda xi: dp_map(P, xi),
        l=lambda xi: np.atleast_1d(np.asarray(xi, dtype=float)).copy(),
        m=lambda x: np.array([m_map(P, x[3], m_root)]),
        dm_dx=dm_dx,
        domain_V=abstract.domain,
        operating_Xy=plant.operating_box,
    )

    cert = QuadraticCertificate(SymMatrix(M), lam)

    def gain_q(xi, x):
        return least_squares_gain(maps, cert, plant.g, delta, xi, x)

    interface = InterfaceSpec(gain_q=gain_q, saturation=saturation, epsilon=epsilon)
    interface.check_against(cert)

    # sampling region: the span of the equilibrium family, padded
    fam = np.array([p_map(P, xi) for xi in np.linspace(domain[0], domain[1], 201)])
    lo, hi = fam.min(axis=0), fam.max(axis=0)
    pad = 0.25 * (hi - lo) + 1.0
    lo, hi = lo - pad, hi + pad
    lo[3], hi[3] = output_box
    sample_box = Box(lo, hi)

    cuk = CukAbstraction(
        params=P, delta_variant=delta_variant, plant=plant, abstract=abstract, maps=maps,
        cert=cert, interface=interface, output_matrix=OUTPUT_MATRIX.copy(),
        output_box=Box([output_box[0]], [output_box[1]]), sample_box=sample_box,
        m_root=m_root, p4_offset=p4_offset,
    )
    if validate:
        validate_cuk(cuk)
    return cuk


def validate_cuk(cuk: CukAbstraction, tol: float = 1e-8) -> None:
    """Spot-check the identities the assembly relies on; raise ConstructionError naming the first failure."""
    P = cuk.params
    lo, hi = float(cuk.maps.domain_V.lower[0]), float(cuk.maps.domain_V.upper[0])
    xis = np.linspace(lo, hi, 21)
    rng = np.random.default_rng(12345)

    def fail(what, detail):
        raise ConstructionError(f"{what} violated: {detail}")

    for xi in xis:
        r = np.linalg.norm(cuk.plant.f(cuk.maps.p(xi), cuk.maps.l(xi)))
        if r > tol:
            fail("equilibrium identity f(p(xi), xi) = 0", f"residual {r:.3e} at xi = {xi:.4f}")
        r = abs(cuk.maps.m(cuk.maps.p(xi))[0] - xi)
        if r > 1e-9:
            fail("left inverse m(p(xi)) = xi", f"error {r:.3e} at xi = {xi:.4f}")
        if cuk.delta(xi) <= 0:
            fail("delta(xi) > 0", f"delta = {cuk.delta(xi)} at xi = {xi:.4f}")
    for xi in np.linspace(lo + 1e-3, hi - 1e-3, 7):
        err = jacobian_fd_error(cuk.maps.p, cuk.maps.dp_dxi, [xi])
        if err > 1e-5:
            fail("dp/dxi matches finite differences", f"relative error {err:.3e} at xi = {xi:.4f}")
    for x4 in np.linspace(cuk.output_box.lower[0] + 1e-3, cuk.output_box.upper[0] - 1e-3, 7):
        err = jacobian_fd_error(lambda x: cuk.maps.m(x), cuk.maps.dm_dx, [1.0, 1.0, 1.0, x4])
        if err > 1e-5:
            fail("dm/dx matches finite differences", f"relative error {err:.3e} at v4 = {x4:.4f}")
    for x, u in zip(cuk.sample_box.sample(rng, 10), rng.uniform(0, 1, 10)):
        r = affine_form_discrepancy(cuk.plant, x, [u])
        if r > 1e-9:
            fail("f_bar(x) + g(x)u = A_bar(u)x + b_bar", f"discrepancy {r:.3e}")
    if kappa_map(P, 0.0) != 0.0 or abs(kappa_map(P, 1.0)) > 1e-12:
        fail("kappa(0) = kappa(1) = 0", "nonzero endpoint")
    kmin = min(kappa_map(P, xi) for xi in np.linspace(0, 1, 2001))
    if kmin <= -P.y_extreme - 1e-9:
        fail("min kappa above -E/(2 sqrt(R_i G_L))", f"min {kmin}")
    if not verify_polytopic_lmi(cuk.vertices(), cuk.cert.M, cuk.cert.lam, 1e-6).feasible:
        fail("polytopic LMI at u in {0, 1}", f"lam = {cuk.cert.lam}")


# ---------------------------------------------------------------------------
# scalar-arithmetic vector fields for the two interconnections
#
# Same contract as integrate.HierarchicalLoop / integrate.MrelationLink, written
# with Python floats because the generic versions spend most of their time in
# small-array overhead. Tests compare both routes pointwise.


class CukHierarchicalLoop:
    def __init__(self, cuk: CukAbstraction, policy, saturate: bool = True):
        if cuk.p4_offset or cuk.m_root != "principal":
            raise ValueError("the scalar loop only supports the unfaulted model")
        self.cuk = cuk
        self.policy = policy
        self._scalar_policy = getattr(policy, "scalar", None)
        sat = cuk.interface.saturation if saturate else None
        self.sat = None if sat is None else (float(sat[0][0]), float(sat[1][0]))
        self.M = [[float(v) for v in row] for row in cuk.cert.M.entries]
        self.lo = float(cuk.maps.domain_V.lower[0])
        self.hi = float(cuk.maps.domain_V.upper[0])
        self.redesigned = cuk.delta_variant == "redesigned"

    def _v(self, t, xi):
        if self._scalar_policy is not None:
            return self._scalar_policy(t, xi)
        return float(np.asarray(self.policy(t, np.array([xi]))).reshape(-1)[0])

    def evaluate(self, t, y):
        P = self.cuk.params
        E, G, k = P.E, P.G_L, P.k
        xi = min(max(float(y[0]), self.lo), self.hi)
        x1, x2, x3, x4 = float(y[1]), float(y[2]), float(y[3]), float(y[4])
        v = self._v(t, xi)

        a = xi - 1.0
        D = a * a + k * xi * xi
        dD = 2.0 * a + 2.0 * k * xi
        D2 = D * D
        s = xi * a
        ds = 2.0 * xi - 1.0
        p = (E * G * xi * xi / D, -E * a / D, E * G * s / D, E * s / D)
        dp = (
            E * G * (2.0 * xi * D - xi * xi * dD) / D2,
            -E * (D - a * dD) / D2,
            E * G * (ds * D - s * dD) / D2,
            E * (ds * D - s * dD) / D2,
        )
        delta = D2 if self.redesigned else 1.0
        g = (x2 / P.L1, (x3 - x1) / P.C2, -x2 / P.L3, 0.0)
        M = self.M
        Mg = [M[i][0] * g[0] + M[i][1] * g[1] + M[i][2] * g[2] for i in range(4)]
        gMg = Mg[0] * g[0] + Mg[1] * g[1] + Mg[2] * g[2] + Mg[3] * g[3]
        if g[0] == 0.0 and g[1] == 0.0 and g[2] == 0.0:
            q = 0.0
        else:
            q = (Mg[0] * dp[0] + Mg[1] * dp[1] + Mg[2] * dp[2] + Mg[3] * dp[3]) * delta / gMg
        u_raw = xi + q * v
        u = u_raw
        sat = False
        if self.sat is not None:
            u = min(max(u_raw, self.sat[0]), self.sat[1])
            sat = u != u_raw
        dy = np.array([
            delta * v,
            (-P.R_i * x1 - x2 + E) / P.L1 + g[0] * u,
            x1 / P.C2 + g[1] * u,
            -x4 / P.L3 + g[2] * u,
            (x3 - G * x4) / P.C4,
        ])
        return dy, np.array(p), np.array([u]), np.array([v]), sat

    def outputs(self, Y):
        P = self.cuk.params
        xi = Y[:, 0]
        D = (xi - 1.0) ** 2 + P.k * xi * xi
        return Y[:, 4:5].copy(), (P.E * xi * (xi - 1.0) / D)[:, None]


class CukMrelationLink:
    def __init__(self, cuk: CukAbstraction, u_signal):
        if cuk.p4_offset or cuk.m_root != "principal":
            raise ValueError("the scalar link only supports the unfaulted model")
        self.cuk = cuk
        self.u_signal = u_signal
        self.redesigned = cuk.delta_variant == "redesigned"

    def evaluate(self, t, y):
        P = self.cuk.params
        E, k = P.E, P.k
        xi = float(y[0])
        x1, x2, x3, x4 = float(y[1]), float(y[2]), float(y[3]), float(y[4])
        u = float(self.u_signal(t))
        # b = (dm/dv4) f_bar_4(x) / delta(m(x)); c = 0 because g_4 = 0
        chi = E * E - 4.0 * k * x4 * x4
        if chi <= 0:
            raise DomainError(f"v4 = {x4} at or beyond the fold of kappa")
        sq = math.sqrt(chi)
        num = -E + 2.0 * x4 + sq
        den = 2.0 * (k + 1.0) * x4 - 2.0 * E
        dm = ((2.0 - 4.0 * k * x4 / sq) * den - num * 2.0 * (k + 1.0)) / (den * den)
        f4 = (x3 - P.G_L * x4) / P.C4
        if self.redesigned:
            mx = num / den
            Dm = (mx - 1.0) ** 2 + k * mx * mx
            Dxi = (xi - 1.0) ** 2 + k * xi * xi
            b = dm * f4 / (Dm * Dm)
            dxi = Dxi * Dxi * b
        else:
            b = dm * f4
            dxi = b
        dy = np.array([
            dxi,
            (-P.R_i * x1 - x2 + E) / P.L1 + x2 / P.L1 * u,
            x1 / P.C2 + (x3 - x1) / P.C2 * u,
            -x4 / P.L3 - x2 / P.L3 * u,
            f4,
        ])
        return dy, np.array([u]), np.array([b])

    def outputs(self, Y):
        P = self.cuk.params
        xi = Y[:, 0]
        D = (xi - 1.0) ** 2 + P.k * xi * xi
        return Y[:, 4:5].copy(), (P.E * xi * (xi - 1.0) / D)[:, None]

    def manifold_error(self, Y):
        P = self.cuk.params
        E, k = P.E, P.k
        x4 = Y[:, 4]
        m = (-E + 2.0 * x4 + np.sqrt(E * E - 4.0 * k * x4 * x4)) / (2.0 * (k + 1.0) * x4 - 2.0 * E)
        return Y[:, 0] - m
