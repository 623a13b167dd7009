"""Fixed-step RK4 and the two abstraction/plant interconnections.

``simulate_hierarchical`` closes the loop abstraction -> interface -> plant;
``simulate_mrelation`` drives the plant with an external input and feeds the
abstraction through the link v = b(x) + c(x) u.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .certificates import QuadraticCertificate
from .engine import AbstractionMaps, InterfaceSpec, link_coefficients
from .systems import AbstractSystem, InputAffineSystem, Trajectory, write_csv

log = logging.getLogger(__name__)

DEFAULT_STEP = 1e-4
MAX_STEPS = 5_000_000

HIER_COLUMNS = ("t", "xi", "x1", "x2", "x3", "x4", "u", "v", "y", "psi", "e_y", "W", "sat_flag")
MREL_COLUMNS = ("t", "xi", "x1", "x2", "x3", "x4", "u", "v", "y", "psi", "e_y")


class IntegrationError(ArithmeticError):
    def __init__(self, msg, t=None, state=None):
        super().__init__(msg)
        self.t = t
        self.state = state


class ScheduleError(ValueError):
    pass


def rk4_step(field: Callable, t: float, y: np.ndarray, h: float, k1: Optional[np.ndarray] = None) -> np.ndarray:
    """One classical Runge-Kutta step. ``k1`` may be passed if already evaluated."""
    if not h > 0:
        raise ValueError("step must be positive")
    if k1 is None:
        k1 = field(t, y)
    k2 = field(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = field(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = field(t + h, y + h * k3)
    out = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.isfinite(out).all():
        for i, k in enumerate((k1, k2, k3, k4), 1):
            if not np.isfinite(k).all():
                raise IntegrationError(f"non-finite stage {i} at t = {t:.6g}", t, y)
        raise IntegrationError(f"non-finite state after step at t = {t:.6g}", t, y)
    return out


def integrate(field: Callable, t0: float, y0, h: float, n_steps: int) -> tuple:
    """Plain fixed-step integration; returns (times, states)."""
    y = np.asarray(y0, dtype=float).copy()
    ts = t0 + h * np.arange(n_steps + 1)
    out = np.empty((n_steps + 1, y.shape[0]))
    out[0] = y
    for k in range(n_steps):
        y = rk4_step(field, ts[k], y, h)
        out[k + 1] = y
    return ts, out


# ---------------------------------------------------------------------------
# input signals


def triangle_wave(t: float) -> float:
    """(2/pi) * integral_0^t sign(sin s) ds - 1: period 2 pi, -1 at 0, +1 at pi."""
    r = math.fmod(abs(t), 2.0 * math.pi)
    if r <= math.pi:
        return 2.0 * r / math.pi - 1.0
    return 2.0 * (2.0 * math.pi - r) / math.pi - 1.0


def mrelation_input(t: float) -> float:
    """Duty-cycle test signal 0.3 tri(t - 2) + 0.1 sin(2 pi (t - 2)) + 0.45."""
    s = t - 2.0
    return 0.3 * triangle_wave(s) + 0.1 * math.sin(2.0 * math.pi * s) + 0.45


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SimConfig:
    t0: float = 0.0
    t_end: float = 30.0
    step: float = DEFAULT_STEP
    xi0: Sequence[float] = (0.6156,)
    x0: Optional[Sequence[float]] = None
    policy: str = "reference"
    policy_params: dict = field(default_factory=dict)
    csv_path: Optional[str] = None
    decimation: int = 10
    max_steps: int = MAX_STEPS

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not self.t_end > self.t0:
            raise ValueError("t_end must exceed t0")
        if self.n_steps > self.max_steps:
            raise ValueError(f"{self.n_steps} steps exceeds the cap of {self.max_steps}")
        if self.decimation < 1:
            raise ValueError("decimation must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round((self.t_end - self.t0) / self.step))

    def times(self) -> np.ndarray:
        return self.t0 + self.step * np.arange(self.n_steps + 1)


@dataclass(frozen=True)
class ReferenceSchedule:
    """Piecewise-constant output targets held for ``dwell`` seconds each."""

    targets: tuple
    dwell: float = 5.0
    kp: float = 5.0
    v_max: float = 60.0
    output_interval: tuple = (-math.inf, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(float(v) for v in self.targets))
        if not self.targets:
            raise ScheduleError("schedule needs at least one target")
        if not (self.dwell > 0 and self.kp > 0 and self.v_max > 0):
            raise ScheduleError("dwell, kp and v_max must be positive")
        lo, hi = self.output_interval
        for y in self.targets:
            if not (lo < y <= hi):
                raise ScheduleError(f"target {y} outside the solvable output interval ({lo:.2f}, {hi:.2f}]")

    @property
    def horizon(self) -> float:
        return self.dwell * len(self.targets)

    def index_at(self, t: float, t0: float = 0.0) -> int:
        k = int(math.floor((t - t0) / self.dwell + 1e-9))
        return min(max(k, 0), len(self.targets) - 1)

    def target_at(self, t: float, t0: float = 0.0) -> float:
        return self.targets[self.index_at(t, t0)]


def reference_controller(schedule: ReferenceSchedule, kappa_inverse: Callable, delta: Callable, xi, t: float,
                         t0: float = 0.0) -> float:
    """v = clip(kp (xi* - xi) / delta(xi), -v_max, v_max), xi* the preimage of the active target."""
    xi = float(np.asarray(xi).reshape(-1)[0])
    xi_star = kappa_inverse(schedule.target_at(t, t0))
    d = float(np.asarray(delta(xi)).reshape(-1)[0])
    v = schedule.kp * (xi_star - xi) / d
    return min(max(v, -schedule.v_max), schedule.v_max)


class ReferenceController:
    """``reference_controller`` with the target preimages computed once.

    The simulators call ``latch(t)`` at the start of every step so the active
    target is held over the whole step; target switches then fall on step
    boundaries and RK4 never straddles a discontinuity.
    """

    def __init__(self, schedule: ReferenceSchedule, kappa_inverse: Callable, delta: Callable, t0: float = 0.0):
        self.schedule = schedule
        self.delta = delta
        self.t0 = t0
        self.xi_targets = tuple(float(kappa_inverse(y)) for y in schedule.targets)
        self._index = None

    def latch(self, t: float) -> None:
        self._index = self.schedule.index_at(t, self.t0)

    def unlatch(self) -> None:
        self._index = None

    def scalar(self, t: float, xi: float) -> float:
        s = self.schedule
        idx = s.index_at(t, self.t0) if self._index is None else self._index
        xi_star = self.xi_targets[idx]
        d = self.delta(xi)
        if not isinstance(d, float):
            d = float(np.asarray(d).reshape(-1)[0])
        v = s.kp * (xi_star - xi) / d
        return min(max(v, -s.v_max), s.v_max)

    def __call__(self, t: float, xi) -> np.ndarray:
        return np.array([self.scalar(t, float(np.asarray(xi).reshape(-1)[0]))])


class ZeroPolicy:
    def __init__(self, m_hat: int = 1):
        self._zero = np.zeros(m_hat)

    def scalar(self, t: float, xi: float) -> float:
        return 0.0

    def __call__(self, t: float, xi) -> np.ndarray:
        return self._zero


# ---------------------------------------------------------------------------
# results


@dataclass
class SimulationResult:
    kind: str
    times: np.ndarray
    xi: np.ndarray
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    W: Optional[np.ndarray] = None
    sat_flag: Optional[np.ndarray] = None
    manifold_error: Optional[np.ndarray] = None
    saturation_count: int = 0
    clamp_count: int = 0
    region_exits: int = 0
    certified: bool = True
    warnings: list = field(default_factory=list)

    @property
    def e_y(self) -> np.ndarray:
        return self.psi - self.y

    @property
    def max_abs_error(self) -> float:
        return float(np.max(np.abs(self.e_y)))

    def concrete_trajectory(self) -> Trajectory:
        return Trajectory(self.times, self.x, self.u, self.y)

    def abstract_trajectory(self) -> Trajectory:
        return Trajectory(self.times, self.xi, self.v, self.psi)

    def columns(self) -> tuple:
        base = [self.times, self.xi[:, 0], *self.x.T, self.u[:, 0], self.v[:, 0], self.y[:, 0], self.psi[:, 0],
                self.e_y[:, 0]]
        if self.kind == "hierarchical":
            return HIER_COLUMNS, base + [self.W, self.sat_flag.astype(float)]
        return MREL_COLUMNS, base

    def to_csv(self, path, decimation: int = 1) -> None:
        header, cols = self.columns()
        idx = np.arange(0, self.times.shape[0], decimation)
        if idx[-1] != self.times.shape[0] - 1:
            idx = np.append(idx, self.times.shape[0] - 1)
        write_csv(path, header, [np.asarray(c)[idx] for c in cols])

    def summary(self) -> dict:
        out = {
            "kind": self.kind,
            "steps": int(self.times.shape[0] - 1),
            "t_end": float(self.times[-1]),
            "max_abs_e_y": self.max_abs_error,
            "saturation_count": int(self.saturation_count),
            "clamp_count": int(self.clamp_count),
            "region_exits": int(self.region_exits),
            "certified": bool(self.certified),
            "u_min": float(self.u.min()),
            "u_max": float(self.u.max()),
            "v_max_abs": float(np.max(np.abs(self.v))),
        }
        if self.W is not None:
            out["W_max"] = float(self.W.max())
        if self.manifold_error is not None:
            out["max_manifold_error"] = float(np.max(np.abs(self.manifold_error)))
        return out


# ---------------------------------------------------------------------------
# interconnections
#
# A "loop" evaluates the coupled vector field on y = (xi, x) and reports the
# signals recorded at each step. The generic loops work for any plant;
# plant-specific loops with the same methods can be passed in for speed.


class HierarchicalLoop:
    """Generic closed loop  xi' = phi(xi, v),  x' = f(x, u_w(xi, x, v)),  v = policy(t, xi)."""

    def __init__(self, plant: InputAffineSystem, absys: AbstractSystem, maps: AbstractionMaps,
                 spec: InterfaceSpec, policy: Callable, saturate: bool = True):
        self.plant, self.absys, self.maps, self.spec, self.policy = plant, absys, maps, spec, policy
        self.nh, self.n = absys.n_hat, plant.n
        self.sat = spec.saturation if (saturate and spec.saturation is not None) else None

    def evaluate(self, t, y):
        """Return (dy, p(xi), u, v, saturated) at (t, y)."""
        nh, n = self.nh, self.n
        dom = self.maps.domain_V
        xi = np.clip(y[:nh], dom.lower, dom.upper)
        x = y[nh:]
        v = np.asarray(self.policy(t, xi), dtype=float).reshape(-1)
        pxi = self.maps.p(xi)
        u_raw = (np.asarray(self.spec.k_base(x, pxi, self.maps.l(xi)), dtype=float).reshape(-1)
                 + np.atleast_2d(self.spec.gain_q(xi, x)) @ v)
        u, sat = u_raw, False
        if self.sat is not None:
            u = np.minimum(self.sat[1], np.maximum(self.sat[0], u_raw))
            sat = bool(np.any(u != u_raw))
        dy = np.empty(nh + n)
        dy[:nh] = self.absys.phi_bar(xi) + np.atleast_2d(self.absys.delta(xi)) @ v
        dy[nh:] = self.plant.f_bar(x) + np.asarray(self.plant.g(x), dtype=float).reshape(n, -1) @ u
        return dy, pxi, u, v, sat

    def outputs(self, Y):
        """(y, psi) histories for a state history Y."""
        nh = self.nh
        y = np.array([self.plant.output(x) for x in Y[:, nh:]]).reshape(len(Y), -1)
        psi = np.array([self.absys.output(xi) for xi in Y[:, :nh]]).reshape(len(Y), -1)
        return y, psi


class MrelationLink:
    """Generic open loop  x' = f(x, u(t)),  xi' = phi(xi, b(x) + c(x) u(t))."""

    def __init__(self, plant: InputAffineSystem, absys: AbstractSystem, maps: AbstractionMaps, u_signal: Callable):
        self.plant, self.absys, self.maps, self.u_signal = plant, absys, maps, u_signal
        self.nh, self.n = absys.n_hat, plant.n

    def evaluate(self, t, y):
        """Return (dy, u, v) at (t, y)."""
        nh, n = self.nh, self.n
        xi, x = y[:nh], y[nh:]
        u = np.atleast_1d(np.asarray(self.u_signal(t), dtype=float))
        b, c = link_coefficients(self.maps, self.plant, self.absys, x, check=False)
        v = b + c @ u
        dy = np.empty(nh + n)
        dy[:nh] = self.absys.phi_bar(xi) + np.atleast_2d(self.absys.delta(xi)) @ v
        dy[nh:] = self.plant.f_bar(x) + np.asarray(self.plant.g(x), dtype=float).reshape(n, -1) @ u
        return dy, u, v

    def outputs(self, Y):
        nh = self.nh
        y = np.array([self.plant.output(x) for x in Y[:, nh:]]).reshape(len(Y), -1)
        psi = np.array([self.absys.output(xi) for xi in Y[:, :nh]]).reshape(len(Y), -1)
        return y, psi

    def manifold_error(self, Y):
        """xi - m(x) along the history (first abstract coordinate)."""
        nh = self.nh
        return np.array([(xi - self.maps.m(x))[0] for xi, x in zip(Y[:, :nh], Y[:, nh:])])


def _fail(exc, ts, k, Y):
    """Re-raise a failure at step k as an IntegrationError stamped with the last recorded time."""
    if k == 0:
        raise IntegrationError(f"{exc} (at the initial state)", ts[0], None) from None
    raise IntegrationError(f"{exc} (last good time {ts[k - 1]:.6g})", ts[k - 1], Y[k - 1].copy()) from None


def simulate_hierarchical(
    cfg: SimConfig,
    plant: InputAffineSystem,
    absys: AbstractSystem,
    maps: AbstractionMaps,
    cert: QuadraticCertificate,
    spec: InterfaceSpec,
    policy: Callable,
    saturate: bool = True,
    loop=None,
) -> SimulationResult:
    """Abstraction driven by ``policy(t, xi) -> v``; plant driven by the interface u_w(xi, x, v).

    The abstract state is clamped back into the domain after any step that
    leaves it; each clamp is counted and voids the run's certification.
    """
    nh, n = absys.n_hat, plant.n
    xi0 = np.atleast_1d(np.asarray(cfg.xi0, dtype=float))
    if not maps.domain_V.contains(xi0):
        raise ValueError(f"initial abstract state {xi0} outside the domain")
    x0 = maps.p(xi0) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    if loop is None:
        loop = HierarchicalLoop(plant, absys, maps, spec, policy, saturate)
    dom = maps.domain_V
    Me = cert.M.entries
    evaluate = loop.evaluate

    def rhs(t, y):
        return evaluate(t, y)[0]

    N = cfg.n_steps
    h = cfg.step
    ts = cfg.times()
    Y = np.empty((N + 1, nh + n))
    U = np.empty((N + 1, plant.m))
    Vv = np.empty((N + 1, absys.m_hat))
    Wv = np.empty(N + 1)
    S = np.zeros(N + 1, dtype=bool)
    y = np.concatenate([xi0, x0])
    clamp_count = 0
    warnings = []
    latch = getattr(policy, "latch", None)
    try:
        for k in range(N + 1):
            if latch is not None:
                latch(ts[k])
            try:
                dy, pxi, u, v, sat = evaluate(ts[k], y)
            except (ValueError, ArithmeticError) as exc:
                _fail(exc, ts, k, Y)
            Y[k], U[k], Vv[k], S[k] = y, u, v, sat
            e = pxi - y[nh:]
            Wv[k] = e @ Me @ e
            if k == N:
                break
            try:
                y = rk4_step(rhs, ts[k], y, h, k1=dy)
            except (ValueError, ArithmeticError) as exc:
                _fail(exc, ts, k + 1, Y)
            xi_new = y[:nh]
            if not dom.contains(xi_new):
                clamp_count += 1
                if clamp_count == 1:
                    msg = f"abstract state left the domain at t = {ts[k + 1]:.6g} (xi = {xi_new}); clamped"
                    log.warning(msg)
                    warnings.append(msg)
                y[:nh] = dom.clamp(xi_new)
    finally:
        if latch is not None:
            policy.unlatch()
    y_out, psi = loop.outputs(Y)
    return SimulationResult(
        kind="hierarchical", times=ts, xi=Y[:, :nh], x=Y[:, nh:], u=U, v=Vv, y=y_out, psi=psi, W=Wv, sat_flag=S,
        saturation_count=int(S.sum()), clamp_count=clamp_count, certified=clamp_count == 0, warnings=warnings,
    )


def simulate_mrelation(
    cfg: SimConfig,
    plant: InputAffineSystem,
    absys: AbstractSystem,
    maps: AbstractionMaps,
    u_signal: Callable,
    xi0=None,
    link=None,
) -> SimulationResult:
    """Plant driven by ``u_signal(t)``; abstraction driven by v = b(x) + c(x) u.

    ``xi0`` defaults to m(x0), i.e. the pair starts on the manifold xi = m(x).
    Leaving the operating region is counted and voids certification.
    """
    nh, n = absys.n_hat, plant.n
    if cfg.x0 is None:
        raise ValueError("m-relation simulation needs an explicit x0")
    x0 = np.asarray(cfg.x0, dtype=float)
    if xi0 is None:
        xi0 = maps.m(x0)
    xi0 = np.atleast_1d(np.asarray(xi0, dtype=float))
    if link is None:
        link = MrelationLink(plant, absys, maps, u_signal)
    region = maps.operating_Xy
    evaluate = link.evaluate

    def rhs(t, y):
        return evaluate(t, y)[0]

    N = cfg.n_steps
    h = cfg.step
    ts = cfg.times()
    Y = np.empty((N + 1, nh + n))
    U = np.empty((N + 1, plant.m))
    Vv = np.empty((N + 1, absys.m_hat))
    y = np.concatenate([xi0, x0])
    for k in range(N + 1):
        try:
            dy, u, v = evaluate(ts[k], y)
        except (ValueError, ArithmeticError) as exc:
            _fail(exc, ts, k, Y)
        Y[k], U[k], Vv[k] = y, u, v
        if k == N:
            break
        try:
            y = rk4_step(rhs, ts[k], y, h, k1=dy)
        except (ValueError, ArithmeticError) as exc:
            _fail(exc, ts, k + 1, Y)
    X = Y[:, nh:]
    inside = np.all((X >= region.lower) & (X <= region.upper), axis=1)
    exits = int(np.count_nonzero(~inside))
    warnings = []
    if exits:
        first = int(np.argmin(inside))
        msg = f"plant state left the operating region at t = {ts[first]:.6g} ({exits} samples outside)"
        log.warning(msg)
        warnings.append(msg)
    y_out, psi = link.outputs(Y)
    return SimulationResult(
        kind="mrelation", times=ts, xi=Y[:, :nh], x=X, u=U, v=Vv, y=y_out, psi=psi,
        manifold_error=link.manifold_error(Y), region_exits=exits, certified=exits == 0, warnings=warnings,
    )
