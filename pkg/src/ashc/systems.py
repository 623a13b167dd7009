"""Concrete and abstract system models, trajectories and sampling grids."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_GRID_CAP = 10_000_000


class EvaluationError(ArithmeticError):
    """A model callable returned a non-finite or badly shaped value."""


class DomainError(ValueError):
    """A point lies outside the region where a map or guarantee is defined."""


def _vec(a, name="vector") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; infinite bounds are allowed for membership tests."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _vec(self.lower, "lower")
        hi = _vec(self.upper, "upper")
        if lo.shape != hi.shape:
            raise ValueError("box bounds must have the same length")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, x, tol: float = 0.0) -> bool:
        x = _vec(x)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def clamp(self, x) -> np.ndarray:
        return np.clip(_vec(x), self.lower, self.upper)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("cannot sample from an unbounded box")
        return rng.uniform(self.lower, self.upper, size=(count, self.dim))


@dataclass(frozen=True)
class InputAffineSystem:
    """Plant of the form  x' = f_bar(x) + g(x) u,  y = h(x).

    ``A_bar``/``b_bar`` are optional and describe the same vector field as
    ``A_bar(u) x + b_bar`` for plants that admit it.
    """

    n: int
    m: int
    p_out: int
    f_bar: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    A_bar: Optional[Callable[[np.ndarray], np.ndarray]] = None
    b_bar: Optional[np.ndarray] = None
    operating_box: Optional[Box] = None
    name: str = "plant"

    def __post_init__(self):
        if min(self.n, self.m, self.p_out) < 1:
            raise ValueError("system dimensions must be positive")
        if (self.A_bar is None) != (self.b_bar is None):
            raise ValueError("A_bar and b_bar must be given together")
        if self.b_bar is not None:
            object.__setattr__(self, "b_bar", _vec(self.b_bar, "b_bar"))

    @property
    def has_affine_state_form(self) -> bool:
        return self.A_bar is not None

    def f(self, x, u) -> np.ndarray:
        return evaluate_dynamics(self, x, u)

    def output(self, x) -> np.ndarray:
        return _checked(self.h(_vec(x)), (self.p_out,), "h")

    def in_operating_box(self, x) -> bool:
        return self.operating_box is None or self.operating_box.contains(x)


def _checked(value, shape, field_name: str) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if a.shape != shape:
        try:
            a = a.reshape(shape)
        except ValueError:
            raise EvaluationError(f"{field_name} returned shape {a.shape}, expected {shape}") from None
    if not np.all(np.isfinite(a)):
        raise EvaluationError(f"{field_name} returned a non-finite value: {a}")
    return a


def evaluate_dynamics(sys: InputAffineSystem, x, u) -> np.ndarray:
    """f(x, u) = f_bar(x) + g(x) u."""
    x = _vec(x, "state")
    u = _vec(u, "input")
    if x.shape[0] != sys.n or u.shape[0] != sys.m:
        raise ValueError(
            f"dimension mismatch: state {x.shape[0]} (expected {sys.n}), input {u.shape[0]} (expected {sys.m})"
        )
    fb = _checked(sys.f_bar(x), (sys.n,), "f_bar")
    g = _checked(sys.g(x), (sys.n, sys.m), "g")
    out = fb + g @ u
    if not np.all(np.isfinite(out)):
        raise EvaluationError("f_bar(x) + g(x) u is non-finite")
    return out


def affine_form_discrepancy(sys: InputAffineSystem, x, u) -> float:
    """max |f_bar(x) + g(x)u - (A_bar(u)x + b_bar)|."""
    if not sys.has_affine_state_form:
        raise ValueError(f"{sys.name} has no A_bar/b_bar form")
    x = _vec(x)
    u = _vec(u)
    lhs = evaluate_dynamics(sys, x, u)
    rhs = np.asarray(sys.A_bar(u), dtype=float) @ x + sys.b_bar
    return float(np.max(np.abs(lhs - rhs)))


@dataclass(frozen=True)
class AbstractSystem:
    """Abstraction  xi' = phi_bar(xi) + delta(xi) v,  psi = kappa(xi)."""

    n_hat: int
    m_hat: int
    phi_bar: Callable[[np.ndarray], np.ndarray]
    delta: Callable[[np.ndarray], np.ndarray]
    kappa: Callable[[np.ndarray], np.ndarray]
    domain: Optional[Box] = None
    name: str = "abstraction"

    def phi(self, xi, v) -> np.ndarray:
        xi = _vec(xi)
        v = _vec(v)
        d = _checked(self.delta(xi), (self.n_hat, self.m_hat), "delta")
        return _checked(self.phi_bar(xi), (self.n_hat,), "phi_bar") + d @ v

    def output(self, xi) -> np.ndarray:
        return np.asarray(self.kappa(_vec(xi)), dtype=float).reshape(-1)

    def delta_continuity_probe(self, points, step: float = 1e-7) -> float:
        """Largest |delta(xi + s) - delta(xi)| over the given points; small means continuous."""
        worst = 0.0
        for xi in points:
            xi = _vec(xi)
            base = np.asarray(self.delta(xi), dtype=float)
            for k in range(self.n_hat):
                e = np.zeros(self.n_hat)
                e[k] = step
                worst = max(worst, float(np.max(np.abs(np.asarray(self.delta(xi + e)) - base))))
        return worst


@dataclass
class Trajectory:
    """Time series of states, inputs and (derived) outputs."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        n = self.times.shape[0]
        for name in ("states", "inputs", "outputs"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                if arr.shape[1] == n:
                    setattr(self, name, arr.T)
                else:
                    raise ValueError(f"{name} has {arr.shape[0]} rows, times has {n}")
        if n > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self):
        return self.times.shape[0]

    def check_outputs(self, h, tol: float = 1e-12) -> float:
        """Largest |outputs[i] - h(states[i])|; raises if it exceeds ``tol``."""
        worst = 0.0
        for x, y in zip(self.states, self.outputs):
            worst = max(worst, float(np.max(np.abs(np.asarray(h(x), dtype=float).reshape(-1) - y))))
        if worst > tol:
            raise ValueError(f"stored outputs disagree with h(states) by {worst:.3e}")
        return worst

    def to_csv(self, path, state_prefix: str = "x", input_prefix: str = "u", output_prefix: str = "y") -> None:
        def names(prefix, k):
            return [prefix] if k == 1 else [f"{prefix}{i + 1}" for i in range(k)]

        header = (
            ["t"]
            + names(state_prefix, self.states.shape[1])
            + names(input_prefix, self.inputs.shape[1])
            + names(output_prefix, self.outputs.shape[1])
        )
        cols = [self.times, *self.states.T, *self.inputs.T, *self.outputs.T]
        write_csv(path, header, cols)


@dataclass(frozen=True)
class GridSpec:
    lower: Sequence[float]
    upper: Sequence[float]
    counts: Sequence[int]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        cnt = tuple(int(c) for c in np.atleast_1d(self.counts))
        if not (len(lo) == len(hi) == len(cnt)):
            raise ValueError("grid bounds and counts must have the same length")
        for a, b, c in zip(lo, hi, cnt):
            if c < 2:
                raise ValueError("every grid dimension needs at least 2 points")
            if not a < b:
                raise ValueError(f"grid lower bound {a} is not below upper bound {b}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "counts", cnt)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return math.prod(self.counts)

    def axes(self) -> list:
        return [np.linspace(a, b, c) for a, b, c in zip(self.lower, self.upper, self.counts)]

    def as_array(self, cap: int = DEFAULT_GRID_CAP) -> np.ndarray:
        return np.array(list(grid_points(self, cap)))


class GridTooLarge(ValueError):
    pass


def grid_points(spec: GridSpec, cap: int = DEFAULT_GRID_CAP) -> Iterator[np.ndarray]:
    """Lexicographic enumeration of the Cartesian grid, endpoints included."""
    if spec.size > cap:
        raise GridTooLarge(f"grid has {spec.size} points, cap is {cap}")
    for combo in itertools.product(*spec.axes()):
        yield np.array(combo)


def write_csv(path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    """CSV with header, ',' separator and 17 significant digits."""
    cols = [np.asarray(c, dtype=float).reshape(-1) for c in columns]
    n = cols[0].shape[0] if cols else 0
    if any(c.shape[0] != n for c in cols):
        raise ValueError("CSV columns have unequal lengths")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(n):
            w.writerow([format_float(c[i]) for c in cols])


def format_float(v: float) -> str:
    return f"{float(v):.17g}"
