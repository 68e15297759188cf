"""Discrete-time transition maps for nominal models and perturbed-physics surrogates.

Every ``step`` is vectorised: ``x`` has shape ``(..., n)`` and ``u`` shape
``(..., m)``; leading axes broadcast against each other.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class DomainError(ValueError):
    """Raised when an argument lies outside the domain an operation accepts."""


@dataclass(frozen=True, eq=False)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size == 0:
            raise DomainError(f"box bounds must be equal-length vectors, got {lo.shape} and {hi.shape}")
        if not np.all(lo < hi):
            raise DomainError(f"box needs lower < upper in every dimension: {lo} vs {hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_bounds(cls, *intervals) -> "Box":
        """``Box.from_bounds((0, 3), (0, 3))``"""
        arr = np.asarray(intervals, dtype=float)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, points, atol: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.lower - atol) & (p <= self.upper + atol), axis=-1)

    def contains_box(self, other: "Box") -> bool:
        return bool(np.all(other.lower >= self.lower) and np.all(other.upper <= self.upper))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(size, self.dim))

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper)

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))

    def __repr__(self):
        ivs = " x ".join(f"[{a:g}, {b:g}]" for a, b in zip(self.lower, self.upper))
        return f"Box({ivs})"


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    """A transition map ``x(k+1) = step(x(k), u(k))`` over ``state_box`` x ``input_box``.

    ``growth_bound`` is an optional ``(n, n)`` matrix of per-dimension
    Lipschitz constants of ``step`` in the state (used by the abstraction);
    ``params`` records the physical parameters for provenance.
    """

    name: str
    n: int
    m: int
    state_box: Box
    input_box: Box
    tau: float
    _step: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    growth_bound: np.ndarray | None = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.state_box.dim != self.n or self.input_box.dim != self.m:
            raise DomainError("box dimensions do not match n and m")
        if not self.tau > 0:
            raise DomainError(f"sampling time must be positive, got {self.tau}")

    def step(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1:] != (self.n,) or u.shape[-1:] != (self.m,):
            raise DomainError(f"expected state of width {self.n} and input of width {self.m}, "
                              f"got shapes {x.shape} and {u.shape}")
        return self._step(x, u)


@dataclass(frozen=True)
class SystemPair:
    nominal: DiscreteSystem
    surrogate: DiscreteSystem

    def __post_init__(self):
        a, b = self.nominal, self.surrogate
        if (a.n, a.m) != (b.n, b.m):
            raise DomainError("nominal and surrogate dimensions differ")
        if a.state_box != b.state_box or a.input_box != b.input_box:
            raise DomainError("nominal and surrogate boxes differ")
        if a.tau != b.tau:
            raise DomainError(f"sampling times differ: {a.tau} vs {b.tau}")

    @property
    def n(self):
        return self.nominal.n

    @property
    def m(self):
        return self.nominal.m

    @property
    def state_box(self):
        return self.nominal.state_box

    @property
    def input_box(self):
        return self.nominal.input_box

    @property
    def tau(self):
        return self.nominal.tau

    @property
    def pair_id(self) -> str:
        def fmt(p):
            return ",".join(f"{k}={v!r}" for k, v in sorted(p.items()))
        return f"{self.nominal.name}({fmt(self.nominal.params)})|{self.surrogate.name}({fmt(self.surrogate.params)})"

    def gap(self, x, u) -> np.ndarray:
        """Absolute per-coordinate gap ``|f_hat(x,u) - f(x,u)|``."""
        return np.abs(self.surrogate.step(x, u) - self.nominal.step(x, u))


def _positive(**kw):
    for k, v in kw.items():
        if not v > 0:
            raise DomainError(f"{k} must be positive, got {v}")


PENDULUM_STATE_BOX = Box.from_bounds((-0.2, 0.2), (-0.25, 0.25))
PENDULUM_INPUT_BOX = Box.from_bounds((-1.0, 1.0))
MECANUM_STATE_BOX = Box.from_bounds((0.0, 3.0), (0.0, 3.0))
MECANUM_INPUT_BOX = Box.from_bounds((-1.0, 1.0), (-1.0, 1.0))


def _pendulum(name, tau, m_mass, g, l, damping, torque_gain, params):
    _positive(tau=tau, m_mass=m_mass, l=l)
    if g < 0:
        raise DomainError(f"g must be nonnegative, got {g}")
    grav = 3.0 * g * tau / (2.0 * l)
    inertia = m_mass * l * l
    torque = 3.0 * tau * torque_gain / inertia
    drag = 3.0 * damping * tau / inertia

    def step(x, u):
        x1, x2 = x[..., 0], x[..., 1]
        nx1 = x1 + tau * x2
        nx2 = -grav * np.sin(x1) + x2 + torque * u[..., 0]
        if drag:
            nx2 = nx2 - drag * x2
        return np.stack(np.broadcast_arrays(nx1, nx2), axis=-1)

    # |d f / d x| bounded over the whole plane (|cos| <= 1)
    growth = np.array([[1.0, tau], [grav, abs(1.0 - drag)]])
    return DiscreteSystem(name, 2, 1, PENDULUM_STATE_BOX, PENDULUM_INPUT_BOX, float(tau), step,
                          growth_bound=growth, params=params)


def pendulum_nominal(tau: float = 0.005, m_mass: float = 1.0, g: float = 9.81, l: float = 1.0) -> DiscreteSystem:
    """Euler-discretised pendulum with torque input on X = [-0.2,0.2] x [-0.25,0.25], U = [-1,1]."""
    params = dict(tau=tau, m_mass=m_mass, g=g, l=l)
    return _pendulum("pendulum", tau, m_mass, g, l, 0.0, 1.0, params)


def pendulum_surrogate(tau: float = 0.005, m_mass: float = 1.0, g: float = 9.81, l: float = 1.0,
                       damping: float = 0.05, torque_gain: float = 0.9) -> DiscreteSystem:
    """Pendulum with viscous joint damping and a weakened actuator."""
    if damping < 0:
        raise DomainError(f"damping must be nonnegative, got {damping}")
    if not 0 < torque_gain <= 1.2:
        raise DomainError(f"torque_gain must lie in (0, 1.2], got {torque_gain}")
    params = dict(tau=tau, m_mass=m_mass, g=g, l=l, damping=damping, torque_gain=torque_gain)
    return _pendulum("pendulum_surrogate", tau, m_mass, g, l, damping, torque_gain, params)


def _mecanum(name, tau, gain_x, gain_y, slip, params):
    _positive(tau=tau)
    mix = tau * np.array([[gain_x, slip], [slip, gain_y]])

    def step(x, u):
        return x + u @ mix.T

    return DiscreteSystem(name, 2, 2, MECANUM_STATE_BOX, MECANUM_INPUT_BOX, float(tau), step,
                          growth_bound=np.eye(2), params=params)


def mecanum_nominal(tau: float = 0.3) -> DiscreteSystem:
    """Single-integrator kinematics of an omnidirectional base on X = [0,3]^2, U = [-1,1]^2."""
    return _mecanum("mecanum", tau, 1.0, 1.0, 0.0, dict(tau=tau))


def mecanum_surrogate(tau: float = 0.3, gain_x: float = 0.92, gain_y: float = 0.95,
                      slip: float = 0.03) -> DiscreteSystem:
    """Mecanum base whose wheels under-deliver velocity and couple the two axes through slip."""
    for k, v in (("gain_x", gain_x), ("gain_y", gain_y)):
        if not 0 < v <= 1.2:
            raise DomainError(f"{k} must lie in (0, 1.2], got {v}")
    if slip < 0:
        raise DomainError(f"slip must be nonnegative, got {slip}")
    params = dict(tau=tau, gain_x=gain_x, gain_y=gain_y, slip=slip)
    return _mecanum("mecanum_surrogate", tau, gain_x, gain_y, slip, params)


def linear_system(A, B, state_box: Box, input_box: Box, tau: float = 1.0, name: str = "linear") -> DiscreteSystem:
    """``x' = A x + B u``; handy for tests with analytically known gaps."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)

    def step(x, u):
        return x @ A.T + u @ B.T

    return DiscreteSystem(name, A.shape[0], B.shape[1], state_box, input_box, float(tau), step,
                          growth_bound=np.abs(A), params=dict(A=A.tolist(), B=B.tolist()))


_NOMINAL = {"pendulum": pendulum_nominal, "mecanum": mecanum_nominal}
_SURROGATE = {"pendulum": pendulum_surrogate, "mecanum": mecanum_surrogate}
_SHARED = {"pendulum": ("tau", "m_mass", "g", "l"), "mecanum": ("tau",)}


def make_pair(name: str, **overrides) -> SystemPair:
    """Build a nominal/surrogate pair by scenario name with parameter overrides.

    Keys shared with the nominal model (e.g. ``tau``) are applied to both.
    """
    if name not in _NOMINAL:
        raise DomainError(f"unknown system {name!r}; choose from {sorted(_NOMINAL)}")
    shared = {k: v for k, v in overrides.items() if k in _SHARED[name]}
    return SystemPair(_NOMINAL[name](**shared), _SURROGATE[name](**overrides))
