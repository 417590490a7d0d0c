"""Control-affine plants ``xdot = f(x) + B u`` with interval bounds on f and df/dx."""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import torch

from .interval import DTYPE, Interval, IntervalMatrix, IntervalVector, as_tensor, imm

TWO_PI = 2.0 * math.pi


class Plant(ABC):
    """Exact dynamics plus enclosures over boxes (batched along leading axes)."""

    n: int
    m: int

    @property
    @abstractmethod
    def B(self) -> np.ndarray: ...

    @abstractmethod
    def f(self, x): ...

    @abstractmethod
    def jf(self, x): ...

    @abstractmethod
    def bound_f(self, box: IntervalVector) -> IntervalVector: ...

    @abstractmethod
    def bound_jf(self, box: IntervalVector) -> IntervalMatrix: ...

    @abstractmethod
    def params(self) -> dict: ...


def _range_with_peaks(lo, hi, fn, peak, trough):
    """Range of a 2*pi-periodic ``fn`` with maxima at ``peak + 2k*pi`` and minima at ``trough + 2k*pi``."""
    lo, hi = as_tensor(lo), as_tensor(hi)
    a, b = fn(lo), fn(hi)
    rlo, rhi = torch.minimum(a, b), torch.maximum(a, b)
    k_max = torch.ceil((lo - peak) / TWO_PI)
    has_max = peak + TWO_PI * k_max <= hi
    k_min = torch.ceil((lo - trough) / TWO_PI)
    has_min = trough + TWO_PI * k_min <= hi
    rhi = torch.where(has_max, torch.ones_like(rhi), rhi)
    rlo = torch.where(has_min, -torch.ones_like(rlo), rlo)
    return rlo, rhi


def _sin_range(lo, hi):
    return _range_with_peaks(lo, hi, torch.sin, 0.5 * math.pi, -0.5 * math.pi)


def _cos_range(lo, hi):
    return _range_with_peaks(lo, hi, torch.cos, 0.0, math.pi)


def sin_range(a):
    """Exact range of sin over an interval (scalar :class:`Interval` or batched array)."""
    if isinstance(a, Interval):
        lo, hi = _sin_range(torch.tensor(a.lo, dtype=DTYPE), torch.tensor(a.hi, dtype=DTYPE))
        return Interval(float(lo), float(hi))
    lo, hi = _sin_range(a.lo, a.hi)
    return type(a)(lo, hi, check=False)


def cos_range(a):
    """Exact range of cos over an interval (scalar :class:`Interval` or batched array)."""
    if isinstance(a, Interval):
        lo, hi = _cos_range(torch.tensor(a.lo, dtype=DTYPE), torch.tensor(a.hi, dtype=DTYPE))
        return Interval(float(lo), float(hi))
    lo, hi = _cos_range(a.lo, a.hi)
    return type(a)(lo, hi, check=False)


@dataclass
class InvertedPendulum(Plant):
    """``x1`` angle from upright, ``x2`` angular velocity."""

    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81

    n = 2
    m = 1

    def __post_init__(self):
        if not (self.mass > 0 and self.length > 0 and self.gravity > 0):
            raise ValueError("pendulum mass, length and gravity must be positive")

    @property
    def B(self) -> np.ndarray:
        return np.array([[0.0], [1.0 / (self.mass * self.length**2)]])

    @property
    def input_bound(self) -> float:
        """``4 m g l``, the actuation limit used for the controller scale."""
        return 4.0 * self.mass * self.gravity * self.length

    def f(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.stack([x[..., 1], self.gravity * np.sin(x[..., 0]) / self.length], axis=-1)

    def jf(self, x):
        x = np.asarray(x, dtype=np.float64)
        J = np.zeros((*x.shape[:-1], 2, 2))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = self.gravity * np.cos(x[..., 0]) / self.length
        return J

    def bound_f(self, box: IntervalVector) -> IntervalVector:
        k = self.gravity / self.length
        slo, shi = _sin_range(box.lo[..., 0], box.hi[..., 0])
        lo = torch.stack([box.lo[..., 1], k * slo], dim=-1)
        hi = torch.stack([box.hi[..., 1], k * shi], dim=-1)
        return IntervalVector(lo, hi, check=False)

    def bound_jf(self, box: IntervalVector) -> IntervalMatrix:
        k = self.gravity / self.length
        clo, chi = _cos_range(box.lo[..., 0], box.hi[..., 0])
        lo = torch.zeros(*box.lo.shape[:-1], 2, 2, dtype=DTYPE)
        lo[..., 0, 1] = 1.0
        hi = lo.clone()
        lo[..., 1, 0] = k * clo
        hi[..., 1, 0] = k * chi
        return IntervalMatrix(lo, hi, check=False)

    def params(self) -> dict:
        return {"mass": self.mass, "length": self.length, "gravity": self.gravity}


class LinearPlant(Plant):
    """``xdot = A x + B u``."""

    def __init__(self, A, B):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self._B = np.asarray(B, dtype=np.float64).reshape(self.A.shape[0], -1)
        if self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")
        self.n, self.m = self._B.shape

    @property
    def B(self) -> np.ndarray:
        return self._B

    def f(self, x):
        return np.asarray(x, dtype=np.float64) @ self.A.T

    def jf(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(self.A, (*x.shape[:-1], self.n, self.n)).copy()

    def bound_f(self, box: IntervalVector) -> IntervalVector:
        col = IntervalMatrix(box.lo.unsqueeze(-1), box.hi.unsqueeze(-1), check=False)
        r = imm(as_tensor(self.A), col)
        return IntervalVector(r.lo.squeeze(-1), r.hi.squeeze(-1), check=False)

    def bound_jf(self, box: IntervalVector) -> IntervalMatrix:
        A = as_tensor(self.A).expand(*box.lo.shape[:-1], self.n, self.n)
        return IntervalMatrix(A, A, check=False)

    def params(self) -> dict:
        return {"A": self.A.tolist(), "B": self._B.tolist()}


PLANTS = {"inverted_pendulum": InvertedPendulum, "linear": LinearPlant}


def make_plant(name: str, params: dict | None = None) -> Plant:
    if name not in PLANTS:
        raise ValueError(f"unknown plant {name!r}; known: {sorted(PLANTS)}")
    return PLANTS[name](**(params or {}))


def plant_name(plant: Plant) -> str:
    for name, cls in PLANTS.items():
        if type(plant) is cls:
            return name
    raise ValueError(f"plant type {type(plant).__name__} is not registered")


class DivergenceError(RuntimeError):
    """Raised when a simulated state stops being finite."""

    def __init__(self, time: float, state):
        super().__init__(f"trajectory diverged at t={time:g}")
        self.time = time
        self.state = state


@dataclass
class Trajectory:
    t: np.ndarray  # (K,)
    x: np.ndarray  # (K, n)
    u: np.ndarray  # (K, m)


def _policy(plant: Plant, ctrl):
    if ctrl is None:
        return lambda x: np.zeros((*np.shape(x)[:-1], plant.m))
    from .nn import FeedforwardNetwork, forward

    if isinstance(ctrl, FeedforwardNetwork):
        net = ctrl.numpy()
        return lambda x: forward(net, x)
    return lambda x: np.asarray(ctrl(x), dtype=np.float64)


def simulate(plant: Plant, ctrl, x0, T: float, dt: float) -> Trajectory:
    """Fixed-step RK4 on ``xdot = f(x) + B u(x)``.

    ``x0`` may be a batch of initial states with shape (P, n); the
    trajectory arrays then gain a matching axis after time.
    """
    if not (dt > 0 and T > 0):
        raise ValueError("T and dt must be positive")
    u_of = _policy(plant, ctrl)
    B = plant.B

    def rhs(x):
        return plant.f(x) + u_of(x) @ B.T

    steps = int(round(T / dt))
    x = np.array(x0, dtype=np.float64)
    xs = np.empty((steps + 1, *x.shape))
    xs[0] = x
    for k in range(steps):
        # overflow shows up as a non-finite state below
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = rhs(x)
            k2 = rhs(x + 0.5 * dt * k1)
            k3 = rhs(x + 0.5 * dt * k2)
            k4 = rhs(x + dt * k3)
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError((k + 1) * dt, x)
        xs[k + 1] = x
    t = dt * np.arange(steps + 1)
    return Trajectory(t, xs, u_of(xs))
