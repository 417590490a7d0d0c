"""Interval arithmetic on scalars, vectors and matrices.

Endpoints are plain float64 with no outward rounding. Vector and matrix
intervals carry torch tensors so that bounds can be differentiated with
respect to network parameters; leading batch dimensions are allowed
everywhere and are how a whole partition is processed in one pass.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class Interval:
    """Closed real interval ``[lo, hi]``."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError(f"interval endpoints must be finite, got [{self.lo}, {self.hi}]")
        if self.lo > self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @classmethod
    def point(cls, x: float) -> "Interval":
        return cls(float(x), float(x))

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x: float, tol: float = 0.0) -> bool:
        return self.lo - tol <= x <= self.hi + tol

    def __add__(self, other: "Interval") -> "Interval":
        return add(self, other)

    def __mul__(self, other: "Interval") -> "Interval":
        return mul(self, other)


class IntervalArray:
    """Elementwise interval ``[lo, hi]`` over tensors of a common shape."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi=None, *, check: bool = True):
        lo = as_tensor(lo)
        hi = lo if hi is None else as_tensor(hi)
        if lo.shape != hi.shape:
            raise ValueError(f"shape mismatch between lo {tuple(lo.shape)} and hi {tuple(hi.shape)}")
        if check:
            if not bool(torch.isfinite(lo).all() and torch.isfinite(hi).all()):
                raise ValueError("interval endpoints must be finite")
            if bool((lo > hi).any()):
                raise ValueError("lower bound exceeds upper bound")
        self.lo = lo
        self.hi = hi

    @classmethod
    def point(cls, x):
        x = as_tensor(x)
        return cls(x, x, check=False)

    @property
    def shape(self) -> tuple:
        return tuple(self.lo.shape)

    @property
    def width(self) -> torch.Tensor:
        return self.hi - self.lo

    @property
    def mid(self) -> torch.Tensor:
        return 0.5 * (self.lo + self.hi)

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo.detach().numpy().copy(), self.hi.detach().numpy().copy()

    def detach(self):
        return type(self)(self.lo.detach(), self.hi.detach(), check=False)

    def contains(self, x, rtol: float = 0.0, atol: float = 0.0) -> bool:
        """True when every entry of ``x`` lies in the interval up to the slack."""
        lo, hi = self.numpy()
        x = np.asarray(x, dtype=np.float64)
        slack_lo = atol + rtol * np.abs(lo)
        slack_hi = atol + rtol * np.abs(hi)
        return bool(np.all(x >= lo - slack_lo) and np.all(x <= hi + slack_hi))

    def contains_interval(self, other: "IntervalArray") -> bool:
        return bool((self.lo <= other.lo).all() and (other.hi <= self.hi).all())

    def __getitem__(self, idx):
        lo, hi = self.lo[idx], self.hi[idx]
        return _wrap(lo, hi)

    def __len__(self):
        return self.lo.shape[0]

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __neg__(self):
        return type(self)(-self.hi, -self.lo, check=False)

    def scale(self, c: float):
        """Multiply by a real scalar ``c``."""
        if c >= 0:
            return type(self)(c * self.lo, c * self.hi, check=False)
        return type(self)(c * self.hi, c * self.lo, check=False)

    def reshape(self, *shape):
        return _wrap(self.lo.reshape(*shape), self.hi.reshape(*shape))

    def __repr__(self):
        return f"{type(self).__name__}(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


class IntervalVector(IntervalArray):
    """Hyperrectangle ``{x : lo <= x <= hi}``; last axis is the state axis."""

    __slots__ = ()

    @property
    def dim(self) -> int:
        return self.lo.shape[-1]

    @property
    def is_batched(self) -> bool:
        return self.lo.dim() > 1


class IntervalMatrix(IntervalArray):
    """Interval matrix; the last two axes are rows and columns."""

    __slots__ = ()

    @property
    def T(self) -> "IntervalMatrix":
        return IntervalMatrix(self.lo.transpose(-1, -2), self.hi.transpose(-1, -2), check=False)


def _wrap(lo, hi):
    if lo.dim() == 0:
        return Interval(float(lo), float(hi))
    return IntervalArray(lo, hi, check=False)


def _as_interval_array(x) -> IntervalArray:
    if isinstance(x, IntervalArray):
        return x
    if isinstance(x, Interval):
        return IntervalArray(torch.tensor(x.lo, dtype=DTYPE), torch.tensor(x.hi, dtype=DTYPE), check=False)
    return IntervalArray.point(x)


def _result_type(a, b):
    for t in (IntervalMatrix, IntervalVector):
        if isinstance(a, t) or isinstance(b, t):
            return t
    return IntervalArray


def add(a, b):
    """Endpoint sum; works for scalars and elementwise for arrays."""
    if isinstance(a, Interval) and isinstance(b, Interval):
        return Interval(a.lo + b.lo, a.hi + b.hi)
    cls = _result_type(a, b)
    a, b = _as_interval_array(a), _as_interval_array(b)
    return cls(a.lo + b.lo, a.hi + b.hi, check=False)


def _products(alo, ahi, blo, bhi):
    return torch.stack([alo * blo, alo * bhi, ahi * blo, ahi * bhi])


def mul(a, b):
    """Product bound: min and max of the four endpoint products."""
    if isinstance(a, Interval) and isinstance(b, Interval):
        ps = (a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi)
        return Interval(min(ps), max(ps))
    cls = _result_type(a, b)
    a, b = _as_interval_array(a), _as_interval_array(b)
    p = _products(a.lo, a.hi, b.lo, b.hi)
    return cls(p.amin(0), p.amax(0), check=False)


def imm(A, B) -> IntervalMatrix:
    """Interval matrix product.

    Entry ``(i, j)`` is the sum over ``p`` of the scalar product bound of
    ``A[i, p]`` and ``B[p, j]``. Either operand may be a plain matrix, which
    is treated as a width-zero interval. Batch dimensions broadcast.

    With an exact factor each term's min/max is selected by the sign of the
    exact entry, which lets the sum run as a matrix product.
    """
    A, B = _as_interval_array(A), _as_interval_array(B)
    if A.lo.dim() < 2 or B.lo.dim() < 2:
        raise ValueError("imm expects matrices (at least 2-D operands)")
    if A.lo.shape[-1] != B.lo.shape[-2]:
        raise ValueError(
            f"inner dimensions disagree: {tuple(A.lo.shape[-2:])} @ {tuple(B.lo.shape[-2:])}"
        )
    if A.lo is A.hi:
        # exact left factor: min/max of each term is picked by the sign of a_ip
        Ap = torch.clamp(A.lo, min=0.0)
        An = A.lo - Ap
        return IntervalMatrix(Ap @ B.lo + An @ B.hi, Ap @ B.hi + An @ B.lo, check=False)
    if B.lo is B.hi:
        Bp = torch.clamp(B.lo, min=0.0)
        Bn = B.lo - Bp
        return IntervalMatrix(A.lo @ Bp + A.hi @ Bn, A.hi @ Bp + A.lo @ Bn, check=False)
    alo, ahi = A.lo.unsqueeze(-1), A.hi.unsqueeze(-1)
    blo, bhi = B.lo.unsqueeze(-3), B.hi.unsqueeze(-3)
    p = _products(alo, ahi, blo, bhi)
    return IntervalMatrix(p.amin(0).sum(-2), p.amax(0).sum(-2), check=False)


def diag_imm(d: IntervalArray, P) -> IntervalMatrix:
    """``imm(diag(d), P)`` without materialising the zero off-diagonals.

    Off-diagonal products are exactly zero, so this returns the same numbers
    as the dense product.
    """
    P = _as_interval_array(P)
    dlo, dhi = d.lo.unsqueeze(-1), d.hi.unsqueeze(-1)
    p = _products(dlo, dhi, P.lo, P.hi)
    return IntervalMatrix(p.amin(0), p.amax(0), check=False)


def hull(a: IntervalArray, b: IntervalArray):
    cls = _result_type(a, b)
    return cls(torch.minimum(a.lo, b.lo), torch.maximum(a.hi, b.hi), check=False)


def symmetrize(A: IntervalMatrix) -> IntervalMatrix:
    """Hull of an interval matrix and its transpose."""
    return hull(A, A.T)


def metzler_majorant(A):
    """|a_ij| off the diagonal, a_ii on it."""
    if isinstance(A, torch.Tensor):
        if A.dim() < 2 or A.shape[-1] != A.shape[-2]:
            raise ValueError(f"metzler_majorant expects square matrices, got shape {tuple(A.shape)}")
        eye = torch.eye(A.shape[-1], dtype=torch.bool)
        return torch.where(eye, A, A.abs())
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"metzler_majorant expects square matrices, got shape {A.shape}")
    eye = np.eye(A.shape[-1], dtype=bool)
    return np.where(eye, A, np.abs(A))


def box(lo, hi) -> IntervalVector:
    return IntervalVector(lo, hi)


def symmetric_box(half_widths) -> IntervalVector:
    h = as_tensor(half_widths)
    return IntervalVector(-h, h)


def bisect(b: IntervalVector) -> list[IntervalVector]:
    """Split every axis at its midpoint, giving ``2**n`` children.

    Children share faces exactly: the midpoint is computed once per axis and
    used as the upper end of the low half and the lower end of the high half.
    """
    lo, hi = b.lo.detach(), b.hi.detach()
    if lo.dim() != 1 or lo.shape[0] < 1:
        raise ValueError("bisect expects a single n-dimensional box with n >= 1")
    mid = 0.5 * (lo + hi)
    # a degenerate axis keeps its point exactly
    mid = torch.where(lo == hi, lo, mid)
    halves = [((lo[k], mid[k]), (mid[k], hi[k])) for k in range(lo.shape[0])]
    out = []
    for choice in itertools.product(*halves):
        clo = torch.stack([c[0] for c in choice])
        chi = torch.stack([c[1] for c in choice])
        out.append(IntervalVector(clo, chi, check=False))
    return out


def _grid_edges(lo: float, hi: float, r: int) -> list[float]:
    edges = [lo + (hi - lo) * k / r for k in range(r + 1)]
    edges[0], edges[-1] = lo, hi
    return edges


def uniform_partition(b: IntervalVector, r: int) -> list[IntervalVector]:
    """Axis-aligned ``r**n`` grid of equal cells covering ``b``."""
    if r < 1:
        raise ValueError(f"r must be a positive integer, got {r}")
    lo, hi = b.lo.detach().tolist(), b.hi.detach().tolist()
    axes = [_grid_edges(l, h, r) for l, h in zip(lo, hi)]
    out = []
    for idx in itertools.product(range(r), repeat=len(lo)):
        clo = [axes[k][i] for k, i in enumerate(idx)]
        chi = [axes[k][i + 1] for k, i in enumerate(idx)]
        out.append(IntervalVector(clo, chi, check=False))
    return out


def stack(cells) -> IntervalVector:
    """Batch a list of boxes along a new leading axis."""
    cells = list(cells)
    return IntervalVector(torch.stack([c.lo for c in cells]), torch.stack([c.hi for c in cells]), check=False)
