"""Neural contraction metric ``M(x) = N(x)^T N(x) + eps I``.

``N`` is a network with ``n*n`` outputs filled row-major into an ``n x n``
matrix, so ``N[a, b]`` is output ``a*n + b``. A constant metric (fixed ``M``,
zero gradient) is also supported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .interval import DTYPE, IntervalArray, IntervalMatrix, IntervalVector, as_tensor, imm, symmetrize
from .nn import FeedforwardNetwork, forward, ibp, interval_jacobian, jacobian


@dataclass
class NeuralContractionMetric:
    base: FeedforwardNetwork | None = None
    epsilon: float = 0.1
    constant: np.ndarray | None = None

    def __post_init__(self):
        if (self.base is None) == (self.constant is None):
            raise ValueError("give exactly one of a base network or a constant matrix")
        if self.base is not None:
            if not self.epsilon > 0:
                raise ValueError(f"epsilon must be positive, got {self.epsilon}")
            n = math.isqrt(self.base.out_dim)
            if n * n != self.base.out_dim or n != self.base.in_dim:
                raise ValueError(
                    f"metric network must map R^n to R^(n*n); got {self.base.in_dim} -> {self.base.out_dim}"
                )
        else:
            C = np.asarray(self.constant, dtype=np.float64)
            if C.ndim != 2 or C.shape[0] != C.shape[1] or not np.allclose(C, C.T, rtol=0, atol=1e-12):
                raise ValueError("constant metric must be a symmetric square matrix")
            self.constant = C

    @classmethod
    def constant_metric(cls, M) -> "NeuralContractionMetric":
        return cls(base=None, epsilon=0.0, constant=np.asarray(M, dtype=np.float64))

    @property
    def is_constant(self) -> bool:
        return self.base is None

    @property
    def n(self) -> int:
        if self.base is None:
            return self.constant.shape[0]
        return self.base.in_dim


@dataclass
class MetricBounds:
    """``M_box`` encloses M over the box; ``gradM[..., i, j, :]`` encloses grad M_ij."""

    M_box: IntervalMatrix
    gradM: IntervalArray

    def grad(self, i: int, j: int) -> IntervalVector:
        return IntervalVector(self.gradM.lo[..., i, j, :], self.gradM.hi[..., i, j, :], check=False)


def _reshape_N(m: NeuralContractionMetric, out):
    return out.reshape(*out.shape[:-1], m.n, m.n)


def eval_M(m: NeuralContractionMetric, x):
    x = np.asarray(x, dtype=np.float64)
    if m.is_constant:
        return np.broadcast_to(m.constant, (*x.shape[:-1], m.n, m.n)).copy()
    N = _reshape_N(m, forward(m.base.numpy(), x))
    return np.swapaxes(N, -1, -2) @ N + m.epsilon * np.eye(m.n)


def eval_gradM(m: NeuralContractionMetric, x):
    """``out[..., i, j, :] = dN_i^T N_j + dN_j^T N_i`` with ``N_i`` column i of N."""
    x = np.asarray(x, dtype=np.float64)
    n = m.n
    if m.is_constant:
        return np.zeros((*x.shape[:-1], n, n, n))
    net = m.base.numpy()
    N = _reshape_N(m, forward(net, x))
    # dN[..., a, b, k] = d N[a, b] / d x_k
    dN = jacobian(net, x).reshape(*x.shape[:-1], n, n, n)
    T = np.einsum("...aik,...aj->...ijk", dN, N)
    return T + np.swapaxes(T, -2, -3)


def selector(n: int, i: int) -> torch.Tensor:
    """0/1 matrix picking column ``i`` of the reshaped output: ``S @ vec(N) = N[:, i]``."""
    S = torch.zeros(n, n * n, dtype=DTYPE)
    for a in range(n):
        S[a, a * n + i] = 1.0
    return S


def bound_metric(m: NeuralContractionMetric, box: IntervalVector) -> MetricBounds:
    """Interval bounds on M and every grad M_ij over ``box``."""
    n = m.n
    batch = tuple(box.lo.shape[:-1])
    if m.is_constant:
        C = as_tensor(m.constant).expand(*batch, n, n)
        Z = torch.zeros(*batch, n, n, n, dtype=DTYPE)
        return MetricBounds(IntervalMatrix(C, C, check=False), IntervalArray(Z, Z, check=False))

    out, lb = ibp(m.base, box)
    N = IntervalMatrix(_reshape_N(m, out.lo), _reshape_N(m, out.hi), check=False)
    eye = torch.eye(n, dtype=DTYPE)
    NtN = imm(N.T, N)
    M_box = symmetrize(IntervalMatrix(NtN.lo + m.epsilon * eye, NtN.hi + m.epsilon * eye, check=False))

    # column Jacobians dN_i, one elided pass per column: shape (..., i, a, k)
    cols = [interval_jacobian(m.base, box, left=selector(n, i), bounds=lb) for i in range(n)]
    dlo = torch.stack([c.lo for c in cols], dim=-3)
    dhi = torch.stack([c.hi for c in cols], dim=-3)
    # T[..., i, j, k] encloses (dN_i^T N_j)_k
    dNt = IntervalMatrix(dlo.transpose(-1, -2).unsqueeze(-3), dhi.transpose(-1, -2).unsqueeze(-3), check=False)
    Ncol = IntervalMatrix(
        N.lo.transpose(-1, -2).unsqueeze(-1).unsqueeze(-4),
        N.hi.transpose(-1, -2).unsqueeze(-1).unsqueeze(-4),
        check=False,
    )
    T = imm(dNt, Ncol)
    Tlo, Thi = T.lo.squeeze(-1), T.hi.squeeze(-1)
    glo = Tlo + Tlo.transpose(-2, -3)
    ghi = Thi + Thi.transpose(-2, -3)
    return MetricBounds(M_box, IntervalArray(glo, ghi, check=False))
