"""Contraction certificates over boxes.

For a cell, :func:`assemble_A_interval` encloses

    A(x) = M J + J^T M + Mdot_f + Mdot_Bu + 2c M,   J = df/dx + B du/dx,

:func:`assemble_G` dominates the Metzler majorant of every A(x) in the cell,
and the cell is certified when the largest eigenvalue of G is at most
``-margin``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .eigen import jacobi_eigh, lambda_max_sym
from .interval import (
    DTYPE,
    IntervalMatrix,
    IntervalVector,
    as_tensor,
    bisect,
    imm,
    stack,
    symmetrize,
    uniform_partition,
)
from .metric import NeuralContractionMetric, bound_metric, eval_gradM, eval_M
from .nn import (
    FeedforwardNetwork,
    ZeroAnchoredBoundedController,
    controller_bounds,
    controller_eval,
    controller_jacobian,
    controller_jacobian_bounds,
    forward,
    ibp,
    interval_jacobian,
    jacobian,
)
from .plant import Plant

__all__ = [
    "ContractionProblem",
    "CellCertificate",
    "DomainCertificate",
    "assemble_A_interval",
    "assemble_G",
    "cell_G",
    "lambda_max_sym",
    "verify_cell",
    "verify_cells",
    "verify_domain",
    "adaptive_verify",
    "contraction_matrix",
]


@dataclass
class ContractionProblem:
    """Plant, controller (anchored, plain network, or ``None`` for u = 0) and metric."""

    plant: Plant
    controller: ZeroAnchoredBoundedController | FeedforwardNetwork | None
    metric: NeuralContractionMetric
    rate: float = 0.0
    margin: float = 0.0

    def __post_init__(self):
        n, m = self.plant.n, self.plant.m
        if self.rate < 0 or self.margin < 0:
            raise ValueError("rate and margin must be nonnegative")
        if self.metric.n != n:
            raise ValueError(f"metric is {self.metric.n}x{self.metric.n}, plant state has dimension {n}")
        if self.controller is not None:
            if self.controller.in_dim != n or self.controller.out_dim != m:
                raise ValueError(
                    f"controller maps R^{self.controller.in_dim} -> R^{self.controller.out_dim}, "
                    f"plant needs R^{n} -> R^{m}"
                )

    @property
    def n(self) -> int:
        return self.plant.n


@dataclass
class CellCertificate:
    cell: IntervalVector
    G: np.ndarray
    lambda_max: float
    verified: bool
    depth: int = 0
    metric_upper: float = float("nan")


@dataclass
class DomainCertificate:
    domain: IntervalVector
    cells: list = field(default_factory=list)
    fingerprint: str | None = None

    @property
    def all_verified(self) -> bool:
        return all(c.verified for c in self.cells)

    @property
    def max_lambda(self) -> float:
        return max(c.lambda_max for c in self.cells)

    @property
    def metric_upper(self) -> float:
        """Largest lambda_max of the metric's upper bound over all cells."""
        return max(c.metric_upper for c in self.cells)

    def unverified(self) -> list:
        return [c for c in self.cells if not c.verified]


def _col(v: IntervalVector) -> IntervalMatrix:
    return IntervalMatrix(v.lo.unsqueeze(-1), v.hi.unsqueeze(-1), check=False)


def _control_bounds(prob: ContractionProblem, cells: IntervalVector):
    """Enclosures of ``B u`` (vector) and ``B du/dx`` (matrix) over the cells."""
    B = as_tensor(prob.plant.B)
    ctrl = prob.controller
    batch = tuple(cells.lo.shape[:-1])
    n = prob.n
    if ctrl is None:
        z = torch.zeros(*batch, n, dtype=DTYPE)
        Z = torch.zeros(*batch, n, n, dtype=DTYPE)
        return IntervalVector(z, z, check=False), IntervalMatrix(Z, Z, check=False)
    if isinstance(ctrl, ZeroAnchoredBoundedController):
        u, shifted, lb = controller_bounds(ctrl, cells)
        BdU = controller_jacobian_bounds(ctrl, cells, left=B, bounds=(shifted, lb))
    else:
        u, lb = ibp(ctrl, cells)
        BdU = interval_jacobian(ctrl, cells, left=B, bounds=lb)
    Bu = imm(B, _col(u))
    return IntervalVector(Bu.lo.squeeze(-1), Bu.hi.squeeze(-1), check=False), BdU


def assemble_A_interval(prob: ContractionProblem, cells: IntervalVector) -> IntervalMatrix:
    """Interval enclosure of A(x) over each cell (cells may be batched)."""
    if cells.dim != prob.n:
        raise ValueError(f"cell has dimension {cells.dim}, problem has {prob.n}")
    f = prob.plant.bound_f(cells)
    df = prob.plant.bound_jf(cells)
    Bu, BdU = _control_bounds(prob, cells)
    mb = bound_metric(prob.metric, cells)
    M = mb.M_box

    # Mdot_f[i, j] = grad M_ij . f  and  Mdot_Bu[i, j] = grad M_ij . Bu
    gradT = IntervalMatrix(mb.gradM.lo.unsqueeze(-2), mb.gradM.hi.unsqueeze(-2), check=False)

    def lie(v: IntervalVector):
        c = _col(v)
        c = IntervalMatrix(c.lo.unsqueeze(-3).unsqueeze(-3), c.hi.unsqueeze(-3).unsqueeze(-3), check=False)
        r = imm(gradT, c)
        return r.lo[..., 0, 0], r.hi[..., 0, 0]

    mf_lo, mf_hi = lie(f)
    mu_lo, mu_hi = lie(Bu)
    Lf = imm(M, df)
    Lu = imm(M, BdU)
    Af_lo = Lf.lo + Lf.lo.transpose(-1, -2) + mf_lo
    Af_hi = Lf.hi + Lf.hi.transpose(-1, -2) + mf_hi
    Au_lo = Lu.lo + Lu.lo.transpose(-1, -2) + mu_lo
    Au_hi = Lu.hi + Lu.hi.transpose(-1, -2) + mu_hi
    lo, hi = Af_lo + Au_lo, Af_hi + Au_hi
    if prob.rate > 0:
        lo = lo + 2.0 * prob.rate * M.lo
        hi = hi + 2.0 * prob.rate * M.hi
    return symmetrize(IntervalMatrix(lo, hi, check=False))


def assemble_G(A: IntervalMatrix) -> torch.Tensor:
    """``max(hi, -lo)`` off the diagonal, ``hi`` on it; ties pick ``hi``."""
    lo, hi = A.lo, A.hi
    off = torch.where(hi >= -lo, hi, -lo)
    eye = torch.eye(lo.shape[-1], dtype=torch.bool)
    return torch.where(eye, hi, off)


def cell_G(prob: ContractionProblem, cells: IntervalVector) -> torch.Tensor:
    return assemble_G(assemble_A_interval(prob, cells))


def _metric_upper(prob: ContractionProblem, cells: IntervalVector) -> torch.Tensor:
    Mhi = bound_metric(prob.metric, cells).M_box.hi
    return jacobi_eigh(Mhi)[0][..., 0]


def verify_cells(prob: ContractionProblem, cells, depth=0) -> list[CellCertificate]:
    """Certify a list of cells in one batched pass."""
    cells = list(cells)
    if not cells:
        return []
    batch = stack(cells)
    with torch.no_grad():
        G = cell_G(prob, batch)
        lam = jacobi_eigh(G)[0][:, 0]
        mu = _metric_upper(prob, batch)
    depths = depth if isinstance(depth, (list, tuple)) else [depth] * len(cells)
    out = []
    for k, cell in enumerate(cells):
        lm = float(lam[k])
        out.append(
            CellCertificate(
                cell=cell,
                G=G[k].numpy().copy(),
                lambda_max=lm,
                verified=lm <= -prob.margin,
                depth=depths[k],
                metric_upper=float(mu[k]),
            )
        )
    return out


def verify_cell(prob: ContractionProblem, cell: IntervalVector) -> CellCertificate:
    return verify_cells(prob, [cell])[0]


def _fingerprint(prob):
    from .modelio import problem_fingerprint

    try:
        return problem_fingerprint(prob)
    except (TypeError, ValueError):
        return None


def verify_domain(prob: ContractionProblem, domain: IntervalVector, r: int) -> DomainCertificate:
    """Verify every cell of the uniform ``r**n`` grid over ``domain``."""
    cells = verify_cells(prob, uniform_partition(domain, r))
    return DomainCertificate(domain, cells, _fingerprint(prob))


def adaptive_verify(prob: ContractionProblem, domain: IntervalVector, max_depth: int) -> DomainCertificate:
    """Bisect unverified cells until they verify or reach ``max_depth``.

    Each level is processed as one batch; leaves are reported in
    breadth-first order.
    """
    if max_depth < 0:
        raise ValueError("max_depth must be nonnegative")
    leaves = []
    frontier = [domain]
    for depth in range(max_depth + 1):
        certs = verify_cells(prob, frontier, depth)
        frontier = []
        for c in certs:
            if c.verified or depth == max_depth:
                leaves.append(c)
            else:
                frontier.extend(bisect(c.cell))
        if not frontier:
            break
    return DomainCertificate(domain, leaves, _fingerprint(prob))


def _closed_loop_jacobian(prob: ContractionProblem, x):
    J = prob.plant.jf(x)
    ctrl = prob.controller
    if ctrl is None:
        return J, np.zeros((*np.shape(x)[:-1], prob.plant.m))
    if isinstance(ctrl, ZeroAnchoredBoundedController):
        u, du = controller_eval(ctrl, x), controller_jacobian(ctrl, x)
    else:
        net = ctrl.numpy()
        u, du = forward(net, x), jacobian(net, x)
    return J + prob.plant.B @ du, u


def contraction_matrix(prob: ContractionProblem, x) -> np.ndarray:
    """Exact A(x) from pointwise Jacobians (any leading batch shape)."""
    x = np.asarray(x, dtype=np.float64)
    J, u = _closed_loop_jacobian(prob, x)
    fcl = prob.plant.f(x) + u @ prob.plant.B.T
    M = eval_M(prob.metric, x)
    dM = eval_gradM(prob.metric, x)
    Mdot = np.einsum("...ijk,...k->...ij", dM, fcl)
    MJ = M @ J
    return MJ + np.swapaxes(MJ, -1, -2) + Mdot + 2.0 * prob.rate * M
