"""Cyclic Jacobi eigensolver for batches of small symmetric matrices."""

from __future__ import annotations

import numpy as np
import torch

from .interval import DTYPE, as_tensor

MAX_SWEEPS = 60


class EigenConvergenceError(RuntimeError):
    def __init__(self, matrix):
        super().__init__("Jacobi iteration did not converge within the sweep cap")
        self.matrix = matrix


def _rotate(A, V, p, q):
    apq = A[:, p, q]
    app = A[:, p, p]
    aqq = A[:, q, q]
    active = apq != 0.0
    safe = torch.where(active, apq, torch.ones_like(apq))
    theta = (aqq - app) / (2.0 * safe)
    sgn = torch.where(theta >= 0, torch.ones_like(theta), -torch.ones_like(theta))
    t = sgn / (theta.abs() + torch.sqrt(theta * theta + 1.0))
    t = torch.where(active & torch.isfinite(t), t, torch.zeros_like(t))
    c = 1.0 / torch.sqrt(t * t + 1.0)
    s = t * c
    c_, s_ = c[:, None], s[:, None]

    Ap, Aq = A[:, :, p].clone(), A[:, :, q].clone()
    A[:, :, p] = c_ * Ap - s_ * Aq
    A[:, :, q] = s_ * Ap + c_ * Aq
    Ap, Aq = A[:, p, :].clone(), A[:, q, :].clone()
    A[:, p, :] = c_ * Ap - s_ * Aq
    A[:, q, :] = s_ * Ap + c_ * Aq
    A[:, p, q] = torch.where(active, torch.zeros_like(apq), A[:, p, q])
    A[:, q, p] = A[:, p, q]

    Vp, Vq = V[:, :, p].clone(), V[:, :, q].clone()
    V[:, :, p] = c_ * Vp - s_ * Vq
    V[:, :, q] = s_ * Vp + c_ * Vq


def jacobi_eigh(G, tol: float = 1e-15, max_sweeps: int = MAX_SWEEPS):
    """All eigenpairs of symmetric matrices ``G`` of shape (..., n, n).

    The input is symmetrized by averaging with its transpose. Returns
    eigenvalues in descending order, shape (..., n), and unit eigenvectors
    as columns, shape (..., n, n). Sweep order is fixed (row-cyclic), so the
    result does not depend on batch composition.
    """
    G = as_tensor(G).detach()
    batch_shape = G.shape[:-2]
    n = G.shape[-1]
    A = (0.5 * (G + G.transpose(-1, -2))).reshape(-1, n, n).clone()
    V = torch.eye(n, dtype=DTYPE).expand(A.shape[0], n, n).clone()
    offmask = ~torch.eye(n, dtype=torch.bool)
    scale = A.abs().amax(dim=(-1, -2)).clamp_min(torch.finfo(DTYPE).tiny)
    for _ in range(max_sweeps):
        off = (A * offmask).abs().amax(dim=(-1, -2))
        if bool((off <= tol * scale).all()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                _rotate(A, V, p, q)
    else:
        off = (A * offmask).abs().amax(dim=(-1, -2))
        if not bool((off <= tol * scale).all()):
            raise EigenConvergenceError(G)
    w = torch.diagonal(A, dim1=-2, dim2=-1)
    order = torch.argsort(w, dim=-1, descending=True, stable=True)
    w = torch.gather(w, -1, order)
    V = torch.gather(V, -1, order[:, None, :].expand(-1, n, -1))
    return w.reshape(*batch_shape, n), V.reshape(*batch_shape, n, n)


class _SymEigvals(torch.autograd.Function):
    @staticmethod
    def forward(ctx, G):
        w, V = jacobi_eigh(G)
        ctx.save_for_backward(V)
        return w

    @staticmethod
    def backward(ctx, gw):
        (V,) = ctx.saved_tensors
        # d lambda_j / dG = v_j v_j^T
        return (V * gw.unsqueeze(-2)) @ V.transpose(-1, -2)


def eigvals_sym(G: torch.Tensor) -> torch.Tensor:
    """Descending eigenvalues of symmetric ``G`` with gradient ``sum_j g_j v_j v_j^T``."""
    return _SymEigvals.apply(G)


def lambda_max_sym(G):
    """Dominant eigenvalue and unit eigenvector of a single symmetric matrix."""
    G = np.asarray(G.detach().numpy() if isinstance(G, torch.Tensor) else G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {G.shape}")
    if not np.allclose(G, G.T, rtol=0.0, atol=1e-9 * max(1.0, np.abs(G).max())):
        raise ValueError("matrix is not symmetric within 1e-9")
    w, V = jacobi_eigh(torch.from_numpy(G))
    return float(w[0]), V[:, 0].numpy().copy()
