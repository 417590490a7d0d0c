"""Feedforward networks: evaluation, Jacobians, IBP and interval Jacobians.

Layers follow ``xi_{k+1} = W_k z_k + b_k``, ``z_{k+1} = sigma(xi_{k+1})`` with the
hidden activation applied after every layer except the last. Exact
evaluation works on numpy arrays or torch tensors; bounding always runs in
torch so that bounds stay differentiable in the weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import expit

from .interval import (
    DTYPE,
    Interval,
    IntervalArray,
    IntervalMatrix,
    IntervalVector,
    as_tensor,
    diag_imm,
    imm,
)

SOFTPLUS = "softplus"
SMOOTH_LEAKY_RELU = "smooth_leaky_relu"
SCALED_TANH = "scaled_tanh"
IDENTITY = "identity"
_KINDS = (SOFTPLUS, SMOOTH_LEAKY_RELU, SCALED_TANH, IDENTITY)


def _is_torch(*xs) -> bool:
    return any(isinstance(x, torch.Tensor) for x in xs)


def _sigmoid(x):
    return torch.sigmoid(x) if _is_torch(x) else expit(x)


def _softplus(x):
    if _is_torch(x):
        return torch.logaddexp(x, torch.zeros_like(x))
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sech2(y):
    # 4 e^{-2|y|} / (1 + e^{-2|y|})^2, finite for any y
    xp = torch if _is_torch(y) else np
    e = xp.exp(-2.0 * xp.abs(y))
    return 4.0 * e / (1.0 + e) ** 2


@dataclass(frozen=True)
class Activation:
    """Activation kind with its parameter (alpha or scale s, where relevant)."""

    kind: str
    param: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {_KINDS}")
        if self.kind == SMOOTH_LEAKY_RELU and not (self.param is not None and 0.0 < self.param < 1.0):
            raise ValueError(f"smooth-leaky-relu needs alpha in (0, 1), got {self.param}")
        if self.kind == SCALED_TANH and not (self.param is not None and self.param > 0.0):
            raise ValueError(f"scaled-tanh needs a positive scale, got {self.param}")

    @classmethod
    def softplus(cls):
        return cls(SOFTPLUS)

    @classmethod
    def smooth_leaky_relu(cls, alpha: float):
        return cls(SMOOTH_LEAKY_RELU, float(alpha))

    @classmethod
    def scaled_tanh(cls, s: float):
        return cls(SCALED_TANH, float(s))

    @classmethod
    def identity(cls):
        return cls(IDENTITY)

    @property
    def convex_monotone(self) -> bool:
        """Whether the derivative is nondecreasing (endpoint bounds are exact)."""
        return self.kind in (SOFTPLUS, SMOOTH_LEAKY_RELU, IDENTITY)

    def __call__(self, x):
        if self.kind == SOFTPLUS:
            return _softplus(x)
        if self.kind == SMOOTH_LEAKY_RELU:
            a = self.param
            return a * x + (1.0 - a) * _softplus(x)
        if self.kind == SCALED_TANH:
            s = self.param
            return s * (torch.tanh(x / s) if _is_torch(x) else np.tanh(x / s))
        return x

    def derivative(self, x):
        if self.kind == SOFTPLUS:
            return _sigmoid(x)
        if self.kind == SMOOTH_LEAKY_RELU:
            a = self.param
            return a + (1.0 - a) * _sigmoid(x)
        if self.kind == SCALED_TANH:
            return _sech2(x / self.param)
        return x * 0.0 + 1.0

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.param is not None:
            d["param"] = self.param
        return d

    @classmethod
    def from_dict(cls, d) -> "Activation":
        if isinstance(d, str):
            return cls(d)
        return cls(d["kind"], d.get("param"))


@dataclass
class FeedforwardNetwork:
    """Weights ``W_k`` of shape (out, in) and biases ``b_k`` of shape (out,)."""

    layers: list
    hidden: Activation = field(default_factory=Activation.softplus)
    output: Activation = field(default_factory=Activation.identity)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        prev = None
        for k, (W, b) in enumerate(self.layers):
            if len(W.shape) != 2 or len(b.shape) != 1 or W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: W {tuple(W.shape)} and b {tuple(b.shape)} do not match")
            if prev is not None and W.shape[1] != prev:
                raise ValueError(f"layer {k}: expects input width {W.shape[1]}, previous layer gives {prev}")
            prev = W.shape[0]
        if self.output.kind not in (IDENTITY, SCALED_TANH):
            raise ValueError("output activation must be identity or scaled-tanh")

    @property
    def in_dim(self) -> int:
        return int(self.layers[0][0].shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.layers[-1][0].shape[0])

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [int(W.shape[0]) for W, _ in self.layers]

    @property
    def num_parameters(self) -> int:
        return sum(int(W.shape[0] * W.shape[1] + b.shape[0]) for W, b in self.layers)

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, hidden=None, output=None) -> "FeedforwardNetwork":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases."""
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
        return cls(layers, hidden or Activation.softplus(), output or Activation.identity())

    def numpy(self) -> "FeedforwardNetwork":
        def cvt(a):
            return a.detach().numpy() if isinstance(a, torch.Tensor) else np.asarray(a, dtype=np.float64)

        return FeedforwardNetwork([(cvt(W), cvt(b)) for W, b in self.layers], self.hidden, self.output)

    def torch(self) -> "FeedforwardNetwork":
        return FeedforwardNetwork([(as_tensor(W), as_tensor(b)) for W, b in self.layers], self.hidden, self.output)

    def flat_parameters(self) -> np.ndarray:
        net = self.numpy()
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in net.layers])

    def with_flat_parameters(self, theta) -> "FeedforwardNetwork":
        """Rebuild the network from a flat vector (row-major W then b per layer).

        ``theta`` may be a torch tensor that requires grad; the new weights are
        views into it.
        """
        layers, k = [], 0
        for W, b in self.layers:
            rows, cols = W.shape
            Wn = theta[k:k + rows * cols].reshape(rows, cols)
            k += rows * cols
            bn = theta[k:k + rows]
            k += rows
            layers.append((Wn, bn))
        if k != len(theta):
            raise ValueError(f"parameter vector has length {len(theta)}, network needs {k}")
        return FeedforwardNetwork(layers, self.hidden, self.output)


@dataclass
class LayerBounds:
    """IBP bounds per layer: ``preact[k]`` on xi_{k+1}, ``postact[k]`` on z_{k+1}."""

    preact: list
    postact: list


def _matvec(W, x):
    return x @ W.T


def forward(net: FeedforwardNetwork, x):
    """Network output at ``x`` (any leading batch shape)."""
    torch_mode = _is_torch(x, net.layers[0][0])
    if torch_mode:
        x = as_tensor(x)
        layers = net.torch().layers
    else:
        x = np.asarray(x, dtype=np.float64)
        layers = net.layers
    if x.shape[-1] != net.in_dim:
        raise ValueError(f"input has dimension {x.shape[-1]}, network expects {net.in_dim}")
    z = x
    for k, (W, b) in enumerate(layers):
        xi = _matvec(W, z) + b
        z = net.hidden(xi) if k < len(layers) - 1 else net.output(xi)
    return z


def jacobian(net: FeedforwardNetwork, x):
    """Exact Jacobian ``W_L J_{L-1} W_{L-1} ... J_1 W_1`` at ``x``; shape (..., out, in)."""
    torch_mode = _is_torch(x, net.layers[0][0])
    if torch_mode:
        x = as_tensor(x)
        layers = net.torch().layers
    else:
        x = np.asarray(x, dtype=np.float64)
        layers = net.layers
    if x.shape[-1] != net.in_dim:
        raise ValueError(f"input has dimension {x.shape[-1]}, network expects {net.in_dim}")
    z = x
    P = None
    for k, (W, b) in enumerate(layers):
        xi = _matvec(W, z) + b
        P = W if P is None else W @ P
        act = net.hidden if k < len(layers) - 1 else net.output
        if act.kind != IDENTITY:
            P = act.derivative(xi)[..., :, None] * P
        z = act(xi)
    if P.ndim < x.ndim + 1:
        P = P + (x[..., None, :] * 0.0)
    return P


def activation_derivative_bounds(act: Activation, preact):
    """Interval containing ``act'(y)`` for every ``y`` in ``preact``.

    Softplus and smooth leaky ReLU have nondecreasing derivatives, so the
    endpoint values are the bounds. The scaled tanh derivative peaks at 0:
    the lower bound is the smaller endpoint value and the upper bound is 1
    when 0 is inside the interval.
    """
    scalar = isinstance(preact, Interval)
    if scalar:
        lo, hi = torch.tensor(preact.lo, dtype=DTYPE), torch.tensor(preact.hi, dtype=DTYPE)
    else:
        lo, hi = preact.lo, preact.hi
    if act.kind == IDENTITY:
        dlo = torch.ones_like(lo)
        dhi = torch.ones_like(hi)
    elif act.convex_monotone:
        dlo, dhi = act.derivative(lo), act.derivative(hi)
    else:
        a, b = act.derivative(lo), act.derivative(hi)
        dlo = torch.minimum(a, b)
        straddles = (lo <= 0.0) & (hi >= 0.0)
        dhi = torch.where(straddles, torch.ones_like(a), torch.maximum(a, b))
    if scalar:
        return Interval(float(dlo), float(dhi))
    return IntervalVector(dlo, dhi, check=False)


def ibp(net: FeedforwardNetwork, box: IntervalVector) -> tuple[IntervalVector, LayerBounds]:
    """Interval bound propagation with the positive/negative weight split."""
    if box.dim != net.in_dim:
        raise ValueError(f"box has dimension {box.dim}, network expects {net.in_dim}")
    layers = net.torch().layers
    zlo, zhi = box.lo, box.hi
    pre, post = [], []
    for k, (W, b) in enumerate(layers):
        Wp = torch.clamp(W, min=0.0)
        Wn = W - Wp
        xlo = _matvec(Wp, zlo) + _matvec(Wn, zhi) + b
        xhi = _matvec(Wp, zhi) + _matvec(Wn, zlo) + b
        act = net.hidden if k < len(layers) - 1 else net.output
        # every supported activation is monotone increasing
        zlo, zhi = act(xlo), act(xhi)
        pre.append(IntervalVector(xlo, xhi, check=False))
        post.append(IntervalVector(zlo, zhi, check=False))
    return post[-1], LayerBounds(pre, post)


def interval_jacobian(
    net: FeedforwardNetwork,
    box: IntervalVector,
    left=None,
    bounds: LayerBounds | None = None,
) -> IntervalMatrix:
    """Interval enclosure of the Jacobian (or ``left @ Jacobian``) over ``box``.

    ``left`` is folded into the last weight matrix before propagation, which
    is tighter than multiplying the finished enclosure. It requires an
    identity output activation.
    """
    layers = net.torch().layers
    if bounds is None:
        _, bounds = ibp(net, box)
    n = net.in_dim
    eye = torch.eye(n, dtype=DTYPE)
    if box.is_batched:
        eye = eye.expand(*box.lo.shape[:-1], n, n)
    P = IntervalMatrix(eye, eye, check=False)
    for k, (W, _) in enumerate(layers[:-1]):
        P = imm(W, P)
        P = diag_imm(activation_derivative_bounds(net.hidden, bounds.preact[k]), P)
    W_last = layers[-1][0]
    if left is not None:
        if net.output.kind != IDENTITY:
            raise ValueError("cannot elide into a last layer followed by a nonlinearity")
        W_last = as_tensor(left) @ W_last
    P = imm(W_last, P)
    if net.output.kind != IDENTITY:
        P = diag_imm(activation_derivative_bounds(net.output, bounds.preact[-1]), P)
    return P


@dataclass
class ZeroAnchoredBoundedController:
    """``u(x) = s * tanh((base(x) - base(0)) / s)``: zero at the origin, bounded by s."""

    base: FeedforwardNetwork
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"controller scale must be positive, got {self.scale}")
        if self.base.output.kind != IDENTITY:
            raise ValueError("controller base network must have an identity output")

    @property
    def in_dim(self) -> int:
        return self.base.in_dim

    @property
    def out_dim(self) -> int:
        return self.base.out_dim

    @property
    def squash(self) -> Activation:
        return Activation.scaled_tanh(self.scale)

    def anchor(self, torch_mode: bool = False):
        """Base network output at the origin."""
        if torch_mode:
            return forward(self.base.torch(), torch.zeros(self.in_dim, dtype=DTYPE))
        return forward(self.base.numpy(), np.zeros(self.in_dim))

    def __call__(self, x):
        return controller_eval(self, x)


def controller_eval(ctrl: ZeroAnchoredBoundedController, x):
    torch_mode = _is_torch(x, ctrl.base.layers[0][0])
    if not torch_mode:
        x = np.asarray(x, dtype=np.float64)
    return ctrl.squash(forward(ctrl.base, x) - ctrl.anchor(torch_mode))


def controller_jacobian(ctrl: ZeroAnchoredBoundedController, x):
    torch_mode = _is_torch(x, ctrl.base.layers[0][0])
    if not torch_mode:
        x = np.asarray(x, dtype=np.float64)
    shifted = forward(ctrl.base, x) - ctrl.anchor(torch_mode)
    return ctrl.squash.derivative(shifted)[..., :, None] * jacobian(ctrl.base, x)


def controller_bounds(ctrl: ZeroAnchoredBoundedController, box: IntervalVector):
    """Enclosure of ``u`` over ``box``.

    Returns ``(u_box, shifted_preact, layer_bounds)``; the shifted final
    pre-activation is reused by :func:`controller_jacobian_bounds`.
    """
    _, lb = ibp(ctrl.base, box)
    a = ctrl.anchor(torch_mode=True)
    last = lb.preact[-1]
    shifted = IntervalVector(last.lo - a, last.hi - a, check=False)
    sq = ctrl.squash
    return IntervalVector(sq(shifted.lo), sq(shifted.hi), check=False), shifted, lb


def controller_jacobian_bounds(
    ctrl: ZeroAnchoredBoundedController,
    box: IntervalVector,
    left=None,
    bounds=None,
) -> IntervalMatrix:
    """Enclosure of ``left @ du/dx`` over ``box``.

    The scaled tanh sits between ``left`` and the last affine layer, so its
    derivative interval enters as a diagonal factor and ``left`` is applied by
    interval matrix product afterwards.
    """
    if bounds is None:
        _, shifted, lb = controller_bounds(ctrl, box)
    else:
        shifted, lb = bounds
    P = interval_jacobian(ctrl.base, box, bounds=lb)
    P = diag_imm(activation_derivative_bounds(ctrl.squash, shifted), P)
    if left is not None:
        P = imm(as_tensor(left), P)
    return P


def network_output_bounds(ctrl, box: IntervalVector) -> IntervalVector:
    """Output enclosure for either a plain network or an anchored controller."""
    if isinstance(ctrl, ZeroAnchoredBoundedController):
        return controller_bounds(ctrl, box)[0]
    return ibp(ctrl, box)[0]


__all__ = [
    "Activation",
    "FeedforwardNetwork",
    "LayerBounds",
    "ZeroAnchoredBoundedController",
    "forward",
    "jacobian",
    "ibp",
    "activation_derivative_bounds",
    "interval_jacobian",
    "controller_eval",
    "controller_jacobian",
    "controller_bounds",
    "controller_jacobian_bounds",
    "IntervalArray",
]
