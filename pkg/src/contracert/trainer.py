"""Co-training of controller and metric against the certificate loss.

The loss over a partition is the sum of the positive parts of all
eigenvalues of every cell's G matrix, so it is zero exactly when every cell
is certified. Gradients come from torch autograd through the interval
pipeline and from ``v v^T`` eigenvalue sensitivities through the eigensolve.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .eigen import eigvals_sym
from .interval import DTYPE, IntervalVector, stack, symmetric_box, uniform_partition
from .metric import NeuralContractionMetric
from .nn import FeedforwardNetwork, ZeroAnchoredBoundedController
from .verifier import ContractionProblem, DomainCertificate, cell_G, verify_domain

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 20000
    initial_r: int = 16
    refine_after: int = 2000
    refine_increment: int = 2
    start_half_widths: tuple = (math.pi / 100, 0.05)
    increment: tuple = (math.pi / 100, 0.06)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.start_half_widths = tuple(float(h) for h in self.start_half_widths)
        self.increment = tuple(float(h) for h in self.increment)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("max_epochs", "initial_r", "refine_after", "refine_increment"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if any(h <= 0 for h in self.start_half_widths):
            raise ValueError("start_half_widths must be positive")
        if any(h < 0 for h in self.increment):
            raise ValueError("increment must be nonnegative")
        if len(self.increment) != len(self.start_half_widths):
            raise ValueError("increment and start_half_widths differ in length")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("Adam hyperparameters out of range")


class Parametrization:
    """Flat view of the trainable weights of a problem's controller and metric.

    The vector holds the controller base network's parameters followed by the
    metric base network's, each layer as row-major W then b.
    """

    def __init__(self, prob: ContractionProblem):
        self.template = prob
        self.blocks: list[tuple[str, slice]] = []
        k = 0
        ctrl = prob.controller
        if ctrl is not None:
            size = self._ctrl_net(ctrl).num_parameters
            self.blocks.append(("controller", slice(k, k + size)))
            k += size
        if not prob.metric.is_constant:
            size = prob.metric.base.num_parameters
            self.blocks.append(("metric", slice(k, k + size)))
            k += size
        self.size = k

    @staticmethod
    def _ctrl_net(ctrl) -> FeedforwardNetwork:
        return ctrl.base if isinstance(ctrl, ZeroAnchoredBoundedController) else ctrl

    def flat(self, prob: ContractionProblem | None = None) -> np.ndarray:
        prob = prob or self.template
        parts = []
        if prob.controller is not None:
            parts.append(self._ctrl_net(prob.controller).flat_parameters())
        if not prob.metric.is_constant:
            parts.append(prob.metric.base.flat_parameters())
        return np.concatenate(parts) if parts else np.zeros(0)

    def block_of(self, index: int) -> str:
        for name, sl in self.blocks:
            if sl.start <= index < sl.stop:
                return name
        raise IndexError(index)

    def build(self, theta) -> ContractionProblem:
        """Problem with weights taken from ``theta`` (numpy, or a torch tensor for autograd)."""
        t = self.template
        ctrl, metric = t.controller, t.metric
        for name, sl in self.blocks:
            if name == "controller":
                net = self._ctrl_net(ctrl).with_flat_parameters(theta[sl])
                if isinstance(ctrl, ZeroAnchoredBoundedController):
                    ctrl = ZeroAnchoredBoundedController(net, ctrl.scale)
                else:
                    ctrl = net
            else:
                metric = NeuralContractionMetric(metric.base.with_flat_parameters(theta[sl]), metric.epsilon)
        if isinstance(theta, np.ndarray):
            if isinstance(ctrl, ZeroAnchoredBoundedController):
                ctrl = ZeroAnchoredBoundedController(ctrl.base.numpy(), ctrl.scale)
            elif isinstance(ctrl, FeedforwardNetwork):
                ctrl = ctrl.numpy()
            if not metric.is_constant:
                metric = NeuralContractionMetric(metric.base.numpy(), metric.epsilon)
        return ContractionProblem(t.plant, ctrl, metric, t.rate, t.margin)


def _as_batch(partition) -> IntervalVector:
    if isinstance(partition, IntervalVector) and partition.is_batched:
        return partition
    return stack(partition)


def spectral_loss(eigs: torch.Tensor) -> torch.Tensor:
    """Sum of positive parts of all eigenvalues, over every cell."""
    return torch.relu(eigs).sum()


def loss(prob: ContractionProblem, partition) -> tuple[float, torch.Tensor]:
    """Certificate loss and per-cell spectra (descending) for a partition."""
    with torch.no_grad():
        eigs = eigvals_sym(cell_G(prob, _as_batch(partition)))
    return float(spectral_loss(eigs)), eigs


def grad_loss(prob: ContractionProblem, partition, param: Parametrization | None = None, theta=None):
    """Loss, its gradient over the flat parameter vector, and per-cell spectra."""
    param = param or Parametrization(prob)
    theta = param.flat(prob) if theta is None else theta
    th = torch.tensor(theta, dtype=DTYPE, requires_grad=True)
    eigs = eigvals_sym(cell_G(param.build(th), _as_batch(partition)))
    value = spectral_loss(eigs)
    v = value.item()
    if value.requires_grad and v > 0:
        (g,) = torch.autograd.grad(value, th)
        grad = g.numpy().copy()
    else:
        grad = np.zeros_like(theta)
    return v, grad, eigs.detach()


@dataclass
class TrainState:
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    epoch: int = 0
    half_widths: tuple = ()
    r: int = 16
    stagnation: int = 0
    certified: list = field(default_factory=list)

    @classmethod
    def fresh(cls, theta: np.ndarray, config: TrainConfig) -> "TrainState":
        return cls(
            theta=np.array(theta, dtype=np.float64),
            m=np.zeros_like(theta),
            v=np.zeros_like(theta),
            half_widths=tuple(config.start_half_widths),
            r=config.initial_r,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("theta", "m", "v"):
            d[k] = d[k].tolist()
        d["half_widths"] = list(self.half_widths)
        d["certified"] = [list(h) for h in self.certified]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(
            theta=np.asarray(d["theta"], dtype=np.float64),
            m=np.asarray(d["m"], dtype=np.float64),
            v=np.asarray(d["v"], dtype=np.float64),
            step=int(d["step"]),
            epoch=int(d["epoch"]),
            half_widths=tuple(d["half_widths"]),
            r=int(d["r"]),
            stagnation=int(d["stagnation"]),
            certified=[tuple(h) for h in d.get("certified", [])],
        )


class NonFiniteGradientError(FloatingPointError):
    pass


def adam_step(
    state: TrainState,
    grad: np.ndarray,
    config: TrainConfig,
    param: Parametrization | None = None,
) -> TrainState:
    """One bias-corrected Adam update; mutates and returns ``state``."""
    grad = np.asarray(grad, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        where = param.block_of(int(bad[0])) if param is not None else "parameters"
        raise NonFiniteGradientError(f"non-finite gradient in {where} (index {int(bad[0])})")
    b1, b2 = config.beta1, config.beta2
    state.step += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    mhat = state.m / (1.0 - b1**state.step)
    vhat = state.v / (1.0 - b2**state.step)
    state.theta = state.theta - config.learning_rate * mhat / (np.sqrt(vhat) + config.adam_eps)
    return state


@dataclass
class Milestone:
    epoch: int
    half_widths: tuple
    r: int
    theta: np.ndarray
    lambda_max: np.ndarray
    certificate: DomainCertificate


@dataclass
class TrainResult:
    problem: ContractionProblem
    state: TrainState
    log: list
    milestones: list

    @property
    def certificate(self) -> DomainCertificate | None:
        return self.milestones[-1].certificate if self.milestones else None

    @property
    def certified_half_widths(self) -> tuple | None:
        return self.milestones[-1].half_widths if self.milestones else None


def train(
    prob: ContractionProblem,
    config: TrainConfig,
    state: TrainState | None = None,
    on_certified: Callable[[Milestone, ContractionProblem], None] | None = None,
    max_epochs: int | None = None,
    until=None,
) -> TrainResult:
    """Curriculum training loop.

    Each epoch evaluates the loss on the ``r**n`` grid over the current
    symmetric domain. Zero loss certifies the domain (re-checked by
    :func:`verify_domain`) and grows it by ``config.increment``; otherwise an
    Adam step is taken, and after ``refine_after`` such steps in a row the
    grid is refined by ``refine_increment``. The zero-loss check runs before
    the stagnation check. With ``until`` set, training stops as soon as a
    domain at least that large (per axis) is certified.
    """
    param = Parametrization(prob)
    if state is None:
        state = TrainState.fresh(param.flat(prob), config)
    if len(state.theta) != param.size:
        raise ValueError(f"state has {len(state.theta)} parameters, problem has {param.size}")
    stop = config.max_epochs if max_epochs is None else max_epochs
    rows, milestones = [], []
    key, cells = None, None
    t0 = time.perf_counter()
    while state.epoch < stop:
        if key != (state.half_widths, state.r):
            key = (state.half_widths, state.r)
            domain = symmetric_box(state.half_widths)
            cells = stack(uniform_partition(domain, state.r))
        value, grad, eigs = grad_loss(prob, cells, param, state.theta)
        rows.append(
            {
                "epoch": state.epoch,
                "loss": value,
                "r": state.r,
                "half_widths": list(state.half_widths),
                "wall_time": time.perf_counter() - t0,
            }
        )
        if value == 0.0:
            current = param.build(state.theta)
            cert = verify_domain(current, domain, state.r)
            if cert.all_verified:
                lam = np.array([c.lambda_max for c in cert.cells])
                ms = Milestone(state.epoch, state.half_widths, state.r, state.theta.copy(), lam, cert)
                milestones.append(ms)
                state.certified.append(state.half_widths)
                log.info("epoch %d: certified half-widths %s at r=%d", state.epoch, state.half_widths, state.r)
                if on_certified is not None:
                    on_certified(ms, current)
                state.half_widths = tuple(h + d for h, d in zip(state.half_widths, config.increment))
                state.stagnation = 0
                state.epoch += 1
                if until is not None and all(h >= t for h, t in zip(ms.half_widths, until)):
                    break
                continue
            log.warning("epoch %d: zero loss but re-verification failed; continuing", state.epoch)
        adam_step(state, grad, config, param)
        state.stagnation += 1
        if state.stagnation >= config.refine_after:
            state.r += config.refine_increment
            state.stagnation = 0
            log.info("epoch %d: refining partition to r=%d", state.epoch, state.r)
        state.epoch += 1
    return TrainResult(param.build(state.theta), state, rows, milestones)


def init_problem(
    plant,
    controller_hidden,
    metric_hidden,
    epsilon,
    scale,
    seed,
    controller_activation=None,
    metric_activation=None,
):
    """Fresh anchored controller and neural metric for ``plant``; softplus by default."""
    rng = np.random.default_rng(seed)
    n, m = plant.n, plant.m
    cnet = FeedforwardNetwork.init([n, *controller_hidden, m], rng, hidden=controller_activation)
    mnet = FeedforwardNetwork.init([n, *metric_hidden, n * n], rng, hidden=metric_activation)
    return ContractionProblem(plant, ZeroAnchoredBoundedController(cnet, scale), NeuralContractionMetric(mnet, epsilon))
