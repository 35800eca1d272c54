"""Continual-mapping strategies behind a common step interface.

Every strategy owns its parameter vector and advances it from one
:class:`RayBatch` at a time. Baselines share the descent rule and step budget
of the consensus optimizer so only the forgetting-control logic differs.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .consensus import (
    ConsensusConfig,
    TacoState,
    data_grad_fn,
    descend,
    importance_update,
    init_state,
    taco_step,
)
from .errors import NumericalFailure
from .field import FieldModel
from .loss import LossWeights, objective
from .render import RayBatch, RenderConfig

log = logging.getLogger(__name__)


class StrategyKind(str, enum.Enum):
    TACO = "taco"
    NAIVE = "naive"
    REPLAY = "replay"
    MAS = "mas"
    EWC = "ewc"
    REPLAY_UPPER = "replay_upper"

    @classmethod
    def parse(cls, value) -> "StrategyKind":
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown strategy {value!r}; expected one of {names}") from None


@dataclass(frozen=True)
class StrategyConfig:
    kind: StrategyKind = StrategyKind.TACO
    consensus: ConsensusConfig = ConsensusConfig()
    replay_capacity: int = 10
    replay_rays: int | None = None  # rays drawn from the buffer per gradient step; None = batch size
    keyframe_interval: int = 1  # batches whose step is a multiple of this enter the buffer
    reg_strength: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind.parse(self.kind))
        if self.replay_capacity < 0:
            raise ValueError("replay_capacity must be >= 0")
        if self.keyframe_interval < 1:
            raise ValueError("keyframe_interval must be >= 1")
        if self.replay_rays is not None and self.replay_rays < 1:
            raise ValueError("replay_rays must be >= 1")
        if self.reg_strength < 0:
            raise ValueError("reg_strength must be >= 0")

    @property
    def steps(self) -> int:
        """Gradient steps per time step (the same budget as the consensus solve)."""
        return self.consensus.rounds * self.consensus.inner_steps


# -- replay -------------------------------------------------------------------


@dataclass
class ReplayBuffer:
    """Keyframe buffer; oldest batch is evicted once ``capacity`` is reached.

    ``capacity=None`` keeps everything.
    """

    capacity: int | None = 10
    stored: deque = field(default_factory=deque)

    def add(self, batch: RayBatch) -> "ReplayBuffer":
        out = ReplayBuffer(self.capacity, deque(self.stored))
        if self.capacity == 0:
            return out
        out.stored.append(batch)
        while self.capacity is not None and len(out.stored) > self.capacity:
            out.stored.popleft()
        return out

    def __len__(self) -> int:
        return len(self.stored)

    def rays(self) -> RayBatch | None:
        return RayBatch.concat(list(self.stored)) if self.stored else None

    def nbytes(self) -> int:
        return sum(b.nbytes() for b in self.stored)


def naive_step(
    model: FieldModel,
    theta: np.ndarray,
    batch: RayBatch,
    rng: np.random.Generator,
    cfg: StrategyConfig = StrategyConfig(StrategyKind.NAIVE),
    weights: LossWeights = LossWeights(),
    render_cfg: RenderConfig = RenderConfig(),
    patch_count: int = 64,
) -> tuple[np.ndarray, dict]:
    """Plain descent on the newest batch only."""
    grad_fn = data_grad_fn(model, batch, weights, render_cfg, patch_count)
    return descend(theta, grad_fn, cfg.steps, cfg.consensus.rule, rng, model.layout.grid_len)


def replay_step(
    model: FieldModel,
    theta: np.ndarray,
    batch: RayBatch,
    buffer: ReplayBuffer,
    rng: np.random.Generator,
    cfg: StrategyConfig = StrategyConfig(StrategyKind.REPLAY),
    weights: LossWeights = LossWeights(),
    render_cfg: RenderConfig = RenderConfig(),
    patch_count: int = 64,
) -> tuple[np.ndarray, ReplayBuffer, dict]:
    """Descend on the new batch joined with rays drawn uniformly from the buffer.

    Each gradient step draws a fresh sample. With an unbounded buffer and no
    ray budget the whole buffer is used every step. The batch is stored
    afterwards if its step falls on the keyframe interval.
    """
    pool = buffer.rays()
    keep = batch.step % cfg.keyframe_interval == 0
    if pool is None:
        theta_new, terms = naive_step(model, theta, batch, rng, cfg, weights, render_cfg, patch_count)
        return theta_new, buffer.add(batch) if keep else buffer, terms
    k = len(batch) if cfg.replay_rays is None else cfg.replay_rays
    use_all = buffer.capacity is None and cfg.replay_rays is None

    def grad_fn(th, r):
        if use_all:
            joint = RayBatch.concat([batch, pool])
        else:
            idx = r.integers(0, len(pool), size=k)
            joint = RayBatch.concat([batch, pool.subset(idx)])
        obj = objective(model, th, joint, weights, r, render_cfg, patch_count)
        return obj.value, obj.grad, obj.terms

    theta_new, terms = descend(theta, grad_fn, cfg.steps, cfg.consensus.rule, rng, model.layout.grid_len)
    return theta_new, buffer.add(batch) if keep else buffer, terms


# -- anchored penalties (MAS / EWC) ---------------------------------------------


@dataclass(frozen=True)
class PenaltyState:
    anchor: np.ndarray
    omega: np.ndarray
    strength: float = 1.0

    def __post_init__(self):
        if self.anchor.shape != self.omega.shape:
            raise ValueError("anchor and omega must be aligned")
        if np.any(self.omega < 0):
            raise ValueError("omega must be nonnegative")

    @classmethod
    def start(cls, theta: np.ndarray, strength: float = 1.0) -> "PenaltyState":
        return cls(theta.copy(), np.zeros_like(theta), strength)

    def value(self, theta: np.ndarray) -> float:
        return 0.5 * self.strength * float(np.sum(self.omega * (theta - self.anchor) ** 2))

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.strength * self.omega * (theta - self.anchor)

    def nbytes(self) -> int:
        return self.anchor.nbytes + self.omega.nbytes


def _anchored_descent(model, theta, batch, penalty, rng, cfg, weights, render_cfg, patch_count):
    grad_fn = data_grad_fn(model, batch, weights, render_cfg, patch_count)
    extra = penalty.grad if penalty.strength > 0 else None
    return descend(theta, grad_fn, cfg.steps, cfg.consensus.rule, rng, model.layout.grid_len, extra)


def mas_step(
    model: FieldModel,
    theta: np.ndarray,
    batch: RayBatch,
    penalty: PenaltyState,
    rng: np.random.Generator,
    cfg: StrategyConfig = StrategyConfig(StrategyKind.MAS),
    weights: LossWeights = LossWeights(),
    render_cfg: RenderConfig = RenderConfig(),
    patch_count: int = 64,
) -> tuple[np.ndarray, PenaltyState, dict]:
    """Anchored descent; omega grows by the proxy-loss sensitivity, anchor moves every step."""
    theta_new, terms = _anchored_descent(model, theta, batch, penalty, rng, cfg, weights, render_cfg, patch_count)
    omega = importance_update(penalty.omega, model, theta_new, batch, np.random.default_rng(rng.integers(2**63)), render_cfg)
    return theta_new, PenaltyState(theta_new.copy(), omega, penalty.strength), terms


def ewc_step(
    model: FieldModel,
    theta: np.ndarray,
    batch: RayBatch,
    penalty: PenaltyState,
    rng: np.random.Generator,
    cfg: StrategyConfig = StrategyConfig(StrategyKind.EWC),
    weights: LossWeights = LossWeights(),
    render_cfg: RenderConfig = RenderConfig(),
    patch_count: int = 64,
) -> tuple[np.ndarray, PenaltyState, dict]:
    """As :func:`mas_step` but omega accumulates the squared objective gradient."""
    theta_new, terms = _anchored_descent(model, theta, batch, penalty, rng, cfg, weights, render_cfg, patch_count)
    obj = objective(model, theta_new, batch, weights, np.random.default_rng(rng.integers(2**63)), render_cfg, patch_count)
    if not np.all(np.isfinite(obj.grad)):
        raise NumericalFailure("fisher estimate")
    return theta_new, PenaltyState(theta_new.copy(), penalty.omega + obj.grad**2, penalty.strength), terms


# -- stateful wrapper used by the runner ------------------------------------------


class Strategy:
    """Owns the parameters and auxiliary state of one strategy.

    ``step`` either commits a full update or, on :class:`NumericalFailure`,
    leaves every field untouched.
    """

    def __init__(
        self,
        model: FieldModel,
        theta: np.ndarray,
        cfg: StrategyConfig,
        weights: LossWeights = LossWeights(),
        render_cfg: RenderConfig = RenderConfig(),
        patch_count: int = 64,
    ):
        self.model = model
        self.cfg = cfg
        self.weights = weights
        self.render_cfg = render_cfg
        self.patch_count = patch_count
        self.kind = cfg.kind
        self.theta = theta.copy()
        self.taco: TacoState | None = None
        self.buffer: ReplayBuffer | None = None
        self.penalty: PenaltyState | None = None
        match self.kind:
            case StrategyKind.TACO:
                self.taco = init_state(model, theta)
            case StrategyKind.NAIVE:
                pass
            case StrategyKind.REPLAY:
                self.buffer = ReplayBuffer(cfg.replay_capacity)
            case StrategyKind.REPLAY_UPPER:
                self.buffer = ReplayBuffer(None)
            case StrategyKind.MAS | StrategyKind.EWC:
                self.penalty = PenaltyState.start(theta, cfg.reg_strength)

    @property
    def importance(self) -> np.ndarray | None:
        if self.taco is not None:
            return self.taco.importance
        if self.kind is StrategyKind.MAS:
            return self.penalty.omega
        return None

    def step(self, batch: RayBatch, rng: np.random.Generator) -> dict:
        common = (self.cfg, self.weights, self.render_cfg, self.patch_count)
        info: dict = {}
        match self.kind:
            case StrategyKind.TACO:
                self.taco, info = taco_step(
                    self.model, self.taco, batch, self.cfg.consensus, self.weights, rng, self.render_cfg, self.patch_count
                )
                self.theta = self.taco.theta
            case StrategyKind.NAIVE:
                self.theta, info = naive_step(self.model, self.theta, batch, rng, *common)
            case StrategyKind.REPLAY | StrategyKind.REPLAY_UPPER:
                self.theta, self.buffer, info = replay_step(self.model, self.theta, batch, self.buffer, rng, *common)
            case StrategyKind.MAS:
                self.theta, self.penalty, info = mas_step(self.model, self.theta, batch, self.penalty, rng, *common)
            case StrategyKind.EWC:
                self.theta, self.penalty, info = ewc_step(self.model, self.theta, batch, self.penalty, rng, *common)
        return dict(info)

    def tracked_bytes(self) -> int:
        """Optimizer memory by internal accounting: parameters plus retained state."""
        if self.taco is not None:
            return self.taco.tracked_bytes()
        total = self.theta.nbytes
        if self.buffer is not None:
            total += self.buffer.nbytes()
        if self.penalty is not None:
            total += self.penalty.nbytes()
        return total


__all__ = [
    "PenaltyState",
    "ReplayBuffer",
    "Strategy",
    "StrategyConfig",
    "StrategyKind",
    "ewc_step",
    "mas_step",
    "naive_step",
    "replay_step",
]
