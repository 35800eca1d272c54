"""Importance-weighted temporal consensus optimizer.

Each new batch is fit by a few rounds of the method of multipliers under the
constraint that the grid parameters agree with a parameter-wise weighted
average of the current model and frozen snapshots. Weights come from the
accumulated sensitivity of a ground-truth-free proxy loss.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalFailure
from .field import FieldModel
from .loss import LossWeights, objective
from .render import RayBatch, RenderConfig, composite_backward, render_batch, sample_depths

log = logging.getLogger(__name__)

# grad_fn(theta, rng) -> (loss value, gradient, per-term breakdown)
GradFn = Callable[[np.ndarray, np.random.Generator], tuple[float, np.ndarray, dict]]


@dataclass(frozen=True)
class DescentRule:
    """Momentum-free gradient step with separate grid/decoder rates.

    When ``clip_norm`` is set the whole gradient is rescaled to at most that
    norm before the step.
    """

    step_size: float = 1e-2
    decoder_step_size: float | None = None
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.decoder_step_size is not None and not self.decoder_step_size > 0:
            raise ValueError("decoder_step_size must be positive")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")

    def apply(self, theta: np.ndarray, grad: np.ndarray, grid_len: int) -> np.ndarray:
        if self.clip_norm is not None:
            norm = float(np.linalg.norm(grad))
            if norm > self.clip_norm:
                grad = grad * (self.clip_norm / norm)
        with np.errstate(over="ignore", invalid="ignore"):
            out = theta - self.step_size * grad
            if self.decoder_step_size is not None:
                out[grid_len:] = theta[grid_len:] - self.decoder_step_size * grad[grid_len:]
        if not np.all(np.isfinite(out)):
            raise NumericalFailure("gradient step")
        return out


@dataclass(frozen=True)
class ConsensusConfig:
    rho: float = 0.1
    beta: float = 1e-5
    rounds: int = 2
    inner_steps: int = 10
    step_size: float = 1e-2
    snapshots_kept: int = 1
    penalty_form: str = "augmented"  # or "literal": rho*||.||^2 with theta^T p
    decoder_step_size: float | None = None
    clip_norm: float | None = None

    @property
    def rule(self) -> DescentRule:
        return DescentRule(self.step_size, self.decoder_step_size, self.clip_norm)

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.rounds < 1 or self.inner_steps < 1:
            raise ValueError("rounds and inner_steps must be >= 1")
        if self.snapshots_kept < 1:
            raise ValueError("snapshots_kept must be >= 1")
        if self.penalty_form not in ("augmented", "literal"):
            raise ValueError(f"unknown penalty_form {self.penalty_form!r}")


@dataclass(frozen=True)
class Snapshot:
    params: np.ndarray
    importance: np.ndarray
    step: int

    def __post_init__(self):
        for a in (self.params, self.importance):
            a.setflags(write=False)


# -- importance ---------------------------------------------------------------


def proxy_loss(
    model: FieldModel,
    theta: np.ndarray,
    batch: RayBatch,
    rng: np.random.Generator,
    render_cfg: RenderConfig = RenderConfig(),
    with_grad: bool = False,
):
    """Mean squared magnitude of rendered color and depth over the batch rays.

    Observed colors are never read. Measured depths only steer where samples
    are placed along each ray. Returns ``value`` or ``(value, grad)``.
    """
    tr = render_cfg.tr
    depths = sample_depths(batch.depth, batch.max_range, render_cfg.n_samples, render_cfg.n_near, tr, rng)
    rr = render_batch(model, theta, batch, depths, tr, keep_cache=with_grad)
    res = rr.result
    n = int(res.valid.sum())
    if n == 0:
        log.warning("all rays degenerate; proxy loss set to 0")
        return (0.0, np.zeros_like(theta)) if with_grad else 0.0
    value = proxy_value(res)
    if not with_grad:
        return value
    ds, dc = composite_backward(res, rr.sdf, rr.colors, depths, tr, 2.0 * res.color / n, 2.0 * res.depth / n)
    grad = model.backward(theta, rr.field_out.cache, ds.ravel(), dc.reshape(-1, dc.shape[-1]))
    return value, grad


def proxy_value(res) -> float:
    """Mean of ``||c||^2 + d^2`` over the valid rays of a render result."""
    n = int(res.valid.sum())
    if n == 0:
        return 0.0
    return float(((res.color**2).sum(axis=1) + res.depth**2)[res.valid].sum() / n)


def importance_update(
    u: np.ndarray,
    model: FieldModel,
    theta: np.ndarray,
    batch: RayBatch,
    rng: np.random.Generator,
    render_cfg: RenderConfig = RenderConfig(),
) -> np.ndarray:
    """Add the proxy-loss sensitivity of ``theta`` on ``batch`` to ``u``."""
    _, g = proxy_loss(model, theta, batch, rng, render_cfg, with_grad=True)
    return accumulate_importance(u, g, model.layout.grid_len)


def accumulate_importance(u: np.ndarray, grad: np.ndarray, grid_len: int) -> np.ndarray:
    """``u + |grad|`` on the grid partition; decoder entries stay zero."""
    if not np.all(np.isfinite(grad)):
        raise NumericalFailure("importance gradient")
    out = u.copy()
    out[:grid_len] += np.abs(grad[:grid_len])
    return out


def scale_weights(u_current: np.ndarray, u_hist: Sequence[np.ndarray] | np.ndarray, rho: float, grid_len: int | None = None):
    """Scale importances so the mean of their sum equals ``rho``.

    ``u_hist`` may be one vector or a list (several snapshots). Returns
    ``(W_current, W_hist)`` with ``W_hist`` matching the shape of ``u_hist``.
    The mean is taken over the first ``grid_len`` entries (all if None).
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    single = isinstance(u_hist, np.ndarray)
    hist = [u_hist] if single else list(u_hist)
    n = len(u_current) if grid_len is None else grid_len
    u_sum = u_current[:n] + sum((h[:n] for h in hist), np.zeros(n))
    mean = float(u_sum.mean()) if n else 0.0
    if mean <= 0.0:
        log.warning("importance is all zero; consensus weights set to 0")
        eps = 0.0
    else:
        eps = rho / mean
    w_cur = eps * u_current
    w_hist = [eps * h for h in hist]
    return w_cur, (w_hist[0] if single else w_hist)


def mask_weights(w_hist: np.ndarray, beta: float) -> np.ndarray:
    """Zero historical weights strictly below ``beta``."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return np.where(w_hist < beta, 0.0, w_hist)


def consensus_target(
    current: np.ndarray,
    snapshots: Sequence[np.ndarray],
    w_current: np.ndarray,
    w_snapshots: Sequence[np.ndarray],
    grid_len: int | None = None,
) -> np.ndarray:
    """Parameter-wise weighted mean of the current model and the snapshots.

    Entries with zero total weight, and entries past ``grid_len``, keep the
    current value.
    """
    n = len(current) if grid_len is None else grid_len
    # written as current + weighted offsets so zero history weight gives current exactly
    cur = current[:n]
    den = w_current[:n].copy()
    num = np.zeros(n)
    for theta, w in zip(snapshots, w_snapshots):
        num = num + w[:n] * (theta[:n] - cur)
        den = den + w[:n]
    z = current.copy()
    ok = den > 0
    z[:n][ok] = cur[ok] + num[ok] / den[ok]
    return z


# -- method of multipliers ----------------------------------------------------


def penalty_grad(theta, z, p, rho, grid_len, form="augmented"):
    """Gradient of the dual and quadratic consensus terms (grid entries only)."""
    g = np.zeros_like(theta)
    k = 2.0 * rho if form == "literal" else rho
    g[:grid_len] = p[:grid_len] + k * (theta[:grid_len] - z[:grid_len])
    return g


def primal_update(
    theta: np.ndarray,
    grad_fn: GradFn,
    z: np.ndarray,
    p: np.ndarray,
    rho: float,
    inner_steps: int,
    step_size: float | DescentRule,
    rng: np.random.Generator,
    grid_len: int | None = None,
    form: str = "augmented",
) -> tuple[np.ndarray, dict]:
    """Approximate argmin of L + p.theta + rho/2 ||theta - z||^2 by gradient descent.

    ``step_size`` is a plain rate or a :class:`DescentRule`.
    """
    n = len(theta) if grid_len is None else grid_len
    rule = step_size if isinstance(step_size, DescentRule) else DescentRule(step_size)
    th = theta.copy()
    terms: dict = {}
    for _ in range(inner_steps):
        _, g, terms = grad_fn(th, np.random.default_rng(rng.integers(2**63)))
        g = g + penalty_grad(th, z, p, rho, n, form)
        try:
            th = rule.apply(th, g, n)
        except NumericalFailure:
            raise NumericalFailure("primal update") from None
    return th, terms


def dual_update(p: np.ndarray, theta: np.ndarray, z: np.ndarray, rho: float, grid_len: int | None = None) -> np.ndarray:
    n = len(theta) if grid_len is None else grid_len
    out = p.copy()
    out[:n] += rho * (theta[:n] - z[:n])
    return out


def multiplier_rounds(solve_primal, z, rho, rounds, p0=None, dual_len=None):
    """Run ``rounds`` of primal solve + dual ascent; yields ``(theta, p)`` per round.

    ``solve_primal(p)`` returns the (approximate) minimizer for the current
    multiplier.
    """
    p = np.zeros_like(z) if p0 is None else p0.copy()
    for _ in range(rounds):
        theta = solve_primal(p)
        p = dual_update(p, theta, z, rho, dual_len)
        yield theta, p


# -- full step ------------------------------------------------------------------


@dataclass
class TacoState:
    theta: np.ndarray
    importance: np.ndarray
    snapshots: deque = field(default_factory=deque)
    step: int = 0

    def tracked_bytes(self) -> int:
        """Bytes of optimizer memory: current params, importance and snapshots."""
        total = self.theta.nbytes + self.importance.nbytes
        for s in self.snapshots:
            total += s.params.nbytes + s.importance.nbytes
        return total


def data_grad_fn(model, batch, weights, render_cfg, patch_count) -> GradFn:
    def fn(theta, rng):
        obj = objective(model, theta, batch, weights, rng, render_cfg, patch_count)
        return obj.value, obj.grad, obj.terms

    return fn


def descend(theta, grad_fn: GradFn, steps: int, rule: DescentRule, rng, grid_len: int, extra_grad=None):
    """Plain gradient descent; ``extra_grad(theta)`` adds a penalty gradient."""
    th = theta.copy()
    terms: dict = {}
    for _ in range(steps):
        _, g, terms = grad_fn(th, np.random.default_rng(rng.integers(2**63)))
        if extra_grad is not None:
            g = g + extra_grad(th)
        th = rule.apply(th, g, grid_len)
    return th, terms


def taco_step(
    model: FieldModel,
    state: TacoState,
    batch: RayBatch,
    cfg: ConsensusConfig,
    weights: LossWeights,
    rng: np.random.Generator,
    render_cfg: RenderConfig = RenderConfig(),
    patch_count: int = 64,
) -> tuple[TacoState, dict]:
    """Advance the map by one batch; returns the new state and a log row.

    The input state is never mutated, so a failed step leaves it intact.
    """
    n = model.layout.grid_len
    grad_fn = data_grad_fn(model, batch, weights, render_cfg, patch_count)
    info: dict = {}
    theta_t = state.theta
    if not state.snapshots:
        theta_new, terms = descend(theta_t, grad_fn, cfg.rounds * cfg.inner_steps, cfg.rule, rng, n)
        info.update(residual=0.0, mean_w_current=0.0, mean_w_hist=0.0, masked_fraction=0.0)
    else:
        snaps = list(state.snapshots)
        w_cur, w_hist = scale_weights(state.importance, [s.importance for s in snaps], cfg.rho, n)
        raw_hist = np.concatenate([w[:n] for w in w_hist])
        w_hist = [mask_weights(w, cfg.beta) for w in w_hist]
        z = consensus_target(theta_t, [s.params for s in snaps], w_cur, w_hist, n)

        def solve(p):
            th, solve.terms = primal_update(
                solve.theta, grad_fn, z, p, cfg.rho, cfg.inner_steps, cfg.rule, rng, n, cfg.penalty_form
            )
            solve.theta = th
            return th

        solve.theta = theta_t
        theta_new = theta_t
        for theta_new, _ in multiplier_rounds(solve, z, cfg.rho, cfg.rounds, dual_len=n):
            pass
        terms = solve.terms
        masked = float((raw_hist < cfg.beta).mean()) if raw_hist.size else 0.0
        info.update(
            residual=float(np.linalg.norm(theta_new[:n] - z[:n])),
            mean_w_current=float(w_cur[:n].mean()),
            mean_w_hist=float(np.mean([w[:n].mean() for w in w_hist])),
            masked_fraction=masked,
        )

    u_new = importance_update(state.importance, model, theta_new, batch, np.random.default_rng(rng.integers(2**63)), render_cfg)

    snaps = deque(state.snapshots)
    snaps.append(Snapshot(theta_t.copy(), state.importance.copy(), state.step))
    while len(snaps) > cfg.snapshots_kept:
        snaps.popleft()
    info.update(terms)
    return TacoState(theta_new, u_new, snaps, state.step + 1), info


def init_state(model: FieldModel, theta: np.ndarray) -> TacoState:
    return TacoState(theta.copy(), np.zeros_like(theta))


__all__ = [
    "ConsensusConfig",
    "DescentRule",
    "Snapshot",
    "TacoState",
    "accumulate_importance",
    "consensus_target",
    "dual_update",
    "descend",
    "importance_update",
    "init_state",
    "mask_weights",
    "multiplier_rounds",
    "primal_update",
    "proxy_loss",
    "proxy_value",
    "scale_weights",
    "taco_step",
]
