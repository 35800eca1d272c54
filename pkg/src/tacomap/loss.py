"""Mapping objective: photometric, depth, SDF, free-space and smoothness terms.

SDF values are in truncation units: a sample at distance ``delta`` in front
of the observed surface is supervised toward ``delta / tr`` and free space
toward ``1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .errors import NumericalFailure
from .field import FieldModel
from .render import (
    RayBatch,
    RayRender,
    RenderConfig,
    RenderResult,
    composite_backward,
    render_batch,
    sample_depths,
)

log = logging.getLogger(__name__)

TERMS = ("rgb", "depth", "sdf", "fs", "smooth")


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 1.0
    depth: float = 0.1
    sdf: float = 10.0
    fs: float = 1.0
    smooth: float = 1e-3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(*(k * getattr(self, t) for t in TERMS))


# -- individual terms: each returns (value, gradient on its input) ---------


def _rgb(batch: RayBatch, res: RenderResult):
    valid = res.valid
    n = int(valid.sum())
    if n == 0:
        log.warning("all rays degenerate; color loss set to 0")
        return 0.0, np.zeros_like(res.color)
    diff = np.where(valid[:, None], res.color - batch.color, 0.0)
    return float((diff**2).sum() / n), 2.0 * diff / n


def _depth(batch: RayBatch, res: RenderResult):
    use = res.valid & batch.has_depth
    n = int(use.sum())
    if n == 0:
        log.warning("no valid rays with depth; depth loss set to 0")
        return 0.0, np.zeros_like(res.depth)
    diff = np.where(use, res.depth - np.nan_to_num(batch.depth), 0.0)
    return float((diff**2).sum() / n), 2.0 * diff / n


def sdf_masks(observed: np.ndarray, depths: np.ndarray, tr: float):
    """(near-surface, free-space) sample masks, shape (R, M)."""
    obs = observed[:, None]
    has = np.isfinite(obs)
    obs = np.where(has, obs, np.inf)
    near = has & (np.abs(obs - depths) <= tr)
    free = has & (depths < obs - tr)
    return near, free


def _sdf(observed, depths, sdf, tr):
    near, _ = sdf_masks(observed, depths, tr)
    n = int(near.sum())
    if n == 0:
        return 0.0, np.zeros_like(sdf)
    target = np.where(near, (np.nan_to_num(observed)[:, None] - depths) / tr, 0.0)
    diff = np.where(near, sdf - target, 0.0)
    return float((diff**2).sum() / n), 2.0 * diff / n


def _fs(observed, depths, sdf, tr):
    _, free = sdf_masks(observed, depths, tr)
    n = int(free.sum())
    if n == 0:
        return 0.0, np.zeros_like(sdf)
    diff = np.where(free, sdf - 1.0, 0.0)
    return float((diff**2).sum() / n), 2.0 * diff / n


def smooth_pairs(model: FieldModel, rng: np.random.Generator, patch_count: int):
    """Random adjacent node pairs per level as storage-index arrays."""
    if patch_count < 1:
        raise ValueError("patch_count must be >= 1")
    d = model.config.dim
    pairs = []
    for lvl, res in enumerate(model.resolutions):
        node = rng.integers(0, res, size=(patch_count, d))
        axis = rng.integers(0, d, size=patch_count)
        node[np.arange(patch_count), axis] = np.minimum(node[np.arange(patch_count), axis], res - 2)
        other = node.copy()
        other[np.arange(patch_count), axis] += 1
        pairs.append((model._level_index(lvl, node), model._level_index(lvl, other)))
    return pairs


def _smooth(model: FieldModel, theta: np.ndarray, pairs):
    grad = np.zeros_like(theta)
    total, count = 0.0, 0
    for lvl, (a, b) in enumerate(pairs):
        name = f"grid{lvl}"
        table = model.layout.view(theta, name)
        diff = table[a] - table[b]
        total += float((diff**2).sum())
        count += len(a)
        g = model.layout.view(grad, name)
        np.add.at(g, a, 2.0 * diff)
        np.add.at(g, b, -2.0 * diff)
    return total / count, grad / count


# -- public term functions ---------------------------------------------------


def loss_rgb(batch: RayBatch, renders: RenderResult) -> float:
    return _rgb(batch, renders)[0]


def loss_depth(batch: RayBatch, renders: RenderResult) -> float:
    return _depth(batch, renders)[0]


def loss_sdf(observed_depth, depths, sdf, tr: float) -> float:
    return _sdf(np.asarray(observed_depth, float), np.asarray(depths, float), np.asarray(sdf, float), tr)[0]


def loss_freespace(observed_depth, depths, sdf, tr: float) -> float:
    return _fs(np.asarray(observed_depth, float), np.asarray(depths, float), np.asarray(sdf, float), tr)[0]


def loss_smooth(model: FieldModel, theta: np.ndarray, rng: np.random.Generator, patch_count: int = 64) -> float:
    return _smooth(model, theta, smooth_pairs(model, rng, patch_count))[0]


@dataclass
class Objective:
    value: float
    terms: dict[str, float]
    grad: np.ndarray | None
    render: RayRender


def objective(
    model: FieldModel,
    theta: np.ndarray,
    batch: RayBatch,
    weights: LossWeights,
    rng: np.random.Generator,
    render_cfg: RenderConfig = RenderConfig(),
    patch_count: int = 64,
    with_grad: bool = True,
) -> Objective:
    """Weighted sum of the five terms, its breakdown and (optionally) gradient.

    ``rng`` drives both ray sampling and smoothness pairs; the same seed gives
    the same value.
    """
    tr = render_cfg.tr
    depths = sample_depths(batch.depth, batch.max_range, render_cfg.n_samples, render_cfg.n_near, tr, rng)
    pairs = smooth_pairs(model, rng, patch_count)
    rr = render_batch(model, theta, batch, depths, tr, keep_cache=with_grad)

    v_rgb, g_col = _rgb(batch, rr.result)
    v_d, g_dep = _depth(batch, rr.result)
    v_sdf, g_sdf = _sdf(batch.depth, depths, rr.sdf, tr)
    v_fs, g_fs = _fs(batch.depth, depths, rr.sdf, tr)
    v_sm, g_sm = _smooth(model, theta, pairs)
    terms = {"rgb": v_rgb, "depth": v_d, "sdf": v_sdf, "fs": v_fs, "smooth": v_sm}
    for name, v in terms.items():
        if not np.isfinite(v):
            raise NumericalFailure(f"loss term {name!r}")
    value = sum(getattr(weights, k) * v for k, v in terms.items())

    grad = None
    if with_grad:
        ds, dc = composite_backward(
            rr.result, rr.sdf, rr.colors, depths, tr, weights.rgb * g_col, weights.depth * g_dep
        )
        ds = ds + weights.sdf * g_sdf + weights.fs * g_fs
        grad = model.backward(theta, rr.field_out.cache, ds.ravel(), dc.reshape(-1, dc.shape[-1]))
        grad += weights.smooth * g_sm
        if not np.all(np.isfinite(grad)):
            raise NumericalFailure("objective gradient")
    return Objective(float(value), terms, grad, rr)


def grad_objective(model, theta, batch, weights, rng, **kw) -> tuple[float, np.ndarray]:
    obj = objective(model, theta, batch, weights, rng, **kw)
    return obj.value, obj.grad
