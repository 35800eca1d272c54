"""Ray sampling and SDF-weighted volume rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import FieldModel, _sigmoid


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 32
    n_near: int = 8
    tr: float = 0.1

    def __post_init__(self):
        if self.n_samples < 2 or not 0 <= self.n_near <= self.n_samples:
            raise ValueError("need n_samples >= 2 and 0 <= n_near <= n_samples")
        if self.tr <= 0:
            raise ValueError("truncation distance must be positive")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    max_range: float

    def __post_init__(self):
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, got norm {n}")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")


@dataclass
class RayBatch:
    """Observations of one time step.

    ``depth`` holds NaN where the ray returned nothing (no hit within range).
    """

    origins: np.ndarray  # (R, D)
    directions: np.ndarray  # (R, D)
    color: np.ndarray  # (R, C)
    depth: np.ndarray  # (R,)
    max_range: float
    step: int = 0

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64)
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        n = len(self.origins)
        if n == 0:
            raise ValueError("RayBatch must be nonempty")
        if not (len(self.directions) == len(self.color) == len(self.depth) == n):
            raise ValueError("RayBatch fields have mismatched lengths")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("observed colors must lie in [0, 1]")
        d = self.depth[np.isfinite(self.depth)]
        if np.any(d <= 0) or np.any(d > self.max_range):
            raise ValueError("observed depths must lie in (0, max_range]")

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def has_depth(self) -> np.ndarray:
        return np.isfinite(self.depth)

    def ray(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i], self.max_range)

    @classmethod
    def concat(cls, batches: list["RayBatch"]) -> "RayBatch":
        return cls(
            np.concatenate([b.origins for b in batches]),
            np.concatenate([b.directions for b in batches]),
            np.concatenate([b.color for b in batches]),
            np.concatenate([b.depth for b in batches]),
            max(b.max_range for b in batches),
            step=max(b.step for b in batches),
        )

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.color[idx], self.depth[idx], self.max_range, self.step)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.origins, self.directions, self.color, self.depth))


def sample_depths(
    observed_depth: np.ndarray,
    max_range: float,
    n_samples: int,
    n_near: int,
    tr: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sorted sample depths, shape (R, M), for rays with given observed depths.

    Stratified-uniform samples on (0, max_range]; rays with a depth also get
    ``n_near`` samples drawn uniformly within ``tr`` of it (clipped to the
    range) in place of that many stratified ones.
    """
    if n_samples < 2 or not 0 <= n_near <= n_samples:
        raise ValueError("need n_samples >= 2 and 0 <= n_near <= n_samples")
    observed_depth = np.atleast_1d(np.asarray(observed_depth, dtype=np.float64))
    n_rays = len(observed_depth)
    has = np.isfinite(observed_depth)

    def stratified(m):
        # (k + u) * R / m with u in (0, 1]
        u = 1.0 - rng.random((n_rays, m))
        return (np.arange(m) + u) * (max_range / m)

    full = stratified(n_samples)
    far = stratified(n_samples - n_near)
    u = rng.random((n_rays, n_near))
    if n_near:
        d = np.where(has, observed_depth, max_range / 2)
        lo = np.maximum(d - tr, 0.0)
        hi = np.minimum(d + tr, max_range)
        near = lo[:, None] + (1.0 - u) * (hi - lo)[:, None]
        mixed = np.concatenate([far, near], axis=1)
    else:
        mixed = far
    out = np.where(has[:, None], mixed, full)
    return np.sort(out, axis=1)


def sample_ray(ray: Ray, observed_depth, n_samples: int, n_near: int, tr: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Depths and points ``o + d r`` for a single ray."""
    d_obs = np.nan if observed_depth is None else float(observed_depth)
    if np.isfinite(d_obs) and not 0 < d_obs <= ray.max_range:
        raise ValueError("observed depth outside (0, max_range]")
    depths = sample_depths(np.array([d_obs]), ray.max_range, n_samples, n_near, tr, rng)[0]
    return depths, ray.origin + depths[:, None] * ray.direction


def render_weight(s, tr: float):
    """sigmoid(s/tr) * sigmoid(-s/tr); peaks at 1/4 when s = 0."""
    a = np.abs(np.asarray(s, dtype=np.float64)) / tr
    # evaluated on |s| so that w(s) == w(-s) bit for bit
    q = _sigmoid(np.atleast_1d(a))
    w = q * (1.0 - q)
    return w if np.ndim(s) else float(w[0])


@dataclass
class RenderResult:
    color: np.ndarray  # (R, C)
    depth: np.ndarray  # (R,)
    weight_sum: np.ndarray  # (R,)
    valid: np.ndarray  # (R,) bool
    weights: np.ndarray  # (R, M)


MIN_WEIGHT_SUM = 1e-12


def composite(sdf: np.ndarray, colors: np.ndarray, depths: np.ndarray, tr: float) -> RenderResult:
    """Weighted averages of sample colors and depths along each ray.

    Rays whose weights sum below ``MIN_WEIGHT_SUM`` are flagged invalid and
    report zeros.
    """
    w = render_weight(sdf, tr)
    wsum = w.sum(axis=1)
    valid = wsum >= MIN_WEIGHT_SUM
    safe = np.where(valid, wsum, 1.0)
    color = np.einsum("rm,rmc->rc", w, colors) / safe[:, None]
    depth = (w * depths).sum(axis=1) / safe
    color[~valid] = 0.0
    depth[~valid] = 0.0
    return RenderResult(color, depth, wsum, valid, w)


def composite_backward(
    res: RenderResult,
    sdf: np.ndarray,
    colors: np.ndarray,
    depths: np.ndarray,
    tr: float,
    d_color: np.ndarray,
    d_depth: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients on per-sample (sdf, color) from gradients on rendered outputs."""
    valid = res.valid
    wsum = np.where(valid, res.weight_sum, 1.0)
    d_color = np.where(valid[:, None], d_color, 0.0)
    d_depth = np.where(valid, d_depth, 0.0)
    # d c_hat / d w_i = (c_i - c_hat) / W ; d d_hat / d w_i = (d_i - d_hat) / W
    dw = np.einsum("rc,rmc->rm", d_color, colors - res.color[:, None, :])
    dw += d_depth[:, None] * (depths - res.depth[:, None])
    dw /= wsum[:, None]
    q = _sigmoid(sdf / tr)
    d_sdf = dw * res.weights * (1.0 - 2.0 * q) / tr
    d_colors = res.weights[:, :, None] * d_color[:, None, :] / wsum[:, None, None]
    return d_sdf, d_colors


@dataclass
class RayRender:
    """Rendered batch plus everything needed to backpropagate to the field."""

    result: RenderResult
    depths: np.ndarray  # (R, M)
    sdf: np.ndarray  # (R, M)
    colors: np.ndarray  # (R, M, C)
    field_out: object


def render_batch(model: FieldModel, theta: np.ndarray, batch: RayBatch, depths: np.ndarray, tr: float, keep_cache=True) -> RayRender:
    n_rays, m = depths.shape
    pts = batch.origins[:, None, :] + depths[:, :, None] * batch.directions[:, None, :]
    out = model.forward(theta, pts.reshape(-1, pts.shape[-1]), keep_cache=keep_cache)
    sdf = out.sdf.reshape(n_rays, m)
    colors = out.color.reshape(n_rays, m, -1)
    return RayRender(composite(sdf, colors, depths, tr), depths, sdf, colors, out)


def render_ray(model: FieldModel, theta: np.ndarray, ray: Ray, depths: np.ndarray, tr: float) -> RenderResult:
    depths = np.asarray(depths, dtype=np.float64)
    if depths.ndim != 1 or len(depths) < 2 or np.any(np.diff(depths) <= 0):
        raise ValueError("sample depths must be strictly increasing with M >= 2")
    pts = ray.origin + depths[:, None] * ray.direction
    out = model.forward(theta, pts)
    return composite(out.sdf[None, :], out.color[None, :, :], depths[None, :], tr)
