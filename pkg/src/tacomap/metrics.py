"""Surface extraction and point-set geometry metrics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .render import RayBatch

SENTINEL = float("inf")


@dataclass(frozen=True)
class MetricsReport:
    artifacts: float
    holes: float
    chamfer: float
    completion_ratio: float
    precision_at_tau: float
    f1_at_tau: float
    tau: float
    n_recon: int = 0
    n_gt: int = 0

    def as_row(self) -> dict:
        return asdict(self)


def zero_crossings(values: np.ndarray, bounds) -> np.ndarray:
    """Linear-interpolated sign changes along grid edges of a sampled 2D field.

    ``values[i, j]`` is the field at node ``(x_i, y_j)`` of a regular grid
    spanning ``bounds``. Nodes that are exactly zero are emitted once.
    """
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    nx, ny = values.shape
    xs = np.linspace(lo[0], hi[0], nx)
    ys = np.linspace(lo[1], hi[1], ny)
    out = []
    for axis in (0, 1):
        a = values[:-1, :] if axis == 0 else values[:, :-1]
        b = values[1:, :] if axis == 0 else values[:, 1:]
        cross = (a * b < 0)
        i, j = np.nonzero(cross)
        t = a[i, j] / (a[i, j] - b[i, j])
        if axis == 0:
            px = xs[i] + t * (xs[i + 1] - xs[i])
            py = ys[j]
        else:
            px = xs[i]
            py = ys[j] + t * (ys[j + 1] - ys[j])
        out.append(np.stack([px, py], axis=1))
    i, j = np.nonzero(values == 0)
    out.append(np.stack([xs[i], ys[j]], axis=1))
    return np.concatenate(out)


def grid_nodes(bounds, resolution: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Node coordinates (row-major, x first) for a grid with ``resolution`` nodes on the longest axis."""
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    ext = hi - lo
    counts = np.maximum(np.round(resolution * ext / ext.max()).astype(int), 2)
    xs = np.linspace(lo[0], hi[0], counts[0])
    ys = np.linspace(lo[1], hi[1], counts[1])
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1), (counts[0], counts[1])


def extract_zero_set_fn(sdf_fn, bounds, resolution: int = 256) -> np.ndarray:
    """Zero-level-set points of ``sdf_fn`` (vectorized over (N, 2) points)."""
    if resolution < 8:
        raise ValueError("evaluation grid resolution must be >= 8")
    nodes, shape = grid_nodes(bounds, resolution)
    values = np.asarray(sdf_fn(nodes), float).reshape(shape)
    return zero_crossings(values, bounds)


def extract_zero_set(model, theta: np.ndarray, resolution: int = 256) -> np.ndarray:
    return extract_zero_set_fn(lambda x: model.sdf(theta, x), model.config.bounds, resolution)


def nearest_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest neighbor in ``b``."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("nearest-neighbor query needs nonempty point sets")
    d, _ = cKDTree(b).query(a)
    return d


def directed_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over ``a`` of the distance to the closest point of ``b``."""
    return float(nearest_distances(a, b).mean())


def report(recon: np.ndarray, gt: np.ndarray, tau: float = 0.05) -> MetricsReport:
    if tau <= 0:
        raise ValueError("tau must be positive")
    if len(gt) == 0:
        raise ValueError("ground-truth point set is empty")
    if len(recon) == 0:
        return MetricsReport(SENTINEL, SENTINEL, SENTINEL, 0.0, 0.0, 0.0, tau, 0, len(gt))
    d_rg = nearest_distances(recon, gt)
    d_gr = nearest_distances(gt, recon)
    artifacts = float(d_rg.mean())
    holes = float(d_gr.mean())
    precision = float(np.mean(d_rg <= tau))
    completion = float(np.mean(d_gr <= tau))
    pr = precision + completion
    f1 = 2.0 * precision * completion / pr if pr > 0 else 0.0
    return MetricsReport(artifacts, holes, 0.5 * (artifacts + holes), completion, precision, f1, tau, len(recon), len(gt))


def coverage(target: np.ndarray, recon: np.ndarray, tau: float) -> float:
    """Fraction of ``target`` points with a recon point within ``tau``."""
    if len(target) == 0:
        return 1.0
    if len(recon) == 0:
        return 0.0
    return float(np.mean(nearest_distances(target, recon) <= tau))


def count_near(points: np.ndarray, region: np.ndarray, tau: float) -> int:
    """Number of ``points`` within ``tau`` of any point in ``region``."""
    if len(points) == 0 or len(region) == 0:
        return 0
    return int(np.sum(nearest_distances(points, region) <= tau))


class ObservedRegion:
    """Raster of space swept by observed rays (up to hit depth plus a band).

    Used to cull both point sets so unobserved space is never scored.
    """

    def __init__(self, bounds, band: float, resolution: int = 128):
        self.lo = np.asarray(bounds[0], float)
        self.hi = np.asarray(bounds[1], float)
        ext = self.hi - self.lo
        self.cell = float(ext.max() / resolution)
        self.shape = tuple(np.maximum(np.ceil(ext / self.cell).astype(int), 1))
        self.mask = np.zeros(self.shape, dtype=bool)
        self.band = band

    def _cells(self, pts: np.ndarray) -> np.ndarray:
        ij = np.floor((pts - self.lo) / self.cell).astype(int)
        return np.clip(ij, 0, np.array(self.shape) - 1)

    def add(self, batch: RayBatch) -> None:
        end = np.where(batch.has_depth, np.nan_to_num(batch.depth) + self.band, batch.max_range)
        end = np.minimum(end, batch.max_range)
        n = int(np.ceil(end.max() / (0.5 * self.cell))) + 1
        t = np.linspace(0.0, 1.0, n)[None, :] * end[:, None]
        pts = batch.origins[:, None, :] + t[:, :, None] * batch.directions[:, None, :]
        pts = pts.reshape(-1, pts.shape[-1])
        inside = np.all((pts >= self.lo) & (pts <= self.hi), axis=1)
        ij = self._cells(pts[inside])
        self.mask[ij[:, 0], ij[:, 1]] = True

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if len(pts) == 0:
            return np.zeros(0, dtype=bool)
        ij = self._cells(pts)
        return self.mask[ij[:, 0], ij[:, 1]]

    def cull(self, pts: np.ndarray) -> np.ndarray:
        return pts[self.contains(pts)] if len(pts) else pts

    def nbytes(self) -> int:
        return self.mask.nbytes


def write_points(path: str | Path, recon: np.ndarray, gt: np.ndarray | None = None) -> Path:
    """Delimited-text dump: x, y, source."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "source"])
        for p in recon:
            w.writerow([repr(float(p[0])), repr(float(p[1])), "reconstructed"])
        for p in gt if gt is not None else ():
            w.writerow([repr(float(p[0])), repr(float(p[1])), "ground_truth"])
    return path
