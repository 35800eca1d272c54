"""Synthetic planar scenes with staged object motion and a scripted depth/color sensor."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .render import RayBatch

SCENARIO_SCHEMA_VERSION = 1
BACKGROUND = np.array([0.0, 0.0, 0.0])


@dataclass(frozen=True)
class Shape:
    kind: str  # "disk" | "box"
    center: tuple[float, float]
    size: tuple[float, ...]  # (radius,) or half-extents
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.kind not in ("disk", "box"):
            raise ConfigError(f"unknown shape kind {self.kind!r}")
        want = 1 if self.kind == "disk" else len(self.center)
        if len(self.size) != want or min(self.size) <= 0:
            raise ConfigError(f"{self.kind} needs {want} positive size value(s), got {self.size}")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ConfigError("shape color must lie in [0, 1]")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(x) - np.asarray(self.center)
        if self.kind == "disk":
            return np.linalg.norm(p, axis=1) - self.size[0]
        q = np.abs(p) - np.asarray(self.size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def perimeter(self) -> float:
        if self.kind == "disk":
            return 2 * np.pi * self.size[0]
        return 4.0 * sum(self.size)

    def boundary(self, n: int) -> np.ndarray:
        """``n`` points equispaced in arc length along the outline."""
        t = (np.arange(n) + 0.5) / n
        c = np.asarray(self.center)
        if self.kind == "disk":
            a = 2 * np.pi * t
            return c + self.size[0] * np.stack([np.cos(a), np.sin(a)], axis=1)
        hx, hy = self.size
        corners = c + np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy], [-hx, -hy]])
        seg = np.linalg.norm(np.diff(corners, axis=0), axis=1)
        s = t * seg.sum()
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        k = np.minimum(np.searchsorted(cum, s, side="right") - 1, 3)
        f = (s - cum[k]) / seg[k]
        return corners[k] + f[:, None] * (corners[k + 1] - corners[k])

    @classmethod
    def from_dict(cls, d: dict) -> "Shape":
        kind = d["kind"]
        size = (float(d["radius"]),) if kind == "disk" else tuple(float(v) for v in d["half_extents"])
        return cls(kind, tuple(float(v) for v in d["center"]), size, tuple(float(v) for v in d.get("color", (0.5, 0.5, 0.5))))


@dataclass(frozen=True)
class SceneStage:
    shapes: tuple[Shape, ...]
    active_from: int = 0


def scene_sdf(stage: SceneStage, x: np.ndarray, max_range: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """Union SDF and the color of the nearest shape at each point."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not stage.shapes:
        return np.full(len(x), float(max_range)), np.tile(BACKGROUND, (len(x), 1))
    d = np.stack([s.sdf(x) for s in stage.shapes])
    k = d.argmin(axis=0)
    colors = np.array([s.color for s in stage.shapes])
    return d[k, np.arange(len(x))], colors[k]


@dataclass(frozen=True)
class Segment:
    """One leg of the sensor path.

    Position follows an orbit (``center``, ``radius``, angles in degrees) or a
    straight ``line``; the sensor looks at ``look_at`` or turns between
    ``heading`` angles (degrees).
    """

    steps: int
    orbit: tuple | None = None  # (cx, cy, radius, from_deg, to_deg)
    line: tuple | None = None  # (x0, y0, x1, y1)
    look_at: tuple | None = None
    heading: tuple | None = None  # (from_deg, to_deg)

    def pose(self, i: int) -> tuple[np.ndarray, float]:
        f = i / max(self.steps, 1)
        if self.orbit is not None:
            cx, cy, r, a0, a1 = self.orbit
            a = np.deg2rad(a0 + f * (a1 - a0))
            pos = np.array([cx + r * np.cos(a), cy + r * np.sin(a)])
        else:
            x0, y0, x1, y1 = self.line
            pos = np.array([x0 + f * (x1 - x0), y0 + f * (y1 - y0)])
        if self.look_at is not None:
            v = np.asarray(self.look_at) - pos
            head = float(np.arctan2(v[1], v[0]))
        else:
            h0, h1 = self.heading
            head = float(np.deg2rad(h0 + f * (h1 - h0)))
        return pos, head

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        if ("orbit" in d) == ("line" in d):
            raise ConfigError("trajectory segment needs exactly one of 'orbit' or 'line'")
        if ("look_at" in d) == ("heading" in d):
            raise ConfigError("trajectory segment needs exactly one of 'look_at' or 'heading'")
        if "orbit" in d:
            o = d["orbit"]
            orbit = (*map(float, o["center"]), float(o["radius"]), float(o["from_deg"]), float(o["to_deg"]))
            line = None
        else:
            orbit = None
            line = (*map(float, d["line"]["start"]), *map(float, d["line"]["end"]))
        return cls(
            int(d["steps"]),
            orbit=orbit,
            line=line,
            look_at=tuple(map(float, d["look_at"])) if "look_at" in d else None,
            heading=tuple(map(float, d["heading"])) if "heading" in d else None,
        )


@dataclass(frozen=True)
class SensorSpec:
    trajectory: tuple[Segment, ...]
    fov: float = np.pi / 2
    rays_per_frame: int = 64
    depth_noise_sigma: float = 0.002
    max_range: float = 1.5

    def __post_init__(self):
        if self.rays_per_frame < 1:
            raise ConfigError("rays_per_frame must be >= 1")
        if not 0 < self.fov <= 2 * np.pi:
            raise ConfigError("fov must lie in (0, 2*pi]")
        if not self.trajectory:
            raise ConfigError("sensor trajectory is empty")

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.trajectory)

    def pose(self, step: int) -> tuple[np.ndarray, float]:
        if not 0 <= step < self.total_steps:
            raise ValueError(f"step {step} outside trajectory of {self.total_steps} steps")
        for seg in self.trajectory:
            if step < seg.steps:
                return seg.pose(step)
            step -= seg.steps
        raise AssertionError("unreachable")

    def directions(self, heading: float) -> np.ndarray:
        n = self.rays_per_frame
        if n == 1:
            ang = np.array([heading])
        else:
            full = np.isclose(self.fov, 2 * np.pi)
            ang = heading + np.linspace(-self.fov / 2, self.fov / 2, n, endpoint=not full)
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def raycast(
    stage: SceneStage,
    origins: np.ndarray,
    directions: np.ndarray,
    max_range: float,
    eps: float = 1e-7,
    max_iter: int = 1000,
) -> tuple[np.ndarray, np.ndarray]:
    """Sphere-trace rays against the scene; depth is NaN on a miss."""
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    n = len(origins)
    t = np.zeros(n)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        s, _ = scene_sdf(stage, origins[idx] + t[idx, None] * directions[idx], max_range)
        done = np.abs(s) < eps
        hit[idx[done]] = True
        t[idx[~done]] += s[~done]
        out = t[idx] > max_range
        active[idx[done | out]] = False
    depth = np.where(hit & (t <= max_range), t, np.nan)
    colors = np.tile(BACKGROUND, (n, 1))
    ok = np.isfinite(depth)
    if ok.any():
        _, colors[ok] = scene_sdf(stage, origins[ok] + depth[ok, None] * directions[ok], max_range)
    return depth, colors


@dataclass
class Scenario:
    name: str
    bounds: tuple[tuple[float, float], tuple[float, float]]
    stages: list[SceneStage]
    sensor: SensorSpec
    seed: int = 0
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("scenario has no stages")
        if self.stages[0].active_from != 0:
            raise ConfigError("first stage must be active from step 0")
        starts = [s.active_from for s in self.stages]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("stage active_from values must strictly increase")

    @property
    def total_steps(self) -> int:
        return self.sensor.total_steps

    def stage_index(self, step: int) -> int:
        return stage_index(self, step)


def stage_index(scenario: Scenario, step: int) -> int:
    k = 0
    for i, st in enumerate(scenario.stages):
        if st.active_from <= step:
            k = i
    return k


def stage_at(scenario: Scenario, step: int) -> SceneStage:
    """Stage with the largest ``active_from`` not after ``step``."""
    return scenario.stages[stage_index(scenario, step)]


def observe(stage: SceneStage, sensor: SensorSpec, step: int, rng: np.random.Generator) -> RayBatch:
    pos, heading = sensor.pose(step)
    dirs = sensor.directions(heading)
    origins = np.tile(pos, (len(dirs), 1))
    depth, colors = raycast(stage, origins, dirs, sensor.max_range)
    noise = rng.normal(0.0, 1.0, len(dirs)) * sensor.depth_noise_sigma
    if sensor.depth_noise_sigma > 0:
        depth = np.clip(depth + noise, 1e-6, sensor.max_range)
    return RayBatch(origins, dirs, colors, depth, sensor.max_range, step=step)


def boundary_points(stage: SceneStage, bounds, n: int = 2000, tol: float = 1e-9) -> np.ndarray:
    """About ``n`` points spread evenly along the visible union outline.

    Only outline parts inside ``bounds`` and not buried in another shape
    count. Deterministic: no randomness involved.
    """
    lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
    per = np.array([s.perimeter() for s in stage.shapes])
    dense = 50 * n
    counts = np.maximum(np.round(dense * per / per.sum()).astype(int), 1)
    pts = np.concatenate([s.boundary(c) for s, c in zip(stage.shapes, counts)])
    d, _ = scene_sdf(stage, pts)
    inside = np.all((pts > lo + 1e-9) & (pts < hi - 1e-9), axis=1)
    pts = pts[(np.abs(d) <= tol) & inside]
    if len(pts) <= n:
        return pts
    keep = np.floor((np.arange(n) + 0.5) * len(pts) / n).astype(int)
    return pts[keep]


# -- scenario files ---------------------------------------------------------


def _stage_list(raw: dict) -> list[SceneStage]:
    static = [Shape.from_dict(s) for s in raw.get("static_shapes", [])]
    stages = []
    for st in raw["stages"]:
        shapes = tuple(static + [Shape.from_dict(s) for s in st.get("shapes", [])])
        stages.append(SceneStage(shapes, int(st.get("active_from", 0))))
    return stages


def room_walls(bounds, thickness: float, color=(0.8, 0.8, 0.8)) -> list[Shape]:
    """Four walls whose inner faces sit ``thickness`` inside the domain edges."""
    (x0, y0), (x1, y1) = bounds
    w, h = x1 - x0, y1 - y0
    big = max(w, h)
    t = thickness
    return [
        Shape("box", (x0 + t - big / 2, (y0 + y1) / 2), (big / 2, h), color),
        Shape("box", (x1 - t + big / 2, (y0 + y1) / 2), (big / 2, h), color),
        Shape("box", ((x0 + x1) / 2, y0 + t - big / 2), (w, big / 2), color),
        Shape("box", ((x0 + x1) / 2, y1 - t + big / 2), (w, big / 2), color),
    ]


def scenario_from_dict(raw: dict) -> Scenario:
    version = raw.get("schema_version")
    if version != SCENARIO_SCHEMA_VERSION:
        raise ConfigError(f"unsupported scenario schema_version {version!r}")
    try:
        bounds = tuple(tuple(float(v) for v in b) for b in raw["bounds"])
        stages = _stage_list(raw)
        if "walls" in raw:
            walls = room_walls(bounds, float(raw["walls"]["thickness"]), tuple(raw["walls"].get("color", (0.8, 0.8, 0.8))))
            stages = [SceneStage(tuple(walls) + st.shapes, st.active_from) for st in stages]
        s = raw["sensor"]
        sensor = SensorSpec(
            tuple(Segment.from_dict(seg) for seg in s["trajectory"]),
            fov=float(np.deg2rad(s.get("fov_deg", 90.0))),
            rays_per_frame=int(s.get("rays_per_frame", 64)),
            depth_noise_sigma=float(s.get("depth_noise_sigma", 0.002)),
            max_range=float(s.get("max_range", np.linalg.norm(np.subtract(bounds[1], bounds[0])))),
        )
    except KeyError as e:
        raise ConfigError(f"scenario is missing key {e}") from None
    return Scenario(raw.get("name", "scenario"), bounds, stages, sensor, int(raw.get("seed", 0)), raw.get("settings", {}))


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file {path} does not exist")
    with open(path) as f:
        return scenario_from_dict(yaml.safe_load(f))
