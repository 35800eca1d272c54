"""Experiment harness: stream a scenario into a strategy, evaluate, record.

Configuration precedence, lowest first: built-in defaults, the scenario's
``settings`` block, the run config file, explicit overrides (CLI flags).
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .consensus import ConsensusConfig
from .errors import ConfigError, NumericalFailure
from .field import FieldConfig, FieldModel
from .loss import TERMS, LossWeights
from .metrics import ObservedRegion, extract_zero_set, report, write_points
from .render import RenderConfig
from .strategies import Strategy, StrategyConfig
from .world import Scenario, boundary_points, load_scenario, observe, stage_at, stage_index

log = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1

METRIC_COLUMNS = (
    "step",
    "stage",
    "strategy",
    "artifacts",
    "holes",
    "chamfer",
    "completion_ratio",
    "precision_at_tau",
    "f1_at_tau",
    "tau",
    "n_recon",
    "n_gt",
    "tracked_bytes",
)
LOSS_COLUMNS = (
    "step",
    "stage",
    *TERMS,
    "residual",
    "mean_w_current",
    "mean_w_hist",
    "masked_fraction",
    "tracked_bytes",
    "wall_seconds",
)


@dataclass(frozen=True)
class MetricsConfig:
    tau: float = 0.05
    resolution: int = 256
    gt_points: int = 2000
    eval_interval: int = 25
    cull_band: float = 0.1
    region_resolution: int = 128

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.resolution < 8:
            raise ValueError("evaluation grid resolution must be >= 8")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")


@dataclass(frozen=True)
class OutputConfig:
    checkpoints: bool = True
    points: bool = True


@dataclass
class RunConfig:
    scenario: Scenario
    scenario_path: str
    strategy: StrategyConfig
    field: FieldConfig
    render: RenderConfig
    loss: LossWeights
    smooth_patches: int = 64
    metrics: MetricsConfig = MetricsConfig()
    output: OutputConfig = OutputConfig()
    seed: int = 0
    out: Path | None = None
    max_steps: int | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def total_steps(self) -> int:
        t = self.scenario.total_steps
        return t if self.max_steps is None else min(t, self.max_steps)


# -- config loading ------------------------------------------------------------


def bundled_scenario(name: str) -> Path:
    path = resources.files("tacomap") / "scenarios" / f"{name}.yaml"
    return Path(str(path))


def resolve_scenario(ref: str, base_dir: Path | None = None) -> Path:
    """A path (relative to ``base_dir``) or the name of a bundled scenario."""
    p = Path(ref)
    candidates = [p] if p.is_absolute() else [(base_dir or Path.cwd()) / p, p]
    for c in candidates:
        if c.is_file():
            return c
    builtin = bundled_scenario(ref)
    if builtin.is_file():
        return builtin
    raise ConfigError(f"scenario {ref!r} not found")


def deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, section: str, raw: dict | None, **fixed):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {', '.join(sorted(unknown))}")
    try:
        return cls(**{**raw, **fixed})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}' section: {e}") from None


_TOP_KEYS = {
    "schema_version", "scenario", "seed", "out", "max_steps", "strategy",
    "consensus", "field", "render", "loss", "metrics", "output",
}


def config_from_dict(raw: dict, base_dir: Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Validate a raw mapping and build a :class:`RunConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a mapping")
    raw = deep_merge(raw, overrides or {})
    if raw.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported run config schema_version {raw.get('schema_version')!r}")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    if "scenario" not in raw:
        raise ConfigError("run config needs a 'scenario'")
    scenario_path = resolve_scenario(str(raw["scenario"]), base_dir)
    scenario = load_scenario(scenario_path)
    settings = scenario.settings or {}
    unknown = set(settings) - (_TOP_KEYS - {"schema_version", "scenario", "out"})
    if unknown:
        raise ConfigError(f"unknown keys in scenario settings: {', '.join(sorted(unknown))}")
    merged = deep_merge(settings, raw)

    consensus = _build(ConsensusConfig, "consensus", merged.get("consensus"))
    strategy = _build(StrategyConfig, "strategy", merged.get("strategy"), consensus=consensus)
    field_raw = dict(merged.get("field") or {})
    field_raw.setdefault("bounds", scenario.bounds)
    field_raw["bounds"] = tuple(tuple(float(v) for v in b) for b in field_raw["bounds"])
    field_cfg = _build(FieldConfig, "field", field_raw)
    loss_raw = dict(merged.get("loss") or {})
    patches = loss_raw.pop("smooth_patches", 64)
    loss = _build(LossWeights, "loss", loss_raw)
    render = _build(RenderConfig, "render", merged.get("render"))
    metrics = _build(MetricsConfig, "metrics", merged.get("metrics"))
    output = _build(OutputConfig, "output", merged.get("output"))
    out = merged.get("out")
    if out is not None:
        out = Path(out)
        if not out.is_absolute() and base_dir is not None and "out" not in (overrides or {}):
            out = base_dir / out
    max_steps = merged.get("max_steps")
    if max_steps is not None and int(max_steps) < 1:
        raise ConfigError("max_steps must be >= 1")
    try:
        seed = int(merged.get("seed", scenario.seed))
        patches = int(patches)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if patches < 1:
        raise ConfigError("loss.smooth_patches must be >= 1")
    return RunConfig(
        scenario=scenario,
        scenario_path=str(scenario_path),
        strategy=strategy,
        field=field_cfg,
        render=render,
        loss=loss,
        smooth_patches=patches,
        metrics=metrics,
        output=output,
        seed=seed,
        out=out,
        max_steps=None if max_steps is None else int(max_steps),
        raw=merged,
    )


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    return config_from_dict(raw, path.parent, overrides)


# -- running -------------------------------------------------------------------


@dataclass
class RunRecord:
    config: RunConfig
    metrics: list[dict] = field(default_factory=list)
    losses: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    importance_violations: int = 0
    tracked_bytes: list[int] = field(default_factory=list)
    status: str = "ok"
    error: str | None = None

    @property
    def final(self) -> dict:
        return self.metrics[-1]


def evaluation_steps(scenario: Scenario, total: int, interval: int) -> set[int]:
    """Regular checkpoints, both sides of every stage change, and the last step."""
    steps = {s for s in range(total) if (s + 1) % interval == 0}
    for st in scenario.stages[1:]:
        steps.update(s for s in (st.active_from - 1, st.active_from) if 0 <= s < total)
    steps.add(total - 1)
    return steps


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


class _CsvSink:
    def __init__(self, path: Path | None, columns):
        self.columns = columns
        self.fh = None
        if path is not None:
            self.fh = open(path, "w", newline="")
            self.writer = csv.writer(self.fh)
            self.writer.writerow(columns)

    def write(self, row: dict) -> None:
        if self.fh is not None:
            self.writer.writerow([_fmt(row.get(c)) for c in self.columns])
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _manifest(cfg: RunConfig) -> dict:
    return {
        "scenario": cfg.scenario.name,
        "scenario_path": cfg.scenario_path,
        "strategy": cfg.strategy.kind.value,
        "seed": cfg.seed,
        "steps": cfg.total_steps,
        "config": json.loads(json.dumps(cfg.raw, default=str)),
    }


def run(cfg: RunConfig) -> RunRecord:
    """Execute one streaming run. A numerical failure ends the run early with
    ``status="numerical_failure"``; everything written so far stays on disk."""
    out = cfg.out
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.json").write_text(json.dumps(_manifest(cfg), indent=2))
    scenario = cfg.scenario
    model = FieldModel(cfg.field)
    theta0 = model.init_params(np.random.default_rng([cfg.seed, 2]))
    strategy = Strategy(model, theta0, cfg.strategy, cfg.loss, cfg.render, cfg.smooth_patches)
    region = ObservedRegion(scenario.bounds, cfg.metrics.cull_band, cfg.metrics.region_resolution)
    total = cfg.total_steps
    evals = evaluation_steps(scenario, total, cfg.metrics.eval_interval)
    gt_cache: dict[int, np.ndarray] = {}
    record = RunRecord(cfg)
    metrics_sink = _CsvSink(out / "metrics.csv" if out else None, METRIC_COLUMNS)
    loss_sink = _CsvSink(out / "losses.csv" if out else None, LOSS_COLUMNS)
    try:
        for step in range(total):
            stage_id = stage_index(scenario, step)
            stage = scenario.stages[stage_id]
            batch = observe(stage, scenario.sensor, step, np.random.default_rng([cfg.seed, 0, step]))
            if batch.step != step:
                raise AssertionError(f"stream order violated: batch {batch.step} at step {step}")
            region.add(batch)
            before = strategy.importance
            t0 = time.perf_counter()
            try:
                info = strategy.step(batch, np.random.default_rng([cfg.seed, 1, step]))
            except NumericalFailure as e:
                record.status, record.error = "numerical_failure", f"step {step}: {e}"
                log.error("run aborted at step %d: %s", step, e)
                break
            wall = time.perf_counter() - t0
            after = strategy.importance
            if before is not None and after is not None:
                record.importance_violations += int(np.count_nonzero(after < before))
            tracked = strategy.tracked_bytes()
            record.tracked_bytes.append(tracked)
            row = {"step": step, "stage": stage_id, **info, "tracked_bytes": tracked, "wall_seconds": wall}
            record.losses.append(row)
            loss_sink.write(row)

            if step in evals:
                if stage_id not in gt_cache:
                    gt_cache[stage_id] = boundary_points(stage, scenario.bounds, cfg.metrics.gt_points)
                recon = region.cull(extract_zero_set(model, strategy.theta, cfg.metrics.resolution))
                gt = region.cull(gt_cache[stage_id])
                rep = report(recon, gt, cfg.metrics.tau)
                mrow = {"step": step, "stage": stage_id, "strategy": cfg.strategy.kind.value, **rep.as_row(), "tracked_bytes": tracked}
                record.metrics.append(mrow)
                metrics_sink.write(mrow)
                if out is not None and cfg.output.points:
                    write_points(out / "points" / f"step_{step}.csv", recon, gt)
                if out is not None and (cfg.output.checkpoints or step == total - 1):
                    record.checkpoint = model.save(
                        out / "checkpoints" / f"step_{step}.npz",
                        strategy.theta,
                        step=step,
                        stage=stage_id,
                        scenario=cfg.scenario_path,
                        strategy=cfg.strategy.kind.value,
                        seed=cfg.seed,
                    )
    finally:
        metrics_sink.close()
        loss_sink.close()
    return record


# -- comparison ------------------------------------------------------------------

COMPARE_METRICS = ("artifacts", "holes", "chamfer", "completion_ratio", "precision_at_tau", "f1_at_tau")


@dataclass
class RunSummary:
    label: str
    scenario: str
    seed: int
    rows: list[dict]


def summarize(source) -> RunSummary:
    """A :class:`RunRecord` or a run output directory."""
    if isinstance(source, RunRecord):
        cfg = source.config
        return RunSummary(cfg.strategy.kind.value, cfg.scenario.name, cfg.seed, list(source.metrics))
    d = Path(source)
    try:
        man = json.loads((d / "run.json").read_text())
        with open(d / "metrics.csv", newline="") as f:
            rows = list(csv.DictReader(f))
    except FileNotFoundError as e:
        raise ConfigError(f"{d} is not a run directory ({e.filename} missing)") from None
    for r in rows:
        r["step"], r["stage"] = int(r["step"]), int(r["stage"])
        for k in COMPARE_METRICS:
            r[k] = float(r[k])
    return RunSummary(man["strategy"], man["scenario"], int(man["seed"]), rows)


@dataclass
class Comparison:
    columns: list[str]
    rows: list[list]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [self.columns] + [[f"{v:.6g}" if isinstance(v, float) else str(v) for v in r] for r in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
        return "\n".join(lines) + "\n"


def compare(sources) -> Comparison:
    """Per-stage table of final metrics, one column per run in input order."""
    runs = [summarize(s) for s in sources]
    if not runs:
        raise ValueError("nothing to compare")
    first = runs[0]
    for r in runs[1:]:
        if (r.scenario, r.seed) != (first.scenario, first.seed):
            raise ConfigError(
                f"cannot compare runs on {r.scenario!r}/seed {r.seed} with {first.scenario!r}/seed {first.seed}"
            )
    labels, seen = [], {}
    for r in runs:
        seen[r.label] = seen.get(r.label, 0) + 1
        labels.append(r.label if seen[r.label] == 1 else f"{r.label}#{seen[r.label]}")
    last_per_stage = []
    for r in runs:
        last = {}
        for row in r.rows:
            last[row["stage"]] = row
        last_per_stage.append(last)
    stages = sorted(set().union(*last_per_stage))
    rows = []
    for st in stages:
        for m in COMPARE_METRICS:
            vals = [lp[st][m] if st in lp else float("nan") for lp in last_per_stage]
            rows.append([st, m, *vals])
    return Comparison(["stage", "metric", *labels], rows)


__all__ = [
    "Comparison",
    "MetricsConfig",
    "OutputConfig",
    "RunConfig",
    "RunRecord",
    "compare",
    "config_from_dict",
    "evaluation_steps",
    "load_config",
    "run",
]
