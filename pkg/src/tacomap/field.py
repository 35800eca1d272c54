"""Neural implicit field: multi-resolution feature grid plus two small decoders.

All learnable values live in one flat float64 vector. :class:`FieldModel`
holds only structure (configuration and layout); every evaluation takes the
parameter vector explicitly, so evaluation is a pure function of
``(theta, x)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import NumericalFailure

# Spatial hash primes (one per axis), as in instant-ngp.
_HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)


@dataclass(frozen=True)
class FieldConfig:
    dim: int = 2
    levels: int = 4
    base_resolution: int = 8
    growth: float = 2.0
    features: int = 2
    bins: int = 16
    hidden_width: int = 32
    latent_dim: int = 8
    color_channels: int = 3
    activation: str = "squareplus"
    bounds: tuple[tuple[float, ...], tuple[float, ...]] = ((0.0, 0.0), (1.0, 1.0))
    hashed: bool = False
    table_size: int = 2**12
    init_scale: float = 1e-4

    def __post_init__(self):
        if len(self.bounds[0]) != self.dim or len(self.bounds[1]) != self.dim:
            raise ValueError("bounds must have one entry per dimension")
        if any(hi <= lo for lo, hi in zip(*self.bounds)):
            raise ValueError("bounds must be a non-empty box")
        if self.base_resolution < 2:
            raise ValueError("grid resolution must be at least 2")
        if self.growth <= 1.0 and self.levels > 1:
            raise ValueError("resolutions must strictly increase with level")
        if self.bins < 2:
            raise ValueError("one-blob encoding needs at least 2 bins")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def resolutions(self) -> list[int]:
        res = [int(np.floor(self.base_resolution * self.growth**lvl)) for lvl in range(self.levels)]
        for a, b in zip(res, res[1:]):
            if b <= a:
                raise ValueError(f"resolutions must strictly increase, got {res}")
        return res

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        if "bounds" in d:
            d["bounds"] = tuple(tuple(float(v) for v in b) for b in d["bounds"])
        return cls(**d)


def _softplus(x):
    return -log_expit(-x)


def _sigmoid(x):
    return expit(x)


def _tanh_grad(y):
    return 1.0 - y * y


def _squareplus(x):
    # smooth ReLU needing only a square root: (x + sqrt(x^2 + 4)) / 2
    return 0.5 * (x + np.sqrt(x * x + 4.0))


def _squareplus_grad(a, y):
    # y - a = sqrt(a^2 + 4) / 2 - a / 2 ... so d/da = y / (2y - a)
    return y / (2.0 * y - a)


# name -> (f, f' expressed via pre-activation a and output y)
_ACTIVATIONS = {
    "squareplus": (_squareplus, _squareplus_grad),
    "softplus": (_softplus, lambda a, y: _sigmoid(a)),
    "tanh": (np.tanh, lambda a, y: _tanh_grad(y)),
}


@dataclass(frozen=True)
class Block:
    name: str
    start: int
    stop: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class ParamLayout:
    """Disjoint, contiguous blocks covering ``[0, total_len)``.

    Grid levels come first, so the grid partition is the prefix
    ``[0, grid_len)``.
    """

    blocks: tuple[Block, ...]

    def __post_init__(self):
        pos = 0
        for b in self.blocks:
            if b.start != pos or b.stop < b.start or int(np.prod(b.shape)) != b.size:
                raise ValueError(f"malformed layout block {b}")
            pos = b.stop

    @property
    def total_len(self) -> int:
        return self.blocks[-1].stop if self.blocks else 0

    def __getitem__(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def grid_blocks(self) -> list[Block]:
        return [b for b in self.blocks if b.name.startswith("grid")]

    @property
    def grid_len(self) -> int:
        return sum(b.size for b in self.grid_blocks)

    def grid_mask(self) -> np.ndarray:
        m = np.zeros(self.total_len, dtype=bool)
        m[: self.grid_len] = True
        return m

    def view(self, theta: np.ndarray, name: str) -> np.ndarray:
        b = self[name]
        return theta[b.start : b.stop].reshape(b.shape)

    def to_json(self) -> list[dict]:
        return [asdict(b) for b in self.blocks]

    @classmethod
    def from_json(cls, items: list[dict]) -> "ParamLayout":
        return cls(tuple(Block(d["name"], d["start"], d["stop"], tuple(d["shape"])) for d in items))


@dataclass
class ForwardCache:
    """Intermediate values kept by :meth:`FieldModel.forward` for backprop."""

    n: int
    corner_index: list[np.ndarray]
    corner_weight: list[np.ndarray]
    enc: np.ndarray
    geo_in: np.ndarray
    geo_pre: np.ndarray
    geo_hidden: np.ndarray
    col_in: np.ndarray
    col_pre: np.ndarray
    col_hidden: np.ndarray
    color: np.ndarray


@dataclass
class FieldOutput:
    sdf: np.ndarray
    color: np.ndarray
    latent: np.ndarray
    cache: ForwardCache | None = field(default=None, repr=False)


class FieldModel:
    """Structure of the implicit map; parameters are passed in explicitly."""

    def __init__(self, config: FieldConfig | None = None):
        self.config = config or FieldConfig()
        cfg = self.config
        self.resolutions = cfg.resolutions()
        self.lo = np.asarray(cfg.bounds[0], dtype=np.float64)
        self.hi = np.asarray(cfg.bounds[1], dtype=np.float64)
        self.enc_dim = cfg.dim * cfg.bins
        self.feat_dim = cfg.levels * cfg.features
        self._act, self._dact = _ACTIVATIONS[cfg.activation]

        blocks: list[Block] = []
        pos = 0

        def add(name, shape):
            nonlocal pos
            size = int(np.prod(shape))
            blocks.append(Block(name, pos, pos + size, tuple(shape)))
            pos += size

        self.level_sizes = []
        for lvl, res in enumerate(self.resolutions):
            n = res**cfg.dim
            if cfg.hashed:
                n = min(n, cfg.table_size)
            self.level_sizes.append(n)
            add(f"grid{lvl}", (n, cfg.features))
        h = cfg.hidden_width
        add("geo.w1", (self.enc_dim + self.feat_dim, h))
        add("geo.b1", (h,))
        add("geo.w2", (h, cfg.latent_dim + 1))
        add("geo.b2", (cfg.latent_dim + 1,))
        add("col.w1", (self.enc_dim + cfg.latent_dim, h))
        add("col.b1", (h,))
        add("col.w2", (h, cfg.color_channels))
        add("col.b2", (cfg.color_channels,))
        self.layout = ParamLayout(tuple(blocks))

    @property
    def num_params(self) -> int:
        return self.layout.total_len

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        cfg = self.config
        theta = np.zeros(self.num_params)
        for b in self.layout.grid_blocks:
            theta[b.start : b.stop] = rng.uniform(-cfg.init_scale, cfg.init_scale, b.size)
        for name in ("geo.w1", "geo.w2", "col.w1", "col.w2"):
            b = self.layout[name]
            fan_in, fan_out = b.shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            if name.endswith("w2"):
                lim *= 0.1  # start near a flat field
            theta[b.start : b.stop] = rng.uniform(-lim, lim, b.size)
        return theta

    # -- encodings -------------------------------------------------------

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Map world points into ``[0, 1]^D``, clamping out-of-domain points."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def one_blob(self, xn: np.ndarray) -> np.ndarray:
        return one_blob_encode(xn, self.config.bins)

    def _level_index(self, lvl: int, corner: np.ndarray) -> np.ndarray:
        res = self.resolutions[lvl]
        d = self.config.dim
        if self.config.hashed and res**d > self.config.table_size:
            c = corner.astype(np.uint64)
            h = np.zeros(c.shape[0], dtype=np.uint64)
            for ax in range(d):
                h ^= c[:, ax] * _HASH_PRIMES[ax]
            return (h % np.uint64(self.config.table_size)).astype(np.int64)
        idx = np.zeros(corner.shape[0], dtype=np.int64)
        for ax in range(d):
            idx = idx * res + corner[:, ax]
        return idx

    def corners(self, xn: np.ndarray):
        """Per level: (N, 2^D) storage indices and multilinear weights."""
        d = self.config.dim
        offsets = np.array(np.meshgrid(*[[0, 1]] * d, indexing="ij")).reshape(d, -1).T
        idx_out, w_out = [], []
        for lvl, res in enumerate(self.resolutions):
            g = xn * (res - 1)
            base = np.minimum(np.floor(g).astype(np.int64), res - 2)
            frac = g - base
            idx = np.empty((xn.shape[0], len(offsets)), dtype=np.int64)
            w = np.ones((xn.shape[0], len(offsets)))
            for k, off in enumerate(offsets):
                idx[:, k] = self._level_index(lvl, base + off)
                for ax in range(d):
                    w[:, k] *= frac[:, ax] if off[ax] else 1.0 - frac[:, ax]
            idx_out.append(idx)
            w_out.append(w)
        return idx_out, w_out

    def interpolate(self, theta: np.ndarray, xn: np.ndarray, corners=None) -> np.ndarray:
        """Concatenated per-level interpolated features, shape (N, L*F)."""
        idx, w = corners if corners is not None else self.corners(xn)
        feats = []
        for lvl in range(self.config.levels):
            table = self.layout.view(theta, f"grid{lvl}")
            feats.append(np.einsum("nk,nkf->nf", w[lvl], table[idx[lvl]]))
        return np.concatenate(feats, axis=1)

    # -- decoders --------------------------------------------------------

    def decode_geometry(self, theta, enc, feat):
        lay = self.layout
        geo_in = np.concatenate([enc, feat], axis=1)
        if geo_in.shape[1] != lay["geo.w1"].shape[0]:
            raise ValueError("geometry decoder input has wrong width")
        pre = geo_in @ lay.view(theta, "geo.w1") + lay.view(theta, "geo.b1")
        hid = self._act(pre)
        out = hid @ lay.view(theta, "geo.w2") + lay.view(theta, "geo.b2")
        k = self.config.latent_dim
        return out[:, :k], out[:, k], (geo_in, pre, hid)

    def decode_color(self, theta, enc, latent):
        lay = self.layout
        col_in = np.concatenate([enc, latent], axis=1)
        if col_in.shape[1] != lay["col.w1"].shape[0]:
            raise ValueError("color decoder input has wrong width")
        pre = col_in @ lay.view(theta, "col.w1") + lay.view(theta, "col.b1")
        hid = self._act(pre)
        color = _sigmoid(hid @ lay.view(theta, "col.w2") + lay.view(theta, "col.b2"))
        return color, (col_in, pre, hid)

    def forward(self, theta: np.ndarray, x: np.ndarray, keep_cache: bool = False) -> FieldOutput:
        """Evaluate SDF (truncation units) and color at world points ``x``."""
        xn = self.normalize(x)
        idx, w = self.corners(xn)
        feat = self.interpolate(theta, xn, (idx, w))
        enc = self.one_blob(xn)
        latent, sdf, (geo_in, geo_pre, geo_hid) = self.decode_geometry(theta, enc, feat)
        color, (col_in, col_pre, col_hid) = self.decode_color(theta, enc, latent)
        cache = None
        if keep_cache:
            cache = ForwardCache(len(xn), idx, w, enc, geo_in, geo_pre, geo_hid, col_in, col_pre, col_hid, color)
        return FieldOutput(sdf, color, latent, cache)

    def eval_point(self, theta: np.ndarray, x: Sequence[float]) -> tuple[float, np.ndarray]:
        out = self.forward(theta, np.asarray(x, dtype=np.float64)[None, :])
        return float(out.sdf[0]), out.color[0]

    def sdf(self, theta: np.ndarray, x: np.ndarray, chunk: int = 65536) -> np.ndarray:
        """SDF only, evaluated in chunks (no color head)."""
        x = np.atleast_2d(x)
        out = np.empty(len(x))
        for i in range(0, len(x), chunk):
            xn = self.normalize(x[i : i + chunk])
            feat = self.interpolate(theta, xn)
            _, s, _ = self.decode_geometry(theta, self.one_blob(xn), feat)
            out[i : i + chunk] = s
        return out

    def backward(self, theta: np.ndarray, cache: ForwardCache, d_sdf: np.ndarray, d_color: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. ``theta`` given upstream gradients on (sdf, color)."""
        lay = self.layout
        cfg = self.config
        grad = np.zeros_like(theta)

        def put(name, value):
            b = lay[name]
            grad[b.start : b.stop] += value.ravel()

        # color head
        c = cache.color
        d_logit = d_color * c * (1.0 - c)
        put("col.w2", cache.col_hidden.T @ d_logit)
        put("col.b2", d_logit.sum(axis=0))
        d_hid = d_logit @ lay.view(theta, "col.w2").T
        d_pre = d_hid * self._dact(cache.col_pre, cache.col_hidden)
        put("col.w1", cache.col_in.T @ d_pre)
        put("col.b1", d_pre.sum(axis=0))
        d_col_in = d_pre @ lay.view(theta, "col.w1").T
        d_latent = d_col_in[:, self.enc_dim :]

        # geometry head
        d_out = np.concatenate([d_latent, d_sdf[:, None]], axis=1)
        put("geo.w2", cache.geo_hidden.T @ d_out)
        put("geo.b2", d_out.sum(axis=0))
        d_hid = d_out @ lay.view(theta, "geo.w2").T
        d_pre = d_hid * self._dact(cache.geo_pre, cache.geo_hidden)
        put("geo.w1", cache.geo_in.T @ d_pre)
        put("geo.b1", d_pre.sum(axis=0))
        d_feat = (d_pre @ lay.view(theta, "geo.w1").T)[:, self.enc_dim :]

        # grid scatter; untouched cells stay exactly zero
        F = cfg.features
        for lvl in range(cfg.levels):
            b = lay[f"grid{lvl}"]
            n_cells = self.level_sizes[lvl]
            df = d_feat[:, lvl * F : (lvl + 1) * F]
            idx = cache.corner_index[lvl].ravel()
            w = cache.corner_weight[lvl]
            g = np.empty((n_cells, F))
            for f in range(F):
                contrib = (w * df[:, f : f + 1]).ravel()
                g[:, f] = np.bincount(idx, weights=contrib, minlength=n_cells)
            grad[b.start : b.stop] += g.ravel()
        if not np.all(np.isfinite(grad)):
            raise NumericalFailure("field gradient")
        return grad

    # -- checkpoints -----------------------------------------------------

    def save(self, path: str | Path, theta: np.ndarray, **meta) -> Path:
        path = Path(path)
        if path.suffix != ".npz":
            path = path.with_suffix(".npz")
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "format": "tacomap-checkpoint",
            "version": 1,
            "config": asdict(self.config),
            "layout": self.layout.to_json(),
            "meta": meta,
        }
        np.savez(path, theta=theta, header=np.array(json.dumps(header)))
        return path


def load_checkpoint(path: str | Path) -> tuple[FieldModel, np.ndarray, dict]:
    with np.load(Path(path)) as data:
        header = json.loads(str(data["header"]))
        theta = np.array(data["theta"], dtype=np.float64)
    if header.get("format") != "tacomap-checkpoint":
        raise ValueError(f"{path} is not a tacomap checkpoint")
    model = FieldModel(FieldConfig.from_dict(header["config"]))
    stored = ParamLayout.from_json(header["layout"])
    if stored != model.layout or len(theta) != stored.total_len:
        raise ValueError("checkpoint layout does not match its configuration")
    return model, theta, header.get("meta", {})


def one_blob_encode(xn: np.ndarray, bins: int) -> np.ndarray:
    """Gaussian responses at ``bins`` equispaced centers per axis, sigma = 1/bins."""
    xn = np.clip(np.atleast_2d(np.asarray(xn, dtype=np.float64)), 0.0, 1.0)
    centers = (np.arange(bins) + 0.5) / bins
    sigma = 1.0 / bins
    z = (xn[:, :, None] - centers[None, None, :]) / sigma
    return np.exp(-0.5 * z * z).reshape(xn.shape[0], -1)
