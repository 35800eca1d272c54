import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tacomap.render import (
    MIN_WEIGHT_SUM,
    Ray,
    RayBatch,
    RenderConfig,
    composite,
    composite_backward,
    render_batch,
    render_ray,
    render_weight,
    sample_depths,
    sample_ray,
)

TR = 0.1


def test_ray_requires_unit_direction():
    Ray(np.zeros(2), np.array([0.6, 0.8]), 1.0)
    with pytest.raises(ValueError):
        Ray(np.zeros(2), np.array([1.0, 1.0]), 1.0)


def test_batch_validation():
    ok = dict(origins=np.zeros((1, 2)), directions=np.array([[1.0, 0.0]]), color=np.zeros((1, 3)), depth=np.array([0.5]), max_range=1.0)
    RayBatch(**ok)
    with pytest.raises(ValueError):
        RayBatch(**{**ok, "color": np.full((1, 3), 1.5)})
    with pytest.raises(ValueError):
        RayBatch(**{**ok, "depth": np.array([2.0])})
    with pytest.raises(ValueError):
        RayBatch(**{**ok, "origins": np.zeros((0, 2)), "directions": np.zeros((0, 2)), "color": np.zeros((0, 3)), "depth": np.zeros(0)})


def test_render_weight_values():
    assert render_weight(0.0, TR) == 0.25
    assert render_weight(10 * TR, TR) < 1e-4 and render_weight(-10 * TR, TR) < 1e-4
    assert render_weight(TR, TR) == pytest.approx(0.19661193324148185, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50, allow_nan=False), st.floats(0.01, 5))
def test_render_weight_symmetric_and_bounded(s, tr):
    w = render_weight(s, tr)
    assert w == render_weight(-s, tr)
    assert 0 <= w <= 0.25


def test_render_weight_decreases_in_magnitude():
    s = np.linspace(0, 3, 200)
    assert np.all(np.diff(render_weight(s, TR)) < 0)


def test_sample_depths_contract():
    rng = np.random.default_rng(0)
    d = sample_depths(np.array([0.7, np.nan]), 1.5, 32, 8, TR, rng)
    assert d.shape == (2, 32)
    assert np.all(np.diff(d, axis=1) > 0)
    assert np.all((d > 0) & (d <= 1.5))
    assert np.sum(np.abs(d[0] - 0.7) <= TR) >= 8
    again = sample_depths(np.array([0.7, np.nan]), 1.5, 32, 8, TR, np.random.default_rng(0))
    assert np.array_equal(d, again)


def test_sample_ray_points():
    ray = Ray(np.array([0.1, 0.2]), np.array([0.0, 1.0]), 1.0)
    depths, pts = sample_ray(ray, 0.5, 16, 4, TR, np.random.default_rng(1))
    assert np.allclose(pts, ray.origin + depths[:, None] * ray.direction)
    with pytest.raises(ValueError):
        sample_ray(ray, 1.5, 16, 4, TR, np.random.default_rng(1))


def test_constant_color_is_preserved():
    rng = np.random.default_rng(2)
    sdf = rng.normal(0, 0.1, (4, 16))
    colors = np.broadcast_to([0.2, 0.5, 0.9], (4, 16, 3)).copy()
    depths = np.sort(rng.random((4, 16)), axis=1)
    res = composite(sdf, colors, depths, TR)
    assert np.allclose(res.color, [0.2, 0.5, 0.9], atol=1e-15)


def test_hand_weighted_depth():
    q = 0.5 * (1 + np.sqrt(1 - 1 / 3))  # q(1-q) = 1/12 -> weight ratio 1:3 against s = 0
    s = np.array([[TR * np.log(q / (1 - q)), 0.0]])
    res = composite(s, np.zeros((1, 2, 3)), np.array([[1.0, 2.0]]), TR)
    assert res.weights[0, 1] / res.weights[0, 0] == pytest.approx(3.0, rel=1e-12)
    assert res.depth[0] == pytest.approx(1.75, abs=1e-12)


def test_concentrated_weight_picks_that_depth():
    s = np.array([[60 * TR, 0.0, 60 * TR]])
    res = composite(s, np.zeros((1, 3, 3)), np.array([[0.5, 1.0, 1.5]]), TR)
    assert abs(res.depth[0] - 1.0) <= 1e-9


def test_degenerate_rays_are_flagged():
    s = np.full((1, 4), 1e4)
    res = composite(s, np.zeros((1, 4, 3)), np.array([[0.1, 0.2, 0.3, 0.4]]), TR)
    assert res.weight_sum[0] < MIN_WEIGHT_SUM and not res.valid[0]


def test_convex_combination():
    rng = np.random.default_rng(3)
    sdf = rng.normal(0, 0.2, (50, 8))
    colors = rng.random((50, 8, 3))
    depths = np.sort(rng.random((50, 8)), axis=1)
    res = composite(sdf, colors, depths, TR)
    assert np.all(res.depth >= depths[:, 0] - 1e-15) and np.all(res.depth <= depths[:, -1] + 1e-15)
    assert np.all(res.color >= colors.min(axis=1) - 1e-15) and np.all(res.color <= colors.max(axis=1) + 1e-15)


def test_depth_converges_to_crossing():
    crossing = 0.61
    depths = np.linspace(0.0, 1.5, 513)[1:][None, :]
    s = (crossing - depths) / TR  # locally linear, tr-normalized
    res = composite(s, np.zeros((1, 512, 3)), depths, TR)
    assert abs(res.depth[0] - crossing) <= 2 * (1.5 / 512)


def test_composite_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    sdf = rng.normal(0, 0.15, (3, 6))
    colors = rng.random((3, 6, 3))
    depths = np.sort(rng.random((3, 6)), axis=1)
    gc, gd = rng.normal(size=(3, 3)), rng.normal(size=3)

    def f(s, c):
        r = composite(s, c, depths, TR)
        return float((gc * r.color).sum() + gd @ r.depth)

    res = composite(sdf, colors, depths, TR)
    ds, dc = composite_backward(res, sdf, colors, depths, TR, gc, gd)
    h = 1e-6
    for idx in np.ndindex(sdf.shape):
        e = np.zeros_like(sdf)
        e[idx] = h
        fd = (f(sdf + e, colors) - f(sdf - e, colors)) / (2 * h)
        assert fd == pytest.approx(ds[idx], rel=1e-6, abs=1e-9)
    e = np.zeros_like(colors)
    e[1, 2, 0] = h
    fd = (f(sdf, colors + e) - f(sdf, colors - e)) / (2 * h)
    assert fd == pytest.approx(dc[1, 2, 0], rel=1e-6, abs=1e-9)


def test_render_ray_matches_batch(tiny_model, tiny_theta, batch):
    depths = sample_depths(batch.depth, batch.max_range, 16, 4, TR, np.random.default_rng(5))
    rr = render_batch(tiny_model, tiny_theta, batch, depths, TR)
    single = render_ray(tiny_model, tiny_theta, batch.ray(3), depths[3], TR)
    assert np.allclose(single.color[0], rr.result.color[3], atol=1e-14)
    assert single.depth[0] == pytest.approx(rr.result.depth[3], abs=1e-14)


def test_render_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(tr=0.0)
    with pytest.raises(ValueError):
        RenderConfig(n_samples=4, n_near=8)
