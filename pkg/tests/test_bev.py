"""Pillarization, PointNet pooling, scatter, and the conv backbone."""

from __future__ import annotations

import numpy as np
import pytest

from bevset import autodiff as ad
from bevset.autodiff import ParamRegistry, Tensor
from bevset.bev import (GridSpec, PointCloud, conv_backbone, featurize,
                        init_backbone, init_pointnet, pillar_point_features,
                        pillarize, pointnet_pillar)

RNG = np.random.Generator(np.random.PCG64(11))
SPEC = GridSpec(-16.0, -16.0, 0.5, 64, 64)


def _cloud(points):
    points = np.asarray(points, dtype=np.float64)
    intensity = RNG.uniform(0, 1, len(points))
    return PointCloud(points, np.column_stack([intensity, points / 16.0]))


def _registry(seed=0, hidden=8, out_dim=6):
    reg = ParamRegistry()
    rng = np.random.Generator(np.random.PCG64(seed))
    init_pointnet(reg, rng, "pointnet", hidden, out_dim)
    return reg


# ---------------------------------------------------------------------------
# pillarize
# ---------------------------------------------------------------------------


def test_point_on_low_edge_belongs_to_cell_zero():
    groups, dropped = pillarize(_cloud([[-16.0, -16.0, 0.0]]), SPEC)
    assert dropped == 0
    assert list(groups) == [(0, 0)]


def test_point_below_low_edge_dropped():
    groups, dropped = pillarize(_cloud([[-16.001, 0.0, 0.0]]), SPEC)
    assert dropped == 1 and not groups


def test_point_on_high_edge_dropped():
    _, dropped = pillarize(_cloud([[16.0, 0.0, 0.0]]), SPEC)
    assert dropped == 1


def test_pillarize_conserves_points():
    pts = np.column_stack([RNG.uniform(-16, 16, 1000), RNG.uniform(-16, 16, 1000),
                           RNG.normal(0, 1, 1000)])
    groups, dropped = pillarize(_cloud(pts), SPEC)
    assert dropped == 0
    assert sum(len(v) for v in groups.values()) == 1000


def test_pillar_point_features_offsets():
    cloud = _cloud([[-15.75, -15.75, 1.0]])  # exactly the (0, 0) pillar center
    feats = pillar_point_features(cloud, SPEC, np.array([0]), (0, 0))
    assert feats.shape == (1, 7)
    assert np.allclose(feats[0, 4:6], [0.0, 0.0])  # centered in x, y
    assert feats[0, 6] == pytest.approx(1.0)       # z offset vs 0


# ---------------------------------------------------------------------------
# pointnet
# ---------------------------------------------------------------------------


def test_pointnet_channelwise_max_with_identity_mlp():
    reg = ParamRegistry()
    reg.register("pointnet.w1", Tensor(np.eye(2)))
    reg.register("pointnet.b1", Tensor(np.zeros(2)))
    reg.register("pointnet.w2", Tensor(np.eye(2)))
    reg.register("pointnet.b2", Tensor(np.zeros(2)))
    out = pointnet_pillar(np.array([[1.0, 2.0], [3.0, 0.0]]), reg)
    assert np.array_equal(out.data, [3.0, 2.0])


def test_pointnet_single_point_is_mlp_output():
    reg = _registry()
    x = RNG.normal(size=(1, 7))
    from bevset.bev import pointnet_mlp
    expected = pointnet_mlp(Tensor(x), reg, "pointnet").data[0]
    assert np.allclose(pointnet_pillar(x, reg).data, expected)


def test_pointnet_permutation_invariant():
    reg = _registry()
    for _ in range(50):
        x = RNG.normal(size=(int(RNG.integers(2, 12)), 7))
        base = pointnet_pillar(x, reg).data
        perm = pointnet_pillar(x[RNG.permutation(len(x))], reg).data
        assert np.array_equal(base, perm)


def test_pointnet_dim_mismatch_rejected():
    with pytest.raises(ValueError, match="dim"):
        pointnet_pillar(RNG.normal(size=(3, 5)), _registry())


# ---------------------------------------------------------------------------
# featurize (scatter)
# ---------------------------------------------------------------------------


def test_featurize_empty_scene_all_zero():
    grid = featurize(_cloud(np.empty((0, 3))), SPEC, _registry())
    assert grid.data.shape == (64, 64, 6)
    assert np.all(grid.data.data == 0.0)


def test_featurize_single_pillar_placement():
    reg = _registry()
    # point in cell (col 2, row 3): x in [-15, -14.5), y in [-14.5, -14)
    cloud = _cloud([[-14.8, -14.3, 0.2]])
    grid = featurize(cloud, SPEC, reg)
    nz = np.nonzero(np.any(grid.data.data != 0, axis=2))
    assert list(zip(*nz)) == [(3, 2)]
    feats = pillar_point_features(cloud, SPEC, np.array([0]), (2, 3))
    assert np.allclose(grid.data.data[3, 2], pointnet_pillar(feats, reg).data)


def test_featurize_matches_per_pillar_loop():
    reg = _registry()
    pts = np.column_stack([RNG.uniform(-16, 16, 200), RNG.uniform(-16, 16, 200),
                           RNG.normal(size=200)])
    cloud = _cloud(pts)
    grid = featurize(cloud, SPEC, reg).data.data
    groups, _ = pillarize(cloud, SPEC)
    for (ix, iy), idx in groups.items():
        feats = pillar_point_features(cloud, SPEC, np.array(idx), (ix, iy))
        assert np.allclose(grid[iy, ix], pointnet_pillar(feats, reg).data)


def test_featurize_permutation_invariant_exact():
    reg = _registry()
    pts = np.column_stack([RNG.uniform(-16, 16, 300), RNG.uniform(-16, 16, 300),
                           RNG.normal(size=300)])
    cloud = _cloud(pts)
    base = featurize(cloud, SPEC, reg).data.data
    perm = RNG.permutation(300)
    shuffled = PointCloud(cloud.points[perm], cloud.features[perm])
    assert np.array_equal(base, featurize(shuffled, SPEC, reg).data.data)


def test_featurize_gradient_matches_finite_differences():
    from conftest import gradcheck
    reg = _registry(hidden=4, out_dim=3)
    spec = GridSpec(-2.0, -2.0, 1.0, 4, 4)
    pts = np.column_stack([RNG.uniform(-2, 2, 12), RNG.uniform(-2, 2, 12),
                           RNG.normal(size=12)])
    cloud = _cloud(pts)

    def fn():
        g = featurize(cloud, spec, reg).data
        return ad.sum_all(ad.mul(g, g))

    gradcheck(fn, [reg[n] for n in reg.names()])


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


def _backbone_registry(in_ch=8, channels=(16, 32, 32), seed=0):
    reg = ParamRegistry()
    init_backbone(reg, np.random.Generator(np.random.PCG64(seed)), "backbone",
                  in_ch, channels)
    return reg


def test_backbone_output_shape_64_to_32():
    from bevset.bev import BevGrid
    reg = _backbone_registry()
    grid = BevGrid(SPEC, Tensor(RNG.normal(size=(64, 64, 8))))
    out = conv_backbone(grid, reg, n_blocks=3)
    assert out.data.shape == (32, 32, 32)
    assert out.spec.cell == 1.0


def test_backbone_zero_input_zero_output():
    from bevset.bev import BevGrid
    reg = _backbone_registry()
    out = conv_backbone(BevGrid(SPEC, Tensor(np.zeros((64, 64, 8)))), reg)
    assert np.all(out.data.data == 0.0)


def test_backbone_rejects_odd_dims():
    from bevset.bev import BevGrid
    reg = _backbone_registry()
    spec = GridSpec(0.0, 0.0, 1.0, 5, 5)
    with pytest.raises(ValueError, match="even"):
        conv_backbone(BevGrid(spec, Tensor(np.zeros((5, 5, 8)))), reg)


def test_backbone_shift_equivariance_interior():
    """Translating the input by one output cell translates interior features."""
    from bevset.bev import BevGrid
    reg = _backbone_registry(in_ch=4)
    spec = GridSpec(0.0, 0.0, 1.0, 16, 16)
    x = np.zeros((16, 16, 4))
    x[6:8, 6:8] = RNG.normal(size=(2, 2, 4))
    base = conv_backbone(BevGrid(spec, Tensor(x)), reg).data.data
    shifted = np.zeros_like(x)
    shifted[2:, 2:] = x[:-2, :-2]  # one output cell = two input cells
    moved = conv_backbone(BevGrid(spec, Tensor(shifted)), reg).data.data
    assert np.allclose(moved[3:-1, 3:-1], base[2:-2, 2:-2], atol=1e-10)
