"""Point cloud to dense BEV feature map: pillarization, per-pillar PointNet,
scatter to grid, and a small convolutional backbone.

Cells are half-open [low, high); points exactly on the low edge belong to the
cell, points outside the grid are dropped. Empty pillars hold zero features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamRegistry, Tensor

POINT_FEATURE_DIM = 7  # intensity, normalized xyz, offsets to pillar center


@dataclass
class PointCloud:
    points: np.ndarray    # (N, 3) meters
    features: np.ndarray  # (N, 4): intensity in [0,1], coords normalized to extent

    def __post_init__(self):
        if len(self.points) != len(self.features):
            raise ValueError(
                f"points ({len(self.points)}) and features ({len(self.features)}) differ")
        if len(self.points) and not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    y_min: float
    cell: float
    width: int
    height: int

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError(f"cell size must be positive, got {self.cell}")
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must be at least 1x1")

    @property
    def x_max(self) -> float:
        return self.x_min + self.cell * self.width

    @property
    def y_max(self) -> float:
        return self.y_min + self.cell * self.height

    def cell_centers(self) -> np.ndarray:
        """(H*W, 2) BEV centers, row-major over (row, col)."""
        xs = self.x_min + (np.arange(self.width) + 0.5) * self.cell
        ys = self.y_min + (np.arange(self.height) + 0.5) * self.cell
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)

    def downsampled(self, factor: int = 2) -> "GridSpec":
        if self.width % factor or self.height % factor:
            raise ValueError(f"grid {self.width}x{self.height} not divisible by {factor}")
        return GridSpec(self.x_min, self.y_min, self.cell * factor,
                        self.width // factor, self.height // factor)


@dataclass
class BevGrid:
    spec: GridSpec
    data: Tensor  # (H, W, C)

    def __post_init__(self):
        if self.data.shape[:2] != (self.spec.height, self.spec.width):
            raise ValueError(
                f"grid data {self.data.shape} does not match spec "
                f"{self.spec.height}x{self.spec.width}")

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def pillarize(cloud: PointCloud, spec: GridSpec) -> tuple[dict[tuple[int, int], list[int]], int]:
    """Map in-bounds points to (col, row) pillar cells; returns (groups, n_dropped)."""
    groups: dict[tuple[int, int], list[int]] = {}
    dropped = 0
    if cloud.n_points == 0:
        return groups, 0
    ix = np.floor((cloud.points[:, 0] - spec.x_min) / spec.cell).astype(np.int64)
    iy = np.floor((cloud.points[:, 1] - spec.y_min) / spec.cell).astype(np.int64)
    ok = (ix >= 0) & (ix < spec.width) & (iy >= 0) & (iy < spec.height)
    dropped = int((~ok).sum())
    for i in np.nonzero(ok)[0]:
        groups.setdefault((int(ix[i]), int(iy[i])), []).append(int(i))
    return groups, dropped


def pillar_point_features(cloud: PointCloud, spec: GridSpec,
                          idx: np.ndarray, pillar: tuple[int, int]) -> np.ndarray:
    """7-channel inputs for one pillar: raw features plus offsets to the pillar center."""
    cx = spec.x_min + (pillar[0] + 0.5) * spec.cell
    cy = spec.y_min + (pillar[1] + 0.5) * spec.cell
    pts = cloud.points[idx]
    offsets = pts - np.array([cx, cy, 0.0])
    return np.concatenate([cloud.features[idx], offsets], axis=1)


def init_pointnet(registry: ParamRegistry, rng: np.random.Generator, prefix: str,
                  hidden: int, out_dim: int, in_dim: int = POINT_FEATURE_DIM) -> None:
    registry.register(f"{prefix}.w1", Tensor(xavier(rng, in_dim, hidden)))
    registry.register(f"{prefix}.b1", Tensor(np.zeros(hidden)))
    registry.register(f"{prefix}.w2", Tensor(xavier(rng, hidden, out_dim)))
    registry.register(f"{prefix}.b2", Tensor(np.zeros(out_dim)))


def pointnet_mlp(x: Tensor, registry: ParamRegistry, prefix: str) -> Tensor:
    h = ad.relu(ad.linear(x, registry[f"{prefix}.w1"], registry[f"{prefix}.b1"]))
    return ad.linear(h, registry[f"{prefix}.w2"], registry[f"{prefix}.b2"])


def _canonical_order(rows: np.ndarray) -> np.ndarray:
    """Lexicographic row order, first column most significant.

    Feeding rows to the MLP in a canonical order makes the pooled pillar
    feature bit-exactly invariant to input point permutations; BLAS matmul
    results can otherwise differ in the last ulp depending on row position.
    """
    return np.lexsort(rows.T[::-1])


def pointnet_pillar(point_features: np.ndarray, registry: ParamRegistry,
                    prefix: str = "pointnet") -> Tensor:
    """Shared MLP per point, channel-wise max over the pillar's points."""
    feats = np.asarray(point_features, dtype=np.float64)
    if feats.ndim == 2 and len(feats):
        feats = feats[_canonical_order(feats)]
    if feats.ndim != 2:
        raise ValueError(f"expected (n, {POINT_FEATURE_DIM}) features, got {feats.shape}")
    if feats.shape[1] != registry[f"{prefix}.w1"].shape[0]:
        raise ValueError(
            f"point feature dim {feats.shape[1]} != "
            f"{registry[f'{prefix}.w1'].shape[0]}")
    if feats.shape[0] == 0:
        return Tensor(np.zeros(registry[f"{prefix}.w2"].shape[1]))
    per_point = pointnet_mlp(Tensor(feats), registry, prefix)
    pooled, _ = ad.max_lastaxis(ad.permute(per_point, (1, 0)))
    return pooled


def featurize(cloud: PointCloud, spec: GridSpec, registry: ParamRegistry,
              prefix: str = "pointnet") -> BevGrid:
    """Pillar feature map: PointNet over every non-empty pillar, zeros elsewhere.

    Vectorized over pillars: all points go through the shared MLP at once and
    the per-pillar max uses index padding (repeating a pillar's first point,
    which cannot change a maximum).
    """
    out_dim = registry[f"{prefix}.w2"].shape[1]
    groups, _ = pillarize(cloud, spec)
    if not groups:
        return BevGrid(spec, Tensor(np.zeros((spec.height, spec.width, out_dim))))
    pillars = sorted(groups)
    feats = []
    pad_idx = []
    offset = 0
    max_n = max(len(groups[p]) for p in pillars)
    for p in pillars:
        idx = np.array(groups[p])
        rows = pillar_point_features(cloud, spec, idx, p)
        feats.append(rows[_canonical_order(rows)])
        row = np.full(max_n, offset)
        row[:len(idx)] = offset + np.arange(len(idx))
        pad_idx.append(row)
        offset += len(idx)
    per_point = pointnet_mlp(Tensor(np.concatenate(feats)), registry, prefix)
    padded = ad.reshape(ad.gather_rows(per_point, np.concatenate(pad_idx)),
                        (len(pillars), max_n, out_dim))
    pooled, _ = ad.max_lastaxis(ad.permute(padded, (0, 2, 1)))
    flat_cells = np.array([p[1] * spec.width + p[0] for p in pillars])
    grid = ad.reshape(ad.scatter_rows(pooled, flat_cells, spec.height * spec.width),
                      (spec.height, spec.width, out_dim))
    return BevGrid(spec, grid)


def init_backbone(registry: ParamRegistry, rng: np.random.Generator, prefix: str,
                  in_channels: int, channels: tuple[int, ...]) -> None:
    prev = in_channels
    for i, ch in enumerate(channels):
        registry.register(f"{prefix}.conv{i}.w", Tensor(xavier(rng, 9 * prev, ch, shape=(3, 3, prev, ch))))
        registry.register(f"{prefix}.conv{i}.b", Tensor(np.zeros(ch)))
        prev = ch


def conv_backbone(grid: BevGrid, registry: ParamRegistry, prefix: str = "backbone",
                  n_blocks: int = 3) -> BevGrid:
    """Stacked 3x3 conv + ReLU blocks; block 0 downsamples by stride 2."""
    if grid.spec.width % 2 or grid.spec.height % 2:
        raise ValueError(
            f"backbone needs even grid dims, got {grid.spec.width}x{grid.spec.height}")
    x = grid.data
    for i in range(n_blocks):
        stride = 2 if i == 0 else 1
        x = ad.relu(ad.conv2d(x, registry[f"{prefix}.conv{i}.w"],
                              registry[f"{prefix}.conv{i}.b"], stride=stride, pad=1))
    return BevGrid(grid.spec.downsampled(2), x)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)
