"""Deterministic synthetic LiDAR-like scenes: labeled 9-parameter boxes with
surface-sampled points plus ground clutter.

All randomness comes from numpy's PCG64 generator seeded explicitly, so a
(config, seed) pair reproduces a scene bit-for-bit on any platform. Dataset
builders derive per-scene sub-seeds as ``seed XOR scene_index``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bev import PointCloud
from .boxes import LabeledBox, bev_footprint, rotated_iou_bev

SURFACE_NOISE = 0.02
MAX_OVERLAP_IOU = 0.05
MAX_REJECTION_ATTEMPTS = 1000

# archetype sizes (w, l, h) in meters: car-like, pedestrian-like, barrier-like
DEFAULT_PRIORS = ((1.9, 4.5, 1.6), (0.7, 0.7, 1.7), (0.5, 2.5, 1.0))


@dataclass(frozen=True)
class SceneConfig:
    extent: float = 16.0  # scene spans [-extent, extent]^2
    n_classes: int = 3
    size_priors: tuple[tuple[float, float, float], ...] = DEFAULT_PRIORS
    n_objects: tuple[int, int] = (2, 8)
    points_per_object: tuple[int, int] = (30, 80)
    clutter_points: int = 100
    velocity_range: tuple[float, float] = (0.0, 5.0)

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.n_objects[0] > self.n_objects[1]:
            raise ValueError(f"bad object count range {self.n_objects}")
        if len(self.size_priors) != self.n_classes:
            raise ValueError(
                f"{self.n_classes} classes need {self.n_classes} size priors")
        for prior in self.size_priors:
            if any(s <= 0 for s in prior):
                raise ValueError(f"size priors must be positive, got {prior}")


@dataclass
class Scene:
    cloud: PointCloud
    boxes: list[LabeledBox]


def _sample_box(rng: np.random.Generator, config: SceneConfig) -> LabeledBox:
    class_id = int(rng.integers(config.n_classes))
    size = np.array(config.size_priors[class_id]) * rng.uniform(0.8, 1.2, 3)
    margin = 0.5 * math.hypot(size[0], size[1])
    span = config.extent - margin
    center = np.array([rng.uniform(-span, span), rng.uniform(-span, span), size[2] / 2.0])
    yaw = rng.uniform(-math.pi, math.pi)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    mag = rng.uniform(*config.velocity_range)
    velocity = np.array([mag * math.cos(angle), mag * math.sin(angle)])
    return LabeledBox(center, size, yaw, velocity, class_id)


def _surface_points(rng: np.random.Generator, box: LabeledBox, n: int) -> np.ndarray:
    """Uniform-by-area samples on the 4 side faces and the top, with noise."""
    w, length, h = box.size
    areas = np.array([length * h, length * h, w * h, w * h, w * length])
    faces = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(-0.5, 0.5, n)
    local = np.empty((n, 3))
    for i, f in enumerate(faces):
        if f < 2:  # lateral faces at y = +-w/2
            local[i] = (u[i] * length, (0.5 if f == 0 else -0.5) * w, (v[i] + 0.5) * h)
        elif f < 4:  # end faces at x = +-l/2
            local[i] = ((0.5 if f == 2 else -0.5) * length, u[i] * w, (v[i] + 0.5) * h)
        else:  # top
            local[i] = (u[i] * length, v[i] * w, h)
    # truncated strictly inside 3 sigma so every point stays provably near its
    # box even after rotation round-off
    noise = rng.normal(0.0, SURFACE_NOISE, (n, 3))
    bound = 3 * SURFACE_NOISE - 1e-9
    local += np.clip(noise, -bound, bound)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = box.center[0] + local[:, 0] * c - local[:, 1] * s
    world[:, 1] = box.center[1] + local[:, 0] * s + local[:, 1] * c
    world[:, 2] = local[:, 2]
    return world


def _features(points: np.ndarray, intensity: np.ndarray, extent: float) -> np.ndarray:
    return np.column_stack([intensity, points / extent])


def sample_scene(config: SceneConfig, seed: int) -> Scene:
    rng = np.random.Generator(np.random.PCG64(seed))
    n_obj = int(rng.integers(config.n_objects[0], config.n_objects[1] + 1))
    boxes: list[LabeledBox] = []
    attempts = 0
    while len(boxes) < n_obj:
        attempts += 1
        if attempts > MAX_REJECTION_ATTEMPTS:
            raise RuntimeError(
                f"box placement exceeded {MAX_REJECTION_ATTEMPTS} attempts for {config}")
        cand = _sample_box(rng, config)
        fp = bev_footprint(cand.center, cand.size, cand.yaw)
        if all(rotated_iou_bev(fp, bev_footprint(b.center, b.size, b.yaw)) < MAX_OVERLAP_IOU
               for b in boxes):
            boxes.append(cand)
    chunks = []
    for box in boxes:
        n = int(rng.integers(config.points_per_object[0], config.points_per_object[1] + 1))
        if n:
            chunks.append(_surface_points(rng, box, n))
    if config.clutter_points:
        ground = np.column_stack([
            rng.uniform(-config.extent, config.extent, config.clutter_points),
            rng.uniform(-config.extent, config.extent, config.clutter_points),
            rng.normal(0.0, SURFACE_NOISE, config.clutter_points),
        ])
        chunks.append(ground)
    points = np.concatenate(chunks) if chunks else np.empty((0, 3))
    intensity = rng.uniform(0.0, 1.0, len(points))
    cloud = PointCloud(points, _features(points, intensity, config.extent))
    return Scene(cloud, boxes)


def points_in_box3d(box: LabeledBox, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Mask of points inside the 3D box, optionally inflated by ``tol`` per axis."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = points[:, 0] - box.center[0]
    dy = points[:, 1] - box.center[1]
    lon = dx * c + dy * s
    lat = -dx * s + dy * c
    w, length, h = box.size
    return ((np.abs(lon) <= length / 2 + tol)
            & (np.abs(lat) <= w / 2 + tol)
            & (points[:, 2] >= -tol) & (points[:, 2] <= h + tol))


def densify(scene: Scene, factor: int, seed: int, extent: float = 16.0) -> Scene:
    """Add (factor - 1)x fresh surface samples per box; boxes unchanged."""
    if factor < 1:
        raise ValueError(f"densify factor must be >= 1, got {factor}")
    if factor == 1:
        return scene
    rng = np.random.Generator(np.random.PCG64(seed))
    pts = [scene.cloud.points]
    feats = [scene.cloud.features]
    for box in scene.boxes:
        n_in = int(points_in_box3d(box, scene.cloud.points, tol=3 * SURFACE_NOISE).sum())
        n_new = (factor - 1) * n_in
        if n_new == 0:
            continue
        new_pts = _surface_points(rng, box, n_new)
        pts.append(new_pts)
        feats.append(_features(new_pts, rng.uniform(0.0, 1.0, n_new), extent))
    return Scene(PointCloud(np.concatenate(pts), np.concatenate(feats)), scene.boxes)


def sparsify(scene: Scene, keep_fraction: float, seed: int) -> Scene:
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if keep_fraction == 1.0:
        return scene
    n = scene.cloud.n_points
    keep = int(round(n * keep_fraction))
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return Scene(PointCloud(scene.cloud.points[idx], scene.cloud.features[idx]),
                 scene.boxes)


# ---------------------------------------------------------------------------
# SCENE v1 text format
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def save_scene(scene: Scene, path) -> None:
    lines = ["SCENE v1", f"P {scene.cloud.n_points}"]
    for p, f in zip(scene.cloud.points, scene.cloud.features):
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {_fmt(f[0])}")
    lines.append(f"B {len(scene.boxes)}")
    for b in scene.boxes:
        vals = [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1],
                b.size[2], b.yaw, b.velocity[0], b.velocity[1]]
        lines.append(" ".join(_fmt(v) for v in vals) + f" {b.class_id}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene(path, extent: float = 16.0) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    def fail(lineno: int, msg: str):
        raise ValueError(f"{path}:{lineno}: {msg}")

    if not lines or lines[0] != "SCENE v1":
        fail(1, "expected header 'SCENE v1'")
    if len(lines) < 2 or not lines[1].startswith("P "):
        fail(2, "expected point count 'P <N>'")
    try:
        n_points = int(lines[1][2:])
    except ValueError:
        fail(2, f"bad point count {lines[1][2:]!r}")
    pts = np.empty((n_points, 3))
    intensity = np.empty(n_points)
    for i in range(n_points):
        lineno = 3 + i
        if lineno - 1 >= len(lines):
            fail(lineno, "truncated point list")
        fields = lines[lineno - 1].split()
        if len(fields) != 4:
            fail(lineno, f"expected 4 point fields, got {len(fields)}")
        try:
            vals = [float(v) for v in fields]
        except ValueError:
            fail(lineno, f"bad point line {lines[lineno - 1]!r}")
        pts[i] = vals[:3]
        intensity[i] = vals[3]
    b_lineno = 3 + n_points
    if b_lineno - 1 >= len(lines) or not lines[b_lineno - 1].startswith("B "):
        fail(b_lineno, "expected box count 'B <M>'")
    try:
        n_boxes = int(lines[b_lineno - 1][2:])
    except ValueError:
        fail(b_lineno, f"bad box count {lines[b_lineno - 1][2:]!r}")
    boxes = []
    for i in range(n_boxes):
        lineno = b_lineno + 1 + i
        if lineno - 1 >= len(lines):
            fail(lineno, "truncated box list")
        fields = lines[lineno - 1].split()
        if len(fields) != 10:
            fail(lineno, f"expected 10 box fields, got {len(fields)}")
        try:
            vals = [float(v) for v in fields[:9]]
            class_id = int(fields[9])
        except ValueError:
            fail(lineno, f"bad box line {lines[lineno - 1]!r}")
        boxes.append(LabeledBox(np.array(vals[0:3]), np.array(vals[3:6]),
                                vals[6], np.array(vals[7:9]), class_id))
    return Scene(PointCloud(pts, _features(pts, intensity, extent)), boxes)
