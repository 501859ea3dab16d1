"""Box types, the 10-real regression encoding, rotated BEV IoU, and NMS.

Boxes carry 9 parameters: center (x, y, z) m, size (w, l, h) m, yaw rad, and
BEV velocity (vx, vy) m/s. The regression encoding replaces sizes with their
logs and yaw with its (sin, cos) pair, giving 10 reals:
(x, y, z, log w, log l, log h, sin yaw, cos yaw, vx, vy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEGENERATE_AREA = 1e-12


@dataclass
class LabeledBox:
    """Ground-truth 9-parameter box with a class id."""

    center: np.ndarray  # (3,) x, y, z meters
    size: np.ndarray    # (3,) w, l, h meters
    yaw: float
    velocity: np.ndarray  # (2,) vx, vy m/s
    class_id: int

    def params9(self) -> np.ndarray:
        return np.concatenate([self.center, self.size, [self.yaw], self.velocity])


@dataclass
class Detection:
    """Predicted class distribution over C+1 classes (last = no-object) plus a box."""

    probs: np.ndarray   # (C+1,)
    center: np.ndarray
    size: np.ndarray
    yaw: float
    velocity: np.ndarray

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.probs[:-1]))

    @property
    def score(self) -> float:
        return float(np.max(self.probs[:-1]))

    @property
    def noobj_prob(self) -> float:
        return float(self.probs[-1])


def encode_box(center, size, yaw, velocity) -> np.ndarray:
    size = np.asarray(size, dtype=np.float64)
    if np.any(size <= 0):
        raise ValueError(f"box sizes must be positive, got {size}")
    return np.concatenate([
        np.asarray(center, dtype=np.float64),
        np.log(size),
        [math.sin(yaw), math.cos(yaw)],
        np.asarray(velocity, dtype=np.float64),
    ])


def encode_labeled(box: LabeledBox) -> np.ndarray:
    return encode_box(box.center, box.size, box.yaw, box.velocity)


def decode_yaw(sin_raw: float, cos_raw: float) -> float:
    # atan2(0, 0) is ambiguous; a zero-initialized head decodes to yaw 0
    if sin_raw == 0.0 and cos_raw == 0.0:
        return 0.0
    yaw = math.atan2(sin_raw, cos_raw)
    if yaw <= -math.pi:
        yaw = math.pi
    return yaw


def decode_box10(enc: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Raw 10-real encoding back to (center, size, yaw, velocity)."""
    center = np.asarray(enc[:3], dtype=np.float64)
    size = np.exp(np.asarray(enc[3:6], dtype=np.float64))
    yaw = decode_yaw(float(enc[6]), float(enc[7]))
    velocity = np.asarray(enc[8:10], dtype=np.float64)
    return center, size, yaw, velocity


@dataclass
class RotatedBoxBEV:
    """BEV footprint: center (x, y), size (w, l), yaw."""

    cx: float
    cy: float
    w: float
    length: float
    yaw: float

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hw, hl = self.w / 2.0, self.length / 2.0
        local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def area(self) -> float:
        return self.w * self.length


def bev_footprint(center, size, yaw) -> RotatedBoxBEV:
    return RotatedBoxBEV(float(center[0]), float(center[1]),
                         float(size[0]), float(size[1]), float(yaw))


def _clip_polygon(poly: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Keep the part of ``poly`` on the left of the directed edge a->b."""
    if len(poly) == 0:
        return poly
    d = b - a
    side = d[0] * (poly[:, 1] - a[1]) - d[1] * (poly[:, 0] - a[0])
    out = []
    n = len(poly)
    for i in range(n):
        j = (i + 1) % n
        if side[i] >= 0:
            out.append(poly[i])
        if (side[i] >= 0) != (side[j] >= 0):
            t = side[i] / (side[i] - side[j])
            out.append(poly[i] + t * (poly[j] - poly[i]))
    return np.array(out) if out else np.empty((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def intersection_area(a: RotatedBoxBEV, b: RotatedBoxBEV) -> float:
    poly = a.corners()
    cb = b.corners()
    for i in range(4):
        poly = _clip_polygon(poly, cb[i], cb[(i + 1) % 4])
        if len(poly) == 0:
            return 0.0
    return _polygon_area(poly)


def rotated_iou_bev(a: RotatedBoxBEV, b: RotatedBoxBEV) -> float:
    area_a, area_b = a.area(), b.area()
    if area_a < DEGENERATE_AREA or area_b < DEGENERATE_AREA:
        return 0.0
    # fixed operand order makes iou(a, b) == iou(b, a) bit-exact
    first, second = sorted((a, b), key=lambda r: (r.cx, r.cy, r.w, r.length, r.yaw))
    inter = intersection_area(first, second)
    union = area_a + area_b - inter
    return inter / union


def point_in_box(box: RotatedBoxBEV, pts: np.ndarray) -> np.ndarray:
    """Boolean mask of BEV points (N, 2) inside the rotated rectangle (closed)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    lon = dx * c + dy * s
    lat = -dx * s + dy * c
    return (np.abs(lon) <= box.length / 2.0) & (np.abs(lat) <= box.w / 2.0)


def nms(detections: list[Detection], iou_threshold: float = 0.5,
        score_floor: float = 0.0) -> list[Detection]:
    """Greedy class-agnostic suppression; IoU strictly above the threshold suppresses."""
    cand = [(i, d) for i, d in enumerate(detections) if d.score >= score_floor]
    cand.sort(key=lambda t: (-t[1].score, t[0]))
    kept: list[Detection] = []
    kept_fp: list[RotatedBoxBEV] = []
    for _, d in cand:
        fp = bev_footprint(d.center, d.size, d.yaw)
        if all(rotated_iou_bev(fp, k) <= iou_threshold for k in kept_fp):
            kept.append(d)
            kept_fp.append(fp)
    return kept


def top_k(detections: list[Detection], k: int) -> list[Detection]:
    if k < 1:
        raise ValueError(f"top_k requires k >= 1, got {k}")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    return [detections[i] for i in order[:k]]
