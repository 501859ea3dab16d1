"""Dense per-pixel baseline head with overlap assignment and NMS-dependent
inference, used as the controlled comparison against the set model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamRegistry, Tensor
from .bev import BevGrid, GridSpec, PointCloud, conv_backbone, featurize, init_backbone, init_pointnet
from .boxes import Detection, LabeledBox, bev_footprint, decode_box10, encode_labeled, point_in_box
from .detector import ModelConfig, apply_linear, init_linear

DEFAULT_NEG_WEIGHT = 0.05


@dataclass
class DenseOutputs:
    probs: Tensor      # (H*W, C+1)
    encodings: Tensor  # (H*W, 10)
    feature_map: BevGrid


def assign_overlap(targets: list[LabeledBox], spec: GridSpec) -> np.ndarray:
    """Per-pixel target index, -1 for no-object.

    A pixel belongs to a target when the target's rotated BEV footprint covers
    the pixel center; among several covering targets the nearest center wins.
    """
    centers = spec.cell_centers()
    assign = np.full(len(centers), -1, dtype=np.int64)
    best_d2 = np.full(len(centers), np.inf)
    for j, box in enumerate(targets):
        fp = bev_footprint(box.center, box.size, box.yaw)
        mask = point_in_box(fp, centers)
        d2 = (centers[:, 0] - box.center[0]) ** 2 + (centers[:, 1] - box.center[1]) ** 2
        take = mask & (d2 < best_d2)
        assign[take] = j
        best_d2[take] = d2[take]
    return assign


class DenseDetector:
    """Shared BEV backbone plus a per-pixel classification/regression head."""

    def __init__(self, config: ModelConfig, grid: GridSpec, seed: int = 0,
                 registry: ParamRegistry | None = None):
        self.config = config
        self.grid = grid
        self.out_spec = grid.downsampled(2)
        if registry is None:
            registry = ParamRegistry()
            rng = np.random.Generator(np.random.PCG64(seed))
            init_pointnet(registry, rng, "pointnet", config.pointnet_hidden,
                          config.pillar_channels)
            init_backbone(registry, rng, "backbone", config.pillar_channels,
                          config.conv_channels)
            c_d = config.conv_channels[-1]
            init_linear(registry, rng, "densehead.l1", c_d, config.head_hidden)
            init_linear(registry, rng, "densehead.cls", config.head_hidden,
                        config.n_classes + 1)
            init_linear(registry, rng, "densehead.box", config.head_hidden, 10)
        self.registry = registry

    def forward(self, cloud: PointCloud) -> DenseOutputs:
        pillar_map = featurize(cloud, self.grid, self.registry, "pointnet")
        fmap = conv_backbone(pillar_map, self.registry, "backbone",
                             n_blocks=len(self.config.conv_channels))
        spec = fmap.spec
        flat = ad.reshape(fmap.data, (spec.height * spec.width, fmap.channels))
        h = ad.relu(apply_linear(flat, self.registry, "densehead.l1"))
        probs = ad.softmax_lastaxis(apply_linear(h, self.registry, "densehead.cls"))
        raw = apply_linear(h, self.registry, "densehead.box")
        pad = np.zeros((spec.height * spec.width, 10))
        pad[:, :2] = spec.cell_centers()
        enc = ad.add(raw, Tensor(pad))
        return DenseOutputs(probs, enc, fmap)

    def detections(self, outputs: DenseOutputs, score_floor: float = 0.0) -> list[Detection]:
        probs = outputs.probs.value()
        enc = outputs.encodings.value()
        dets = []
        for i in range(len(probs)):
            if np.max(probs[i, :-1]) < score_floor:
                continue
            center, size, yaw, vel = decode_box10(enc[i])
            dets.append(Detection(probs[i], center, size, yaw, vel))
        return dets


def dense_loss(outputs: DenseOutputs, assignment: np.ndarray,
               targets: list[LabeledBox], n_classes: int,
               neg_weight: float = DEFAULT_NEG_WEIGHT) -> Tensor:
    """Per-pixel cross entropy plus L1 on assigned pixels.

    No-object pixels pay -log p(no-object) scaled by ``neg_weight`` to keep the
    background from dominating.
    """
    n_pix = outputs.probs.shape[0]
    if len(assignment) != n_pix:
        raise ValueError(f"assignment length {len(assignment)} != {n_pix} pixels")
    pos = np.nonzero(assignment >= 0)[0]
    neg = np.nonzero(assignment < 0)[0]
    loss = None
    if len(neg):
        loss = ad.scale(ad.neg_log_prob(ad.gather_rows(outputs.probs, neg),
                                        np.full(len(neg), n_classes)), neg_weight)
    if len(pos):
        classes = np.array([targets[assignment[i]].class_id for i in pos])
        cls = ad.neg_log_prob(ad.gather_rows(outputs.probs, pos), classes)
        enc_t = np.stack([encode_labeled(targets[assignment[i]]) for i in pos])
        box = ad.l1(ad.gather_rows(outputs.encodings, pos), Tensor(enc_t))
        pos_loss = ad.add(cls, box)
        loss = pos_loss if loss is None else ad.add(loss, pos_loss)
    if loss is None:
        loss = ad.sum_all(ad.scale(outputs.probs, 0.0))
    return loss
