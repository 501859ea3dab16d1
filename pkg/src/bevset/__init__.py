"""BEV set-prediction 3D detection on synthetic scenes.

Point-pillar BEV featurization, a query-based NMS-free set detector with
dynamic-graph message passing, Hungarian set losses, set-level knowledge
distillation, a dense NMS baseline, detection metrics, and a training harness —
all on a small reverse-mode autodiff engine over numpy float64 arrays.
"""

from __future__ import annotations

from .autodiff import ParamRegistry, Tape, Tensor, backward
from .bev import BevGrid, GridSpec, PointCloud, featurize
from .boxes import Detection, LabeledBox, nms, rotated_iou_bev, top_k
from .dense import DenseDetector, assign_overlap, dense_loss
from .detector import ModelConfig, SetDetector
from .harness import RunConfig, ablate, distill, evaluate, train
from .matching import (brute_force_match, combined_loss, distill_loss,
                       hungarian, match_cost, pad_targets, set_loss)
from .metrics import MetricsReport, score_scenes
from .optim import AdamW, cyclic_lr
from .scenes import Scene, SceneConfig, densify, load_scene, sample_scene, save_scene, sparsify

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "BevGrid",
    "DenseDetector",
    "Detection",
    "GridSpec",
    "LabeledBox",
    "MetricsReport",
    "ModelConfig",
    "ParamRegistry",
    "PointCloud",
    "RunConfig",
    "Scene",
    "SceneConfig",
    "SetDetector",
    "Tape",
    "Tensor",
    "ablate",
    "assign_overlap",
    "backward",
    "brute_force_match",
    "combined_loss",
    "cyclic_lr",
    "dense_loss",
    "densify",
    "distill",
    "distill_loss",
    "evaluate",
    "featurize",
    "hungarian",
    "load_scene",
    "match_cost",
    "nms",
    "pad_targets",
    "rotated_iou_bev",
    "sample_scene",
    "save_scene",
    "score_scenes",
    "set_loss",
    "sparsify",
    "top_k",
    "train",
]
