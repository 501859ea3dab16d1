"""Run orchestration: config handling, supervised training, distillation,
evaluation with and without NMS, and ablation sweeps.

Every run directory receives ``config.echo``, ``report.txt`` (key=value
metrics, no-NMS first), ``report.csv`` (per-class APs), ``loss_curve.csv``,
``model.odgc1``, and ``timing.txt`` (wall clock, kept out of report.txt so
reports are bit-reproducible).
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .bev import GridSpec
from .boxes import Detection, LabeledBox, nms, top_k
from .checkpoint import checkpoint_hash, load_into_registry, save_checkpoint
from .dense import DenseDetector, assign_overlap, dense_loss
from .detector import ModelConfig, SetDetector
from .matching import (combined_loss, distill_loss, distill_match, hungarian,
                       match_cost, pad_targets, set_loss)
from .metrics import MetricsReport, score_scenes, write_report_csv
from .optim import AdamW
from .scenes import Scene, SceneConfig, densify, sample_scene, sparsify

DISTILL_MODES = ("none", "set", "self", "feature", "pseudo")
HEADS = ("set", "dense")


@dataclass(frozen=True)
class RunConfig:
    # model
    head: str = "set"
    m_queries: int = 32
    q_dim: int = 64
    layers: int = 2
    neighbors: int = 16
    offsets: int = 4
    interaction: str = "dgcnn"
    # training
    epochs: int = 10
    batch_size: int = 4
    lr0: float = 1e-4
    lr_peak: float = 1e-3
    lr_end: float = 1e-8
    seed: int = 0
    # dataset
    extent: float = 16.0
    cell: float = 0.5
    grid_size: int = 64
    n_classes: int = 3
    objects_min: int = 2
    objects_max: int = 8
    points_min: int = 30
    points_max: int = 80
    clutter_points: int = 100
    train_scenes: int = 500
    eval_scenes: int = 100
    # inference
    top_k: int = 32
    nms_iou: float = 0.5
    dense_score_floor: float = 0.3
    # distillation
    distill_mode: str = "none"
    teacher_checkpoint: str = ""
    alpha: float = 1.0
    beta: float = 1.0
    dense_factor: int = 1
    sparse_keep: float = 1.0
    pseudo_fraction: float = 0.5
    pseudo_floor: float = 0.5
    distill_mask_empty: bool = False
    feature_weight: float = 1.0
    # output
    out_dir: str = "runs/out"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.distill_mode not in DISTILL_MODES:
            raise ValueError(
                f"distill_mode must be one of {DISTILL_MODES}, got {self.distill_mode!r}")
        if abs(self.cell * self.grid_size - 2 * self.extent) > 1e-9:
            raise ValueError(
                f"grid {self.grid_size} cells of {self.cell} m must span "
                f"2*extent = {2 * self.extent} m")

    def grid_spec(self) -> GridSpec:
        return GridSpec(-self.extent, -self.extent, self.cell,
                        self.grid_size, self.grid_size)

    def scene_config(self) -> SceneConfig:
        return SceneConfig(extent=self.extent, n_classes=self.n_classes,
                           n_objects=(self.objects_min, self.objects_max),
                           points_per_object=(self.points_min, self.points_max),
                           clutter_points=self.clutter_points)

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_classes=self.n_classes, m_queries=self.m_queries,
                           q_dim=self.q_dim, n_layers=self.layers,
                           k_neighbors=self.neighbors, k_offsets=self.offsets,
                           interaction=self.interaction)


_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


def parse_config_file(path, base: RunConfig | None = None) -> RunConfig:
    """Read a UTF-8 key=value file (# comments, blank lines allowed)."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        ftype = fields[key].type
        if ftype == "bool":
            if val.lower() not in _BOOL_WORDS:
                raise ValueError(f"{path}:{lineno}: bad boolean {val!r}")
            values[key] = _BOOL_WORDS[val.lower()]
        elif ftype == "int":
            values[key] = int(val)
        elif ftype == "float":
            values[key] = float(val)
        else:
            values[key] = val
    base = base if base is not None else RunConfig()
    return replace(base, **values)


def config_echo(config: RunConfig) -> str:
    items = sorted(dataclasses.asdict(config).items())
    return "\n".join(f"{k}={v}" for k, v in items) + "\n"


def train_scene_seed(config: RunConfig, index: int) -> int:
    return (config.seed * 2) ^ index


def eval_scene_seed(config: RunConfig, index: int) -> int:
    return (config.seed * 2 + 1) ^ index


def build_datasets(config: RunConfig) -> tuple[list[Scene], list[Scene]]:
    sc = config.scene_config()
    train = [sample_scene(sc, train_scene_seed(config, i))
             for i in range(config.train_scenes)]
    evals = [sample_scene(sc, eval_scene_seed(config, i))
             for i in range(config.eval_scenes)]
    return train, evals


def build_model(config: RunConfig):
    if config.head == "dense":
        return DenseDetector(config.model_config(), config.grid_spec(), seed=config.seed)
    return SetDetector(config.model_config(), config.grid_spec(), seed=config.seed)


@dataclass
class RunReport:
    config: RunConfig
    no_nms: MetricsReport
    with_nms: MetricsReport
    loss_curve: list[float]
    wall_clock: float
    checkpoint_sha: str
    out_dir: str

    def map_gap(self) -> float:
        return abs(self.with_nms.map_score - self.no_nms.map_score)


# ---------------------------------------------------------------------------
# losses per scene
# ---------------------------------------------------------------------------


def set_scene_loss(model: SetDetector, scene: Scene) -> Tensor:
    out = model.forward(scene.cloud)
    targets = pad_targets(scene.boxes, model.config.m_queries, model.config.n_classes)
    sigma = hungarian(match_cost(targets, out.probs.data, out.encodings.data))
    return set_loss(targets, out.probs, out.encodings, sigma)


def dense_scene_loss(model: DenseDetector, scene: Scene,
                     assignment: np.ndarray) -> Tensor:
    out = model.forward(scene.cloud)
    return dense_loss(out, assignment, scene.boxes, model.config.n_classes)


# ---------------------------------------------------------------------------
# inference + scoring
# ---------------------------------------------------------------------------


def infer_scene(model, config: RunConfig, scene: Scene, use_nms: bool) -> list[Detection]:
    if isinstance(model, DenseDetector):
        dets = model.detections(model.forward(scene.cloud),
                                score_floor=config.dense_score_floor)
    else:
        dets = model.detections(model.forward(scene.cloud))
    if use_nms:
        dets = nms(dets, iou_threshold=config.nms_iou)
    return top_k(dets, config.top_k) if dets else []


def evaluate_model(model, config: RunConfig, scenes: list[Scene],
                   use_nms: bool, student_view=None) -> MetricsReport:
    per_scene = []
    for i, scene in enumerate(scenes):
        view = student_view(scene, i) if student_view else scene
        per_scene.append((infer_scene(model, config, view, use_nms), scene.boxes))
    return score_scenes(per_scene, config.n_classes)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _write_outputs(config: RunConfig, model, no_nms: MetricsReport,
                   with_nms: MetricsReport, loss_curve: list[float],
                   wall: float) -> RunReport:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(config_echo(config), encoding="utf-8")
    ckpt = out / "model.odgc1"
    save_checkpoint(model.registry, ckpt)
    sha = checkpoint_hash(ckpt)
    lines = []
    for prefix, rep in (("nonms", no_nms), ("nms", with_nms)):
        for k, v in rep.flat().items():
            lines.append(f"{prefix}_{k}={v:.6f}")
    lines.append(f"delta_mAP={abs(with_nms.map_score - no_nms.map_score):.6f}")
    if loss_curve:
        lines.append(f"loss_first={loss_curve[0]:.6f}")
        lines.append(f"loss_last={loss_curve[-1]:.6f}")
    lines.append(f"n_parameters={model.registry.n_values()}")
    lines.append(f"checkpoint_sha256={sha}")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_report_csv(no_nms, out / "report.csv")
    with open(out / "loss_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(loss_curve):
            fh.write(f"{i},{v:.6f}\n")
    (out / "timing.txt").write_text(f"wall_clock_sec={wall:.3f}\n", encoding="utf-8")
    return RunReport(config, no_nms, with_nms, loss_curve, wall, sha, str(out))


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield range(start, min(start + batch_size, n))


def train(config: RunConfig, scenes: tuple[list[Scene], list[Scene]] | None = None) -> RunReport:
    """Supervised training of the configured head, then dual evaluation."""
    t0 = time.perf_counter()
    train_set, eval_set = scenes if scenes is not None else build_datasets(config)
    model = build_model(config)
    steps = max(1, config.epochs * math.ceil(len(train_set) / config.batch_size))
    opt = AdamW(model.registry, total_steps=steps, lr0=config.lr0,
                lr_peak=config.lr_peak, lr_end=config.lr_end)
    assignments = None
    if config.head == "dense":
        assignments = [assign_overlap(s.boxes, model.out_spec) for s in train_set]
    loss_curve: list[float] = []
    for _epoch in range(config.epochs):
        for batch in _batches(len(train_set), config.batch_size):
            model.registry.zero_grads()
            batch_loss = 0.0
            for i in batch:
                with Tape() as tape:
                    if config.head == "dense":
                        loss = dense_scene_loss(model, train_set[i], assignments[i])
                    else:
                        loss = set_scene_loss(model, train_set[i])
                    loss = ad.scale(loss, 1.0 / len(batch))
                ad.backward(tape, loss)
                batch_loss += loss.item()
            if not math.isfinite(batch_loss):
                raise RuntimeError(
                    f"non-finite loss at step {opt.t} (lr {opt.current_lr():.3e})")
            opt.step()
            loss_curve.append(batch_loss)
    no_nms = evaluate_model(model, config, eval_set, use_nms=False)
    with_nms = evaluate_model(model, config, eval_set, use_nms=True)
    return _write_outputs(config, model, no_nms, with_nms, loss_curve,
                          time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------


def _load_teacher(config: RunConfig):
    if not config.teacher_checkpoint:
        raise ValueError("distillation requires teacher_checkpoint")
    teacher = build_model(config)
    load_into_registry(config.teacher_checkpoint, teacher.registry)
    return teacher


def _teacher_view(config: RunConfig, scene: Scene, index: int) -> Scene:
    if config.dense_factor > 1:
        return densify(scene, config.dense_factor,
                       seed=train_scene_seed(config, index) ^ 0x5EED,
                       extent=config.extent)
    return scene


def _student_view(config: RunConfig, scene: Scene, index: int) -> Scene:
    if config.sparse_keep < 1.0:
        return sparsify(scene, config.sparse_keep,
                        seed=train_scene_seed(config, index) ^ 0x7A11)
    return scene


def _pseudo_targets(teacher: SetDetector, config: RunConfig, scene: Scene) -> list[LabeledBox]:
    dets = top_k(teacher.detections(teacher.forward(scene.cloud)), config.top_k)
    boxes = []
    for d in dets:
        if d.noobj_prob < config.pseudo_floor:
            boxes.append(LabeledBox(d.center.copy(), d.size.copy(), d.yaw,
                                    d.velocity.copy(), d.class_id))
    return boxes[:config.m_queries]


def distill(config: RunConfig, scenes: tuple[list[Scene], list[Scene]] | None = None) -> RunReport:
    """Teacher-supervised training; the teacher's parameters stay frozen.

    Modes: ``set``/``self`` match teacher and student output sets and add the
    matched imitation loss; ``feature`` adds an L2 penalty between BEV feature
    maps (with a learned channel projection if widths differ); ``pseudo``
    replaces ground truth with filtered teacher detections on a fraction of
    scenes. ``dense_factor``/``sparse_keep`` give the teacher denser input than
    the student in any mode.
    """
    if config.distill_mode == "none":
        raise ValueError("distill requires distill_mode != none")
    if config.head != "set":
        raise ValueError("distillation is defined for the set head")
    t0 = time.perf_counter()
    train_set, eval_set = scenes if scenes is not None else build_datasets(config)
    teacher = _load_teacher(config)
    model = build_model(config)
    if config.distill_mode == "feature":
        c_t = teacher.config.conv_channels[-1]
        c_s = model.config.conv_channels[-1]
        if c_t != c_s:
            rng = np.random.Generator(np.random.PCG64(config.seed + 1))
            from .bev import xavier
            model.registry.register("feature.proj", Tensor(xavier(rng, c_t, c_s)))
    steps = max(1, config.epochs * math.ceil(len(train_set) / config.batch_size))
    opt = AdamW(model.registry, total_steps=steps, lr0=config.lr0,
                lr_peak=config.lr_peak, lr_end=config.lr_end)

    # teacher outputs are constant: compute once per scene
    teacher_cache: dict[int, tuple] = {}
    pseudo_cache: dict[int, list[LabeledBox]] = {}

    def teacher_outputs(i: int):
        if i not in teacher_cache:
            view = _teacher_view(config, train_set[i], i)
            out = teacher.forward(view.cloud)
            if config.distill_mode == "feature":
                teacher_cache[i] = (out.feature_map.data.value(),)
            else:
                teacher_cache[i] = (out.probs.value(), out.encodings.value())
        return teacher_cache[i]

    def use_pseudo(i: int) -> bool:
        if config.pseudo_fraction <= 0:
            return False
        return i % max(1, round(1.0 / config.pseudo_fraction)) == 0

    def warm_caches(i: int) -> None:
        # teacher forwards run outside the student tape
        if config.distill_mode == "pseudo":
            if use_pseudo(i) and i not in pseudo_cache:
                pseudo_cache[i] = _pseudo_targets(teacher, config,
                                                  _teacher_view(config, train_set[i], i))
        else:
            teacher_outputs(i)

    def scene_loss(i: int) -> Tensor:
        scene = train_set[i]
        student_scene = _student_view(config, scene, i)
        if config.distill_mode == "pseudo":
            boxes = pseudo_cache[i] if use_pseudo(i) else scene.boxes
            out = model.forward(student_scene.cloud)
            targets = pad_targets(boxes, config.m_queries, config.n_classes)
            sigma = hungarian(match_cost(targets, out.probs.data, out.encodings.data))
            return set_loss(targets, out.probs, out.encodings, sigma)
        out = model.forward(student_scene.cloud)
        targets = pad_targets(scene.boxes, config.m_queries, config.n_classes)
        sigma = hungarian(match_cost(targets, out.probs.data, out.encodings.data))
        sup = set_loss(targets, out.probs, out.encodings, sigma)
        if config.distill_mode == "feature":
            (fmap_t,) = teacher_outputs(i)
            h, w, c_t = fmap_t.shape
            ft = Tensor(fmap_t.reshape(h * w, c_t))
            if "feature.proj" in model.registry:
                ft = ad.matmul(ft, model.registry["feature.proj"])
            fs = ad.reshape(out.feature_map.data, (h * w, model.config.conv_channels[-1]))
            diff = ad.sub(fs, ft)
            dloss = ad.scale(ad.sum_all(ad.mul(diff, diff)),
                             config.feature_weight / (h * w))
        else:
            t_probs, t_enc = teacher_outputs(i)
            sigma_d = distill_match(t_probs, t_enc, out.probs.data, out.encodings.data)
            dloss = distill_loss(t_probs, t_enc, out.probs, out.encodings, sigma_d,
                                 mask_empty=config.distill_mask_empty)
        return combined_loss(sup, dloss, config.alpha, config.beta)

    loss_curve: list[float] = []
    for _epoch in range(config.epochs):
        for batch in _batches(len(train_set), config.batch_size):
            model.registry.zero_grads()
            batch_loss = 0.0
            for i in batch:
                warm_caches(i)
                with Tape() as tape:
                    loss = ad.scale(scene_loss(i), 1.0 / len(batch))
                ad.backward(tape, loss)
                batch_loss += loss.item()
            if not math.isfinite(batch_loss):
                raise RuntimeError(
                    f"non-finite loss at step {opt.t} (lr {opt.current_lr():.3e})")
            opt.step()
            loss_curve.append(batch_loss)
    view = (lambda s, i: _student_view(config, s, i)) if config.sparse_keep < 1.0 else None
    no_nms = evaluate_model(model, config, eval_set, use_nms=False, student_view=view)
    with_nms = evaluate_model(model, config, eval_set, use_nms=True, student_view=view)
    return _write_outputs(config, model, no_nms, with_nms, loss_curve,
                          time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# evaluation of an existing checkpoint, ablations
# ---------------------------------------------------------------------------


def evaluate(config: RunConfig, checkpoint_path: str) -> RunReport:
    t0 = time.perf_counter()
    _, eval_set = build_datasets(replace(config, train_scenes=0))
    model = build_model(config)
    load_into_registry(checkpoint_path, model.registry)
    no_nms = evaluate_model(model, config, eval_set, use_nms=False)
    with_nms = evaluate_model(model, config, eval_set, use_nms=True)
    return _write_outputs(config, model, no_nms, with_nms, [],
                          time.perf_counter() - t0)


SWEEPS = ("neighbors", "layers", "interaction")


def ablate(config: RunConfig, sweep: str, values: list) -> list[tuple[object, RunReport]]:
    """Train one model per sweep value (shared seed) and emit a CSV table."""
    if sweep not in SWEEPS:
        raise ValueError(f"sweep must be one of {SWEEPS}, got {sweep!r}")
    if not values:
        raise ValueError("empty sweep")
    rows = []
    base_out = Path(config.out_dir)
    for v in values:
        if sweep == "interaction":
            sub = replace(config, interaction=str(v))
        else:
            sub = replace(config, **{sweep: int(v)})
        sub = replace(sub, out_dir=str(base_out / f"{sweep}_{v}"))
        rows.append((v, train(sub)))
    base_out.mkdir(parents=True, exist_ok=True)
    with open(base_out / "ablation.csv", "w", encoding="utf-8") as fh:
        fh.write(f"{sweep},NDS,mAP,n_parameters\n")
        for v, rep in rows:
            fh.write(f"{v},{rep.no_nms.nds_score:.6f},{rep.no_nms.map_score:.6f},"
                     f"{_n_params(rep)}\n")
    return rows


def _n_params(report: RunReport) -> int:
    text = (Path(report.out_dir) / "report.txt").read_text(encoding="utf-8")
    for line in text.splitlines():
        if line.startswith("n_parameters="):
            return int(line.split("=", 1)[1])
    return -1
