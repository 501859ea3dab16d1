"""Query-based set detector: per-layer query decoding, bilinear BEV sampling,
attention-weighted aggregation, and dynamic-graph edge convolution (with a
multi-head self-attention alternative for ablations), ending in class and box
heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamRegistry, Tensor
from .bev import (BevGrid, GridSpec, PointCloud, conv_backbone, featurize,
                  init_backbone, init_pointnet, xavier)
from .boxes import Detection, decode_box10

INTERACTIONS = ("dgcnn", "attention")


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 3
    m_queries: int = 32
    q_dim: int = 64
    n_layers: int = 2
    k_neighbors: int = 16
    k_offsets: int = 4
    interaction: str = "dgcnn"
    edge_repeats: int = 2
    edge_hidden: int = 64
    attn_heads: int = 4
    edge_plain_concat: bool = False  # concat(f_i, f_j) instead of concat(f_i, f_j - f_i)
    pointnet_hidden: int = 32
    pillar_channels: int = 16
    conv_channels: tuple[int, ...] = (16, 32, 32)
    head_hidden: int = 64

    def __post_init__(self):
        if self.interaction not in INTERACTIONS:
            raise ValueError(f"interaction must be one of {INTERACTIONS}")
        if not 1 <= self.k_neighbors <= self.m_queries:
            raise ValueError(
                f"k_neighbors {self.k_neighbors} outside [1, {self.m_queries}]")
        if self.q_dim % self.attn_heads:
            raise ValueError(
                f"q_dim {self.q_dim} not divisible by {self.attn_heads} heads")


@dataclass
class QueryDecode:
    """Per-query reference points (m), offsets (m), and attention logits."""

    ref_points: Tensor    # (M, 2) meters, inside the BEV extent
    offsets: Tensor       # (M, K, 2) meters
    weight_logits: Tensor  # (M, K)


@dataclass
class SetOutputs:
    probs: Tensor      # (M, C+1) class probabilities, last = no-object
    encodings: Tensor  # (M, 10) regression encoding
    feature_map: BevGrid


def init_linear(registry: ParamRegistry, rng, name: str, n_in: int, n_out: int,
                zero: bool = False) -> None:
    w = np.zeros((n_in, n_out)) if zero else xavier(rng, n_in, n_out)
    registry.register(f"{name}.w", Tensor(w))
    registry.register(f"{name}.b", Tensor(np.zeros(n_out)))


def apply_linear(x: Tensor, registry: ParamRegistry, name: str) -> Tensor:
    return ad.linear(x, registry[f"{name}.w"], registry[f"{name}.b"])


def decode_query(queries: Tensor, spec: GridSpec, registry: ParamRegistry,
                 prefix: str) -> QueryDecode:
    """Reference point via sigmoid scaled to the grid extent; raw offsets and logits."""
    m = queries.shape[0]
    k = registry[f"{prefix}.att.w"].shape[1]
    sig = ad.sigmoid(apply_linear(queries, registry, f"{prefix}.ref"))
    span = Tensor(np.diag([spec.x_max - spec.x_min, spec.y_max - spec.y_min]))
    low = Tensor(np.array([spec.x_min, spec.y_min]))
    ref = ad.add(ad.matmul(sig, span), low)
    offsets = ad.reshape(apply_linear(queries, registry, f"{prefix}.nbr"), (m, k, 2))
    logits = apply_linear(queries, registry, f"{prefix}.att")
    return QueryDecode(ref, offsets, logits)


def bilinear_sample(grid: BevGrid, points_m: Tensor) -> Tensor:
    """Sample (N, 2) BEV points given in meters; differentiable in both inputs."""
    spec = grid.spec
    to_cell = Tensor(np.diag([1.0 / spec.cell, 1.0 / spec.cell]))
    shift = Tensor(np.array([-spec.x_min / spec.cell - 0.5,
                             -spec.y_min / spec.cell - 0.5]))
    return ad.bilinear(grid.data, ad.add(ad.matmul(points_m, to_cell), shift))


def aggregate(features: Tensor, weight_logits: Tensor) -> Tensor:
    """Softmax the logits and take the weighted sum of the (M, K, C) features."""
    if features.shape[:2] != weight_logits.shape:
        raise ValueError(
            f"feature/logit mismatch: {features.shape} vs {weight_logits.shape}")
    m, k = weight_logits.shape
    w = ad.reshape(ad.softmax_lastaxis(weight_logits), (m, k, 1))
    return ad.sum_axis(ad.mul(w, features), axis=1)


def knn_graph(features: np.ndarray, k: int) -> np.ndarray:
    """(M, k) neighbor lists: self first, then by ascending (distance, index)."""
    m = len(features)
    if not 1 <= k <= m:
        raise ValueError(f"k {k} outside [1, {m}]")
    d2 = np.sum((features[:, None, :] - features[None, :, :]) ** 2, axis=2)
    graph = np.empty((m, k), dtype=np.int64)
    for i in range(m):
        order = np.lexsort((np.arange(m), d2[i]))
        others = order[order != i][:k - 1]
        graph[i, 0] = i
        graph[i, 1:] = others
    return graph


def edge_conv(features: Tensor, graph: np.ndarray, registry: ParamRegistry,
              prefix: str, plain_concat: bool = False) -> Tensor:
    """Two-layer edge MLP on (f_i, f_j - f_i), channel-wise max over each
    vertex's edges."""
    m, k = graph.shape
    out_dim = registry[f"{prefix}.l2.w"].shape[1]
    fi = ad.gather_rows(features, np.repeat(np.arange(m), k))
    fj = ad.gather_rows(features, graph.reshape(-1))
    pair = fj if plain_concat else ad.sub(fj, fi)
    h = ad.relu(apply_linear(ad.concat_lastaxis(fi, pair), registry, f"{prefix}.l1"))
    e = apply_linear(h, registry, f"{prefix}.l2")
    stacked = ad.permute(ad.reshape(e, (m, k, out_dim)), (0, 2, 1))
    pooled, _ = ad.max_lastaxis(stacked)
    return pooled


def self_attention_alt(features: Tensor, registry: ParamRegistry, prefix: str,
                       n_heads: int) -> Tensor:
    """Standard multi-head softmax attention over all queries."""
    m, d = features.shape
    if d % n_heads:
        raise ValueError(f"feature dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    q = apply_linear(features, registry, f"{prefix}.q")
    k = apply_linear(features, registry, f"{prefix}.k")
    v = apply_linear(features, registry, f"{prefix}.v")

    def head(x: Tensor, h: int) -> Tensor:
        per = ad.permute(ad.reshape(x, (m, n_heads, dh)), (1, 0, 2))
        return ad.reshape(ad.gather_rows(per, np.array([h])), (m, dh))

    outs = None
    for h in range(n_heads):
        qh, kh, vh = head(q, h), head(k, h), head(v, h)
        attn = ad.softmax_lastaxis(ad.scale(ad.matmul(qh, ad.permute(kh, (1, 0))),
                                            1.0 / np.sqrt(dh)))
        oh = ad.matmul(attn, vh)
        outs = oh if outs is None else ad.concat_lastaxis(outs, oh)
    return apply_linear(outs, registry, f"{prefix}.o")


class SetDetector:
    """Full pipeline from a point cloud to a set of detections."""

    def __init__(self, config: ModelConfig, grid: GridSpec, seed: int = 0,
                 registry: ParamRegistry | None = None):
        self.config = config
        self.grid = grid
        self.out_spec = grid.downsampled(2)
        if registry is None:
            registry = ParamRegistry()
            self._init_params(registry, np.random.Generator(np.random.PCG64(seed)))
        self.registry = registry

    def _init_params(self, reg: ParamRegistry, rng: np.random.Generator) -> None:
        cfg = self.config
        init_pointnet(reg, rng, "pointnet", cfg.pointnet_hidden, cfg.pillar_channels)
        init_backbone(reg, rng, "backbone", cfg.pillar_channels, cfg.conv_channels)
        reg.register("queries.q0",
                     Tensor(rng.normal(0.0, 0.5, size=(cfg.m_queries, cfg.q_dim))))
        c_d = cfg.conv_channels[-1]
        for layer in range(cfg.n_layers):
            p = f"dgcnn.layer{layer}"
            init_linear(reg, rng, f"{p}.ref", cfg.q_dim, 2)
            init_linear(reg, rng, f"{p}.nbr", cfg.q_dim, 2 * cfg.k_offsets)
            init_linear(reg, rng, f"{p}.att", cfg.q_dim, cfg.k_offsets)
            if cfg.interaction == "dgcnn":
                dims_in = [c_d] + [cfg.q_dim] * (cfg.edge_repeats - 1)
                for r, d_in in enumerate(dims_in):
                    init_linear(reg, rng, f"{p}.edge{r}.l1", 2 * d_in, cfg.edge_hidden)
                    init_linear(reg, rng, f"{p}.edge{r}.l2", cfg.edge_hidden, cfg.q_dim)
            else:
                init_linear(reg, rng, f"{p}.attn.in", c_d, cfg.q_dim)
                for part in ("q", "k", "v", "o"):
                    init_linear(reg, rng, f"{p}.attn.{part}", cfg.q_dim, cfg.q_dim)
        init_linear(reg, rng, "head.cls.l1", cfg.q_dim, cfg.head_hidden)
        init_linear(reg, rng, "head.cls.l2", cfg.head_hidden, cfg.n_classes + 1)
        init_linear(reg, rng, "head.box.l1", cfg.q_dim, cfg.head_hidden)
        init_linear(reg, rng, "head.box.l2", cfg.head_hidden, 10)

    def feature_map(self, cloud: PointCloud) -> BevGrid:
        pillar_map = featurize(cloud, self.grid, self.registry, "pointnet")
        return conv_backbone(pillar_map, self.registry, "backbone",
                             n_blocks=len(self.config.conv_channels))

    def layer_forward(self, queries: Tensor, fmap: BevGrid, layer: int) -> tuple[Tensor, QueryDecode]:
        cfg = self.config
        prefix = f"dgcnn.layer{layer}"
        decode = decode_query(queries, self.grid, self.registry, prefix)
        m, k = cfg.m_queries, cfg.k_offsets
        ref_rep = ad.gather_rows(decode.ref_points, np.repeat(np.arange(m), k))
        pts = ad.add(ref_rep, ad.reshape(decode.offsets, (m * k, 2)))
        sampled = ad.reshape(bilinear_sample(fmap, pts), (m, k, fmap.channels))
        f_o = aggregate(sampled, decode.weight_logits)
        x = f_o
        if cfg.interaction == "dgcnn":
            for r in range(cfg.edge_repeats):
                graph = knn_graph(x.value(), cfg.k_neighbors)
                x = edge_conv(x, graph, self.registry, f"{prefix}.edge{r}",
                              plain_concat=cfg.edge_plain_concat)
        else:
            x = self_attention_alt(apply_linear(x, self.registry, f"{prefix}.attn.in"),
                                   self.registry, f"{prefix}.attn", cfg.attn_heads)
        return ad.add(queries, x), decode

    def predict_heads(self, queries: Tensor, decode: QueryDecode) -> tuple[Tensor, Tensor]:
        reg = self.registry
        h_cls = ad.relu(apply_linear(queries, reg, "head.cls.l1"))
        probs = ad.softmax_lastaxis(apply_linear(h_cls, reg, "head.cls.l2"))
        h_box = ad.relu(apply_linear(queries, reg, "head.box.l1"))
        raw = apply_linear(h_box, reg, "head.box.l2")
        pad = ad.concat_lastaxis(decode.ref_points,
                                 Tensor(np.zeros((self.config.m_queries, 8))))
        return probs, ad.add(raw, pad)

    def forward(self, cloud: PointCloud) -> SetOutputs:
        fmap = self.feature_map(cloud)
        queries = self.registry["queries.q0"]
        decode = None
        for layer in range(self.config.n_layers):
            queries, decode = self.layer_forward(queries, fmap, layer)
        probs, enc = self.predict_heads(queries, decode)
        return SetOutputs(probs, enc, fmap)

    def detections(self, outputs: SetOutputs) -> list[Detection]:
        probs = outputs.probs.value()
        enc = outputs.encodings.value()
        dets = []
        for i in range(self.config.m_queries):
            center, size, yaw, vel = decode_box10(enc[i])
            dets.append(Detection(probs[i], center, size, yaw, vel))
        return dets
