"""Relations over frame tokens: temporal attention per view with a learned
frame-position table, multi-view attention per frame with a learned view
table, and the coordinate regression head. Also hosts the full network that
chains the spatial encoder through these stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .attention import AttentionConfig, LayerNorm, Mlp, MultiHeadAttention
from .numerics import ContractError, ShapeError, Tensor
from .spatial import SpatialConfig, SpatialEncoder


@dataclass(frozen=True)
class RelationConfig:
    token_dim: int = 64
    layers: int = 2
    heads: int = 4
    num_views: int = 4
    num_joints: int = 17
    max_frames: int = 128
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.token_dim % self.heads:
            raise ContractError(
                f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.num_views < 2:
            raise ContractError(f"num_views must be >= 2, got {self.num_views}")
        if self.num_joints < 1:
            raise ContractError(f"num_joints must be >= 1, got {self.num_joints}")
        if self.max_frames < 1:
            raise ContractError(f"max_frames must be >= 1, got {self.max_frames}")


class TransformerEncoder:
    """Pre-norm global-attention stack with a final LN:
    x' = MSA(LN(x)) + x;  x = MLP(LN(x')) + x';  ...;  out = LN(x_L).
    """

    def __init__(self, dim: int, layers: int, heads: int, rng: np.random.Generator,
                 name: str, mlp_ratio: int = 4, dtype=np.float64):
        cfg = AttentionConfig(dim, heads)
        self.layers = []
        for i in range(layers):
            self.layers.append((
                LayerNorm(dim, f"{name}.layer{i}.norm1", dtype),
                MultiHeadAttention(cfg, rng, f"{name}.layer{i}.attn", dtype),
                LayerNorm(dim, f"{name}.layer{i}.norm2", dtype),
                Mlp(dim, mlp_ratio, rng, f"{name}.layer{i}.mlp", dtype),
            ))
        self.final_norm = LayerNorm(dim, f"{name}.final_norm", dtype)

    def __call__(self, x: Tensor, weights_out: list | None = None) -> Tensor:
        for norm1, attn, norm2, mlp in self.layers:
            x = nm.add(x, attn(norm1(x), weights_out=weights_out))
            x = nm.add(x, mlp(norm2(x)))
        return self.final_norm(x)

    def params(self) -> list[Tensor]:
        out = []
        for parts in self.layers:
            for part in parts:
                out.extend(part.params())
        out.extend(self.final_norm.params())
        return out


class RelationModule:
    """Temporal then multi-view attention over (frame, view) tokens."""

    def __init__(self, cfg: RelationConfig, rng: np.random.Generator,
                 dtype=np.float64):
        self.cfg = cfg
        d = cfg.token_dim
        self.e_time = nm.param_normal(rng, (cfg.max_frames, d), 0.02,
                                      "relation.time.E", dtype)
        self.e_view = nm.param_normal(rng, (cfg.num_views, d), 0.02,
                                      "relation.view.E", dtype)
        self.time_encoder = TransformerEncoder(d, cfg.layers, cfg.heads, rng,
                                               "relation.time", cfg.mlp_ratio, dtype)
        self.view_encoder = TransformerEncoder(d, cfg.layers, cfg.heads, rng,
                                               "relation.view", cfg.mlp_ratio, dtype)

    def temporal_encode(self, tokens: Tensor) -> Tensor:
        """tokens: (f, D) for one view or (V, f, D) batched over views."""
        f = tokens.shape[-2]
        if f > self.cfg.max_frames:
            raise ContractError(f"{f} frames exceed max_frames {self.cfg.max_frames}")
        e = nm.take_rows(self.e_time, np.arange(f))
        if tokens.data.ndim == 3:
            e = nm.broadcast_to(e, tokens.shape)
        return self.time_encoder(nm.add(tokens, e))

    def view_encode(self, tokens: Tensor) -> Tensor:
        """tokens: (V, D) for one frame or (f, V, D) batched over frames,
        one token per camera in fixed camera-id order."""
        v = tokens.shape[-2]
        if v != self.cfg.num_views:
            raise ContractError(f"got {v} view tokens, config has {self.cfg.num_views}")
        e = self.e_view
        if tokens.data.ndim == 3:
            e = nm.broadcast_to(e, tokens.shape)
        return self.view_encoder(nm.add(tokens, e))

    def params(self) -> list[Tensor]:
        return ([self.e_time, self.e_view] + self.time_encoder.params()
                + self.view_encoder.params())


class RegressionHead:
    """Shared linear map D -> 2J per token, squashed into [0, 1] coordinates."""

    def __init__(self, dim: int, num_joints: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.num_joints = num_joints
        self.w = nm.param_normal(rng, (dim, 2 * num_joints), 0.02, "head.w", dtype)
        self.b = nm.param_zeros((2 * num_joints,), "head.b", dtype)

    def __call__(self, tokens: Tensor) -> Tensor:
        """(..., D) -> (..., J, 2)."""
        out = nm.sigmoid(nm.add(nm.matmul(tokens, self.w), self.b))
        return nm.reshape(out, out.shape[:-1] + (self.num_joints, 2))

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class PoseNet:
    """Full network: per-image spatial encoding, temporal relations per view,
    view relations per frame, coordinate regression per (frame, view)."""

    def __init__(self, spatial_cfg: SpatialConfig, relation_cfg: RelationConfig,
                 rng: np.random.Generator, dtype=np.float64,
                 ablate_relations: bool = False):
        if spatial_cfg.out_dim != relation_cfg.token_dim:
            raise ContractError(
                f"spatial out_dim {spatial_cfg.out_dim} != relation token_dim "
                f"{relation_cfg.token_dim}")
        self.spatial_cfg = spatial_cfg
        self.relation_cfg = relation_cfg
        self.dtype = dtype
        self.ablate_relations = ablate_relations
        self.spatial = SpatialEncoder(spatial_cfg, rng, dtype)
        self.relation = None if ablate_relations else RelationModule(
            relation_cfg, rng, dtype)
        self.head = RegressionHead(relation_cfg.token_dim, relation_cfg.num_joints,
                                   rng, dtype)

    def forward(self, images) -> Tensor:
        """images: (f, V, H, W, ch) -> predicted 2D poses (f, V, J, 2)."""
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim != 5:
            raise ShapeError(f"expected (f, V, H, W, ch) images, got {images.shape}")
        f, v = images.shape[:2]
        if v != self.relation_cfg.num_views:
            raise ContractError(
                f"{v} views in input, config has {self.relation_cfg.num_views}")
        tokens = self.spatial.forward(images.reshape((f * v,) + images.shape[2:]))
        tokens = nm.reshape(tokens, (f, v, self.relation_cfg.token_dim))
        if self.relation is not None:
            t = nm.transpose(tokens, (1, 0, 2))       # (V, f, D)
            t = self.relation.temporal_encode(t)
            t = nm.transpose(t, (1, 0, 2))            # (f, V, D)
            tokens = self.relation.view_encode(t)
        return self.head(tokens)

    def loss(self, images, gt2d: np.ndarray) -> Tensor:
        """Mean squared error over all (frame, view, joint) coordinates."""
        pred = self.forward(images)
        gt = np.asarray(gt2d, dtype=self.dtype)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        return nm.tmean(nm.square(nm.add_const(pred, -gt)))

    def params(self) -> list[Tensor]:
        out = list(self.spatial.params())
        if self.relation is not None:
            out.extend(self.relation.params())
        out.extend(self.head.params())
        return out

    def param_dict(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.params()}
