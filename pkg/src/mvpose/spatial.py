"""Spatial encoder: patch embedding, windowed transformer stages with patch
merging, optional attention-score pruning, and pooling of one image into a
single frame token.

Stage grids that are not divisible by the window (or by 2 at a merge) are
zero-padded at the bottom/right; padded cells are masked out of attention and
excluded from pooling, so they never influence real tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .attention import SwinBlockPair
from .numerics import ContractError, ShapeError, Tensor


@dataclass(frozen=True)
class SpatialConfig:
    image_size: tuple[int, int] = (64, 64)
    channels: int = 3
    patch_size: int = 4
    stage_depths: tuple[int, ...] = (2, 2)
    stage_dims: tuple[int, ...] = (32, 64)
    stage_heads: tuple[int, ...] = (2, 4)
    window: int = 4
    prune_keep_ratio: float = 1.0
    out_dim: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        h, w = self.image_size
        p = self.patch_size
        if h % p or w % p:
            raise ContractError(f"image {h}x{w} not divisible by patch {p}")
        if len(self.stage_depths) != len(self.stage_dims) or \
                len(self.stage_dims) != len(self.stage_heads):
            raise ContractError("stage_depths, stage_dims, stage_heads lengths differ")
        for a, b in zip(self.stage_dims, self.stage_dims[1:]):
            if b != 2 * a:
                raise ContractError(f"stage dims must double per merge, got {self.stage_dims}")
        if not (0.0 < self.prune_keep_ratio <= 1.0):
            raise ContractError(f"prune_keep_ratio {self.prune_keep_ratio} outside (0, 1]")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch_size,
                self.image_size[1] // self.patch_size)


def patch_embed(image: Tensor, patch: int, w: Tensor, b: Tensor) -> Tensor:
    """Flatten non-overlapping p x p x ch patches and project: (B, N, dim)."""
    squeeze = image.data.ndim == 3
    if squeeze:
        image = nm.reshape(image, (1,) + image.shape)
    bsz, h, wid, ch = image.shape
    if h % patch or wid % patch:
        raise ContractError(f"image {h}x{wid} not divisible by patch {patch}")
    gh, gw = h // patch, wid // patch
    x = nm.reshape(image, (bsz, gh, patch, gw, patch, ch))
    x = nm.transpose(x, (0, 1, 3, 2, 4, 5))
    x = nm.reshape(x, (bsz, gh * gw, patch * patch * ch))
    x = nm.add(nm.matmul(x, w), b)
    if squeeze:
        x = nm.reshape(x, x.shape[1:])
    return x


def patch_merge(tokens: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Concatenate each 2x2 token neighborhood (4C) and project to 2C.

    tokens: (B, g, g, C) or (g, g, C) with even grid extents.
    """
    squeeze = tokens.data.ndim == 3
    if squeeze:
        tokens = nm.reshape(tokens, (1,) + tokens.shape)
    bsz, gh, gw, c = tokens.shape
    if gh % 2 or gw % 2:
        raise ContractError(f"patch_merge needs even grid, got {gh}x{gw}")
    x = nm.reshape(tokens, (bsz, gh // 2, 2, gw // 2, 2, c))
    x = nm.transpose(x, (0, 1, 3, 2, 4, 5))
    x = nm.reshape(x, (bsz, gh // 2, gw // 2, 4 * c))
    x = nm.add(nm.matmul(x, w), b)
    if squeeze:
        x = nm.reshape(x, x.shape[1:])
    return x


def patch_prune(tokens: Tensor, attention_received: np.ndarray, keep_ratio: float,
                num_valid: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Keep the ceil(rho * N) highest-scoring tokens per image.

    tokens: (B, N, C); attention_received: (B, N). Ties break toward the lower
    index. Returns the kept tokens and the (B, K) kept-index array in
    ascending index order.
    """
    if keep_ratio <= 0.0 or keep_ratio > 1.0:
        raise ContractError(f"keep_ratio {keep_ratio} outside (0, 1]")
    if tokens.data.ndim != 3:
        raise ShapeError(f"patch_prune expects (B, N, C), got {tokens.shape}")
    bsz, n, _ = tokens.shape
    if attention_received.shape != (bsz, n):
        raise ShapeError(
            f"scores {attention_received.shape} vs tokens {tokens.shape}")
    base = n if num_valid is None else num_valid
    k = math.ceil(keep_ratio * base)
    order = np.argsort(-attention_received, axis=1, kind="stable")[:, :k]
    idx = np.sort(order, axis=1)
    return nm.gather_tokens(tokens, idx), idx


def attention_received(weights: np.ndarray, window: int, grid_h: int, grid_w: int,
                       shift: int) -> np.ndarray:
    """Mean attention received per token: column-mean of post-softmax weights,
    averaged over heads, mapped back from (shifted) windows to grid order.

    weights: (B, nw, h, M*M, M*M) -> (B, grid_h * grid_w).
    """
    col = weights.mean(axis=-2).mean(axis=2)  # (B, nw, M*M)
    bsz = col.shape[0]
    m = window
    x = col.reshape(bsz, grid_h // m, grid_w // m, m, m)
    x = x.transpose(0, 1, 3, 2, 4).reshape(bsz, grid_h, grid_w)
    if shift:
        x = np.roll(x, (shift, shift), axis=(1, 2))
    return x.reshape(bsz, grid_h * grid_w)


def _pad_amount(extent: int, multiple: int) -> int:
    return (-extent) % multiple


class SpatialEncoder:
    """Image -> frame token. Weights shared across all frames and views."""

    def __init__(self, cfg: SpatialConfig, rng: np.random.Generator,
                 dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        p = cfg.patch_size
        in_dim = p * p * cfg.channels
        self.embed_w = nm.param_normal(rng, (in_dim, cfg.stage_dims[0]), 0.02,
                                       "spatial.embed.w", dtype)
        self.embed_b = nm.param_zeros((cfg.stage_dims[0],), "spatial.embed.b", dtype)
        self.stages: list[list[SwinBlockPair]] = []
        self.merge_w: list[Tensor] = []
        self.merge_b: list[Tensor] = []
        for i, (depth, dim, heads) in enumerate(
                zip(cfg.stage_depths, cfg.stage_dims, cfg.stage_heads)):
            blocks = [SwinBlockPair(dim, heads, cfg.window, rng,
                                    f"spatial.stage{i}.pair{j}",
                                    mlp_ratio=cfg.mlp_ratio, dtype=dtype)
                      for j in range(depth)]
            self.stages.append(blocks)
            if i + 1 < len(cfg.stage_dims):
                self.merge_w.append(nm.param_normal(
                    rng, (4 * dim, 2 * dim), 0.02, f"spatial.merge{i}.w", dtype))
                self.merge_b.append(nm.param_zeros(
                    (2 * dim,), f"spatial.merge{i}.b", dtype))
        self.agg_w = nm.param_normal(rng, (cfg.stage_dims[-1], cfg.out_dim), 0.02,
                                     "spatial.agg.w", dtype)
        self.agg_b = nm.param_zeros((cfg.out_dim,), "spatial.agg.b", dtype)

    def params(self) -> list[Tensor]:
        out = [self.embed_w, self.embed_b]
        for i, blocks in enumerate(self.stages):
            for blk in blocks:
                out.extend(blk.params())
            if i < len(self.merge_w):
                out.extend([self.merge_w[i], self.merge_b[i]])
        out.extend([self.agg_w, self.agg_b])
        return out

    def forward(self, images) -> Tensor:
        """images: (B, H, W, ch) array or Tensor -> frame tokens (B, D).

        A single (H, W, ch) image yields a (D,) token.
        """
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        squeeze = images.data.ndim == 3
        if squeeze:
            images = nm.reshape(images, (1,) + images.shape)
        cfg = self.cfg
        bsz = images.shape[0]
        x = patch_embed(images, cfg.patch_size, self.embed_w, self.embed_b)
        gh, gw = cfg.grid
        x = nm.reshape(x, (bsz, gh, gw, cfg.stage_dims[0]))
        valid: np.ndarray | None = None

        rho = cfg.prune_keep_ratio
        sink: list | None = [] if rho < 1.0 else None
        last_stage = len(self.stages) - 1
        shift = cfg.window // 2
        for i, blocks in enumerate(self.stages):
            x, gh, gw, valid = self._pad_for_window(x, gh, gw, valid)
            for j, blk in enumerate(blocks):
                collect = sink if (i == last_stage and j == len(blocks) - 1) else None
                x = blk(x, valid=valid, weights_out=collect)
            if i < len(self.merge_w):
                x, gh, gw, valid = self._pad_for_merge(x, gh, gw, valid)
                x = patch_merge(x, self.merge_w[i], self.merge_b[i])
                gh, gw = gh // 2, gw // 2
                if valid is not None:
                    coarse = valid.reshape(gh, 2, gw, 2).any(axis=(1, 3))
                    valid = None if coarse.all() else coarse

        n = gh * gw
        flat = nm.reshape(x, (bsz, n, cfg.stage_dims[-1]))
        if rho < 1.0:
            scores = attention_received(sink[-1], cfg.window, gh, gw, shift)
            if valid is not None:
                scores = np.where(valid.reshape(1, -1), scores, -np.inf)
                kept, _ = patch_prune(flat, scores, rho, num_valid=int(valid.sum()))
            else:
                kept, _ = patch_prune(flat, scores, rho)
            pooled = nm.tmean(kept, axis=1)
        elif valid is not None:
            mask = np.broadcast_to(
                valid.reshape(1, n, 1), (bsz, n, cfg.stage_dims[-1])
            ).astype(self.dtype)
            pooled = nm.scale(nm.tsum(nm.mul(flat, Tensor(mask)), axis=1),
                              1.0 / float(valid.sum()))
        else:
            pooled = nm.tmean(flat, axis=1)
        out = nm.add(nm.matmul(pooled, self.agg_w), self.agg_b)
        if squeeze:
            out = nm.reshape(out, (cfg.out_dim,))
        return out

    def _pad_for_window(self, x, gh, gw, valid):
        ph = _pad_amount(gh, self.cfg.window)
        pw = _pad_amount(gw, self.cfg.window)
        if ph == 0 and pw == 0:
            return x, gh, gw, valid
        x = nm.pad_grid(x, ph, pw)
        new_valid = np.zeros((gh + ph, gw + pw), dtype=bool)
        new_valid[:gh, :gw] = True if valid is None else valid
        return x, gh + ph, gw + pw, new_valid

    def _pad_for_merge(self, x, gh, gw, valid):
        ph, pw = gh % 2, gw % 2
        if ph == 0 and pw == 0:
            return x, gh, gw, valid
        x = nm.pad_grid(x, ph, pw)
        new_valid = np.zeros((gh + ph, gw + pw), dtype=bool)
        new_valid[:gh, :gw] = True if valid is None else valid
        return x, gh + ph, gw + pw, new_valid
