"""Scaled dot-product attention, multi-head attention, and the windowed /
shifted-window variants with their region masking.

Token grids are (B, grid_h, grid_w, C); window partitioning rearranges them
to (B, num_windows, M*M, C) losslessly. Shifted-window masking is additive:
pairs whose origins are discontiguous after the cyclic shift get -1e9 before
the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nm
from .numerics import ContractError, ShapeError, Tensor

NEG_LARGE = -1e9
LN_EPS = 1e-5


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    num_heads: int

    def __post_init__(self):
        if self.embed_dim <= 0 or self.num_heads <= 0:
            raise ContractError(f"non-positive attention config: {self}")
        if self.embed_dim % self.num_heads != 0:
            raise ContractError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass(frozen=True)
class WindowSpec:
    grid_h: int
    grid_w: int
    window: int
    shift: int = 0

    def __post_init__(self):
        m = self.window
        if m <= 0:
            raise ContractError(f"window must be positive, got {m}")
        if self.grid_h % m or self.grid_w % m:
            raise ContractError(
                f"grid {self.grid_h}x{self.grid_w} not divisible by window {m}")
        if self.shift not in (0, m // 2):
            raise ContractError(f"shift {self.shift} not in {{0, {m // 2}}}")

    @property
    def num_windows(self) -> int:
        return (self.grid_h // self.window) * (self.grid_w // self.window)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: np.ndarray | None = None,
                         weights_out: list | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v over the last two axes.

    q, k, v: (..., n, d) with matching shapes; mask broadcasts against the
    (..., n, n) score array. Post-softmax weights can be captured (detached)
    via weights_out.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention operands disagree: {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[-1]
    if d == 0:
        raise ContractError("attention head dim is zero")
    nd = q.data.ndim
    kt = nm.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = nm.scale(nm.matmul(q, kt), 1.0 / np.sqrt(d))
    if mask is not None:
        scores = nm.add_const(scores, mask)
    weights = nm.softmax(scores)
    if weights_out is not None:
        weights_out.append(weights.data.copy())
    return nm.matmul(weights, v)


class LayerNorm:
    def __init__(self, dim: int, name: str, dtype=np.float64):
        self.gamma = nm.param_ones((dim,), f"{name}.g", dtype)
        self.beta = nm.param_zeros((dim,), f"{name}.b", dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.gamma, self.beta, eps=LN_EPS)

    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta]


class Mlp:
    """Two-layer MLP with gelu, hidden width = ratio x dim."""

    def __init__(self, dim: int, ratio: int, rng: np.random.Generator, name: str,
                 dtype=np.float64):
        hidden = ratio * dim
        self.fc1_w = nm.param_normal(rng, (dim, hidden), 0.02, f"{name}.fc1_w", dtype)
        self.fc1_b = nm.param_zeros((hidden,), f"{name}.fc1_b", dtype)
        self.fc2_w = nm.param_normal(rng, (hidden, dim), 0.02, f"{name}.fc2_w", dtype)
        self.fc2_b = nm.param_zeros((dim,), f"{name}.fc2_b", dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = nm.gelu(nm.add(nm.matmul(x, self.fc1_w), self.fc1_b))
        return nm.add(nm.matmul(h, self.fc2_w), self.fc2_b)

    def params(self) -> list[Tensor]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]


class MultiHeadAttention:
    """Multi-head self-attention: per-layer Q/K/V projections split per head,
    concatenated heads projected by an output matrix.

    Keys carry no bias: a key bias shifts every attention row uniformly and
    cancels in the softmax, so it would be an untrainable dead direction.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, name: str,
                 dtype=np.float64):
        self.cfg = cfg
        c = cfg.embed_dim
        self.w_q = nm.param_normal(rng, (c, c), 0.02, f"{name}.q_w", dtype)
        self.w_k = nm.param_normal(rng, (c, c), 0.02, f"{name}.k_w", dtype)
        self.w_v = nm.param_normal(rng, (c, c), 0.02, f"{name}.v_w", dtype)
        self.b_q = nm.param_zeros((c,), f"{name}.q_b", dtype)
        self.b_v = nm.param_zeros((c,), f"{name}.v_b", dtype)
        self.w_out = nm.param_normal(rng, (c, c), 0.02, f"{name}.out_w", dtype)
        self.b_out = nm.param_zeros((c,), f"{name}.out_b", dtype)

    def _heads(self, t: Tensor, lead: tuple[int, ...], n: int) -> Tensor:
        h, d = self.cfg.num_heads, self.cfg.head_dim
        nl = len(lead)
        t = nm.reshape(t, lead + (n, h, d))
        return nm.transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    def __call__(self, z: Tensor, mask: np.ndarray | None = None,
                 weights_out: list | None = None) -> Tensor:
        c = self.cfg.embed_dim
        if z.shape[-1] != c:
            raise ShapeError(f"token width {z.shape} vs embed_dim {c}")
        n = z.shape[-2]
        lead = z.shape[:-2]
        nl = len(lead)
        q = nm.add(nm.matmul(z, self.w_q), self.b_q)
        k = nm.matmul(z, self.w_k)
        v = nm.add(nm.matmul(z, self.w_v), self.b_v)
        if mask is not None and mask.ndim >= 2:
            mask = mask.reshape(mask.shape[:-2] + (1,) + mask.shape[-2:])
        attn = scaled_dot_attention(self._heads(q, lead, n), self._heads(k, lead, n),
                                    self._heads(v, lead, n), mask=mask,
                                    weights_out=weights_out)
        # (..., h, n, d) -> (..., n, h, d) -> (..., n, C)
        attn = nm.transpose(attn, tuple(range(nl)) + (nl + 1, nl, nl + 2))
        attn = nm.reshape(attn, lead + (n, c))
        return nm.add(nm.matmul(attn, self.w_out), self.b_out)

    def params(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.b_q, self.b_v,
                self.w_out, self.b_out]


def window_partition(tokens: Tensor, window: int) -> Tensor:
    """(B, gh, gw, C) -> (B, nw, M*M, C); also accepts unbatched (gh, gw, C)."""
    squeeze = tokens.data.ndim == 3
    if squeeze:
        tokens = nm.reshape(tokens, (1,) + tokens.shape)
    b, gh, gw, c = tokens.shape
    m = window
    if gh % m or gw % m:
        raise ContractError(f"grid {gh}x{gw} not divisible by window {m}")
    x = nm.reshape(tokens, (b, gh // m, m, gw // m, m, c))
    x = nm.transpose(x, (0, 1, 3, 2, 4, 5))
    x = nm.reshape(x, (b, (gh // m) * (gw // m), m * m, c))
    if squeeze:
        x = nm.reshape(x, x.shape[1:])
    return x


def window_reverse(windows: Tensor, window: int, grid_h: int, grid_w: int) -> Tensor:
    """Inverse of window_partition."""
    squeeze = windows.data.ndim == 3
    if squeeze:
        windows = nm.reshape(windows, (1,) + windows.shape)
    b, nw, mm, c = windows.shape
    m = window
    x = nm.reshape(windows, (b, grid_h // m, grid_w // m, m, m, c))
    x = nm.transpose(x, (0, 1, 3, 2, 4, 5))
    x = nm.reshape(x, (b, grid_h, grid_w, c))
    if squeeze:
        x = nm.reshape(x, x.shape[1:])
    return x


def _partition_grid_array(grid: np.ndarray, window: int) -> np.ndarray:
    """numpy-only window partition of a (gh, gw) array -> (nw, M*M)."""
    gh, gw = grid.shape
    m = window
    x = grid.reshape(gh // m, m, gw // m, m)
    x = x.transpose(0, 2, 1, 3)
    return x.reshape(-1, m * m)


@lru_cache(maxsize=64)
def _shifted_region_ids(grid_h: int, grid_w: int, window: int, shift: int) -> np.ndarray:
    """Origin-region id per post-shift grid cell (the 3x3 band construction)."""
    ids = np.zeros((grid_h, grid_w), dtype=np.int64)
    h_slices = (slice(0, grid_h - window), slice(grid_h - window, grid_h - shift),
                slice(grid_h - shift, grid_h))
    w_slices = (slice(0, grid_w - window), slice(grid_w - window, grid_w - shift),
                slice(grid_w - shift, grid_w))
    cnt = 0
    for hs in h_slices:
        for ws in w_slices:
            ids[hs, ws] = cnt
            cnt += 1
    return ids


def shifted_mask(spec: WindowSpec) -> np.ndarray:
    """Additive (nw, M*M, M*M) mask for SW-MSA after a (-s, -s) cyclic shift."""
    if spec.shift == 0:
        raise ContractError("shifted_mask needs a non-zero shift")
    ids = _shifted_region_ids(spec.grid_h, spec.grid_w, spec.window, spec.shift)
    win_ids = _partition_grid_array(ids, spec.window)
    diff = win_ids[:, :, None] - win_ids[:, None, :]
    return np.where(diff != 0, NEG_LARGE, 0.0)


def key_valid_mask(valid: np.ndarray, window: int) -> np.ndarray:
    """Additive (nw, M*M, M*M) mask blocking attention to padded (invalid) keys."""
    win_valid = _partition_grid_array(valid.astype(bool), window)
    nw, mm = win_valid.shape
    per_key = np.where(win_valid[:, None, :], 0.0, NEG_LARGE)
    return np.broadcast_to(per_key, (nw, mm, mm)).copy()


class SwinBlockPair:
    """One W-MSA round plus one SW-MSA round, each with pre-norm and MLP.

    x' = WMSA(LN(x)) + x;   x = MLP(LN(x')) + x'
    y' = SWMSA(LN(x)) + x;  y = MLP(LN(y')) + y'
    with the SW-MSA round wrapped in a (-s, -s) cyclic shift and its inverse.
    """

    def __init__(self, dim: int, num_heads: int, window: int,
                 rng: np.random.Generator, name: str, mlp_ratio: int = 4,
                 dtype=np.float64):
        cfg = AttentionConfig(dim, num_heads)
        self.window = window
        self.shift = window // 2
        self.norm1 = LayerNorm(dim, f"{name}.norm1", dtype)
        self.attn1 = MultiHeadAttention(cfg, rng, f"{name}.attn1", dtype)
        self.norm2 = LayerNorm(dim, f"{name}.norm2", dtype)
        self.mlp1 = Mlp(dim, mlp_ratio, rng, f"{name}.mlp1", dtype)
        self.norm3 = LayerNorm(dim, f"{name}.norm3", dtype)
        self.attn2 = MultiHeadAttention(cfg, rng, f"{name}.attn2", dtype)
        self.norm4 = LayerNorm(dim, f"{name}.norm4", dtype)
        self.mlp2 = Mlp(dim, mlp_ratio, rng, f"{name}.mlp2", dtype)

    def __call__(self, x: Tensor, valid: np.ndarray | None = None,
                 weights_out: list | None = None) -> Tensor:
        b, gh, gw, c = x.shape
        m = self.window
        s = self.shift

        # round 1: W-MSA
        t = window_partition(self.norm1(x), m)
        mask = None if valid is None else key_valid_mask(valid, m)
        t = self.attn1(t, mask=mask)
        x = nm.add(x, window_reverse(t, m, gh, gw))
        x = nm.add(x, self.mlp1(self.norm2(x)))

        # round 2: SW-MSA under cyclic shift
        t = nm.roll2d(self.norm3(x), (-s, -s), (1, 2))
        spec = WindowSpec(gh, gw, m, s)
        mask = shifted_mask(spec)
        if valid is not None:
            shifted_valid = np.roll(valid, (-s, -s), axis=(0, 1))
            mask = mask + key_valid_mask(shifted_valid, m)
        t = self.attn2(window_partition(t, m), mask=mask, weights_out=weights_out)
        t = nm.roll2d(window_reverse(t, m, gh, gw), (s, s), (1, 2))
        x = nm.add(x, t)
        x = nm.add(x, self.mlp2(self.norm4(x)))
        return x

    def params(self) -> list[Tensor]:
        out = []
        for part in (self.norm1, self.attn1, self.norm2, self.mlp1,
                     self.norm3, self.attn2, self.norm4, self.mlp2):
            out.extend(part.params())
        return out
