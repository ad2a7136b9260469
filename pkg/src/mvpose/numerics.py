"""Dense-tensor core: forward ops, reverse-mode differentiation, gradient checking.

Tensors wrap row-major numpy arrays (float64 for checking, float32 for
training). Every differentiable op records an entry on the active GradTape;
backward() replays the tape in exact reverse execution order. There is no
general broadcasting: binary ops require equal shapes, except bias-add over
the last axis and the explicit broadcast_to op.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class ContractError(ValueError):
    """An op precondition was violated."""


class Tensor:
    """Dense n-d array of reals plus autodiff metadata."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


class GradTape:
    """Ordered record of executed primitive ops, replayed in reverse for adjoints."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        """backward(g) -> tuple of per-input adjoint arrays (None for no grad)."""
        self._entries.append((out, inputs, backward))

    def __len__(self) -> int:
        return len(self._entries)


_LOCAL = threading.local()


def _tape_stack() -> list[GradTape]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def backward(loss: Tensor, tape: GradTape) -> dict[str, Tensor]:
    """Accumulate adjoints for every requires_grad tensor reachable from loss.

    Sets .grad on each such tensor and returns named gradients keyed by
    parameter name. The loss must be scalar and recorded under the tape.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    named: dict[str, Tensor] = {}
    for out, inputs, bwd in reversed(tape._entries):
        g = adjoints.pop(id(out), None)
        if g is None:
            continue
        in_grads = bwd(g)
        for t, ig in zip(inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            acc = adjoints.get(id(t))
            adjoints[id(t)] = ig if acc is None else acc + ig
    # Leaves left in the adjoint map (never an entry output) get .grad.
    by_id = {}
    for out, inputs, _ in tape._entries:
        for t in inputs:
            by_id[id(t)] = t
        by_id[id(out)] = out
    by_id[id(loss)] = loss
    for tid, g in adjoints.items():
        t = by_id.get(tid)
        if t is None or not t.requires_grad:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t.name is not None:
            named[t.name] = Tensor(g)
    return named


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may also be a bias vector over the last axis of a."""
    if a.shape == b.shape:
        out = Tensor(a.data + b.data, requires_grad=_needs_grad(a, b))

        def bwd(g):
            return g, g

        return _record(out, (a, b), bwd)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = Tensor(a.data + b.data, requires_grad=_needs_grad(a, b))
        lead = tuple(range(a.data.ndim - 1))

        def bwd(g):
            return g, g.sum(axis=lead) if lead else g

        return _record(out, (a, b), bwd)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data, requires_grad=_needs_grad(a, b))
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _record(out, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s, requires_grad=x.requires_grad)

    def bwd(g):
        return (g * s,)

    return _record(out, (x,), bwd)


def add_const(x: Tensor, c) -> Tensor:
    """Add a non-differentiable constant (numpy-broadcast against x)."""
    c = np.asarray(c, dtype=x.data.dtype)
    out = Tensor(x.data + c, requires_grad=x.requires_grad)
    if out.shape != x.shape:
        raise ShapeError(f"add_const: constant {c.shape} grows operand {x.shape}")

    def bwd(g):
        return (g,)

    return _record(out, (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2d @ 2d, nd @ 2d (shared weight), nd @ nd
    with identical leading dims (stacked)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2d, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} and {b.shape}")
    if bd.ndim == 2:
        out_data = ad @ bd

        def bwd(g):
            ga = g @ bd.T
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    elif ad.ndim == bd.ndim and ad.shape[:-2] == bd.shape[:-2]:
        out_data = ad @ bd

        def bwd(g):
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.swapaxes(-1, -2) @ g
            return ga, gb

    else:
        raise ShapeError(f"matmul: unsupported batching for {a.shape} and {b.shape}")
    out = Tensor(out_data, requires_grad=_needs_grad(a, b))
    return _record(out, (a, b), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)
    orig = x.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.transpose(x.data, axes), requires_grad=x.requires_grad)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record(out, (x,), bwd)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast (leading axes and size-1 axes); adjoint sums them back."""
    try:
        out_data = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}: {e}") from None
    orig = x.shape

    def bwd(g):
        extra = g.ndim - len(orig)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(orig) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    out = Tensor(out_data, requires_grad=x.requires_grad)
    return _record(out, (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over the last axis (max-shifted)."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs feature dim {c}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gamma.data + beta.data, requires_grad=_needs_grad(x, gamma, beta))
    gd = gamma.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead) if lead else g
        gxh = g * xhat
        ggamma = gxh.sum(axis=lead) if lead else gxh.copy()
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dxhat -= m1
        m2 *= -1.0
        np.multiply(xhat, m2, out=gxh)  # reuse the gxh buffer
        dxhat += gxh
        dxhat *= inv_std
        return dxhat, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x), tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + 0.044715 * (x2 * xd)))
    half_1pt = 0.5 * (1.0 + t)
    out = Tensor(xd * half_1pt, requires_grad=x.requires_grad)

    def bwd(g):
        # dy = half_1pt + 0.5 x (1 - t^2) C (1 + 3a x^2), built in-place
        u = x2 * (3 * 0.044715 * _GELU_C)
        u += _GELU_C
        v = t * t
        np.subtract(1.0, v, out=v)
        u *= v
        u *= xd
        u *= 0.5
        u += half_1pt
        u *= g
        return (u,)

    return _record(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    """Natural log; caller guarantees positive input."""
    out = Tensor(np.log(x.data), requires_grad=x.requires_grad)
    xd = x.data

    def bwd(g):
        return (g / xd,)

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s, requires_grad=x.requires_grad)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record(out, (x,), bwd)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis), requires_grad=x.requires_grad)
    shp = x.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shp).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shp).copy(),)

    return _record(out, (x,), bwd)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(x.data.mean(axis=axis), requires_grad=x.requires_grad)
    shp = x.shape
    n = x.data.size if axis is None else shp[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shp).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shp).copy(),)

    return _record(out, (x,), bwd)


def roll2d(x: Tensor, shifts: tuple[int, int], axes: tuple[int, int]) -> Tensor:
    """Cyclic shift along two axes; exactly invertible."""
    out = Tensor(np.roll(x.data, shifts, axis=axes), requires_grad=x.requires_grad)

    def bwd(g):
        return (np.roll(g, (-shifts[0], -shifts[1]), axis=axes),)

    return _record(out, (x,), bwd)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """View of x[..., start:stop]; adjoint scatters into a zero buffer."""
    if not (0 <= start < stop <= x.shape[-1]):
        raise ShapeError(f"slice_last [{start}:{stop}] on last dim {x.shape[-1]}")
    out = Tensor(x.data[..., start:stop], requires_grad=x.requires_grad)
    shp = x.shape

    def bwd(g):
        gx = np.zeros(shp, dtype=g.dtype)
        gx[..., start:stop] = g
        return (gx,)

    return _record(out, (x,), bwd)


def take_index(x: Tensor, i: int, axis: int = 0) -> Tensor:
    """Select one slice along an axis; adjoint is zero everywhere else."""
    out = Tensor(np.take(x.data, i, axis=axis), requires_grad=x.requires_grad)
    shp = x.shape
    sel = [slice(None)] * len(shp)
    sel[axis] = i
    sel = tuple(sel)

    def bwd(g):
        gx = np.zeros(shp, dtype=g.dtype)
        gx[sel] = g
        return (gx,)

    return _record(out, (x,), bwd)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2d table; adjoint scatter-adds (repeats accumulate)."""
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2d, got {table.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(table.data[idx], requires_grad=table.requires_grad)
    rows = table.shape

    def bwd(g):
        gt = np.zeros(rows, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), bwd)


def gather_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch token selection: x (B, N, C), idx (B, K) -> (B, K, C)."""
    if x.data.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_tokens: x {x.shape} with idx {idx.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    b = np.arange(x.shape[0])[:, None]
    out = Tensor(x.data[b, idx], requires_grad=x.requires_grad)
    shp = x.shape

    def bwd(g):
        gx = np.zeros(shp, dtype=g.dtype)
        np.add.at(gx, (b, idx), g)
        return (gx,)

    return _record(out, (x,), bwd)


def pad_grid(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad a token grid (B, H, W, C) at the bottom/right edges."""
    if x.data.ndim != 4:
        raise ShapeError(f"pad_grid: expected (B, H, W, C), got {x.shape}")
    out_data = np.pad(x.data, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
    out = Tensor(out_data, requires_grad=x.requires_grad)
    h, w = x.shape[1], x.shape[2]

    def bwd(g):
        return (g[:, :h, :w, :],)

    return _record(out, (x,), bwd)


def crop_grid(x: Tensor, h: int, w: int) -> Tensor:
    """Inverse of pad_grid: keep the top-left h x w cells."""
    if x.data.ndim != 4:
        raise ShapeError(f"crop_grid: expected (B, H, W, C), got {x.shape}")
    out = Tensor(x.data[:, :h, :w, :].copy(), requires_grad=x.requires_grad)
    shp = x.shape

    def bwd(g):
        gx = np.zeros(shp, dtype=g.dtype)
        gx[:, :h, :w, :] = g
        return (gx,)

    return _record(out, (x,), bwd)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


# ---------------------------------------------------------------------------
# Parameter helpers
# ---------------------------------------------------------------------------

def param_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float,
                 name: str, dtype=np.float64) -> Tensor:
    data = rng.normal(0.0, std, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def param_zeros(shape: tuple[int, ...], name: str, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def param_ones(shape: tuple[int, ...], name: str, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

class FiniteDiffReport:
    """Per-parameter relative errors between analytic and central-difference grads."""

    def __init__(self, per_param: dict[str, float]):
        self.per_param = per_param

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]

    def __repr__(self) -> str:
        return f"FiniteDiffReport(max_rel_err={self.max_rel_err:.3e}, n={len(self.per_param)})"


def finite_diff_check(fn: Callable[[], Tensor], params: dict[str, Tensor],
                      h: float = 1e-5,
                      sample_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> FiniteDiffReport:
    """Compare analytic gradients of fn() against central finite differences.

    fn must be a deterministic scalar function of the current param values;
    determinism is verified by two forward passes. Perturbations are applied
    in place and restored. The relative error per parameter is the l2-norm
    ratio ||analytic - cd|| / max(||analytic||, ||cd||, 1e-12); element-wise
    ratios are meaningless for entries whose true gradient sits below the
    float64 difference-quotient noise floor. sample_per_param, if set, checks
    a random subset of elements per parameter instead of all of them.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ContractError(f"finite_diff_check: h={h} outside [1e-7, 1e-3]")
    l1 = fn()
    l2 = fn()
    if l1.data.tobytes() != l2.data.tobytes():
        raise ContractError("finite_diff_check: fn is not deterministic")

    with GradTape() as tape:
        loss = fn()
    analytic = backward(loss, tape)

    per_param: dict[str, float] = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        ga = analytic.get(name)
        ga_flat = (np.zeros(p.size) if ga is None else ga.data).reshape(-1)
        flat = p.data.reshape(-1)
        n = flat.size
        if sample_per_param is not None and sample_per_param < n:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(n, size=sample_per_param, replace=False)
        else:
            idxs = np.arange(n)
        cd = np.zeros(len(idxs))
        for row, i in enumerate(idxs):
            orig = flat[i]
            flat[i] = orig + h
            lp = fn().item()
            flat[i] = orig - h
            lm = fn().item()
            flat[i] = orig
            cd[row] = (lp - lm) / (2.0 * h)
        a = ga_flat[idxs]
        num = float(np.linalg.norm(a - cd))
        den = max(float(np.linalg.norm(a)), float(np.linalg.norm(cd)), 1e-12)
        per_param[name] = num / den
    return FiniteDiffReport(per_param)
