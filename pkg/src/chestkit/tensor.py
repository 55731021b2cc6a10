"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a :class:`Tensor` wraps a contiguous
float64 numpy array (weights are persisted as float32, but all arithmetic
runs in double precision so finite-difference gradient checks are
meaningful), and a :class:`Tape` records every operation executed while it
is active.  ``tape.backward(loss)`` replays the record in reverse and
returns gradients for every ``requires_grad`` tensor that contributed to
the loss.

Ops are pure functions: they never mutate their inputs and identical
inputs produce bit-identical outputs.  Batched inputs are processed with
per-sample GEMMs so that each sample's result is independent of the rest
of the batch down to the last bit.

Conventions fixed here and relied on elsewhere:

* ``relu`` has gradient 0 at exactly 0 (subgradient choice).
* ``max_pool2d`` breaks ties toward the first maximum in row-major order.
* ``upsample2x`` is nearest-neighbor replication, so a 2x2 max-pool of an
  upsampled map recovers the original exactly.
* A scalar is a tensor of shape ``(1,)``; shapes are never empty.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .rng import DetRng


class ShapeError(ValueError):
    """Raised when tensor shapes cannot be combined as requested."""


class Tensor:
    """n-dimensional float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "name", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_tls = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tape:
    """Single-use record of executed ops for one forward/backward pass.

    Use as a context manager around the forward computation::

        with Tape() as tape:
            probs = model.forward(batch)
            loss = cross_entropy_loss(probs, labels)
        grads = tape.backward(loss)

    A tape is single-owner: it must not be shared across threads, and
    ``backward`` may run at most once.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("another Tape is already recording on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _tls.tape = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate from a scalar loss; returns grads per requires_grad tensor.

        Backward over an empty tape (or a loss not produced on this tape)
        is a no-op yielding an empty map.  Calling backward twice on the
        same tape is an error.
        """
        if self._spent:
            raise RuntimeError("backward already ran on this tape; record a new Tape")
        self._spent = True
        if loss.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")

        buffers: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        result: dict[Tensor, np.ndarray] = {}

        for out, parents, backward_fn in reversed(self._nodes):
            g = buffers.pop(id(out), None)
            if g is None:
                continue
            if out.requires_grad:
                out.grad = g
                result[out] = g
            for parent, pg in zip(parents, backward_fn(g)):
                if pg is None:
                    continue
                if not (parent.requires_grad or parent._tape is self):
                    continue
                held = buffers.get(id(parent))
                buffers[id(parent)] = pg if held is None else held + pg
                holders[id(parent)] = parent

        for tid, g in buffers.items():
            t = holders[tid]
            if t.requires_grad:
                t.grad = g
                result[t] = g
        return result


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad or p._tape is tape for p in parents):
        out._tape = tape
        tape._nodes.append((out, parents, backward_fn))
    return out


def apply_op(out_data: np.ndarray, parents: tuple[Tensor, ...],
             backward_fn: Callable) -> Tensor:
    """Wrap a precomputed forward result as a recorded differentiable op.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    parent.  This is the extension point other modules use to define fused
    ops such as the losses.
    """
    return _record(Tensor(out_data), parents, backward_fn)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record(Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _record(Tensor(ad * bd), (a, b), lambda g: (g * bd, g * ad))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(Tensor(np.array([x.data.sum()])), (x,),
                   lambda g: (np.full(shape, g.reshape(-1)[0]),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _record(Tensor(np.where(mask, x.data, 0.0)), (x,),
                   lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # two-branch form stays finite for |x| up to ~1e3 and beyond
    out = np.empty_like(xd)
    pos = xd >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(Tensor(out), (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor) -> Tensor:
    """Normalized exponentials over the last axis (1-D vector or 2-D batch)."""
    if x.ndim not in (1, 2):
        raise ShapeError(f"softmax expects a vector or batch of vectors, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(Tensor(out), (x,), backward)


# ---------------------------------------------------------------------------
# spatial ops; tensors are [C,H,W] or batched [B,C,H,W]


def _spatial(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], False
    if x.ndim == 4:
        return x.data, True
    raise ShapeError(f"{op} expects [C,H,W] or [B,C,H,W], got {x.shape}")


def _conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int,
               oh: int, ow: int) -> np.ndarray:
    b, c = xp.shape[:2]
    i0 = np.repeat(np.arange(kh), kw)
    j0 = np.tile(np.arange(kw), kh)
    i1 = stride * np.repeat(np.arange(oh), ow)
    j1 = stride * np.tile(np.arange(ow), oh)
    rows = i0[:, None] + i1[None, :]
    cols = j0[:, None] + j1[None, :]
    # the gather yields a batch-layout-dependent view; force one layout so
    # identical samples hit identical GEMM paths for every batch size
    patches = np.ascontiguousarray(xp[:, :, rows, cols])  # [B, C, kh*kw, oh*ow]
    return patches.reshape(b, c * kh * kw, oh * ow)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``kernels`` is [C_out, C_in, kH, kW]; ``bias`` is [C_out].  Output
    spatial size is floor((H + 2*padding - kH)/stride) + 1.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    xd, batched = _spatial(x, "conv2d")
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be 4-D, got {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must be [{c_out}], got {bias.shape}")
    b, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(
            f"conv2d: kernels expect {c_in} input channels, input has {c}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _conv_cols(xp, kh, kw, stride, oh, ow)  # [B, C*kh*kw, oh*ow]
    wmat = kernels.data.reshape(c_out, c_in * kh * kw)
    out = np.matmul(wmat, cols) + bias.data[:, None]
    out = out.reshape(b, c_out, oh, ow)

    def backward(g):
        gf = g.reshape(b, c_out, oh * ow) if batched else g.reshape(1, c_out, oh * ow)
        dw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0)
        db = gf.sum(axis=(0, 2))
        dcols = np.matmul(wmat.T, gf).reshape(b, c_in, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        for a in range(kh):
            for bb in range(kw):
                dxp[:, :, a:a + stride * oh:stride,
                    bb:bb + stride * ow:stride] += dcols[:, :, a, bb]
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return ((dx if batched else dx[0]).copy(),
                dw.reshape(kernels.shape), db)

    return _record(Tensor(out if batched else out[0]), (x, kernels, bias), backward)


def max_pool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    """2x2/stride-2 max pooling; even spatial dims required.

    The gradient routes to the first maximum of each window in row-major
    order, so pooling is deterministic even under ties.
    """
    if size != 2 or stride != 2:
        raise ValueError("only 2x2 windows with stride 2 are supported")
    xd, batched = _spatial(x, "max_pool2d")
    b, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    windows = xd.reshape(b, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(b, c, oh, ow, 4)
    winner = flat.argmax(axis=-1)                 # first max in row-major order
    out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = g if batched else g[None]
        hot = np.zeros((b, c, oh, ow, 4))
        np.put_along_axis(hot, winner[..., None], gb[..., None], axis=-1)
        dx = hot.reshape(b, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = dx.reshape(b, c, h, w)
        return ((dx if batched else dx[0]),)

    return _record(Tensor(out if batched else out[0]), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    xd, batched = _spatial(x, "global_avg_pool")
    b, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))

    def backward(g):
        gb = g if batched else g[None]
        dx = np.broadcast_to(gb[:, :, None, None] / (h * w), (b, c, h, w))
        return ((dx if batched else dx[0]).copy(),)

    return _record(Tensor(out if batched else out[0]), (x,), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; each pixel becomes a 2x2 block."""
    xd, batched = _spatial(x, "upsample2x")
    b, c, h, w = xd.shape
    out = xd.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        gb = g if batched else g[None]
        dx = gb.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))
        return ((dx if batched else dx[0]),)

    return _record(Tensor(out if batched else out[0]), (x,), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; spatial (and batch) dims must agree."""
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    ndim = xs[0].ndim
    if ndim not in (3, 4):
        raise ShapeError(f"concat_channels expects 3-D or 4-D tensors, got {xs[0].shape}")
    axis = 0 if ndim == 3 else 1
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != ndim or t.shape[:axis] != ref[:axis] or t.shape[axis + 1:] != ref[axis + 1:]:
            raise ShapeError(
                f"concat_channels: {t.shape} incompatible with {ref}")
    sizes = [t.shape[axis] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(piece.copy() for piece in np.split(g, splits, axis=axis))

    return _record(Tensor(out), tuple(xs), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: [B,F] @ [F,K] + [K] (or a single [F] vector)."""
    if weight.ndim != 2:
        raise ShapeError(f"dense weight must be 2-D, got {weight.shape}")
    f, k = weight.shape
    if bias.shape != (k,):
        raise ShapeError(f"dense bias must be [{k}], got {bias.shape}")
    if x.ndim == 1:
        xd, batched = x.data[None], False
    elif x.ndim == 2:
        xd, batched = x.data, True
    else:
        raise ShapeError(f"dense expects [F] or [B,F], got {x.shape}")
    if xd.shape[1] != f:
        raise ShapeError(f"dense: input has {xd.shape[1]} features, weight expects {f}")
    # per-sample GEMV keeps each row bit-identical for any batch size
    out = np.matmul(xd[:, None, :], weight.data)[:, 0, :] + bias.data

    def backward(g):
        gb = g if batched else g[None]
        dx = np.matmul(gb[:, None, :], weight.data.T)[:, 0, :]
        dw = xd.T @ gb
        db = gb.sum(axis=0)
        return ((dx if batched else dx[0]), dw, db)

    return _record(Tensor(out if batched else out[0]), (x, weight, bias), backward)


def he_init(shape: Sequence[int], fan_in: int, seed: int,
            requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Zero-mean normal draw with std sqrt(2/fan_in), seeded and reproducible."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape)) if shape else 1
    std = np.sqrt(2.0 / fan_in)
    data = DetRng(seed).normal(n).reshape(shape) * std
    return Tensor(data, requires_grad=requires_grad, name=name)
