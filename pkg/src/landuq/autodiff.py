"""Reverse-mode automatic differentiation over dense float32 arrays.

Tensors are thin wrappers around contiguous numpy float32 buffers (rank 4 at
most). Operations are methods on a Tape, which records every op whose output
depends on a tensor with requires_grad; backward walks the record in reverse,
accumulating gradients in a fixed serial order so that repeated runs are
bit-identical.

The op set is exactly what the encoder/decoder architecture needs: elementwise
arithmetic, relu/exp/clamp, reductions, reshape/concat, (batched) matmul,
strided same-padded conv2d, and bilinear feature sampling. There is no
operator fusion and no implicit graph: a fresh Tape per forward pass is the
expected usage.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ConfigError, NumericError, ShapeError

__all__ = ["Tensor", "Tape"]


class Tensor:
    """Dense float32 array with shape metadata and an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} tensor exceeds the rank-4 limit")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Ordered record of operations supporting a single reverse sweep.

    Records are appended in execution order, so inputs always precede their
    consumers; backward visits each record exactly once in reverse. Ops whose
    inputs all have requires_grad False are not recorded at all, which makes
    pure-inference forwards essentially free of bookkeeping.
    """

    def __init__(self, check_finite: bool = False):
        self.check_finite = check_finite
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._ops)

    def _emit(self, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
        out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
        if self.check_finite and not np.all(np.isfinite(out.data)):
            raise NumericError("non-finite value produced by a tape operation")
        if out.requires_grad:
            self._ops.append((out, inputs, backward))
        return out

    # ---- elementwise ----

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._emit(a.data + b.data, (a, b), backward)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return self._emit(a.data - b.data, (a, b), backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return self._emit(a.data * b.data, (a, b), backward)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        f = np.float32(factor)

        def backward(g):
            return (g * f,)

        return self._emit(a.data * f, (a,), backward)

    def neg(self, a: Tensor) -> Tensor:
        def backward(g):
            return (-g,)

        return self._emit(-a.data, (a,), backward)

    def relu(self, a: Tensor) -> Tensor:
        def backward(g):
            return (g * (a.data > 0),)

        return self._emit(np.maximum(a.data, 0), (a,), backward)

    def exp(self, a: Tensor) -> Tensor:
        out_data = np.exp(a.data)

        def backward(g):
            return (g * out_data,)

        return self._emit(out_data, (a,), backward)

    def clamp(self, a: Tensor, lo: float, hi: float) -> Tensor:
        def backward(g):
            return (g * ((a.data >= lo) & (a.data <= hi)),)

        return self._emit(np.clip(a.data, lo, hi), (a,), backward)

    # ---- reductions / shape ----

    def sum(self, a: Tensor) -> Tensor:
        def backward(g):
            return (np.broadcast_to(g, a.shape).astype(np.float32),)

        return self._emit(a.data.sum(dtype=np.float32), (a,), backward)

    def mean(self, a: Tensor) -> Tensor:
        inv = np.float32(1.0 / a.size)

        def backward(g):
            return (np.broadcast_to(g * inv, a.shape).astype(np.float32),)

        return self._emit(a.data.mean(dtype=np.float32), (a,), backward)

    def reshape(self, a: Tensor, shape: Sequence[int]) -> Tensor:
        shape = tuple(shape)

        def backward(g):
            return (g.reshape(a.shape),)

        return self._emit(a.data.reshape(shape), (a,), backward)

    def concat(self, parts: Sequence[Tensor], axis: int = -1) -> Tensor:
        parts = tuple(parts)
        if not parts:
            raise ContractError("concat of zero tensors")
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.split(g, offsets, axis=axis))

        return self._emit(np.concatenate([p.data for p in parts], axis=axis), parts, backward)

    # ---- linear algebra ----

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

        # einsum keeps the contraction order independent of batching, so a
        # batched product is bit-identical to its per-slice products
        spec_a = "ik" if a.ndim == 2 else "bik"
        spec_b = "kj" if b.ndim == 2 else "bkj"
        out_spec = "bij" if a.ndim == 3 or b.ndim == 3 else "ij"
        forward = np.einsum(f"{spec_a},{spec_b}->{out_spec}", a.data, b.data)

        def backward(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return self._emit(forward, (a, b), backward)

    def affine(self, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        return self.add(self.matmul(x, weight), bias)

    def conv2d(self, x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
        """Strided cross-correlation with same zero padding before the stride.

        x is (C_in, H, W), kernel is (C_out, C_in, k, k) with k odd; output is
        (C_out, ceil(H/stride), ceil(W/stride)). Windows are centered on input
        positions 0, stride, 2*stride, ...
        """
        if x.ndim != 3 or kernel.ndim != 4:
            raise ShapeError(f"conv2d expects (C,H,W) and (O,C,k,k), got {x.shape}, {kernel.shape}")
        c_out, c_in, k, k2 = kernel.shape
        if k != k2:
            raise ShapeError(f"non-square kernel {kernel.shape}")
        if k % 2 == 0:
            raise ConfigError(f"conv2d kernel size must be odd, got {k}")
        if x.shape[0] != c_in:
            raise ShapeError(f"conv2d channel mismatch: input {x.shape[0]}, kernel {c_in}")
        if stride < 1:
            raise ConfigError(f"conv2d stride must be >= 1, got {stride}")

        c, h, w = x.shape
        p = (k - 1) // 2
        ho = -(-h // stride)
        wo = -(-w // stride)
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
        cols = np.empty((c, k, k, ho, wo), dtype=np.float32)
        for ki in range(k):
            for kj in range(k):
                cols[:, ki, kj] = xp[
                    :,
                    ki : ki + stride * (ho - 1) + 1 : stride,
                    kj : kj + stride * (wo - 1) + 1 : stride,
                ]
        cols2d = cols.reshape(c * k * k, ho * wo)
        wmat = kernel.data.reshape(c_out, c_in * k * k)
        out = (wmat @ cols2d).reshape(c_out, ho, wo)

        def backward(g):
            gmat = g.reshape(c_out, ho * wo)
            g_kernel = (gmat @ cols2d.T).reshape(kernel.shape)
            gcols = (wmat.T @ gmat).reshape(c, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[
                        :,
                        ki : ki + stride * (ho - 1) + 1 : stride,
                        kj : kj + stride * (wo - 1) + 1 : stride,
                    ] += gcols[:, ki, kj]
            return gxp[:, p : p + h, p : p + w], g_kernel

        return self._emit(out, (x, kernel), backward)

    def bilinear_sample(self, fmap: Tensor, coords: Tensor) -> Tensor:
        """Sample a (C, H, W) feature map at normalized (x, y) coordinates.

        coords is (M, 2) or (B, M, 2) in [0, 1]^2; values outside are clamped
        to the valid square, with zero gradient through clamped coordinates.
        Returns (M, C) or (B, M, C).
        """
        if fmap.ndim != 3:
            raise ShapeError(f"bilinear_sample expects a (C,H,W) map, got {fmap.shape}")
        if coords.shape[-1] != 2:
            raise ShapeError(f"coords must end in axis of size 2, got {coords.shape}")
        c, h, w = fmap.shape
        if h < 2 or w < 2:
            raise ShapeError(f"feature map too small to interpolate: {fmap.shape}")

        flat = coords.data.reshape(-1, 2)
        raw_x = flat[:, 0] * np.float32(w - 1)
        raw_y = flat[:, 1] * np.float32(h - 1)
        px = np.clip(raw_x, 0, w - 1)
        py = np.clip(raw_y, 0, h - 1)
        x0 = np.minimum(np.floor(px), w - 2).astype(np.int64)
        y0 = np.minimum(np.floor(py), h - 2).astype(np.int64)
        fx = (px - x0).astype(np.float32)
        fy = (py - y0).astype(np.float32)

        f00 = fmap.data[:, y0, x0]
        f01 = fmap.data[:, y0, x0 + 1]
        f10 = fmap.data[:, y0 + 1, x0]
        f11 = fmap.data[:, y0 + 1, x0 + 1]
        w00 = (1 - fy) * (1 - fx)
        w01 = (1 - fy) * fx
        w10 = fy * (1 - fx)
        w11 = fy * fx
        out_flat = (w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11).T
        out_shape = coords.shape[:-1] + (c,)

        def backward(g):
            gt = g.reshape(-1, c).T  # (C, P)
            g_fmap = np.zeros_like(fmap.data)
            np.add.at(g_fmap, (slice(None), y0, x0), gt * w00)
            np.add.at(g_fmap, (slice(None), y0, x0 + 1), gt * w01)
            np.add.at(g_fmap, (slice(None), y0 + 1, x0), gt * w10)
            np.add.at(g_fmap, (slice(None), y0 + 1, x0 + 1), gt * w11)
            d_px = (1 - fy) * (f01 - f00) + fy * (f11 - f10)
            d_py = (1 - fx) * (f10 - f00) + fx * (f11 - f01)
            in_x = (raw_x >= 0) & (raw_x <= w - 1)
            in_y = (raw_y >= 0) & (raw_y <= h - 1)
            gx = (gt * d_px).sum(axis=0) * (w - 1) * in_x
            gy = (gt * d_py).sum(axis=0) * (h - 1) * in_y
            g_coords = np.stack([gx, gy], axis=1).astype(np.float32).reshape(coords.shape)
            return g_fmap, g_coords

        return self._emit(out_flat.reshape(out_shape).astype(np.float32), (fmap, coords), backward)

    # ---- reverse sweep ----

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
        """Accumulate gradients of a scalar loss for every requires_grad tensor.

        Returns a dict mapping each tensor in `params` to its gradient;
        parameters the loss does not reach get an explicit zero gradient.
        Every requires_grad tensor touched by the sweep also has .grad set.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, bw in reversed(self._ops):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, contrib in zip(inputs, bw(g)):
                if contrib is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = contrib.astype(np.float32) if prev is None else prev + contrib
                holders[key] = t
        for key, t in holders.items():
            if t.requires_grad:
                t.grad = grads[key]
        result: dict[Tensor, np.ndarray] = {}
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
                p.grad = g
            result[p] = g
        return result
