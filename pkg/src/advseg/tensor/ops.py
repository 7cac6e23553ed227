"""Differentiable operations on :class:`~advseg.tensor.core.Tensor`.

Binary elementwise ops accept equal shapes, or a scalar (Python number or
0-d tensor) on either side. Anything wider must go through :func:`expand`.
"""

from __future__ import annotations

import numpy as np

from .core import ShapeError, Tensor, as_tensor

ELEMENTWISE_KINDS = ("add", "sub", "mul", "div", "relu", "sigmoid", "log", "exp", "abs", "neg", "scale")


def _pair(a, b):
    """Promote operands; Python scalars adopt the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}; use expand() for broadcasting")
    return a, b


def _fit(g: np.ndarray, like: Tensor) -> np.ndarray:
    # undo scalar broadcasting
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum(), dtype=like.dtype).reshape(like.shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._result(np.add(a.data, b.data), "add", (a, b), lambda g: (_fit(g, a), _fit(g, b)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._result(np.subtract(a.data, b.data), "sub", (a, b), lambda g: (_fit(g, a), _fit(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return Tensor._result(
        np.multiply(ad, bd), "mul", (a, b), lambda g: (_fit(g * bd, a), _fit(g * ad, b))
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.divide(ad, bd)

    def backward(g):
        return _fit(g / bd, a), _fit(-g * ad / (bd * bd), b)

    return Tensor._result(out, "div", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(np.negative(a.data), "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant that is not part of the graph."""
    c = a.dtype.type(c)
    return Tensor._result(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(np.maximum(ad, 0), "relu", (a,), lambda g: (g * (ad > 0),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return Tensor._result(s, "sigmoid", (a,), lambda g: (g * s * (1 - s),))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor._result(out, "log", (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return Tensor._result(np.abs(ad), "abs", (a,), lambda g: (g * np.sign(ad),))


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(z))`` as ``max(z, 0) + log1p(exp(-|z|))``; smooth at 0."""
    ad = a.data
    out = np.maximum(ad, 0) + np.log1p(np.exp(-np.abs(ad)))
    return Tensor._result(out, "softplus", (a,), lambda g: (g * _stable_sigmoid(ad),))


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes the constant as ``b``."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"relu": relu, "sigmoid": sigmoid, "log": log, "exp": exp, "abs": abs, "neg": neg,
             "softplus": softplus}
    if kind in binary:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](as_tensor(a))
    if kind == "scale":
        return scale(as_tensor(a), b)
    raise ValueError(f"unknown elementwise op {kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(norm))


def reduce(kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    axes = _normalize_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.sum(axis=axes, keepdims=keepdims)
    if kind == "mean":
        out = out / count
    out = np.asarray(out, dtype=a.dtype)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g):
        g = np.broadcast_to(g.reshape(kept_shape), a.shape)
        if kind == "mean":
            g = g / count
        return (np.array(g, dtype=a.dtype),)

    return Tensor._result(out, kind, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape).copy()
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._result(out, "transpose", (a,), lambda g: (g.transpose(inverse),))


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 axes (rank must already match)."""
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != n and s != 1 for s, n in zip(a.shape, shape)):
        raise ShapeError(f"cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, n) in enumerate(zip(a.shape, shape)) if s != n)
    out = np.array(np.broadcast_to(a.data, shape))
    return Tensor._result(out, "expand", (a,), lambda g: (g.sum(axis=axes, keepdims=True),))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array (not differentiable)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if table.ndim != 2:
        raise ShapeError("embedding table must be rank 2")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._result(out, "embedding", (table,), backward)


def _window(xt: np.ndarray, i: int, j: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    return xt[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over (B, C_in, H, W) with a (C_out, C_in, kh, kw) kernel.

    Computed channels-last as a sum of one shifted matmul per kernel tap.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"kernel expects {Ck} input channels, input has {C}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xt = np.zeros((B, Hp, Wp, C), dtype=np.result_type(x.dtype, kernel.dtype))
    xt[:, padding:padding + H, padding:padding + W, :] = x.data.transpose(0, 2, 3, 1)
    # taps[i, j] is the (C_in, C_out) matrix for kernel offset (i, j)
    taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0))
    out = np.zeros((B, Ho, Wo, O), dtype=xt.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.matmul(_window(xt, i, j, stride, Ho, Wo), taps[i, j])
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        dk = dx = None
        if kernel.requires_grad:
            gflat = gt.reshape(-1, O)
            dtaps = np.empty((kh, kw, C, O), dtype=gt.dtype)
            for i in range(kh):
                for j in range(kw):
                    win = np.ascontiguousarray(_window(xt, i, j, stride, Ho, Wo)).reshape(-1, C)
                    dtaps[i, j] = win.T @ gflat
            dk = np.ascontiguousarray(dtaps.transpose(3, 2, 0, 1))
        if x.requires_grad:
            # one matmul for all taps: (N, O) @ (O, kh*kw*C)
            per_tap = (gt.reshape(-1, O) @ taps.transpose(3, 0, 1, 2).reshape(O, -1))
            per_tap = per_tap.reshape(B, Ho, Wo, kh, kw, C)
            dxt = np.zeros_like(xt)
            for i in range(kh):
                for j in range(kw):
                    _window(dxt, i, j, stride, Ho, Wo)[...] += per_tap[:, :, :, i, j, :]
            dx = np.ascontiguousarray(dxt[:, padding:padding + H, padding:padding + W, :].transpose(0, 3, 1, 2))
        return dx, dk

    return Tensor._result(out, "conv2d", (x, kernel), backward)


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("avg_pool2d needs a rank-4 input")
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"spatial extent {H}x{W} not divisible by {factor}")
    out = x.data.reshape(B, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))
    area = factor * factor

    def backward(g):
        return (np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) / area,)

    return Tensor._result(out, "avg_pool2d", (x,), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("upsample_nearest needs a rank-4 input")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return Tensor._result(out, "upsample_nearest", (x,), backward)
