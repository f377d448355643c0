"""Differentiable operations over :class:`Tensor`.

Broadcasting is limited to scalar-with-tensor and per-channel bias
(:func:`add_channel_bias`). Spatial ops take ``(C, H, W)`` or batched
``(N, C, H, W)`` input.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_node


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.data.ndim and b.data.ndim:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if like.data.ndim == 0 and g.ndim:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def _binary_operands(a, b, name):
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    _check_same(a, b, name)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    _check_same(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, a), _reduce_to(g * ad, b)

    return make_node(ad * bd, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2 * ad * g,), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _logistic(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |x|
    s = np.tanh(x * 0.5)
    s *= 0.5
    s += 0.5
    return s


def sigmoid(a: Tensor) -> Tensor:
    s = _logistic(a.data)
    return make_node(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _logistic(x)
    out = x * s

    def backward(g):
        # d/dx x*s(x) = s + x*s*(1-s) = s + out*(1-s)
        return (g * (s + out * (1 - s)),)

    return make_node(out, (a,), backward, "silu")


_UNARY = {"neg": neg, "square": square, "relu": relu, "sigmoid": sigmoid, "silu": silu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch a pointwise op by name (``add``, ``mul``, ``silu``, ...)."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return _UNARY[kind](as_tensor(a))
    raise ValueError(f"unknown elementwise op {kind!r}")


# ------------------------------------------------------------------ reductions

def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape, dtype = a.shape, a.dtype
    return make_node(np.asarray(a.data.sum(), dtype=dtype), (a,),
                     lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.size
    return make_node(np.asarray(a.data.mean(), dtype=dtype), (a,),
                     lambda g: (np.full(shape, g / n, dtype=dtype),), "mean")


# -------------------------------------------------------------------- layers

def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias.

    ``b`` is ``(C,)`` for input ``(C, H, W)``, ``(N, C, H, W)`` or ``(N, C)``,
    or ``(N, C)`` (one bias vector per batch item) for ``(N, C, H, W)``.
    """
    xd, bd = x.data, b.data
    if bd.ndim == 1 and xd.ndim in (3, 4):
        view = bd[:, None, None]
        axes = (0, 2, 3) if xd.ndim == 4 else (1, 2)
        ch = xd.shape[-3]
    elif bd.ndim == 1 and xd.ndim in (1, 2):
        view, axes, ch = bd, tuple(range(xd.ndim - 1)), xd.shape[-1]
    elif bd.ndim == 2 and xd.ndim == 4 and bd.shape[0] == xd.shape[0]:
        view, axes, ch = bd[:, :, None, None], (2, 3), xd.shape[1]
    else:
        raise ValueError(f"unsupported bias shape {bd.shape} for input {xd.shape}")
    if bd.shape[-1] != ch:
        raise ValueError(f"bias {bd.shape} does not match channels of input {xd.shape}")

    def backward(g):
        return g, g.sum(axis=axes)

    return make_node(xd + view, (x, b), backward, "bias")


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(F,)`` or ``(N, F)``."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"dense: input features {xd.shape[-1]} != weight in-dim {wd.shape[1]}")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        x2 = xd.reshape(-1, wd.shape[1])
        grads = [g @ wd, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_node(out, parents, backward, "dense")


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def _pad(x: np.ndarray, p: int, mode: str = "zeros") -> np.ndarray:
    if not p:
        return x
    if mode == "circular":
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="wrap")
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:-p, p:-p] = x
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns of shape ``(N, C*k*k, ho*wo)``, built from k*k strided slices."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                                  j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, padding_mode: str = "zeros") -> Tensor:
    """2-D cross-correlation with square kernel ``(C_out, C_in, k, k)``.

    ``padding_mode`` is ``"zeros"`` or ``"circular"`` (wrap-around borders).
    """
    if padding_mode not in ("zeros", "circular"):
        raise ValueError(f"unknown padding mode {padding_mode!r}")
    xd, squeeze = _batched(x.data)
    wd = kernel.data
    n, c, h, w = xd.shape
    c_out, c_in, k, k2 = wd.shape
    if k != k2:
        raise ValueError("conv2d: kernel must be square")
    if c_in != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {c_in}")
    p, s = padding, stride
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    xp = _pad(xd, p, padding_mode)
    wmat = wd.reshape(c_out, -1)
    if k == 1 and s == 1 and not p:
        out = np.matmul(wmat, xp.reshape(n, c, h * w))
    else:
        out = np.matmul(wmat, _im2col(xp, k, s, ho, wo))
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, c_out, ho, wo)

    def backward(g):
        g4 = g[None] if squeeze else g
        gf = g4.reshape(n, c_out, ho * wo)
        cols = xp.reshape(n, c, h * w) if k == 1 and s == 1 and not p else _im2col(xp, k, s, ho, wo)
        dw = np.zeros_like(wmat)
        for b in range(n):
            dw += gf[b] @ cols[b].T
        del cols
        dcols = np.matmul(wmat.T, gf)
        if k == 1 and s == 1 and not p:
            dxp = dcols.reshape(n, c, h, w)
        else:
            dcols = dcols.reshape(n, c, k, k, ho, wo)
            dxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, i, j]
        if p and padding_mode == "circular":
            # fold the wrapped border contributions back onto their source pixels
            dxp[:, :, p : 2 * p, :] += dxp[:, :, p + h :, :]
            dxp[:, :, h : h + p, :] += dxp[:, :, :p, :]
            dxp[:, :, :, p : 2 * p] += dxp[:, :, :, p + w :]
            dxp[:, :, :, w : w + p] += dxp[:, :, :, :p]
        dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        if squeeze:
            dx = dx[0]
        grads = [np.ascontiguousarray(dx), dw.reshape(wd.shape)]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out[0] if squeeze else out, parents, backward, "conv2d")


def down2(x: Tensor) -> Tensor:
    """2x2 average pooling over the last two axes."""
    xd = x.data
    h, w = xd.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"down2 requires even spatial extents, got {h}x{w}")
    lead = xd.shape[:-2]
    out = xd.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
        return (g * np.asarray(0.25, dtype=g.dtype),)

    return make_node(out, (x,), backward, "down2")


def up2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    xd = x.data
    h, w = xd.shape[-2:]
    lead = xd.shape[:-2]
    out = np.repeat(np.repeat(xd, 2, axis=-2), 2, axis=-1)

    def backward(g):
        return (g.reshape(lead + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return make_node(out, (x,), backward, "up2")


def space_to_depth(x: Tensor, factor: int) -> Tensor:
    """``(N, C, H, W) -> (N, C*f*f, H/f, W/f)``; each f x f block becomes channels."""
    xd = x.data
    n, c, h, w = xd.shape
    f = factor
    if h % f or w % f:
        raise ValueError(f"space_to_depth: {h}x{w} not divisible by {f}")
    out = xd.reshape(n, c, h // f, f, w // f, f).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * f * f, h // f, w // f)

    def backward(g):
        g = g.reshape(n, c, f, f, h // f, w // f).transpose(0, 1, 4, 2, 5, 3)
        return (g.reshape(n, c, h, w),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "space_to_depth")


def depth_to_space(x: Tensor, factor: int) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    xd = x.data
    n, cff, h, w = xd.shape
    f = factor
    if cff % (f * f):
        raise ValueError(f"depth_to_space: {cff} channels not divisible by {f * f}")
    c = cff // (f * f)
    out = xd.reshape(n, c, f, f, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * f, w * f)

    def backward(g):
        g = g.reshape(n, c, h, f, w, f).transpose(0, 1, 3, 5, 2, 4)
        return (g.reshape(n, cff, h, w),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "depth_to_space")


def resample2d(x: Tensor, mode: str) -> Tensor:
    if mode == "down2-average":
        return down2(x)
    if mode == "up2-nearest":
        return up2(x)
    raise ValueError(f"unknown resample mode {mode!r}")


def group_norm(x: Tensor, groups: int, gamma: Optional[Tensor] = None,
               beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    xd, squeeze = _batched(x.data)
    n, c, h, w = xd.shape
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {groups} groups do not divide {c} channels")
    xr = xd.reshape(n, groups, -1)
    mu = xr.mean(axis=2, keepdims=True)
    xc = xr - mu
    var = np.einsum("ngk,ngk->ng", xc, xc)[..., None] / xc.shape[2]
    inv = 1.0 / np.sqrt(var + eps)
    xc *= inv
    xhat = xc.reshape(n, c, h, w)
    out = xhat
    if gamma is not None:
        out = out * gamma.data[None, :, None, None]
    if beta is not None:
        out = out + beta.data[None, :, None, None]

    def backward(g):
        g4 = g[None] if squeeze else g
        dxhat = g4 * gamma.data[None, :, None, None] if gamma is not None else g4
        dxh = dxhat.reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxh - dxh.mean(axis=2, keepdims=True)
                    - xh * (dxh * xh).mean(axis=2, keepdims=True))
        dx = dx.reshape(n, c, h, w)
        grads = [dx[0] if squeeze else dx]
        if gamma is not None:
            grads.append((g4 * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = [x] + [t for t in (gamma, beta) if t is not None]
    return make_node(out[0] if squeeze else out, parents, backward, "group_norm")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return np.split(g, splits, axis=axis)

    return make_node(out, tuple(tensors), backward, "concat")


def mse(a: Tensor, b) -> Tensor:
    return mean(square(sub(a, b)))
