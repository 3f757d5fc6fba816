"""Fused differentiable primitives: softmax, layer norm, affine, conv, sampling."""

from __future__ import annotations

import functools
from typing import Optional, Tuple

import numpy as np

from .tensor import DTYPE, DimensionError, Tensor, as_tensor, note_branch, record


class DegenerateRowError(ValueError):
    """A softmax row held no finite entry."""


def _softmax_backward(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    return s * (g - (g * s).sum(axis=-1, keepdims=True))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with exact zeros at ``-inf`` entries.

    The stabilising max is taken over finite entries only.
    """
    x = as_tensor(x)
    finite = np.isfinite(x.data)
    if not finite.any(axis=-1).all():
        bad = np.argwhere(~finite.any(axis=-1))
        raise DegenerateRowError(f"softmax row(s) with no finite entry: {bad[:5].tolist()}")
    note_branch(finite, "softmax_mask")
    m = np.where(finite, x.data, -np.inf).max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=-1, keepdims=True)
    # looked up at call time so a test can substitute a broken backward
    return record(s, (x,), lambda g: (_softmax_backward(s, g),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return record(out, (x, gamma, beta), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise DimensionError(f"linear shapes do not conform: x {x.shape}, W {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear bias shape {b.shape} does not match W {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [(g @ w.data.T), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, backward)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on a channels-last map.

    ``x`` is (H, W, Cin), ``w`` is (kh, kw, Cin, Cout); returns (Ho, Wo, Cout).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise DimensionError(f"conv2d shapes do not conform: x {x.shape}, W {w.shape}")
    H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0))) if padding else x.data
    cols = np.empty((Ho, Wo, kh, kw, cin), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = xp[i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
    cols = cols.reshape(Ho * Wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if b is not None:
        b = as_tensor(b)
        out = out + b.data

    def backward(g):
        g2 = g.reshape(Ho * Wo, cout)
        dw = (cols.T @ g2).reshape(w.shape)
        dcols = (g2 @ wmat.T).reshape(Ho, Wo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += dcols[:, :, i, j, :]
        dx = dxp[padding : padding + H, padding : padding + W, :] if padding else dxp
        if b is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return record(out.reshape(Ho, Wo, cout), parents, backward)


def _bilinear_weights(pos: np.ndarray, H: int, W: int):
    """Corner flat indices, validity-masked weights and their position derivatives."""
    y, x = pos[..., 0], pos[..., 1]
    y0, x0 = np.floor(y), np.floor(x)
    note_branch(np.stack([y0, x0]), "bilinear_cell")
    wy, wx = y - y0, x - x0
    y0, x0 = y0.astype(np.int64), x0.astype(np.int64)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        fy = wy if dy else 1.0 - wy
        fx = wx if dx else 1.0 - wx
        sy = 1.0 if dy else -1.0
        sx = 1.0 if dx else -1.0
        idx = np.where(valid, yy * W + xx, 0)
        corners.append((idx, valid * fy * fx, valid * sy * fx, valid * fy * sx))
    return corners


def bilinear_sample(values: Tensor, positions: Tensor) -> Tensor:
    """Sample a (H, W, C) grid at fractional (row, col) positions.

    ``positions`` has shape (..., 2); the result has shape (..., C). Points
    outside the grid read zeros. Differentiable in both arguments.
    """
    values, positions = as_tensor(values), as_tensor(positions)
    if values.ndim != 3 or positions.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample needs (H,W,C) values and (...,2) positions, got {values.shape}, {positions.shape}")
    H, W, C = values.shape
    lead = positions.shape[:-1]
    pos = positions.data.reshape(-1, 2)
    n = pos.shape[0]
    corners = _bilinear_weights(pos, H, W)
    rows = np.arange(n)
    S = np.zeros((n, H * W), dtype=DTYPE)
    for idx, wgt, _, _ in corners:
        S[rows, idx] += wgt
    vflat = values.data.reshape(H * W, C)
    out = S @ vflat

    def backward(g):
        g2 = g.reshape(n, C)
        dv = (S.T @ g2).reshape(H, W, C)
        dpos = np.zeros((n, 2), dtype=DTYPE)
        for idx, _, dwy, dwx in corners:
            gv = (g2 * vflat[idx]).sum(axis=1)
            dpos[:, 0] += dwy * gv
            dpos[:, 1] += dwx * gv
        return dv, dpos.reshape(positions.shape)

    return record(out.reshape(*lead, C), (values, positions), backward)


@functools.lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear interpolation matrix (n_out, n_in) with half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, size: Tuple[int, int]) -> Tensor:
    """Bilinearly resize a (h, w, C) map to (H, W, C)."""
    x = as_tensor(x)
    h, w, _ = x.shape
    ry, rx = resize_matrix(h, size[0]), resize_matrix(w, size[1])
    out = np.einsum("Hh,hwc,Ww->HWc", ry, x.data, rx, optimize=True)
    return record(out, (x,), lambda g: (np.einsum("Hh,HWc,Ww->hwc", ry, g, rx, optimize=True),))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit norm."""
    x = as_tensor(x)
    raw = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    live = raw > eps
    note_branch(live, "l2_normalize")
    norm = np.where(live, raw, eps)
    out = x.data / norm

    def backward(g):
        # rows below eps were divided by a constant
        g = g / norm
        return (np.where(live, g - out * (g * out).sum(axis=-1, keepdims=True), g),)

    return record(out, (x,), backward)
