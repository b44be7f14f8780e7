"""Dense tensor primitives with explicit vector-Jacobian products.

Tensors are plain ``float64`` numpy arrays laid out ``[..., H, W, C]``:
the innermost axis is channels and any leading axes are batch/time.
Every differentiable op comes as a forward function plus a ``*_vjp``
function that maps an output cotangent to one cotangent per argument.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

DTYPE = np.float64


@dataclass
class ConvParams:
    """Convolution kernel ``[kh, kw, c_in, c_out]`` and bias ``[c_out]``."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.kernel.ndim != 4:
            raise ValueError(f"kernel must be 4-D [kh, kw, c_in, c_out], got {self.kernel.shape}")
        kh, kw, _, c_out = self.kernel.shape
        if kh < 1 or kw < 1 or c_out < 1:
            raise ValueError(f"degenerate kernel shape {self.kernel.shape}")
        if self.bias.shape != (c_out,):
            raise ValueError(f"bias shape {self.bias.shape} does not match c_out={c_out}")

    @classmethod
    def zeros(cls, kh: int, kw: int, c_in: int, c_out: int) -> "ConvParams":
        return cls(np.zeros((kh, kw, c_in, c_out)), np.zeros(c_out))


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


# ---------------------------------------------------------------------------
# convolution


def _pads(kh: int, kw: int, padding: str) -> tuple[int, int, int, int]:
    if padding == "same_zero":
        top, left = (kh - 1) // 2, (kw - 1) // 2
        return top, kh - 1 - top, left, kw - 1 - left
    if padding == "valid":
        return 0, 0, 0, 0
    raise ValueError(f"unknown padding {padding!r}; expected 'same_zero' or 'valid'")


def _check_conv(x: np.ndarray, kernel: np.ndarray, padding: str):
    if x.ndim < 3:
        raise ValueError(f"input must be [..., H, W, C], got shape {x.shape}")
    kh, kw, c_in, _ = kernel.shape
    if x.shape[-1] != c_in:
        raise ValueError(f"channel axis mismatch: input has {x.shape[-1]} channels, kernel expects {c_in}")
    if padding == "valid":
        if x.shape[-3] < kh:
            raise ValueError(f"height axis too small for valid conv: {x.shape[-3]} < {kh}")
        if x.shape[-2] < kw:
            raise ValueError(f"width axis too small for valid conv: {x.shape[-2]} < {kw}")


def _pad(x: np.ndarray, pads) -> np.ndarray:
    top, bottom, left, right = pads
    if not any(pads):
        return x
    width = [(0, 0)] * (x.ndim - 3) + [(top, bottom), (left, right), (0, 0)]
    return np.pad(x, width)


def conv2d(x, params: ConvParams, padding: str = "same_zero") -> np.ndarray:
    """2-D convolution (cross-correlation) over the last three axes.

    Each output pixel is one dot product over the window flattened in
    ``(kh, kw, c_in)`` order, then the bias is added.
    """
    return conv2d_raw(as_tensor(x), params.kernel, params.bias, padding)


def _columns(xp: np.ndarray, kh: int, kw: int, H: int, W: int) -> np.ndarray:
    # [..., H, W, kh*kw*c_in], taps ordered (kh, kw, c_in) to match kernel.reshape
    if kh == 1 and kw == 1:
        return xp
    taps = [xp[..., i:i + H, j:j + W, :] for i in range(kh) for j in range(kw)]
    return np.concatenate(taps, axis=-1)


def conv2d_raw(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None, padding: str = "same_zero") -> np.ndarray:
    _check_conv(x, kernel, padding)
    kh, kw, c_in, c_out = kernel.shape
    xp = _pad(x, _pads(kh, kw, padding))
    H = xp.shape[-3] - kh + 1
    W = xp.shape[-2] - kw + 1
    out = _columns(xp, kh, kw, H, W) @ kernel.reshape(kh * kw * c_in, c_out)
    if bias is not None:
        out += bias
    return out


def conv2d_vjp(g: np.ndarray, x: np.ndarray, kernel: np.ndarray, padding: str = "same_zero"):
    """Cotangents ``(dx, dkernel, dbias)`` of :func:`conv2d_raw`."""
    kh, kw, c_in, c_out = kernel.shape
    pads = _pads(kh, kw, padding)
    xp = _pad(x, pads)
    H, W = g.shape[-3], g.shape[-2]
    g2 = g.reshape(-1, c_out)
    cols = _columns(xp, kh, kw, H, W)
    dk = (cols.reshape(-1, kh * kw * c_in).T @ g2).reshape(kernel.shape)
    dcols = g @ kernel.reshape(kh * kw * c_in, c_out).T
    if kh == 1 and kw == 1:
        dxp = dcols
    else:
        dxp = np.zeros_like(xp)
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            dxp[..., i:i + H, j:j + W, :] += dcols[..., k * c_in:(k + 1) * c_in]
    top, bottom, left, right = pads
    dx = dxp[..., top:dxp.shape[-3] - bottom, left:dxp.shape[-2] - right, :]
    db = g2.sum(axis=0)
    return dx, dk, db


# ---------------------------------------------------------------------------
# activations


def sigmoid(x) -> np.ndarray:
    x = as_tensor(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind: str) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(as_tensor(x))
    raise ValueError(f"unknown activation {kind!r}")


def activation_vjp_from_output(g: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    """Backward pass written in terms of the forward output ``y``."""
    if kind == "sigmoid":
        return g * y * (1.0 - y)
    if kind == "tanh":
        return g * (1.0 - y * y)
    raise ValueError(f"unknown activation {kind!r}")


def activation_vjp(g, x, kind: str) -> np.ndarray:
    return activation_vjp_from_output(as_tensor(g), activation(x, kind), kind)


# ---------------------------------------------------------------------------
# bilinear sampling with zero fill


def _corners(H: int, W: int, ys: np.ndarray, xs: np.ndarray):
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    out = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        flat = np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)
        out.append((flat, valid))
    return fy, fx, out


def _gather(flatmap: np.ndarray, flat: np.ndarray, valid: np.ndarray) -> np.ndarray:
    # flatmap [B, H*W, C]; flat/valid [B, N]
    vals = np.take_along_axis(flatmap, flat[..., None], axis=1)
    return vals * valid[..., None]


def _batchify(map_: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    lead = map_.shape[:-3]
    if ys.shape[:-1] != lead or xs.shape != ys.shape:
        raise ValueError(f"coordinate leading dims {ys.shape[:-1]} do not match map leading dims {lead}")
    H, W, C = map_.shape[-3:]
    B = int(np.prod(lead, dtype=np.int64))
    return lead, H, W, C, map_.reshape(B, H * W, C), ys.reshape(B, -1), xs.reshape(B, -1)


def bilinear_sample(map_, ys, xs) -> np.ndarray:
    """Sample ``map_[..., H, W, C]`` at fractional ``(ys, xs)`` of shape ``[..., N]``.

    Pixels outside the map read as zero, so a sample whose whole
    neighbourhood is outside returns 0. Returns ``[..., N, C]``.
    """
    map_ = as_tensor(map_)
    lead, H, W, C, fm, y2, x2 = _batchify(map_, as_tensor(ys), as_tensor(xs))
    fy, fx, corners = _corners(H, W, y2, x2)
    (f00, m00), (f01, m01), (f10, m10), (f11, m11) = corners
    wy0 = (1.0 - fy)[..., None]
    wx0 = (1.0 - fx)[..., None]
    wy1 = fy[..., None]
    wx1 = fx[..., None]
    out = (wy0 * wx0 * _gather(fm, f00, m00) + wy0 * wx1 * _gather(fm, f01, m01)
           + wy1 * wx0 * _gather(fm, f10, m10) + wy1 * wx1 * _gather(fm, f11, m11))
    return out.reshape(lead + (y2.shape[-1], C))


def bilinear_sample_points(map_, coords) -> np.ndarray:
    """Sample a single ``[H, W, C]`` map at a list of ``(y, x)`` pairs."""
    coords = as_tensor(coords).reshape(-1, 2)
    return bilinear_sample(map_, coords[:, 0], coords[:, 1])


def bilinear_sample_vjp(g, map_, ys, xs):
    """Cotangents ``(dmap, dys, dxs)`` of :func:`bilinear_sample`."""
    map_ = as_tensor(map_)
    g = as_tensor(g)
    lead, H, W, C, fm, y2, x2 = _batchify(map_, as_tensor(ys), as_tensor(xs))
    B, N = y2.shape
    g2 = g.reshape(B, N, C)
    fy, fx, corners = _corners(H, W, y2, x2)
    (f00, m00), (f01, m01), (f10, m10), (f11, m11) = corners
    v00 = _gather(fm, f00, m00)
    v01 = _gather(fm, f01, m01)
    v10 = _gather(fm, f10, m10)
    v11 = _gather(fm, f11, m11)
    wy0, wx0, wy1, wx1 = 1.0 - fy, 1.0 - fx, fy, fx

    dfy = wx0[..., None] * (v10 - v00) + wx1[..., None] * (v11 - v01)
    dfx = wy0[..., None] * (v01 - v00) + wy1[..., None] * (v11 - v10)
    dys = (g2 * dfy).sum(-1)
    dxs = (g2 * dfx).sum(-1)

    # scatter into the map with bincount: deterministic accumulation order
    offs = (np.arange(B) * (H * W))[:, None]
    idx = []
    wts = []
    for (flat, valid), w in (((f00, m00), wy0 * wx0), ((f01, m01), wy0 * wx1),
                             ((f10, m10), wy1 * wx0), ((f11, m11), wy1 * wx1)):
        idx.append((flat + offs).ravel())
        wts.append((w * valid).ravel())
    idx = np.concatenate(idx)
    wts = np.concatenate(wts)
    gw = np.tile(g2.reshape(B * N, C), (4, 1)) * wts[:, None]
    dmap = np.empty((B * H * W, C), dtype=DTYPE)
    for c in range(C):
        dmap[:, c] = np.bincount(idx, weights=gw[:, c], minlength=B * H * W)
    return (dmap.reshape(map_.shape), dys.reshape(as_tensor(ys).shape),
            dxs.reshape(as_tensor(xs).shape))


def dense_warp(map_, flow) -> np.ndarray:
    """Backward warp: ``out[y, x] = map_[y - flow_y, x - flow_x]``.

    ``flow`` is ``[..., H, W, 2]`` holding ``(dy, dx)`` per output pixel.
    """
    map_ = as_tensor(map_)
    flow = as_tensor(flow)
    ys, xs = _warp_coords(map_.shape, flow)
    return bilinear_sample(map_, ys, xs).reshape(map_.shape)


def _warp_coords(shape, flow):
    H, W = shape[-3], shape[-2]
    gy, gx = np.meshgrid(np.arange(H, dtype=DTYPE), np.arange(W, dtype=DTYPE), indexing="ij")
    lead = shape[:-3]
    ys = (gy - flow[..., 0]).reshape(lead + (H * W,))
    xs = (gx - flow[..., 1]).reshape(lead + (H * W,))
    return ys, xs


def dense_warp_vjp(g, map_, flow):
    """Cotangents ``(dmap, dflow)`` of :func:`dense_warp`."""
    map_ = as_tensor(map_)
    flow = as_tensor(flow)
    ys, xs = _warp_coords(map_.shape, flow)
    C = map_.shape[-1]
    g = as_tensor(g).reshape(ys.shape + (C,))
    dmap, dys, dxs = bilinear_sample_vjp(g, map_, ys, xs)
    dflow = -np.stack([dys, dxs], axis=-1).reshape(flow.shape)
    return dmap, dflow


# ---------------------------------------------------------------------------
# .ten files


def save_tensor(path, x) -> None:
    """Write ``dims: d0 d1 ...`` then a little-endian float64 blob."""
    x = as_tensor(x)
    header = ("dims: " + " ".join(str(d) for d in x.shape) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = raw[:nl].decode("ascii")
    if not header.startswith("dims:"):
        raise ValueError(f"{path}: missing 'dims:' manifest line")
    dims = tuple(int(d) for d in header[5:].split())
    data = np.frombuffer(raw[nl + 1:], dtype="<f8")
    expected = int(np.prod(dims, dtype=np.int64))
    if data.size != expected:
        raise ValueError(f"{path}: blob holds {data.size} values, dims {dims} need {expected}")
    return data.reshape(dims).astype(DTYPE)
