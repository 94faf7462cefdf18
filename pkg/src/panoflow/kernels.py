"""Numeric kernels with a documented, reproducible accumulation order.

Every kernel promotes float32 inputs to float64, accumulates in a fixed
order, and rounds once to float32 at the end.  Convolutions visit the taps
of each output element in (input channel, kernel row, kernel column) order,
with the accumulator seeded from the bias; taps that fall into the zero
padding are skipped and contribute nothing.  Outputs are therefore
independent of tiling, threading, and vector width by construction, and
bit-identical to a straight quadruple-loop reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ShapeError


@dataclass(frozen=True)
class ConvParams:
    """Convolution weights: ``weight`` (out_ch, in_ch, kh, kw), ``bias`` (out_ch,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        w = np.ascontiguousarray(self.weight, dtype=np.float32)
        b = np.ascontiguousarray(self.bias, dtype=np.float32)
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got shape {self.weight.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(
                f"conv bias shape {b.shape} does not match {w.shape[0]} output channels"
            )
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


def _require_nchw(x: np.ndarray, op: str) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a (batch, channels, h, w) tensor, got shape {x.shape}")
    return np.ascontiguousarray(x, dtype=np.float32)


@njit(cache=True)
def _conv2d_stride1_core(x, w, b, pad, lo_all, hi_all):
    # One float64 accumulator row per output row, swept tap by tap.  For a
    # fixed (in_ch, ky) the clipped edge columns are finished first with a
    # scalar kx loop, then the fully covered columns [lo_all, hi_all] take
    # all kx taps in one pass.  Either way each output element receives its
    # taps in (in_ch, kernel row, kernel col) order.
    bsz, in_ch, h, wid = x.shape
    out_ch, _, kh, kw = w.shape
    oh = h + 2 * pad - kh + 1
    ow = wid + 2 * pad - kw + 1
    x64 = x.astype(np.float64)
    w64 = w.astype(np.float64)
    out = np.empty((bsz, out_ch, oh, ow), dtype=np.float32)
    rowacc = np.empty(ow, dtype=np.float64)
    mid = rowacc[lo_all:hi_all + 1]
    nmid = hi_all + 1 - lo_all
    c0 = lo_all - pad
    for n in range(bsz):
        for oc in range(out_ch):
            bias = np.float64(b[oc])
            for oy in range(oh):
                for i in range(ow):
                    rowacc[i] = bias
                for ic in range(in_ch):
                    for ky in range(kh):
                        iy = oy + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        if kw == 3 and pad == 1 and ow == wid:
                            # Common same-size case: one clipped column on
                            # each side, written straight-line.
                            w0 = w64[oc, ic, ky, 0]
                            w1v = w64[oc, ic, ky, 1]
                            w2 = w64[oc, ic, ky, 2]
                            acc = rowacc[0] + x64[n, ic, iy, 0] * w1v
                            rowacc[0] = acc + x64[n, ic, iy, 1] * w2
                            acc = rowacc[ow - 1] + x64[n, ic, iy, wid - 2] * w0
                            rowacc[ow - 1] = acc + x64[n, ic, iy, wid - 1] * w1v
                            for i in range(nmid):
                                acc = mid[i] + x64[n, ic, iy, i] * w0
                                acc = acc + x64[n, ic, iy, i + 1] * w1v
                                mid[i] = acc + x64[n, ic, iy, i + 2] * w2
                            continue
                        for ox in range(lo_all):
                            acc = rowacc[ox]
                            for kx in range(kw):
                                ix = ox + kx - pad
                                if 0 <= ix < wid:
                                    acc += x64[n, ic, iy, ix] * w64[oc, ic, ky, kx]
                            rowacc[ox] = acc
                        for ox in range(hi_all + 1, ow):
                            acc = rowacc[ox]
                            for kx in range(kw):
                                ix = ox + kx - pad
                                if 0 <= ix < wid:
                                    acc += x64[n, ic, iy, ix] * w64[oc, ic, ky, kx]
                            rowacc[ox] = acc
                        if kw == 3:
                            w0 = w64[oc, ic, ky, 0]
                            w1v = w64[oc, ic, ky, 1]
                            w2 = w64[oc, ic, ky, 2]
                            for i in range(nmid):
                                ix = i + c0
                                acc = mid[i] + x64[n, ic, iy, ix] * w0
                                acc = acc + x64[n, ic, iy, ix + 1] * w1v
                                mid[i] = acc + x64[n, ic, iy, ix + 2] * w2
                        else:
                            for kx in range(kw):
                                wv = w64[oc, ic, ky, kx]
                                xoff = c0 + kx
                                for i in range(nmid):
                                    mid[i] += x64[n, ic, iy, i + xoff] * wv
                for i in range(ow):
                    out[n, oc, oy, i] = np.float32(rowacc[i])
    return out


@njit(cache=True)
def _conv2d_core(x, w, b, stride, pad):
    # Strided fallback; same per-element tap order as the stride-1 core.
    bsz, in_ch, h, wid = x.shape
    out_ch, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1
    x64 = x.astype(np.float64)
    w64 = w.astype(np.float64)
    out = np.empty((bsz, out_ch, oh, ow), dtype=np.float32)
    rowacc = np.empty(ow, dtype=np.float64)
    for n in range(bsz):
        for oc in range(out_ch):
            bias = np.float64(b[oc])
            for oy in range(oh):
                for i in range(ow):
                    rowacc[i] = bias
                for ic in range(in_ch):
                    for ky in range(kh):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            acc = rowacc[ox]
                            for kx in range(kw):
                                ix = ox * stride + kx - pad
                                if 0 <= ix < wid:
                                    acc += x64[n, ic, iy, ix] * w64[oc, ic, ky, kx]
                            rowacc[ox] = acc
                for i in range(ow):
                    out[n, oc, oy, i] = np.float32(rowacc[i])
    return out


def conv2d(x: np.ndarray, params: ConvParams, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D convolution over a (batch, channels, h, w) float32 tensor.

    Taps are accumulated per output element in (input channel, kernel row,
    kernel column) order, in float64, starting from the bias, with a single
    final round to float32.
    """
    x = _require_nchw(x, "conv2d")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    out_ch, in_ch, kh, kw = params.weight.shape
    if x.shape[1] != in_ch:
        raise ShapeError(
            f"conv2d input has {x.shape[1]} channels but weight {params.weight.shape} expects {in_ch}"
        )
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(
            f"conv2d input {x.shape} too small for kernel {kh}x{kw} with padding {padding}"
        )
    if stride == 1:
        wid = x.shape[3]
        ow = wid + 2 * padding - kw + 1
        lo_all, hi_all = 0, ow - 1
        for kx in range(kw):
            xb = kx - padding
            lo_all = max(lo_all, -xb if xb < 0 else 0)
            hi_all = min(hi_all, wid - 1 - xb)
        if lo_all <= hi_all:
            return _conv2d_stride1_core(x, params.weight, params.bias, padding, lo_all, hi_all)
    return _conv2d_core(x, params.weight, params.bias, stride, padding)


@njit(cache=True)
def _deconv2x_core(x, w, b):
    # Each output element has exactly one tap per input channel, taken in
    # ascending channel order; the kx phases use separate accumulator rows
    # so the inner channel sweep stays contiguous.
    bsz, in_ch, h, wid = x.shape
    out_ch = w.shape[0]
    oh = 2 * h
    ow = 2 * wid
    x64 = x.astype(np.float64)
    w64 = w.astype(np.float64)
    out = np.empty((bsz, out_ch, oh, ow), dtype=np.float32)
    tmp = np.empty(wid, dtype=np.float64)
    for n in range(bsz):
        for oc in range(out_ch):
            bias = np.float64(b[oc])
            for oy in range(oh):
                iy = oy // 2
                ky = oy - 2 * iy
                for kx in range(2):
                    for j in range(wid):
                        tmp[j] = bias
                    for ic in range(in_ch):
                        wv = w64[oc, ic, ky, kx]
                        for j in range(wid):
                            tmp[j] += x64[n, ic, iy, j] * wv
                    for j in range(wid):
                        out[n, oc, oy, 2 * j + kx] = np.float32(tmp[j])
    return out


def deconv2x(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsample).

    Each output element receives exactly one tap per input channel, so the
    float64 accumulation runs over input channels in ascending order,
    seeded from the bias.
    """
    x = _require_nchw(x, "deconv2x")
    out_ch, in_ch, kh, kw = params.weight.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"deconv2x requires a 2x2 kernel, got {kh}x{kw}")
    if x.shape[1] != in_ch:
        raise ShapeError(
            f"deconv2x input has {x.shape[1]} channels but weight {params.weight.shape} expects {in_ch}"
        )
    return _deconv2x_core(x, params.weight, params.bias)


@njit(cache=True)
def _group_norm_core(x, gamma, beta, groups, eps):
    bsz, ch, h, w = x.shape
    gsz = ch // groups
    out = np.empty_like(x)
    for n in range(bsz):
        for g in range(groups):
            c0 = g * gsz
            s = 0.0
            for c in range(c0, c0 + gsz):
                for y in range(h):
                    for xx in range(w):
                        s += np.float64(x[n, c, y, xx])
            cnt = np.float64(gsz * h * w)
            mean = s / cnt
            v = 0.0
            for c in range(c0, c0 + gsz):
                for y in range(h):
                    for xx in range(w):
                        d = np.float64(x[n, c, y, xx]) - mean
                        v += d * d
            inv = 1.0 / np.sqrt(v / cnt + eps)
            for c in range(c0, c0 + gsz):
                gm = np.float64(gamma[c])
                bt = np.float64(beta[c])
                for y in range(h):
                    for xx in range(w):
                        val = (np.float64(x[n, c, y, xx]) - mean) * inv * gm + bt
                        out[n, c, y, xx] = np.float32(val)
    return out


def group_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    groups: int = 32,
    eps: float = 1e-5,
) -> np.ndarray:
    """Group normalization with float64 statistics and biased variance.

    Mean and variance are accumulated per (batch, group) over elements in
    C order (channel, row, column).
    """
    x = _require_nchw(x, "group_norm")
    ch = x.shape[1]
    if groups < 1 or ch % groups != 0:
        raise ShapeError(f"group_norm: {ch} channels not divisible into {groups} groups")
    gamma = np.ascontiguousarray(gamma, dtype=np.float32)
    beta = np.ascontiguousarray(beta, dtype=np.float32)
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError(
            f"group_norm: gamma {gamma.shape} / beta {beta.shape} must both be ({ch},)"
        )
    return _group_norm_core(x, gamma, beta, groups, eps)


@njit(cache=True)
def _bilinear_core(x, oh, ow, corners):
    bsz, ch, h, w = x.shape
    out = np.empty((bsz, ch, oh, ow), dtype=np.float32)
    ys0 = np.empty(oh, dtype=np.int64)
    ys1 = np.empty(oh, dtype=np.int64)
    yd = np.empty(oh, dtype=np.float64)
    for oy in range(oh):
        if corners:
            fy = oy * ((h - 1) / (oh - 1)) if oh > 1 else 0.0
        else:
            fy = (oy + 0.5) * (h / oh) - 0.5
        if fy < 0.0:
            fy = 0.0
        if fy > h - 1:
            fy = np.float64(h - 1)
        y0 = int(np.floor(fy))
        ys0[oy] = y0
        ys1[oy] = y0 + 1 if y0 + 1 < h else h - 1
        yd[oy] = fy - y0
    xs0 = np.empty(ow, dtype=np.int64)
    xs1 = np.empty(ow, dtype=np.int64)
    xd = np.empty(ow, dtype=np.float64)
    for ox in range(ow):
        if corners:
            fx = ox * ((w - 1) / (ow - 1)) if ow > 1 else 0.0
        else:
            fx = (ox + 0.5) * (w / ow) - 0.5
        if fx < 0.0:
            fx = 0.0
        if fx > w - 1:
            fx = np.float64(w - 1)
        x0 = int(np.floor(fx))
        xs0[ox] = x0
        xs1[ox] = x0 + 1 if x0 + 1 < w else w - 1
        xd[ox] = fx - x0
    for n in range(bsz):
        for c in range(ch):
            for oy in range(oh):
                y0 = ys0[oy]
                y1 = ys1[oy]
                dy = yd[oy]
                for ox in range(ow):
                    x0 = xs0[ox]
                    x1 = xs1[ox]
                    dx = xd[ox]
                    v00 = np.float64(x[n, c, y0, x0])
                    v01 = np.float64(x[n, c, y0, x1])
                    v10 = np.float64(x[n, c, y1, x0])
                    v11 = np.float64(x[n, c, y1, x1])
                    top = v00 + dx * (v01 - v00)
                    bot = v10 + dx * (v11 - v10)
                    out[n, c, oy, ox] = np.float32(top + dy * (bot - top))
    return out


def bilinear_resize(
    x: np.ndarray, out_h: int, out_w: int, align_corners: bool = False
) -> np.ndarray:
    """Bilinear resize; default half-pixel centers, clamped to the input extent.

    With align_corners=False, source coordinates are (i + 0.5) * in/out - 0.5,
    clamped to [0, in - 1]; with align_corners=True they are i * (in-1)/(out-1).
    Interpolation uses the delta form v0 + frac * (v1 - v0) in float64, so a
    constant image resizes to exactly that constant.
    """
    x = _require_nchw(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    return _bilinear_core(x, out_h, out_w, align_corners)


def nearest_upsample2x(x: np.ndarray) -> np.ndarray:
    """Exact 2x nearest-neighbour upsample (pixel replication, no arithmetic)."""
    x = _require_nchw(x, "nearest_upsample2x")
    return x.repeat(2, axis=2).repeat(2, axis=3)


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0); exact, no rounding."""
    return np.maximum(x, np.float32(0.0))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, computed in float64."""
    x64 = np.asarray(x, dtype=np.float64)
    pos = x64 >= 0
    z = np.exp(np.where(pos, -x64, x64))
    return np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(np.float32)


def softmax_channel(x: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis of a (batch, channels, h, w) tensor.

    Subtracts the per-pixel channel max, exponentiates and normalizes in
    float64, then rounds to float32.
    """
    x = _require_nchw(x, "softmax_channel")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x.astype(np.float64) - m)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    """Dispatch to an activation by name: ``relu`` or ``softmax_channel``."""
    if kind == "relu":
        return relu(x)
    if kind == "softmax_channel":
        return softmax_channel(x)
    raise ShapeError(f"unknown activation kind {kind!r}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum of two tensors with identical dims."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return np.add(a, b, dtype=np.float32)


@njit(cache=True)
def _roi_align_core(feat, boxes, scale, out_size):
    n_roi = boxes.shape[0]
    ch, h, w = feat.shape
    out = np.empty((n_roi, ch, out_size, out_size), dtype=np.float32)
    f64 = feat.astype(np.float64)
    for r in range(n_roi):
        x1 = boxes[r, 0] * scale
        y1 = boxes[r, 1] * scale
        x2 = boxes[r, 2] * scale
        y2 = boxes[r, 3] * scale
        bin_h = (y2 - y1) / out_size
        bin_w = (x2 - x1) / out_size
        for c in range(ch):
            for i in range(out_size):
                for j in range(out_size):
                    acc = 0.0
                    for sy in range(2):
                        py = y1 + (i + (sy + 0.5) / 2.0) * bin_h
                        if py < 0.0:
                            py = 0.0
                        if py > h - 1:
                            py = np.float64(h - 1)
                        y0 = int(np.floor(py))
                        yb = y0 + 1 if y0 + 1 < h else h - 1
                        dy = py - y0
                        for sx in range(2):
                            px = x1 + (j + (sx + 0.5) / 2.0) * bin_w
                            if px < 0.0:
                                px = 0.0
                            if px > w - 1:
                                px = np.float64(w - 1)
                            x0 = int(np.floor(px))
                            xb = x0 + 1 if x0 + 1 < w else w - 1
                            dx = px - x0
                            v00 = f64[c, y0, x0]
                            v01 = f64[c, y0, xb]
                            v10 = f64[c, yb, x0]
                            v11 = f64[c, yb, xb]
                            top = v00 + dx * (v01 - v00)
                            bot = v10 + dx * (v11 - v10)
                            acc += top + dy * (bot - top)
                    out[r, c, i, j] = np.float32(acc / 4.0)
    return out


def roi_align(
    feat: np.ndarray, boxes: np.ndarray, spatial_scale: float, out_size: int = 14
) -> np.ndarray:
    """Crop fixed-size windows from one feature map by bilinear sampling.

    ``feat`` is (channels, h, w); ``boxes`` is (n, 4) as x1, y1, x2, y2 in
    image coordinates, mapped to feature coordinates by ``spatial_scale``
    with no half-pixel shift.  Each output bin averages a 2x2 grid of
    bilinear samples, with sample coordinates clamped to the feature extent.
    """
    feat = np.ascontiguousarray(feat, dtype=np.float32)
    if feat.ndim != 3:
        raise ShapeError(f"roi_align expects a (channels, h, w) feature map, got {feat.shape}")
    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ShapeError(f"roi_align boxes must be (n, 4), got {boxes.shape}")
    if out_size < 1:
        raise ShapeError(f"roi_align out_size must be positive, got {out_size}")
    return _roi_align_core(feat, boxes, float(spatial_scale), out_size)
