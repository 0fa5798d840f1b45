"""Neural layers as autodiff graph ops: conv, transposed conv, pooling,
ROI max pooling, fully connected, and the three task losses.

Convolution is cross-correlation (no kernel flip) over NCHW, implemented as
im2col + one GEMM. transposed_conv2d is its exact adjoint: for matching
geometry and zero bias, <conv2d(x, k), y> == <x, transposed_conv2d(y, k)>.
Max ops route gradients to the first maximum in row-major scan order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class ConvParams:
    """Weights for conv2d ([out_ch, in_ch, kh, kw]) or transposed_conv2d
    ([in_ch, out_ch, kh, kw]); the same tensor serves both in the adjoint
    pairing. bias has the operation's output channel count. padding may be a
    single int or an (up/down, left/right) pair."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int | tuple[int, int] = 0

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {self.weight.shape}")
        if self.bias.data.ndim != 1:
            raise ShapeError(f"conv bias must be rank 1, got {self.bias.shape}")
        if self.stride < 1:
            raise ContractError(f"stride must be >= 1, got {self.stride}")
        ph, pw = self.pad_pair()
        if ph < 0 or pw < 0:
            raise ContractError(f"padding must be >= 0, got {self.padding}")

    def pad_pair(self) -> tuple[int, int]:
        if isinstance(self.padding, tuple):
            return self.padding
        return (self.padding, self.padding)


@dataclass(frozen=True)
class Roi:
    """Axis-aligned box in integer feature-map coordinates, [x0,x1) x [y0,y1),
    with a 10-way density-level label."""

    x0: int
    y0: int
    x1: int
    y1: int
    label: int = 0

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ContractError(f"degenerate roi ({self.x0},{self.y0},{self.x1},{self.y1})")
        if not 0 <= self.label <= 9:
            raise ContractError(f"roi label {self.label} outside 0..9")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height


# ---------- im2col plumbing ----------


def _pad2d(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, s: int,
            ph: int, pw: int) -> tuple[np.ndarray, int, int]:
    """[N,C,H,W] -> ([N*OH*OW, C*kh*kw], OH, OW), rows in (n, oy, ox) order."""
    n, c, h, w = x.shape
    oh = (h + 2 * ph - kh) // s + 1
    ow = (w + 2 * pw - kw) // s + 1
    xp = _pad2d(x, ph, pw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(col), oh, ow


def _col2im(col: np.ndarray, shape: tuple[int, int, int, int],
            kh: int, kw: int, s: int, ph: int, pw: int,
            oh: int, ow: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back into an [N,C,H,W] image."""
    n, c, h, w = shape
    v = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape, dtype=col.dtype)
    for ky in range(kh):
        oy_lo = max(0, -((ky - ph) // s) if ky < ph else 0)
        # largest oy with ky - ph + s*oy <= h-1
        oy_hi = min(oh - 1, (h - 1 - ky + ph) // s)
        if oy_hi < oy_lo:
            continue
        y0 = ky - ph + s * oy_lo
        ny = oy_hi - oy_lo + 1
        for kx in range(kw):
            ox_lo = max(0, -((kx - pw) // s) if kx < pw else 0)
            ox_hi = min(ow - 1, (w - 1 - kx + pw) // s)
            if ox_hi < ox_lo:
                continue
            x0 = kx - pw + s * ox_lo
            nx = ox_hi - ox_lo + 1
            out[:, :, y0:y0 + s * ny:s, x0:x0 + s * nx:s] += \
                v[:, :, ky, kx, oy_lo:oy_lo + ny, ox_lo:ox_lo + nx]
    return out


def _check_dtype(*tensors: Tensor) -> None:
    dts = {t.data.dtype for t in tensors}
    if len(dts) > 1:
        raise ShapeError(f"mixed dtypes {sorted(str(d) for d in dts)}")


# ---------- convolution ----------


def conv2d(x: Tensor, p: ConvParams, act: str | None = None) -> Tensor:
    """Cross-correlation + bias. act="relu" fuses the activation (same math
    as a separate relu node, one less full-map materialization)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got {x.shape}")
    w, b = p.weight, p.bias
    _check_dtype(x, w, b)
    cout, cin, kh, kw = w.shape
    n, c, h, win_ = x.shape
    if c != cin:
        raise ShapeError(f"conv2d channels: input {c} vs weight {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape}, want ({cout},)")
    if h + 2 * p.padding < kh or win_ + 2 * p.padding < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input")
    if act not in (None, "relu"):
        raise ContractError(f"unknown activation {act!r}")

    s, pad = p.stride, p.padding
    col, oh, ow = _im2col(x.data, kh, kw, s, pad)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out2 = col @ w2.T
    out2 += b.data
    pre = np.ascontiguousarray(out2.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))
    if act == "relu":
        np.maximum(pre, 0, out=pre)
    out = Tensor(pre, _parents=(x, w, b), _op="conv2d")

    def bwd(g, acc):
        if act == "relu":
            g = np.where(out.data > 0, g, g.dtype.type(0))
        g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, cout)
        acc(b, g2.sum(axis=0), own=True)
        gw = col.T @ g2  # [K, cout]; transpose views keep BLAS fast
        acc(w, np.ascontiguousarray(gw.T).reshape(w.shape), own=True)
        if x.requires_grad:
            gcol = g2 @ w2
            acc(x, _col2im(gcol, x.shape, kh, kw, s, pad, oh, ow), own=True)

    out._backward = bwd
    return out


def transposed_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Adjoint of conv2d. weight [in_ch, out_ch, kh, kw]; output extent is
    (in - 1) * stride + k - 2 * padding."""
    if x.data.ndim != 4:
        raise ShapeError(f"transposed_conv2d input must be [N,C,H,W], got {x.shape}")
    w, b = p.weight, p.bias
    _check_dtype(x, w, b)
    cin, cout, kh, kw = w.shape
    n, c, h, win_ = x.shape
    if c != cin:
        raise ShapeError(f"transposed_conv2d channels: input {c} vs weight {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"transposed_conv2d bias shape {b.shape}, want ({cout},)")
    s, pad = p.stride, p.padding
    oh = (h - 1) * s + kh - 2 * pad
    ow = (win_ - 1) * s + kw - 2 * pad
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"transposed_conv2d output {oh}x{ow} is empty")

    x2 = x.data.transpose(0, 2, 3, 1).reshape(n * h * win_, cin)
    w2 = w.data.reshape(cin, cout * kh * kw)
    ocol = x2 @ w2
    res = _col2im(ocol, (n, cout, oh, ow), kh, kw, s, pad, h, win_)
    res += b.data.reshape(1, cout, 1, 1)
    out = Tensor(res, _parents=(x, w, b), _op="tconv2d")

    def bwd(g, acc):
        acc(b, g.sum(axis=(0, 2, 3)), own=True)
        gcol, _, _ = _im2col(g, kh, kw, s, pad)  # back to [n*h*w, cout*kh*kw]
        acc(w, (x2.T @ gcol).reshape(w.shape), own=True)
        if x.requires_grad:
            gx2 = gcol @ w2.T
            gx = np.ascontiguousarray(
                gx2.reshape(n, h, win_, cin).transpose(0, 3, 1, 2))
            acc(x, gx, own=True)

    out._backward = bwd
    return out


def max_pool2d(x: Tensor, k: int = 2, s: int = 2) -> Tensor:
    """Non-overlapping max pooling, no padding. Ties take the first element
    in row-major window order."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d input must be [N,C,H,W], got {x.shape}")
    if k != s:
        raise ContractError(f"only k == s pooling is supported, got k={k} s={s}")
    n, c, h, w = x.shape
    if h % s or w % s:
        raise ShapeError(f"max_pool2d input {h}x{w} not divisible by stride {s}")
    oh, ow = h // s, w // s
    v = np.ascontiguousarray(
        x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, oh, ow, k * k)
    arg = v.argmax(axis=-1)
    data = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]
    out = Tensor(data, _parents=(x,), _op="max_pool2d")

    def bwd(g, acc):
        buf = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
        np.put_along_axis(buf, arg[..., None], g[..., None], axis=-1)
        gx = np.ascontiguousarray(
            buf.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
        ).reshape(n, c, h, w)
        acc(x, gx, own=True)

    out._backward = bwd
    return out


def roi_pool(f: Tensor, roi: Roi, out_h: int, out_w: int) -> Tensor:
    """Max pooling of one ROI into a fixed [C, out_h, out_w] grid. Bin i along
    an extent e spans [floor(i*e/out), ceil((i+1)*e/out)); bins may overlap by
    one row or column. Gradients go to each bin's first row-major maximum."""
    if f.data.ndim != 3:
        raise ShapeError(f"roi_pool expects [C,H,W], got {f.shape}")
    c, h, w = f.shape
    if roi.x1 > w or roi.y1 > h:
        raise ContractError(f"roi {roi} outside {h}x{w} map")
    rh, rw = roi.height, roi.width
    if out_h > rh or out_w > rw or out_h < 1 or out_w < 1:
        raise ContractError(f"pool grid {out_h}x{out_w} exceeds roi {rh}x{rw}")

    region = f.data[:, roi.y0:roi.y1, roi.x0:roi.x1]
    data = np.empty((c, out_h, out_w), dtype=f.data.dtype)
    spots = np.empty((out_h, out_w, c), dtype=np.int64)  # flat index into [H,W]
    crange = np.arange(c)
    for i in range(out_h):
        ry0 = (i * rh) // out_h
        ry1 = ((i + 1) * rh + out_h - 1) // out_h
        for j in range(out_w):
            rx0 = (j * rw) // out_w
            rx1 = ((j + 1) * rw + out_w - 1) // out_w
            bw = rx1 - rx0
            flat = region[:, ry0:ry1, rx0:rx1].reshape(c, -1)
            a = flat.argmax(axis=1)
            data[:, i, j] = flat[crange, a]
            spots[i, j] = (roi.y0 + ry0 + a // bw) * w + (roi.x0 + rx0 + a % bw)

    out = Tensor(data, _parents=(f,), _op="roi_pool")

    def bwd(g, acc):
        gx = np.zeros((c, h * w), dtype=g.dtype)
        # one scatter-add over all bins; duplicates must accumulate
        cc = np.broadcast_to(crange, (out_h, out_w, c)).reshape(-1)
        np.add.at(gx, (cc, spots.reshape(-1)), g.transpose(1, 2, 0).reshape(-1))
        acc(f, gx.reshape(c, h, w), own=True)

    out._backward = bwd
    return out


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with x [N,D], w [D,M], b [M]."""
    _check_dtype(x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"fully_connected wants 2-d x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"fully_connected shapes {x.shape} @ {w.shape} + {b.shape}")
    out = Tensor(x.data @ w.data + b.data, _parents=(x, w, b), _op="fc")

    def bwd(g, acc):
        acc(b, g.sum(axis=0), own=True)
        acc(w, x.data.T @ g, own=True)
        if x.requires_grad:
            acc(x, g @ w.data.T, own=True)

    out._backward = bwd
    return out


# ---------- losses ----------


def _target_array(target, like: Tensor, op: str) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    return np.ascontiguousarray(t, dtype=like.data.dtype) if t.dtype != like.data.dtype else t


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements. Scalar shape (1,)."""
    t = _target_array(target, pred, "mse_loss")
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss shapes {pred.shape} vs {t.shape}")
    d = pred.data - t
    out = Tensor(np.array([np.mean(d * d)], dtype=pred.data.dtype),
                 _parents=(pred,), _op="mse")

    def bwd(g, acc):
        c = 2.0 * float(g.reshape(-1)[0]) / d.size
        acc(pred, d * d.dtype.type(c), own=True)

    out._backward = bwd
    return out


def ce_class_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy of row-wise softmax against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"ce_class_loss logits must be [N,K], got {logits.shape}")
    lab = np.asarray(labels)
    if lab.ndim != 1 or lab.shape[0] != logits.shape[0]:
        raise ShapeError(f"labels shape {lab.shape} vs logits {logits.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(lab == np.round(lab)):
            raise ContractError("labels must be integers")
        lab = lab.astype(np.int64)
    n, k = logits.shape
    if np.any(lab < 0) or np.any(lab >= k):
        raise ContractError(f"labels outside 0..{k - 1}")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1, keepdims=True)) + m
    rows = np.arange(n)
    loss = (lse[:, 0] - z[rows, lab]).mean()
    out = Tensor(np.array([loss], dtype=z.dtype), _parents=(logits,), _op="ce_class")

    def bwd(g, acc):
        p = np.exp(z - lse)
        p[rows, lab] -= 1
        p *= z.dtype.type(float(g.reshape(-1)[0]) / n)
        acc(logits, p, own=True)

    out._backward = bwd
    return out


def ce_2d_loss(logits: Tensor, mask) -> Tensor:
    """Per-pixel 2-class cross entropy: logits [N,2,H,W] vs binary mask [N,H,W]."""
    if logits.data.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"ce_2d_loss logits must be [N,2,H,W], got {logits.shape}")
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    n, _, h, w = logits.shape
    if m.shape != (n, h, w):
        raise ShapeError(f"mask shape {m.shape} vs logits {logits.shape}")
    mf = m.astype(logits.data.dtype, copy=False)
    if not np.all((mf == 0) | (mf == 1)):
        raise ContractError("segmentation mask must be binary")

    l0 = logits.data[:, 0]
    l1 = logits.data[:, 1]
    lse = np.logaddexp(l0, l1)
    picked = np.where(mf == 1, l1, l0)
    loss = (lse - picked).mean()
    out = Tensor(np.array([loss], dtype=logits.data.dtype),
                 _parents=(logits,), _op="ce_2d")

    def bwd(g, acc):
        c = logits.data.dtype.type(float(g.reshape(-1)[0]) / (n * h * w))
        p1 = np.exp(l1 - lse)
        gl = np.empty_like(logits.data)
        gl[:, 1] = (p1 - mf) * c
        gl[:, 0] = -gl[:, 1]
        acc(logits, gl, own=True)

    out._backward = bwd
    return out
