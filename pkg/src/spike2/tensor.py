"""Dense float64 tensor kernels: convolution, batch norm, bilinear sampling.

Arrays are C-contiguous float64 throughout, NCHW for feature maps, row-major
flat layout. Every kernel here is a pure function; the training graph
(autodiff) and the expanded-spike inference executor both call the same
kernels so the two execution modes share one set of numerics.

No implicit broadcasting beyond per-channel affine: anything else raises
DimensionError naming the offending axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionError",
    "ConvSpec",
    "BatchNormParams",
    "as_tensor",
    "round_half_away",
    "conv_output_hw",
    "conv2d",
    "batchnorm",
    "fold_bn_into_conv",
    "bilinear_sample",
    "bilinear_gather",
    "bilinear_gather_backward",
    "upsample_matrices",
]


class DimensionError(ValueError):
    """Shape mismatch that names the offending axis."""

    def __init__(self, axis: str, expected, got):
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"axis {axis!r}: expected {expected}, got {got}")


def as_tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 array with all dims >= 1."""
    a = np.ascontiguousarray(data, dtype=np.float64)
    if any(d < 1 for d in a.shape):
        raise DimensionError("shape", ">=1 per dim", a.shape)
    return a


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero (np.round ties to even, which we never use).

    One rounding convention shared by training and inference keeps the
    quantized emissions of both modes identical.
    """
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

_CONV_KINDS = ("standard", "depthwise", "pointwise")


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution.

    kind 'pointwise' forces a 1x1 kernel; 'depthwise' convolves each channel
    with its own kernel (channel multiplier 1, so out_channels == in_channels).
    """

    kind: str
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.kind not in _CONV_KINDS:
            raise ValueError(f"unknown conv kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise DimensionError("channels", ">=1", (self.in_channels, self.out_channels))
        if self.kind == "pointwise" and self.kernel != (1, 1):
            raise ValueError("pointwise conv requires kernel (1, 1)")
        if self.kind == "depthwise" and self.out_channels != self.in_channels:
            raise ValueError("depthwise conv requires out_channels == in_channels")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError("kernel/stride must be >=1 and padding >=0")

    @property
    def groups(self) -> int:
        return self.in_channels if self.kind == "depthwise" else 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @staticmethod
    def pointwise(c_in: int, c_out: int) -> "ConvSpec":
        return ConvSpec("pointwise", c_in, c_out)

    @staticmethod
    def depthwise(c: int, kernel: int = 3, stride: int = 1, padding: int | None = None) -> "ConvSpec":
        pad = kernel // 2 if padding is None else padding
        return ConvSpec("depthwise", c, c, (kernel, kernel), (stride, stride), (pad, pad))

    @staticmethod
    def standard(c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: int | None = None) -> "ConvSpec":
        pad = kernel // 2 if padding is None else padding
        return ConvSpec("standard", c_in, c_out, (kernel, kernel), (stride, stride), (pad, pad))


def conv_output_hw(spec: ConvSpec, h: int, w: int) -> tuple[int, int]:
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise DimensionError("spatial", "kernel fits input", (h, w))
    return ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N, C, kh, kw, ho, wo) patch view copy."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        hi = i + sh * (ho - 1) + 1
        for j in range(kw):
            wj = j + sw * (wo - 1) + 1
            cols[:, :, i, j] = xp[:, :, i:hi:sh, j:wj:sw]
    return cols


def _col2im(dcols: np.ndarray, hp: int, wp: int, sh: int, sw: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back to the padded canvas."""
    n, c, kh, kw, ho, wo = dcols.shape
    dxp = np.zeros((n, c, hp, wp), dtype=np.float64)
    for i in range(kh):
        hi = i + sh * (ho - 1) + 1
        for j in range(kw):
            wj = j + sw * (wo - 1) + 1
            dxp[:, :, i:hi:sh, j:wj:sw] += dcols[:, :, i, j]
    return dxp


def _check_conv_args(x: np.ndarray, spec: ConvSpec, weights: np.ndarray, bias):
    if x.ndim != 4:
        raise DimensionError("input rank", 4, x.ndim)
    if x.shape[1] != spec.in_channels:
        raise DimensionError("input channels", spec.in_channels, x.shape[1])
    if tuple(weights.shape) != spec.weight_shape:
        raise DimensionError("weight shape", spec.weight_shape, tuple(weights.shape))
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError("bias", (spec.out_channels,), tuple(bias.shape))


def conv2d(x: np.ndarray, spec: ConvSpec, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Grouped 2-D convolution, NCHW, float64."""
    out, _ = conv2d_forward(x, spec, weights, bias)
    return out


def conv2d_forward(x, spec: ConvSpec, weights, bias=None):
    """Forward pass returning (out, cols); cols is reused by the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    _check_conv_args(x, spec, weights, bias)
    n, cin, h, w = x.shape
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    ho, wo = conv_output_hw(spec, h, w)
    g = spec.groups
    cing = cin // g
    coutg = spec.out_channels // g

    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    colm = cols.reshape(n, g, cing * kh * kw, ho * wo)
    wm = weights.reshape(g, coutg, cing * kh * kw)
    out = np.matmul(wm, colm)  # (n, g, coutg, L) via broadcasting
    out = out.reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out, cols


def conv2d_grad_weight(grad_out, cols, spec: ConvSpec):
    n = grad_out.shape[0]
    g = spec.groups
    coutg = spec.out_channels // g
    kh, kw = spec.kernel
    cing = spec.in_channels // g
    l = grad_out.shape[2] * grad_out.shape[3]
    gm = grad_out.reshape(n, g, coutg, l)
    colm = cols.reshape(n, g, cing * kh * kw, l)
    dw = np.einsum("ngol,ngkl->gok", gm, colm, optimize=True)
    return dw.reshape(spec.weight_shape)


def conv2d_grad_input(grad_out, weights, spec: ConvSpec, x_shape):
    n, cin, h, w = x_shape
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    g = spec.groups
    cing = cin // g
    coutg = spec.out_channels // g
    gm = grad_out.reshape(n, g, coutg, ho * wo)
    wm = weights.reshape(g, coutg, cing * kh * kw)
    dcol = np.matmul(wm.transpose(0, 2, 1), gm)  # (n, g, cing*kh*kw, L)
    dcols = dcol.reshape(n, cin, kh, kw, ho, wo)
    dxp = _col2im(dcols, h + 2 * ph, w + 2 * pw, sh, sw)
    if ph or pw:
        return dxp[:, :, ph:ph + h, pw:pw + w]
    return dxp


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormParams:
    """Per-channel affine normalization state (channel axis = 1)."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.asarray(self.running_var, dtype=np.float64)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not (0.0 < self.momentum < 1.0):
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be nonnegative")

    @staticmethod
    def identity(channels: int, epsilon: float = 1e-5, momentum: float = 0.1) -> "BatchNormParams":
        return BatchNormParams(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            epsilon=epsilon,
            momentum=momentum,
        )


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def batchnorm(x: np.ndarray, params: BatchNormParams, training: bool) -> np.ndarray:
    """Normalize per channel; training mode uses batch statistics and updates
    the running ones, inference mode reads the running statistics only."""
    x = np.asarray(x, dtype=np.float64)
    c = x.shape[1]
    if params.gamma.shape != (c,):
        raise DimensionError("channel", params.gamma.shape, (c,))
    axes = _bn_axes(x)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // c
        unbiased = var * (n / max(n - 1, 1))
        m = params.momentum
        params.running_mean *= 1.0 - m
        params.running_mean += m * mean
        params.running_var *= 1.0 - m
        params.running_var += m * unbiased
    else:
        mean = params.running_mean
        var = params.running_var
    shape = (1, c) + (1,) * (x.ndim - 2)
    inv = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    return params.gamma.reshape(shape) * xhat + params.beta.reshape(shape)


def fold_bn_into_conv(conv_weights: np.ndarray, conv_bias: np.ndarray | None,
                      params: BatchNormParams) -> tuple[np.ndarray, np.ndarray]:
    """Fold frozen BN statistics into conv weights so inference layers are a
    single weight/accumulate op: conv(x, w', b') == bn(conv(x, w, b))."""
    w = np.asarray(conv_weights, dtype=np.float64)
    cout = w.shape[0]
    if params.gamma.shape != (cout,):
        raise DimensionError("out channels", params.gamma.shape, (cout,))
    scale = params.gamma / np.sqrt(params.running_var + params.epsilon)
    w_f = w * scale.reshape((cout,) + (1,) * (w.ndim - 1))
    b0 = np.zeros(cout) if conv_bias is None else np.asarray(conv_bias, dtype=np.float64)
    b_f = params.beta + (b0 - params.running_mean) * scale
    return w_f, b_f


# ---------------------------------------------------------------------------
# Bilinear sampling
# ---------------------------------------------------------------------------


def bilinear_gather(feat: np.ndarray, points: np.ndarray, padding: str = "zeros") -> np.ndarray:
    """Batched bilinear interpolation.

    feat: (B, C, H, W) with grid values at integer coordinates (row, col);
    points: (B, P, 2) continuous (y, x). Out-of-range neighbors contribute 0
    in 'zeros' mode; 'border' clamps coordinates to the grid edge.
    Returns (B, P, C).
    """
    feat = np.asarray(feat, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    b, c, h, w = feat.shape
    if points.ndim != 3 or points.shape[0] != b or points.shape[2] != 2:
        raise DimensionError("points", (b, "P", 2), tuple(points.shape))
    y = points[:, :, 0]
    x = points[:, :, 1]
    if padding == "border":
        y = np.clip(y, 0.0, h - 1.0)
        x = np.clip(x, 0.0, w - 1.0)
    elif padding != "zeros":
        raise ValueError(f"unknown padding {padding!r}")
    y0 = np.floor(y)
    x0 = np.floor(x)
    ty = y - y0
    tx = x - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)

    flat = feat.reshape(b, c, h * w)
    out = np.zeros((b, points.shape[1], c), dtype=np.float64)
    for dy, dx, wgt in (
        (0, 0, (1 - ty) * (1 - tx)),
        (0, 1, (1 - ty) * tx),
        (1, 0, ty * (1 - tx)),
        (1, 1, ty * tx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        inb = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        ci = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        vals = np.take_along_axis(flat, ci[:, None, :], axis=2)  # (B, C, P)
        out += (wgt * inb)[:, :, None] * vals.transpose(0, 2, 1)
    return out


def bilinear_gather_backward(feat, points, grad_out, padding="zeros", need_point_grad=True):
    """Gradients of bilinear_gather wrt the feature map and the points.

    grad_out: (B, P, C). Returns (dfeat (B,C,H,W), dpoints (B,P,2) or None).
    Point gradients are the exact derivative of the interpolation weights,
    undefined only on the measure-zero integer grid lines.
    """
    feat = np.asarray(feat, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    b, c, h, w = feat.shape
    y = points[:, :, 0]
    x = points[:, :, 1]
    clamped_y = clamped_x = None
    if padding == "border":
        clamped_y = (y < 0) | (y > h - 1)
        clamped_x = (x < 0) | (x > w - 1)
        y = np.clip(y, 0.0, h - 1.0)
        x = np.clip(x, 0.0, w - 1.0)
    y0 = np.floor(y)
    x0 = np.floor(x)
    ty = y - y0
    tx = x - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)

    flat = feat.reshape(b, c, h * w)
    dflat = np.zeros_like(flat)
    g = grad_out.transpose(0, 2, 1)  # (B, C, P)
    dy_acc = np.zeros_like(ty)
    dx_acc = np.zeros_like(tx)
    b_ix = np.arange(b)[:, None, None]
    c_ix = np.arange(c)[None, :, None]
    corners = (
        (0, 0, (1 - ty) * (1 - tx), -(1 - tx), -(1 - ty)),
        (0, 1, (1 - ty) * tx, -tx, (1 - ty)),
        (1, 0, ty * (1 - tx), (1 - tx), -ty),
        (1, 1, ty * tx, tx, ty),
    )
    for dy, dx, wgt, dwdy, dwdx in corners:
        yy = y0 + dy
        xx = x0 + dx
        inb = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        ci = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        vals = np.take_along_axis(flat, ci[:, None, :], axis=2)  # (B, C, P)
        contrib = g * (wgt * inb)[:, None, :]  # (B, C, P)
        np.add.at(dflat, (b_ix, c_ix, ci[:, None, :]), contrib)
        if need_point_grad:
            gv = (g * vals).sum(axis=1)  # (B, P)
            dy_acc += gv * dwdy * inb
            dx_acc += gv * dwdx * inb
    dfeat = dflat.reshape(b, c, h, w)
    if not need_point_grad:
        return dfeat, None
    if padding == "border":
        dy_acc = np.where(clamped_y, 0.0, dy_acc)
        dx_acc = np.where(clamped_x, 0.0, dx_acc)
    dpoints = np.stack([dy_acc, dx_acc], axis=2)
    return dfeat, dpoints


def bilinear_sample(feature: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Interpolate a (C, H, W) feature map at (P, 2) continuous (y, x) points.

    Grid values sit at integer coordinates; locations outside the map use
    the zero-padding convention. Returns (P, C).
    """
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 3:
        raise DimensionError("feature rank", 3, feature.ndim)
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError("points", ("P", 2), tuple(points.shape))
    return bilinear_gather(feature[None], points[None])[0]


def upsample_matrices(src: int, dst: int) -> np.ndarray:
    """(dst, src) row-stochastic matrix for 1-D bilinear resize with border
    clamping; out[i] interpolates src nodes around (i + 0.5) * src/dst - 0.5."""
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        p = (i + 0.5) * scale - 0.5
        p = min(max(p, 0.0), src - 1.0)
        i0 = int(np.floor(p))
        i1 = min(i0 + 1, src - 1)
        t = p - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m
