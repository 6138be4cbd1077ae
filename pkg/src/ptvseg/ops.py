"""Dense-array layer primitives with hand-written backward passes.

All operations work on single samples laid out channel-first as
contiguous float arrays: images and feature maps are ``[c, H, W]``,
convolution kernels are ``[c_out, c_in, kh, kw]``. Everything is a pure
function: no op mutates its inputs, and for a fixed input the output is
bit-identical across calls. Gradients are exact vector-Jacobian
products, i.e. for an upstream gradient ``g`` the backward of an op
``f`` returns the gradients of ``sum(g * f(x))`` with respect to each
argument.

Default precision is float64; passing float32 arrays keeps float32
throughout (the caller owns the precision choice).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

SAME = "same"
VALID = "valid"


@dataclass(frozen=True)
class ConvKernel:
    """Weights ``[c_out, c_in, kh, kw]`` plus a per-output-channel bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.weights.ndim != 4:
            raise ShapeError("kernel", f"weights must be 4-D, got {self.weights.ndim}-D")
        kh, kw = self.weights.shape[2:]
        if kh not in (1, 2, 3) or kw not in (1, 2, 3):
            raise ShapeError("kernel", f"kernel size {kh}x{kw} unsupported (1..3 per side)")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                "channel",
                f"bias shape {self.bias.shape} does not match c_out={self.weights.shape[0]}",
            )

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


def _check_image(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 3:
        raise ShapeError("rank", f"{name} must be [c, H, W], got shape {x.shape}")


def _conv_pad(padding: str, kh: int, kw: int) -> tuple[int, int]:
    if padding == SAME:
        # zero pad of (k-1)/2 per side keeps H, W for odd kernels
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("kernel", f"same-padding needs odd kernel, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    if padding == VALID:
        return 0, 0
    raise ValueError(f"unknown padding mode {padding!r}")


def conv2d_forward(x: np.ndarray, kernel: ConvKernel, padding: str = SAME) -> np.ndarray:
    """Cross-correlate ``x`` [c_in, H, W] with the kernel, add bias.

    Same-padding zero-pads so H and W are preserved (odd kernels only);
    valid padding shrinks to H-kh+1 by W-kw+1.
    """
    _check_image(x)
    c_out, c_in, kh, kw = kernel.weights.shape
    if x.shape[0] != c_in:
        raise ShapeError("channel", f"input has {x.shape[0]} channels, kernel expects {c_in}")
    ph, pw = _conv_pad(padding, kh, kw)
    if x.shape[1] + 2 * ph < kh:
        raise ShapeError("height", f"H={x.shape[1]} too small for {kh}x{kw} kernel")
    if x.shape[2] + 2 * pw < kw:
        raise ShapeError("width", f"W={x.shape[2]} too small for {kh}x{kw} kernel")
    x_pad = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = sliding_window_view(x_pad, (kh, kw), axis=(1, 2))  # strided, no copy
    out = np.einsum("ihwuv,oiuv->ohw", win, kernel.weights, optimize=True)
    return out + kernel.bias[:, None, None]


def conv2d_backward(
    x: np.ndarray, kernel: ConvKernel, grad_out: np.ndarray, padding: str = SAME
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. input, weights, and bias."""
    _check_image(x)
    _check_image(grad_out, "grad_out")
    c_out, c_in, kh, kw = kernel.weights.shape
    if x.shape[0] != c_in:
        raise ShapeError("channel", f"input has {x.shape[0]} channels, kernel expects {c_in}")
    ph, pw = _conv_pad(padding, kh, kw)
    ho = x.shape[1] + 2 * ph - kh + 1
    wo = x.shape[2] + 2 * pw - kw + 1
    if grad_out.shape != (c_out, ho, wo):
        raise ShapeError(
            "grad", f"grad_out shape {grad_out.shape} != forward output {(c_out, ho, wo)}"
        )
    x_pad = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x

    grad_bias = grad_out.sum(axis=(1, 2))
    # one small GEMM per kernel offset beats materializing an im2col matrix
    gmat = grad_out.reshape(c_out, ho * wo)
    grad_w = np.empty_like(kernel.weights)
    grad_xpad = np.zeros_like(x_pad)
    for u in range(kh):
        for v in range(kw):
            patch = x_pad[:, u : u + ho, v : v + wo].reshape(c_in, ho * wo)
            grad_w[:, :, u, v] = gmat @ patch.T
            grad_xpad[:, u : u + ho, v : v + wo] += np.tensordot(
                kernel.weights[:, :, u, v], grad_out, axes=([0], [0])
            )
    grad_x = grad_xpad[:, ph : ph + x.shape[1], pw : pw + x.shape[2]] if (ph or pw) else grad_xpad
    return np.ascontiguousarray(grad_x), grad_w, grad_bias


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint 2x2 max pooling.

    Returns the pooled map [c, H/2, W/2] and argmax indices in {0..3}
    identifying the winning position of each window in row-major order
    ((0,0), (0,1), (1,0), (1,1)); ties go to the first maximal entry.
    """
    _check_image(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("extent", f"H and W must be even for 2x2 pooling, got {h}x{w}")
    win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(argmax_idx: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Scatter grad_out onto the recorded argmax positions, zeros elsewhere."""
    _check_image(grad_out, "grad_out")
    if argmax_idx.shape != grad_out.shape:
        raise ShapeError("grad", f"indices {argmax_idx.shape} != grad_out {grad_out.shape}")
    if argmax_idx.min() < 0 or argmax_idx.max() > 3:
        raise IndexError(f"argmax index out of range [0, 3]: {int(argmax_idx.min())}..{int(argmax_idx.max())}")
    c, ho, wo = grad_out.shape
    win = np.zeros((c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax_idx[..., None], grad_out[..., None], axis=-1)
    return np.ascontiguousarray(
        win.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * ho, 2 * wo)
    )


def upconv2x2_forward(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Transposed 2x2 convolution with stride 2: doubles H and W exactly."""
    _check_image(x)
    c_out, c_in, kh, kw = kernel.weights.shape
    if (kh, kw) != (2, 2):
        raise ShapeError("kernel", f"up-convolution kernel must be 2x2, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise ShapeError("channel", f"input has {x.shape[0]} channels, kernel expects {c_in}")
    _, h, w = x.shape
    # out[o, 2y+u, 2x+v] = sum_i in[i, y, x] * W[o, i, u, v] + b[o]
    tmp = np.tensordot(kernel.weights, x, axes=([1], [0]))  # [o, u, v, y, x]
    out = tmp.transpose(0, 3, 1, 4, 2).reshape(c_out, 2 * h, 2 * w)
    return np.ascontiguousarray(out + kernel.bias[:, None, None])


def upconv2x2_backward(
    x: np.ndarray, kernel: ConvKernel, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of upconv2x2_forward w.r.t. input, weights, and bias."""
    _check_image(x)
    _check_image(grad_out, "grad_out")
    c_out, c_in, _, _ = kernel.weights.shape
    _, h, w = x.shape
    if grad_out.shape != (c_out, 2 * h, 2 * w):
        raise ShapeError(
            "grad", f"grad_out shape {grad_out.shape} != forward output {(c_out, 2 * h, 2 * w)}"
        )
    g5 = grad_out.reshape(c_out, h, 2, w, 2)  # [o, y, u, x, v]
    grad_bias = grad_out.sum(axis=(1, 2))
    grad_w = np.einsum("oyuxv,iyx->oiuv", g5, x, optimize=True)
    grad_x = np.einsum("oyuxv,oiuv->iyx", g5, kernel.weights, optimize=True)
    return np.ascontiguousarray(grad_x), grad_w, grad_bias


def _crop_offsets(src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> tuple[int, int]:
    # center crop; an odd surplus loses the extra row/column at the bottom/right
    dh, dw = src_hw[0] - dst_hw[0], src_hw[1] - dst_hw[1]
    if dh < 0 or dw < 0:
        raise ShapeError("extent", f"cannot crop {src_hw} down to larger {dst_hw}")
    return dh // 2, dw // 2


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack channels of ``a`` then of ``b`` center-cropped to a's extent."""
    _check_image(a, "a")
    _check_image(b, "b")
    top, left = _crop_offsets(b.shape[1:], a.shape[1:])
    b_crop = b[:, top : top + a.shape[1], left : left + a.shape[2]]
    return np.concatenate([a, b_crop], axis=0)


def concat_channels_backward(
    grad_out: np.ndarray, c_a: int, b_shape: tuple[int, int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Split the concat gradient; the b part is zero-padded back to b's shape."""
    _check_image(grad_out, "grad_out")
    grad_a = np.ascontiguousarray(grad_out[:c_a])
    gb_crop = grad_out[c_a:]
    if gb_crop.shape[0] != b_shape[0]:
        raise ShapeError("channel", f"grad has {grad_out.shape[0]} channels, expected {c_a + b_shape[0]}")
    top, left = _crop_offsets(b_shape[1:], grad_out.shape[1:])
    grad_b = np.zeros(b_shape, dtype=grad_out.dtype)
    grad_b[:, top : top + grad_out.shape[1], left : left + grad_out.shape[2]] = gb_crop
    return grad_a, grad_b


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Derivative is 1 where x > 0 and 0 elsewhere (0 at exactly 0)."""
    return np.where(x > 0.0, grad_out, 0.0)


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    """Logistic function evaluated without overflow for any finite input."""
    x = np.asarray(x)
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    out = np.empty(x.shape, dtype=dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward from the forward *output* y: dy/dx = y * (1 - y)."""
    return grad_out * y * (1.0 - y)
