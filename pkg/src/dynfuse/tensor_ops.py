"""Dense NCHW float64 primitives, each paired with an exact backward pass.

Conventions used throughout:

* feature maps are ``(batch, channels, height, width)`` float64 arrays,
* convolution kernels are ``(out_channels, in_channels, kh, kw)``,
* "convolution" means valid cross-correlation (no kernel flip, no padding),
* ReLU's subgradient at exactly 0 is 0.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "CONV_CALLS",
    "conv_output_hw",
    "conv2d_forward",
    "conv2d_backward",
    "conv2d_forward_batched",
    "conv2d_backward_batched",
    "relu",
    "relu_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "fully_connected",
    "fully_connected_backward",
    "softmax",
    "softmax_backward",
    "maxpool2d",
    "maxpool2d_backward",
]


class ShapeError(ValueError):
    """Operand geometry is inconsistent with the requested operation."""


class _ConvCounter:
    """Running count of convolution invocations.

    One blocked convolution call (over a whole batch) counts once; layer
    wrappers report per-forward deltas of ``value``.
    """

    __slots__ = ("value",)

    def __init__(self) -> None:
        self.value = 0

    def bump(self) -> None:
        self.value += 1


CONV_CALLS = _ConvCounter()


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int) -> tuple[int, int]:
    """Output spatial dims of a valid convolution, or raise on bad geometry."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    return (h - kh) // stride + 1, (w - kw) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding windows view of x, shape (n, c, oh, ow, kh, kw)."""
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation of (n,c,h,w) with (o,c,kh,kw) -> (n,o,oh,ow)."""
    x, kernel = _f64(x), _f64(kernel)
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ShapeError(f"input has {c} channels, kernel expects {ci}")
    conv_output_hw(h, w, kh, kw, stride)
    CONV_CALLS.bump()
    win = _windows(x, kh, kw, stride)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * conv2d_forward(x, kernel)) w.r.t. x and kernel."""
    grad_out, x, kernel = _f64(grad_out), _f64(x), _f64(kernel)
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    oh, ow = conv_output_hw(h, w, kh, kw, stride)
    if grad_out.shape != (n, o, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != expected {(n, o, oh, ow)}"
        )
    win = _windows(x, kh, kw, stride)
    grad_kernel = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_x = np.zeros_like(x)
    for u in range(kh):
        for v in range(kw):
            # tap (u,v) scatters grad_out * k[:,:,u,v] onto the strided grid
            contrib = np.tensordot(grad_out, kernel[:, :, u, v], axes=([1], [0]))
            grad_x[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    return grad_x, grad_kernel


def conv2d_forward_batched(x: np.ndarray, kernels: np.ndarray, stride: int = 1) -> np.ndarray:
    """Cross-correlation with one kernel stack per sample.

    kernels has shape (n, o, c, kh, kw); sample i is convolved with
    kernels[i].  Counts as a single convolution invocation.
    """
    x, kernels = _f64(x), _f64(kernels)
    n, c, h, w = x.shape
    nk, o, ci, kh, kw = kernels.shape
    if nk != n:
        raise ShapeError(f"{nk} kernel stacks for batch of {n}")
    if c != ci:
        raise ShapeError(f"input has {c} channels, kernels expect {ci}")
    conv_output_hw(h, w, kh, kw, stride)
    CONV_CALLS.bump()
    win = _windows(x, kh, kw, stride)
    return np.einsum("ncpquv,nocuv->nopq", win, kernels, optimize=True)


def conv2d_backward_batched(
    grad_out: np.ndarray, x: np.ndarray, kernels: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample-kernel analogue of conv2d_backward; grad_kernels is (n,o,c,kh,kw)."""
    grad_out, x, kernels = _f64(grad_out), _f64(x), _f64(kernels)
    n, c, h, w = x.shape
    _, o, _, kh, kw = kernels.shape
    oh, ow = conv_output_hw(h, w, kh, kw, stride)
    if grad_out.shape != (n, o, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != expected {(n, o, oh, ow)}"
        )
    win = _windows(x, kh, kw, stride)
    grad_kernels = np.einsum("nopq,ncpquv->nocuv", grad_out, win, optimize=True)
    grad_x = np.zeros_like(x)
    for u in range(kh):
        for v in range(kw):
            contrib = np.einsum("nopq,noc->ncpq", grad_out, kernels[:, :, :, u, v])
            grad_x[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += contrib
    return grad_x, grad_kernels


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return np.maximum(_f64(x), 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pass gradient where x > 0; zero elsewhere (including at x == 0)."""
    return _f64(grad_out) * (np.asarray(x) > 0)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Spatial mean per channel, shape (n, c, 1, 1)."""
    return _f64(x).mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out: np.ndarray, h: int, w: int) -> np.ndarray:
    """Spread (n,c,1,1) gradient evenly over the h x w spatial grid."""
    g = _f64(grad_out) / float(h * w)
    n, c = g.shape[:2]
    return np.broadcast_to(g.reshape(n, c, 1, 1), (n, c, h, w)).copy()


def fully_connected(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map y = weights @ x + bias; x may be (in,) or batched (n, in)."""
    x, weights, bias = _f64(x), _f64(weights), _f64(bias)
    out_dim, in_dim = weights.shape
    if x.shape[-1] != in_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != weight input dim {in_dim}")
    if bias.shape != (out_dim,):
        raise ShapeError(f"bias shape {bias.shape} != ({out_dim},)")
    return x @ weights.T + bias


def fully_connected_backward(
    grad_y: np.ndarray, x: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients for x, weights, bias of the affine map."""
    grad_y, x, weights = _f64(grad_y), _f64(x), _f64(weights)
    squeeze = x.ndim == 1
    x2 = x[None, :] if squeeze else x
    g2 = grad_y[None, :] if squeeze else grad_y
    grad_x = g2 @ weights
    grad_w = g2.T @ x2
    grad_b = g2.sum(axis=0)
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_b


def softmax(x: np.ndarray) -> np.ndarray:
    """Shift-invariant softmax along the last axis (max-subtracted)."""
    x = _f64(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad_y: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Backward through softmax given its output y."""
    grad_y, y = _f64(grad_y), _f64(y)
    return y * (grad_y - (grad_y * y).sum(axis=-1, keepdims=True))


def maxpool2d(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    """Windowed maximum over size x size windows."""
    x = _f64(x)
    n, c, h, w = x.shape
    conv_output_hw(h, w, size, size, stride)
    win = _windows(x, size, size, stride)
    return win.max(axis=(4, 5))


def maxpool2d_backward(grad_out: np.ndarray, x: np.ndarray, size: int, stride: int) -> np.ndarray:
    """Route gradient to each window's argmax; first occurrence wins on ties.

    Tie order is row-major within the window, matching np.argmax on the
    flattened window.
    """
    grad_out, x = _f64(grad_out), _f64(x)
    n, c, h, w = x.shape
    oh, ow = conv_output_hw(h, w, size, size, stride)
    if grad_out.shape != (n, c, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != expected {(n, c, oh, ow)}"
        )
    win = _windows(x, size, size, stride)
    flat = win.reshape(n, c, oh, ow, size * size)
    idx = flat.argmax(axis=-1)
    u, v = idx // size, idx % size
    ni, ci, pi, qi = np.indices(idx.shape)
    grad_x = np.zeros_like(x)
    np.add.at(grad_x, (ni, ci, pi * stride + u, qi * stride + v), grad_out)
    return grad_x
