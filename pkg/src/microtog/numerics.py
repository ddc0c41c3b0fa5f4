"""Minimal differentiable tensor ops with exact hand-written backward passes.

Tensors are plain numpy arrays, row-major, float32 in the production path.
Every op also accepts float64 arrays and then computes entirely in float64;
the gradient-check harness relies on this to keep finite-difference noise
below the comparison tolerance. Convolution partial sums are always
accumulated in float64.

All functions are pure: no hidden state, safe to call concurrently.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError, ValidationError

ACTIVATIONS = ("leaky_relu", "linear")


@dataclass
class ConvLayer:
    """One convolution: kernels (out_ch, in_ch, kh, kw), bias (out_ch,)."""

    kernels: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    activation: str = "linear"
    leaky_slope: float = 0.1

    def __post_init__(self):
        k = self.kernels
        if k.ndim != 4:
            raise ShapeError(f"kernels must be 4-d (out,in,kh,kw), got shape {k.shape}")
        if k.shape[2] % 2 == 0 or k.shape[3] % 2 == 0:
            raise ValidationError(f"kernel dims must be odd, got {k.shape[2]}x{k.shape[3]}")
        if self.stride not in (1, 2):
            raise ValidationError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ValidationError(f"padding must be >= 0, got {self.padding}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.bias.shape != (k.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_ch {k.shape[0]}")

    @property
    def out_channels(self):
        return self.kernels.shape[0]

    @property
    def in_channels(self):
        return self.kernels.shape[1]

    def out_size(self, h, w):
        kh, kw = self.kernels.shape[2:]
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        return oh, ow


@dataclass
class GradientPair:
    """Gradients of a scalar w.r.t. a conv layer's input and parameters."""

    wrt_input: np.ndarray
    wrt_kernels: np.ndarray
    wrt_bias: np.ndarray


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype == np.float64 else np.float32)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out.item()


def sigmoid_grad(x):
    """d sigmoid / dx evaluated at x."""
    s = sigmoid(x)
    return s * (1.0 - s)


def leaky_relu(x, slope=0.1):
    x = np.asarray(x)
    out = np.where(x >= 0, x, slope * x)
    return out if out.ndim else out.item()


def leaky_relu_grad(x, slope=0.1):
    # derivative at exactly 0 is defined as slope
    x = np.asarray(x)
    out = np.where(x > 0, np.ones_like(x), np.full_like(x, slope))
    return out if out.ndim else out.item()


def _apply_activation(z, layer):
    if layer.activation == "leaky_relu":
        return leaky_relu(z, layer.leaky_slope)
    return z


def _activation_grad(z, layer):
    if layer.activation == "leaky_relu":
        return leaky_relu_grad(z, layer.leaky_slope)
    return np.ones_like(z)


def _check_input(x, layer):
    if x.ndim != 3:
        raise ShapeError(f"input must be 3-d (h, w, c), got shape {x.shape}")
    if x.shape[2] != layer.in_channels:
        raise ShapeError(
            f"input has {x.shape[2]} channels, layer expects {layer.in_channels}"
        )
    oh, ow = layer.out_size(x.shape[0], x.shape[1])
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"input {x.shape[0]}x{x.shape[1]} too small for kernel "
            f"{layer.kernels.shape[2]}x{layer.kernels.shape[3]} "
            f"stride {layer.stride} padding {layer.padding}"
        )
    return oh, ow


def _pad(x, p):
    if p == 0:
        return x
    h, w, c = x.shape
    xp = np.zeros((h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[p:-p, p:-p, :] = x
    return xp


def _hot_kernels(layer, dtype):
    # (out, in, kh, kw) -> (out, kh, kw, in): contiguous inner channel loop
    return np.ascontiguousarray(layer.kernels.transpose(0, 2, 3, 1).astype(dtype, copy=False))


def conv2d_preact(x, layer):
    """Convolution output before the activation."""
    oh, ow = _check_input(x, layer)
    xp = np.ascontiguousarray(_pad(x, layer.padding))
    kt = _hot_kernels(layer, x.dtype)
    bias = layer.bias.astype(x.dtype, copy=False)
    return kernels.CONV_FWD(xp, kt, bias, layer.stride, oh, ow)


def conv2d_forward(x, layer):
    """Forward pass: conv + bias + activation. Pure function of its inputs."""
    return _apply_activation(conv2d_preact(x, layer), layer)


def conv2d_backward(x, layer, upstream):
    """Exact gradients of sum(upstream * conv2d_forward(x, layer)).

    Returns a GradientPair with gradients w.r.t. the input, the kernels and
    the bias, in the same shapes and dtype as the differentiated arrays.
    """
    oh, ow = _check_input(x, layer)
    if upstream.shape != (oh, ow, layer.out_channels):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match forward output "
            f"{(oh, ow, layer.out_channels)}"
        )
    z = conv2d_preact(x, layer)
    dz = np.ascontiguousarray(upstream * _activation_grad(z, layer))
    return _conv_backward_from_dz(x, layer, dz)


def _conv_backward_from_dz(x, layer, dz):
    # dz is the gradient at the pre-activation
    p = layer.padding
    kh, kw = layer.kernels.shape[2:]
    xp = np.ascontiguousarray(_pad(x, p))
    kt = _hot_kernels(layer, x.dtype)
    dxp = kernels.CONV_BWD_INPUT(dz, kt, layer.stride, xp.shape[0], xp.shape[1])
    dkt, db = kernels.CONV_BWD_WEIGHTS(xp, dz, kh, kw, layer.stride)
    dx = dxp[p:xp.shape[0] - p, p:xp.shape[1] - p, :] if p else dxp
    dk = dkt.transpose(0, 3, 1, 2)  # back to (out, in, kh, kw)
    return GradientPair(
        wrt_input=dx.astype(x.dtype),
        wrt_kernels=dk.astype(layer.kernels.dtype),
        wrt_bias=db.astype(layer.bias.dtype),
    )


def forward_stack(layers, x):
    """Run a sequential conv stack; returns (output, caches for backward)."""
    caches = []
    for layer in layers:
        z = conv2d_preact(x, layer)
        caches.append((x, z))
        x = _apply_activation(z, layer)
    return x, caches


def backward_stack(layers, caches, upstream, need_input=True, need_weights=True):
    """Reverse sweep through a stack. Returns (d_input, [(dk, db) per layer]).

    need_input=False skips the input-gradient kernel of the first layer
    (training never uses it); need_weights=False skips all parameter
    gradients (the attacks only differentiate w.r.t. the image).
    """
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        x, z = caches[i]
        layer = layers[i]
        dz = np.ascontiguousarray(upstream * _activation_grad(z, layer))
        if need_weights:
            p = layer.padding
            xp = np.ascontiguousarray(_pad(x, p))
            kh, kw = layer.kernels.shape[2:]
            dkt, db = kernels.CONV_BWD_WEIGHTS(xp, dz, kh, kw, layer.stride)
            grads[i] = (
                dkt.transpose(0, 3, 1, 2).astype(layer.kernels.dtype),
                db.astype(layer.bias.dtype),
            )
        if i > 0 or need_input:
            p = layer.padding
            hp, wp = x.shape[0] + 2 * p, x.shape[1] + 2 * p
            kt = _hot_kernels(layer, x.dtype)
            dxp = kernels.CONV_BWD_INPUT(dz, kt, layer.stride, hp, wp)
            dx = dxp[p:hp - p, p:wp - p, :] if p else dxp
            upstream = dx.astype(x.dtype)
        else:
            upstream = None
    return upstream, grads


def grad_check(fn, point, h=1e-3):
    """Max relative error between fn's analytic gradient and central differences.

    `fn(x)` must return `(value, gradient)` with gradient shaped like x.
    The relative error per entry is |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    Non-finite values anywhere are reported as an immediate failure (inf).
    """
    if h <= 0:
        raise ValidationError(f"h must be > 0, got {h}")
    point = np.asarray(point, dtype=np.float64)
    value, grad = fn(point)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        return np.inf
    grad = np.asarray(grad, dtype=np.float64)
    worst = 0.0
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus, _ = fn(point)
        flat[i] = orig - h
        f_minus, _ = fn(point)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            return np.inf
        fd = (f_plus - f_minus) / (2.0 * h)
        a = grad.reshape(-1)[i]
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst
