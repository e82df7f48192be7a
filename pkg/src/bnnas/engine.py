"""Dense float32 kernels for the supernet: conv, batch norm, ReLU, pooling,
linear head, smoothed cross-entropy, Nesterov SGD and the LR schedule.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout with dtype
float32. Backward kernels take the cache returned by the matching forward.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

# Instrumentation: number of kernel invocations since the last reset.
counters: Counter = Counter()


def reset_counters() -> None:
    counters.clear()


class ShapeError(ValueError):
    """Raised when tensor dimensions are inconsistent with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf appears in a value that must stay finite."""


def check_finite(x, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x_shape, w_shape, groups):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x_shape} and {w_shape}")
    n, c, h, w = x_shape
    o, cg, kh, kw = w_shape
    if kh != kw:
        raise ShapeError(f"only square kernels are supported, got {kh}x{kw}")
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"channels in={c} out={o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"weight expects {cg} in-channels per group, input gives {c // groups}")
    return n, c, h, w, o, kh


def _pad(x, before, after=None):
    after = before if after is None else after
    if before == 0 and after == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (before, after), (before, after)))


def _correlate(xp: np.ndarray, weight: np.ndarray, stride: int, groups: int) -> np.ndarray:
    """Valid cross-correlation of an already padded input."""
    n, c = xp.shape[:2]
    o, cg, k, _ = weight.shape
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    if groups == 1:
        out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, o)
        return out.transpose(0, 3, 1, 2)
    if cg == 1 and o == c:
        # depthwise: one batched matmul over channels
        cols = win.transpose(1, 0, 2, 3, 4, 5).reshape(c, n * ho * wo, k * k)
        out = np.matmul(cols, weight.reshape(c, k * k, 1))
        return out.reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
    og = o // groups
    win = win.reshape(n, groups, cg, ho, wo, k, k)
    out = np.einsum("ngchwij,gocij->ngohw", win, weight.reshape(groups, og, cg, k, k), optimize=True)
    return out.reshape(n, o, ho, wo)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0,
                   groups: int = 1) -> np.ndarray:
    """Cross-correlation of ``x`` (N,C,H,W) with ``weight`` (O,C/groups,k,k), no bias."""
    n, c, h, w, o, k = _check_conv(x.shape, weight.shape, groups)
    counters["conv2d_forward"] += 1
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} too large for input {h}x{w} with padding {padding}")
    if k == 1 and padding == 0 and groups == 1:
        xs = x[:, :, ::stride, ::stride]
        out = np.matmul(weight[:, :, 0, 0], xs.reshape(n, c, ho * wo))
        return out.reshape(n, o, ho, wo)
    return np.ascontiguousarray(_correlate(_pad(x, padding), weight, stride, groups))


def conv2d_backward_input(grad_out: np.ndarray, weight: np.ndarray, input_shape, stride: int = 1,
                          padding: int = 0, groups: int = 1) -> np.ndarray:
    """Gradient of the loss with respect to the conv input (a transposed convolution)."""
    n, c, h, w, o, k = _check_conv(tuple(input_shape), weight.shape, groups)
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if grad_out.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, o, ho, wo)}")

    if k == 1 and padding == 0 and groups == 1:
        gi = np.matmul(weight[:, :, 0, 0].T, grad_out.reshape(n, o, ho * wo)).reshape(n, c, ho, wo)
        if stride == 1:
            return gi
        out = np.zeros((n, c, h, w), dtype=gi.dtype)
        out[:, :, ::stride, ::stride] = gi
        return out

    if stride > 1:
        dil = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=grad_out.dtype)
        dil[:, :, ::stride, ::stride] = grad_out
    else:
        dil = grad_out
    # rows/cols of the input never touched by the forward window get zero gradient
    extra_h = h - ((ho - 1) * stride + k - 2 * padding)
    extra_w = w - ((wo - 1) * stride + k - 2 * padding)
    lo = k - 1 - padding
    if lo < 0:
        raise ShapeError("padding larger than kernel - 1 is not supported in backward")
    gp = np.pad(dil, ((0, 0), (0, 0), (lo, lo + extra_h), (lo, lo + extra_w)))
    g, cg, og = groups, c // groups, o // groups
    wt = weight.reshape(g, og, cg, k, k).transpose(0, 2, 1, 3, 4)[..., ::-1, ::-1]
    wt = np.ascontiguousarray(wt.reshape(c, og, k, k))
    return np.ascontiguousarray(_correlate(gp, wt, 1, groups))


def conv2d_backward_weight(grad_out: np.ndarray, x: np.ndarray, weight_shape, stride: int = 1,
                           padding: int = 0, groups: int = 1) -> np.ndarray:
    """Gradient with respect to the conv weight. Only used when convs are trainable."""
    n, c, h, w, o, k = _check_conv(x.shape, tuple(weight_shape), groups)
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if grad_out.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, o, ho, wo)}")
    if k == 1 and padding == 0 and groups == 1:
        xs = x[:, :, ::stride, ::stride].reshape(n, c, ho * wo)
        gw = np.einsum("nop,ncp->oc", grad_out.reshape(n, o, ho * wo), xs, optimize=True)
        return gw.reshape(weight_shape)
    win = sliding_window_view(_pad(x, padding), (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    if groups == 1:
        return np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    g, cg, og = groups, c // groups, o // groups
    if cg == 1 and og == 1:
        cols = win.transpose(1, 0, 2, 3, 4, 5).reshape(c, n * ho * wo, k * k)
        go = grad_out.transpose(1, 0, 2, 3).reshape(c, 1, n * ho * wo)
        return np.matmul(go, cols).reshape(weight_shape)
    win = win.reshape(n, g, cg, ho, wo, k, k)
    gw = np.einsum("ngohw,ngchwij->gocij", grad_out.reshape(n, g, og, ho, wo), win, optimize=True)
    return gw.reshape(weight_shape)


def conv2d_direct(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0,
                  groups: int = 1) -> np.ndarray:
    """Reference convolution with explicit loops over every output element."""
    n, c, h, w, o, k = _check_conv(x.shape, weight.shape, groups)
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    xp = _pad(x.astype(np.float64), padding)
    cg, og = c // groups, o // groups
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            base = (oc // og) * cg
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, base:base + cg, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, oc, i, j] = np.sum(patch * weight[oc])
    return out.astype(np.result_type(x, weight))


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c):
            raise ShapeError("BN parameter vectors must share one length")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BnParams":
        return cls(
            gamma=np.ones(channels, DTYPE),
            beta=np.zeros(channels, DTYPE),
            running_mean=np.zeros(channels, DTYPE),
            running_var=np.ones(channels, DTYPE),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BnCache:
    z: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


def bn_forward(x: np.ndarray, p: BnParams, train: bool) -> tuple[np.ndarray, BnCache]:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"BN over {p.channels} channels got input {x.shape}")
    if train:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.var(axis=(0, 2, 3), dtype=np.float64)
        m = p.momentum
        unbiased = var * count / (count - 1) if count > 1 else var
        p.running_mean[...] = (1 - m) * p.running_mean + m * mean
        p.running_var[...] = (1 - m) * p.running_var + m * unbiased
    else:
        mean = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype)
    z = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = z * p.gamma[None, :, None, None] + p.beta[None, :, None, None]
    return out, BnCache(z=z, inv_std=inv_std, gamma=p.gamma.copy(), train=train)


def bn_backward(grad_out: np.ndarray, cache: BnCache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_gamma, grad_beta) for a train-mode forward."""
    if not cache.train:
        raise ValueError("bn_backward needs the cache of a train-mode forward")
    if grad_out.shape != cache.z.shape:
        raise ShapeError(f"grad shape {grad_out.shape} != cached {cache.z.shape}")
    z = cache.z
    count = z.shape[0] * z.shape[2] * z.shape[3]
    grad_beta = grad_out.sum(axis=(0, 2, 3), dtype=np.float64)
    grad_gamma = (grad_out * z).sum(axis=(0, 2, 3), dtype=np.float64)
    # dz = grad * gamma; the sums of dz and dz*z reuse grad_beta/grad_gamma
    g = cache.gamma.astype(np.float64)
    scale = (cache.inv_std * cache.gamma)[None, :, None, None]
    dt = z.dtype
    sum_dz = (g * grad_beta / count).astype(dt)[None, :, None, None]
    sum_dzz = (g * grad_gamma / count).astype(dt)[None, :, None, None]
    grad_in = scale * grad_out - cache.inv_std[None, :, None, None] * (sum_dz + z * sum_dzz)
    return grad_in.astype(dt, copy=False), grad_gamma.astype(dt), grad_beta.astype(dt)


def relu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad_out * mask


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out: np.ndarray, input_shape) -> np.ndarray:
    n, c, h, w = input_shape
    g = grad_out / (h * w)
    return np.broadcast_to(g[:, :, None, None], (n, c, h, w)).copy()


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``weight`` is (out, in); returns x @ weight.T + bias."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return x @ weight.T + bias


def linear_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray, need_param_grads: bool = True):
    """Returns (grad_x, grad_weight, grad_bias); parameter grads are None when not needed."""
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"linear grad {grad_out.shape} does not match output {(x.shape[0], weight.shape[0])}")
    grad_x = grad_out @ weight
    if not need_param_grads:
        return grad_x, None, None
    return grad_x, grad_out.T @ x, grad_out.sum(axis=0)


def softmax_ce_label_smoothing(logits: np.ndarray, targets: np.ndarray, smooth: float = 0.0):
    """Mean cross-entropy against (1-smooth)*onehot + smooth/K.

    Returns (loss, grad_logits) where the gradient is already divided by N.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if np.any(targets < 0) or np.any(targets >= k):
        raise ValueError(f"target index out of range [0, {k})")
    if not 0 <= smooth < 1:
        raise ValueError("smooth must lie in [0, 1)")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    q = np.full((n, k), smooth / k)
    q[np.arange(n), targets] += 1.0 - smooth
    loss = float(-(q * logp).sum() / n)
    if not math.isfinite(loss):
        raise NonFiniteError("loss is not finite")
    grad = (np.exp(logp) - q) / n
    return loss, grad.astype(logits.dtype)


@dataclass
class OptimState:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: dict = field(default_factory=dict)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState,
             lr: float) -> None:
    """In-place Nesterov SGD with L2 decay folded into the gradient.

    Only names present in ``grads`` are touched; everything else is frozen.
    """
    m, wd = state.momentum, state.weight_decay
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        d = g + wd * p if wd else g
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p)
            state.buffers[name] = buf
        buf *= m
        buf += d
        p -= (lr * (d + m * buf)).astype(p.dtype, copy=False)


@dataclass
class LrSchedule:
    total_epochs: int
    warmup_epochs: int = 5
    lr_start: float = 0.2
    lr_peak: float = 0.8

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.lr_start > self.lr_peak:
            raise ValueError("lr_start must not exceed lr_peak")


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Linear warm-up then cosine decay to zero; ``epoch`` may be fractional."""
    w, total = schedule.warmup_epochs, schedule.total_epochs
    epoch = min(max(epoch, 0.0), float(total))
    if epoch < w:
        return schedule.lr_start + (schedule.lr_peak - schedule.lr_start) * epoch / w
    t = (epoch - w) / (total - w)
    return schedule.lr_peak * 0.5 * (1.0 + math.cos(math.pi * t))
