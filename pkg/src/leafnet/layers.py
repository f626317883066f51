"""Layer primitives: convolution, batch norm, activations, pooling, dense,
softmax, residual blocks, and the cross-entropy loss.

Each forward computes with the kernel backend and registers a bespoke
backward rule through the tensor tape, so composite graphs (blocks, whole
models) differentiate without further wiring. Parameter containers are
plain dataclasses holding Tensors.
"""

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import (
    DegenerateBatch,
    KernelLargerThanInput,
    LabelOutOfRange,
    ShapeMismatch,
)
from .tensor import Tensor, accumulate_grad, record_op

LOG_FLOOR = 1e-12  # clamp for log in the cross-entropy


@dataclass
class ConvParams:
    kernel: Tensor  # [outC, inC, kH, kW]
    bias: Tensor | None = None
    stride: tuple = (1, 1)
    padding: str = "valid"  # "valid" | "same"


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"


@dataclass
class DropoutParams:
    rate: float
    mode: str = "train"
    rng_state: np.random.Generator = field(
        default_factory=lambda: np.random.default_rng(0)
    )


@dataclass
class DenseParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]


def _same_padding(size, kernel, stride):
    out = -(-size // stride)  # ceil
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv2d_forward(x, p):
    """Cross-correlation of x[N,C,H,W] with p.kernel; bias added per out-channel."""
    if x.ndim != 4:
        raise ShapeMismatch(f"conv2d expects N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = p.kernel.shape
    if c != ic:
        raise ShapeMismatch(f"input channels {c} != kernel channels {ic}")
    sh, sw = p.stride
    if p.padding == "same":
        pt, pb = _same_padding(h, kh, sh)
        pl, pr = _same_padding(w, kw, sw)
    elif p.padding == "valid":
        if kh > h or kw > w:
            raise KernelLargerThanInput(
                f"kernel {kh}x{kw} larger than input {h}x{w} under valid padding"
            )
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'valid' or 'same', got {p.padding!r}")

    if pt or pb or pl or pr:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x.data
    out_data = backend.conv2d_forward(xp, p.kernel.data, (sh, sw))
    if p.bias is not None:
        out_data = out_data + p.bias.data[None, :, None, None]

    kernel, bias = p.kernel, p.bias
    padded_shape = xp.shape
    x_needs = x.requires_grad

    def bwd(g):
        g = np.ascontiguousarray(g)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, backend.reduce_sum_2d(
                np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, -1)
            ))
        if kernel.requires_grad:
            accumulate_grad(
                kernel, backend.conv2d_weight_grad(g, xp, (sh, sw), kernel.shape)
            )
        if x_needs:
            dxp = backend.conv2d_input_grad(g, kernel.data, (sh, sw), padded_shape)
            accumulate_grad(x, dxp[:, :, pt : pt + h, pl : pl + w])

    inputs = (x, p.kernel) if p.bias is None else (x, p.kernel, p.bias)
    return record_op(inputs, out_data, bwd, "conv2d")


def _bn_axes(x):
    if x.ndim == 4:
        return True
    if x.ndim == 2:
        return False
    raise ShapeMismatch(f"batchnorm expects N,C,H,W or N,F input, got {x.shape}")


def batchnorm_forward(x, s):
    """Batch normalisation.

    Train mode normalises with biased batch statistics and updates running
    stats in place (r <- (1-momentum)*r + momentum*batch). Infer mode uses
    the stored running statistics. Running stats update regardless of
    whether gamma/beta are trainable; freezing only affects optimizer
    updates.
    """
    is4d = _bn_axes(x)
    c = x.shape[1]
    if s.gamma.shape != (c,):
        raise ShapeMismatch(f"gamma shape {s.gamma.shape} != ({c},)")
    expand = (lambda v: v[None, :, None, None]) if is4d else (lambda v: v[None, :])
    gamma, beta = s.gamma, s.beta
    eps = s.epsilon

    if s.mode == "infer":
        inv = 1.0 / np.sqrt(s.running_var.data + eps)
        xhat = (x.data - expand(s.running_mean.data)) * expand(inv.astype(x.dtype))
        out_data = expand(gamma.data) * xhat + expand(beta.data)
        x_needs = x.requires_grad

        def bwd_infer(g):
            if gamma.requires_grad:
                accumulate_grad(gamma, _per_channel_sum(g * xhat, is4d))
            if beta.requires_grad:
                accumulate_grad(beta, _per_channel_sum(g, is4d))
            if x_needs:
                accumulate_grad(x, g * expand((gamma.data * inv).astype(x.dtype)))

        return record_op((x, gamma, beta), out_data, bwd_infer, "batchnorm")

    if s.mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {s.mode!r}")
    m = x.size // c
    if m < 2:
        raise DegenerateBatch(f"need >= 2 values per channel, got {m}")

    if is4d:
        sums, sumsqs = backend.channel_stats(x.data)
    else:
        xt = np.ascontiguousarray(x.data.T)
        sums = backend.reduce_sum_2d(xt)
        sumsqs = backend.reduce_sum_2d(np.ascontiguousarray(xt * xt))
    mean = sums / m
    var = sumsqs / m - mean * mean  # biased
    var = np.maximum(var, 0.0)  # guard tiny negative from cancellation
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - expand(mean)) * expand(invstd)
    out_data = expand(gamma.data) * xhat + expand(beta.data)

    mom = s.momentum
    s.running_mean.data[...] = (1.0 - mom) * s.running_mean.data + mom * mean
    s.running_var.data[...] = (1.0 - mom) * s.running_var.data + mom * var

    x_needs = x.requires_grad

    def bwd_train(g):
        dgamma = _per_channel_sum(g * xhat, is4d)
        dbeta = _per_channel_sum(g, is4d)
        if gamma.requires_grad:
            accumulate_grad(gamma, dgamma)
        if beta.requires_grad:
            accumulate_grad(beta, dbeta)
        if x_needs:
            coef = expand((gamma.data * invstd).astype(x.dtype)) / m
            dx = coef * (m * g - xhat * expand(dgamma) - expand(dbeta))
            accumulate_grad(x, dx.astype(x.dtype))

    return record_op((x, gamma, beta), out_data, bwd_train, "batchnorm")


def _per_channel_sum(arr, is4d):
    if is4d:
        a = np.ascontiguousarray(arr.transpose(1, 0, 2, 3)).reshape(arr.shape[1], -1)
    else:
        a = np.ascontiguousarray(arr.T)
    return backend.reduce_sum_2d(a)


def leaky_relu(x, alpha):
    """y = x for x >= 0 else alpha*x; derivative defined as alpha at exactly 0."""
    out_data = np.where(x.data >= 0, x.data, x.dtype.type(alpha) * x.data)
    factor = np.where(x.data > 0, x.dtype.type(1.0), x.dtype.type(alpha))

    def bwd(g):
        accumulate_grad(x, g * factor)

    return record_op((x,), out_data, bwd, "leaky_relu")


def relu(x):
    return leaky_relu(x, 0.0)


def dropout(x, p):
    """Inverted dropout: train mode keeps each element with prob 1-rate and
    scales by 1/(1-rate); infer mode is the exact identity (same tensor)."""
    if p.mode == "infer" or p.rate == 0.0:
        return x
    keep = 1.0 - p.rate
    mask = (p.rng_state.random(x.shape) >= p.rate).astype(x.dtype)
    factor = mask * x.dtype.type(1.0 / keep)
    out_data = x.data * factor

    def bwd(g):
        accumulate_grad(x, g * factor)

    return record_op((x,), out_data, bwd, "dropout")


def global_avg_pool(x):
    """Spatial mean per channel: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool expects N,C,H,W, got {x.shape}")
    n, c, h, w = x.shape
    hw = h * w
    flat = x.data.reshape(n * c, hw)
    out_data = (backend.reduce_sum_2d(flat) / hw).reshape(n, c)

    def bwd(g):
        gx = np.broadcast_to((g / hw)[:, :, None, None], x.shape)
        accumulate_grad(x, np.ascontiguousarray(gx))

    return record_op((x,), out_data, bwd, "global_avg_pool")


def max_pool2d(x, window, stride, padding=(0, 0)):
    """Windowed max; gradient routes to the first (row-major) maximum of
    each window. Padding cells are ignored, never selected."""
    if x.ndim != 4:
        raise ShapeMismatch(f"max_pool2d expects N,C,H,W, got {x.shape}")
    kh, kw = window
    sh, sw = stride
    ph, pw = padding
    n, c, h, w = x.shape
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeMismatch(f"window {window} larger than padded input {h}x{w}")
    out_data, idx = backend.maxpool_forward(x.data, (kh, kw), (sh, sw), (ph, pw))

    def bwd(g):
        accumulate_grad(x, backend.maxpool_backward(g, idx, x.shape))

    return record_op((x,), out_data, bwd, "max_pool2d")


def dense_forward(x, p):
    """y = x @ W^T + b for x[N,in], W[out,in], b[out]."""
    if x.ndim != 2:
        raise ShapeMismatch(f"dense expects N,F input, got {x.shape}")
    out_dim, in_dim = p.weight.shape
    if x.shape[1] != in_dim:
        raise ShapeMismatch(f"input features {x.shape[1]} != weight in-dim {in_dim}")
    out_data = backend.matmul_nt(x.data, p.weight.data) + p.bias.data[None, :]
    weight, bias = p.weight, p.bias
    x_data = x.data
    x_needs = x.requires_grad

    def bwd(g):
        g = np.ascontiguousarray(g)
        if bias.requires_grad:
            accumulate_grad(bias, backend.reduce_sum_2d(np.ascontiguousarray(g.T)))
        if weight.requires_grad:
            accumulate_grad(weight, backend.matmul_tn(g, x_data))
        if x_needs:
            accumulate_grad(x, backend.matmul_nn(g, weight.data))

    return record_op((x, weight, bias), out_data, bwd, "dense")


def softmax(x):
    """Row-wise softmax with max-shift stabilisation; rows sum to 1."""
    if x.ndim != 2:
        raise ShapeMismatch(f"softmax expects N,K input, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = backend.reduce_sum_2d(e)
    probs = e / z[:, None]

    def bwd(g):
        inner = backend.reduce_sum_2d(np.ascontiguousarray(g * probs))
        accumulate_grad(x, probs * (g - inner[:, None]))

    return record_op((x,), probs, bwd, "softmax")


def cross_entropy_loss(probs, labels):
    """-mean(log probs[i, label_i]) with the log clamped at 1e-12.

    `probs` rows must already be a probability distribution (softmax
    output); labels are integer class indices.
    """
    if probs.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects N,K probs, got {probs.shape}")
    labels = np.asarray(labels)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    row_sums = probs.data.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-6):
        raise ValueError("cross_entropy_loss expects rows summing to 1 within 1e-6")

    picked = probs.data[np.arange(n), labels]
    clamped = np.maximum(picked, probs.dtype.type(LOG_FLOOR))
    logs = np.log(clamped).reshape(1, n)
    out_data = -(backend.reduce_sum_2d(np.ascontiguousarray(logs))[0] / n)

    def bwd(g):
        dp = np.zeros(probs.shape, dtype=probs.dtype)
        live = picked > LOG_FLOOR  # below the clamp the derivative is 0
        dp[np.arange(n)[live], labels[live]] = -(g / (n * clamped[live])).astype(
            probs.dtype
        )
        accumulate_grad(probs, dp)

    return record_op((probs,), np.asarray(out_data, dtype=probs.dtype), bwd, "cross_entropy")


@dataclass
class ResidualBlockParams:
    """Two-conv basic block or 1x1/3x3/1x1 bottleneck, with an optional
    projection shortcut (required exactly when channels or stride change)."""

    kind: str  # "basic" | "bottleneck"
    conv1: ConvParams
    bn1: BatchNormState
    conv2: ConvParams
    bn2: BatchNormState
    conv3: ConvParams | None = None
    bn3: BatchNormState | None = None
    proj_conv: ConvParams | None = None
    proj_bn: BatchNormState | None = None


def residual_block_forward(x, block, mode):
    """activation(F(x) + shortcut(x)) with ReLU as the block activation."""
    for bn in (block.bn1, block.bn2, block.bn3, block.proj_bn):
        if bn is not None:
            bn.mode = mode

    in_c = x.shape[1]
    if block.kind == "basic":
        out_c = block.conv2.kernel.shape[0]
        strided = block.conv1.stride != (1, 1)
    elif block.kind == "bottleneck":
        out_c = block.conv3.kernel.shape[0]
        strided = block.conv2.stride != (1, 1)
    else:
        raise ValueError(f"unknown block kind {block.kind!r}")
    needs_proj = strided or in_c != out_c
    if needs_proj and block.proj_conv is None:
        raise ShapeMismatch("channel/stride change requires a projection shortcut")
    if not needs_proj and block.proj_conv is not None:
        raise ShapeMismatch("projection shortcut present without dimension change")

    h = relu(batchnorm_forward(conv2d_forward(x, block.conv1), block.bn1))
    h = batchnorm_forward(conv2d_forward(h, block.conv2), block.bn2)
    if block.kind == "bottleneck":
        h = relu(h)
        h = batchnorm_forward(conv2d_forward(h, block.conv3), block.bn3)

    if needs_proj:
        shortcut = batchnorm_forward(conv2d_forward(x, block.proj_conv), block.proj_bn)
    else:
        shortcut = x
    return relu(h + shortcut)
