"""Composite layers built from the tensor primitives.

Four building blocks: the double-convolution block used by every encoder and
decoder stage, the cascade multi-scale convolution applied to skip tensors,
and the two attention modules (dense spatial-position attention over K summary
features, channel attention over the C channel maps) whose composition forms
the MDSA stack.  Every block maps (N, C, H, W) to (N, C, H, W).

Convolutions inside blocks are followed by relu, except the final MSC fuse
convolution.  There are no normalization layers.  Attention is computed
independently per batch item (realized as batched matrix products).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    adaptive_avg_pool_to_k,
    concat_channels,
    conv2d,
    matmul,
    relu,
    reshape,
    softmax_rows,
    transpose_last2,
    transposed_conv2d,
)


@dataclass
class ConvParams:
    """One convolution layer: weight, bias, and its geometry.

    For a regular conv the weight is (out_c, in_c, kh, kw); for a transposed
    conv it is (in_c, out_c, kh, kw) and ``stride`` is the upsampling factor.
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    transposed: bool = False

    @property
    def in_channels(self):
        return self.weight.shape[0] if self.transposed else self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[1] if self.transposed else self.weight.shape[0]

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


def kaiming_conv(rng, in_channels, out_channels, kernel, *, stride=1, padding=0,
                 dilation=1, transposed=False, dtype=np.float32) -> ConvParams:
    """Kaiming-uniform fan-in weights (bound sqrt(6/fan_in)), zero bias."""
    fan_in = in_channels * kernel * kernel
    bound = np.sqrt(6.0 / fan_in)
    if transposed:
        shape = (in_channels, out_channels, kernel, kernel)
    else:
        shape = (out_channels, in_channels, kernel, kernel)
    weight = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                    requires_grad=True)
    bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
    return ConvParams(weight, bias, stride=stride, padding=padding,
                      dilation=dilation, transposed=transposed)


def apply_conv(x: Tensor, p: ConvParams) -> Tensor:
    if p.transposed:
        return transposed_conv2d(x, p.weight, p.bias, stride=p.stride)
    return conv2d(x, p.weight, p.bias, stride=p.stride, padding=p.padding,
                  dilation=p.dilation)


# ---------------------------------------------------------------------------
# Double convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvBlockParams:
    """Two consecutive 3x3 convolutions (pad 1, stride 1), each followed by relu."""

    conv1: ConvParams
    conv2: ConvParams

    @property
    def in_channels(self):
        return self.conv1.in_channels

    @property
    def out_channels(self):
        return self.conv2.out_channels

    def named_parameters(self, prefix):
        yield from self.conv1.named_parameters(f"{prefix}.conv1")
        yield from self.conv2.named_parameters(f"{prefix}.conv2")


def init_conv_block(rng, in_channels, mid_channels, out_channels,
                    dtype=np.float32) -> ConvBlockParams:
    return ConvBlockParams(
        kaiming_conv(rng, in_channels, mid_channels, 3, padding=1, dtype=dtype),
        kaiming_conv(rng, mid_channels, out_channels, 3, padding=1, dtype=dtype),
    )


def conv_block(x: Tensor, p: ConvBlockParams) -> Tensor:
    return relu(apply_conv(relu(apply_conv(x, p.conv1)), p.conv2))


# ---------------------------------------------------------------------------
# Cascade multi-scale convolution
# ---------------------------------------------------------------------------

@dataclass
class MscParams:
    """Cascaded 5x5 / 3x3 / 1x1 branches with residual sums, fused by a 1x1 conv."""

    conv5: ConvParams
    conv3: ConvParams
    conv1a: ConvParams
    fuse: ConvParams

    @property
    def channels(self):
        return self.conv5.in_channels

    def named_parameters(self, prefix):
        yield from self.conv5.named_parameters(f"{prefix}.conv5")
        yield from self.conv3.named_parameters(f"{prefix}.conv3")
        yield from self.conv1a.named_parameters(f"{prefix}.conv1")
        yield from self.fuse.named_parameters(f"{prefix}.fuse")


def init_msc(rng, channels, dtype=np.float32) -> MscParams:
    return MscParams(
        kaiming_conv(rng, channels, channels, 5, padding=2, dtype=dtype),
        kaiming_conv(rng, channels, channels, 3, padding=1, dtype=dtype),
        kaiming_conv(rng, channels, channels, 1, dtype=dtype),
        kaiming_conv(rng, 4 * channels, channels, 1, dtype=dtype),
    )


def cascade_msc(x: Tensor, p: MscParams) -> Tensor:
    """x1 = relu(conv5(x)); x2 = relu(conv3(x + x1)); x3 = relu(conv1(x + x2));
    output = fuse(concat(x, x1, x2, x3)), same shape as x."""
    if x.shape[1] != p.channels:
        raise ShapeError(
            f"cascade_msc expects {p.channels} channels, got {x.shape[1]}"
        )
    x1 = relu(apply_conv(x, p.conv5))
    x2 = relu(apply_conv(add(x, x1), p.conv3))
    x3 = relu(apply_conv(add(x, x2), p.conv1a))
    return apply_conv(concat_channels([x, x1, x2, x3]), p.fuse)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

@dataclass
class DspaParams:
    """Dense spatial-position attention: a dilated 3x3 conv (dilation 2, pad 2)
    feeds contiguous-bin average pooling that yields K summary features."""

    dilated: ConvParams
    k: int = 10

    @property
    def channels(self):
        return self.dilated.in_channels

    def named_parameters(self, prefix):
        yield from self.dilated.named_parameters(f"{prefix}.dilated")


def init_dspa(rng, channels, k=10, dtype=np.float32) -> DspaParams:
    return DspaParams(
        kaiming_conv(rng, channels, channels, 3, padding=2, dilation=2, dtype=dtype),
        k=k,
    )


def dspa(m: Tensor, p: DspaParams, return_attention: bool = False):
    """Attend each of the H*W pixel features over K pooled summary features.

    Per item: with M the (C, N) pixel features and D the (C, K) summaries,
    the attention row for pixel j is softmax_i(D_i . M_j) and the output is
    D A^T + M reshaped back to (C, H, W).
    """
    n, c, h, w = m.shape
    npos = h * w
    if npos < p.k:
        raise ShapeError(
            f"dspa requires H*W >= K, got {h}x{w} = {npos} positions for K={p.k}"
        )
    dense = adaptive_avg_pool_to_k(relu(apply_conv(m, p.dilated)), p.k)  # (N, C, K)
    m2 = reshape(m, (n, c, npos))
    attn = softmax_rows(matmul(transpose_last2(m2), dense))  # (N, H*W, K)
    out = add(matmul(dense, transpose_last2(attn)), m2)
    out = reshape(out, (n, c, h, w))
    if return_attention:
        return out, attn
    return out


def channel_attention(m: Tensor, return_attention: bool = False):
    """Attend each channel map over all channel maps via the (C, C) Gram softmax.

    Per item: with M the (C, N) matrix, A = softmax_rows(M M^T) and the output
    is A M + M reshaped back to (C, H, W).  Parameter-free.
    """
    n, c, h, w = m.shape
    m2 = reshape(m, (n, c, h * w))
    attn = softmax_rows(matmul(m2, transpose_last2(m2)))  # (N, C, C)
    out = add(matmul(attn, m2), m2)
    out = reshape(out, (n, c, h, w))
    if return_attention:
        return out, attn
    return out


def mdsa(m: Tensor, p: DspaParams) -> Tensor:
    """Spatial-position attention followed by channel attention."""
    return channel_attention(dspa(m, p))
