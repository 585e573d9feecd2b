"""Channel and spatial attention masks and their sequential composition.

Channel attention squeezes each feature map to per-channel descriptors
(average and max), pushes both through a shared bottleneck MLP, and gates
channels with a sigmoid of the summed responses. Spatial attention pools
across channels instead (mean and max maps), convolves the 2-channel stack
with a shape-preserving kernel, and gates positions. The hybrid form applies
the channel mask first, then computes the spatial mask from the refined map.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor
from . import ops

MODES = ("none", "ca_only", "sa_only", "both")


@dataclass
class ChannelAttentionParams:
    """Shared two-layer bottleneck MLP, channels -> channels/ratio -> channels."""

    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ratio: int

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[1]

    def tensors(self):
        return [self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]


@dataclass
class SpatialAttentionParams:
    """Single conv over the stacked channel-mean and channel-max maps."""

    conv_weight: Tensor
    conv_bias: Tensor

    @property
    def kernel(self) -> int:
        return self.conv_weight.shape[2]

    def tensors(self):
        return [self.conv_weight, self.conv_bias]


def init_channel_attention(channels: int, ratio: int, rng) -> ChannelAttentionParams:
    if ratio <= 0 or channels % ratio != 0:
        raise ValueError(
            f"reduction ratio {ratio} must be positive and divide channels {channels}")
    hidden = channels // ratio
    s1 = 1.0 / np.sqrt(channels)
    s2 = 1.0 / np.sqrt(hidden)
    return ChannelAttentionParams(
        mlp_w1=Tensor(rng.uniform(-s1, s1, size=(hidden, channels)), requires_grad=True),
        mlp_b1=Tensor(np.zeros(hidden), requires_grad=True),
        mlp_w2=Tensor(rng.uniform(-s2, s2, size=(channels, hidden)), requires_grad=True),
        mlp_b2=Tensor(np.zeros(channels), requires_grad=True),
        ratio=ratio,
    )


def init_spatial_attention(kernel: int, rng) -> SpatialAttentionParams:
    if kernel <= 0 or kernel % 2 == 0:
        raise ValueError(f"spatial attention kernel {kernel} must be odd and positive")
    s = 1.0 / np.sqrt(2 * kernel * kernel)
    return SpatialAttentionParams(
        conv_weight=Tensor(rng.uniform(-s, s, size=(1, 2, kernel, kernel)),
                           requires_grad=True),
        conv_bias=Tensor(np.zeros(1), requires_grad=True),
    )


def _mlp(desc: Tensor, p: ChannelAttentionParams) -> Tensor:
    # desc is [N,C,1,1] or [N,1,1,C]; both flatten to the same [N,C] rows
    flat = ops.reshape(desc, (desc.shape[0], p.channels))
    h = ops.relu(ops.linear(flat, p.mlp_w1, p.mlp_b1))
    return ops.linear(h, p.mlp_w2, p.mlp_b2)


def channel_attention(x: Tensor, p: ChannelAttentionParams) -> Tensor:
    """Per-channel gate in (0,1), shape [N,C,1,1]."""
    n, c = x.shape[0], x.shape[1]
    if c != p.channels:
        raise ValueError(
            f"feature map has {c} channels but attention params expect {p.channels}")
    avg = _mlp(ops.global_avgpool(x), p)
    mx = _mlp(ops.global_maxpool(x), p)
    return ops.reshape(ops.sigmoid(ops.add(avg, mx)), (n, c, 1, 1))


def spatial_attention(x: Tensor, p: SpatialAttentionParams) -> Tensor:
    """Per-position gate in (0,1), shape [N,1,H,W]."""
    stacked = ops.concat_channels(ops.channel_meanpool(x), ops.channel_maxpool(x))
    k = p.kernel
    logits = ops.conv2d(stacked, p.conv_weight, p.conv_bias,
                        stride=1, padding=(k - 1) // 2)
    return ops.sigmoid(logits)


def apply_hybrid(x: Tensor, ca: ChannelAttentionParams, sa: SpatialAttentionParams,
                 mode: str) -> Tensor:
    """Gate a feature map by the configured attention masks.

    "both" refines channels first and derives the spatial mask from the
    refined map; "none" returns the input untouched.
    """
    if mode not in MODES:
        raise ValueError(f"unknown attention mode {mode!r}, expected one of {MODES}")
    if mode == "none":
        return x
    if mode == "ca_only":
        return ops.mul_broadcast(x, channel_attention(x, ca))
    if mode == "sa_only":
        return ops.mul_broadcast(x, spatial_attention(x, sa))
    refined = ops.mul_broadcast(x, channel_attention(x, ca))
    return ops.mul_broadcast(refined, spatial_attention(refined, sa))


def channel_attention_nhwc(x: Tensor, p: ChannelAttentionParams) -> Tensor:
    """Channels-last `channel_attention`; gate shaped [N,1,1,C]."""
    n, c = x.shape[0], x.shape[3]
    if c != p.channels:
        raise ValueError(
            f"feature map has {c} channels but attention params expect {p.channels}")
    avg = _mlp(ops.global_avgpool_nhwc(x), p)
    mx = _mlp(ops.global_maxpool_nhwc(x), p)
    return ops.reshape(ops.sigmoid(ops.add(avg, mx)), (n, 1, 1, c))


def spatial_attention_nhwc(x: Tensor, p: SpatialAttentionParams) -> Tensor:
    """Channels-last `spatial_attention`; gate shaped [N,H,W,1]."""
    stacked = ops.concat_channels_nhwc(ops.channel_meanpool_nhwc(x),
                                       ops.channel_maxpool_nhwc(x))
    k = p.kernel
    logits = ops.conv2d_nhwc(stacked, p.conv_weight, p.conv_bias,
                             padding=(k - 1) // 2)
    return ops.sigmoid(logits)


def apply_hybrid_nhwc(x: Tensor, ca: ChannelAttentionParams,
                      sa: SpatialAttentionParams, mode: str) -> Tensor:
    """`apply_hybrid` over [N,H,W,C] maps; same modes and composition."""
    if mode not in MODES:
        raise ValueError(f"unknown attention mode {mode!r}, expected one of {MODES}")
    if mode == "none":
        return x
    if mode == "ca_only":
        return ops.mul_broadcast(x, channel_attention_nhwc(x, ca))
    if mode == "sa_only":
        return ops.mul_broadcast(x, spatial_attention_nhwc(x, sa))
    refined = ops.mul_broadcast(x, channel_attention_nhwc(x, ca))
    return ops.mul_broadcast(refined, spatial_attention_nhwc(refined, sa))
