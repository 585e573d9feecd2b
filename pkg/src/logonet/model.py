"""The embedding network: a large-kernel first conv, a stack of
conv/attention/pool stages, and a linear head.

One parameter set serves all three branches of the triplet setup, so a
"triplet forward" is just three calls into the same weights on one tape.

Parameter order (fixed; persistence and fingerprinting depend on it):
  first_conv.weight, first_conv.bias,
  then per stage i: stage{i}.conv.weight, stage{i}.conv.bias,
    stage{i}.ca.mlp_w1, stage{i}.ca.mlp_b1, stage{i}.ca.mlp_w2,
    stage{i}.ca.mlp_b2, stage{i}.sa.conv.weight, stage{i}.sa.conv.bias,
  then head.weight, head.bias.

Parameter count closed form (C_in input channels, K first kernel, S_i stage
widths with S_0 preceded by P_0 = S_0 from the first conv, r the channel
attention ratio, k the spatial attention kernel, E the embedding dim):
  first conv: S_0*C_in*K^2 + S_0
  stage i:    S_i*P_i*9 + S_i  +  2*S_i*(S_i/r) + S_i/r + S_i  +  2*k^2 + 1
  head:       E*S_last + E
Attention parameters exist for every stage regardless of its mode, so
checkpoints have one layout per architecture, not per mode choice.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor
from . import ops
from .attention import (MODES, ChannelAttentionParams, SpatialAttentionParams,
                        apply_hybrid_nhwc, init_channel_attention,
                        init_spatial_attention)


def default_modes(num_stages: int):
    """Spatial gating where maps are large, channel gating where they are deep."""
    if num_stages == 1:
        return ("both",)
    return ("sa_only",) + ("both",) * (num_stages - 2) + ("ca_only",)


@dataclass(frozen=True)
class LogoNetConfig:
    input_channels: int = 1
    input_size: int = 64
    first_kernel: int = 6
    stage_channels: tuple = (32, 64, 128)
    embed_dim: int = 128
    attention_modes: tuple = None
    attention_ratio: int = 8
    spatial_kernel: int = 7
    normalize_embedding: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if self.attention_modes is None:
            object.__setattr__(self, "attention_modes",
                               default_modes(len(self.stage_channels)))
        else:
            object.__setattr__(self, "attention_modes", tuple(self.attention_modes))
        problems = self._problems()
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    def _problems(self):
        p = []
        if self.input_channels < 1:
            p.append(f"input_channels {self.input_channels} < 1")
        if not 1 <= self.first_kernel <= 9:
            p.append(f"first_kernel {self.first_kernel} outside 1..9")
        if not self.stage_channels:
            p.append("stage_channels empty")
        elif any(c < 1 for c in self.stage_channels):
            p.append(f"stage_channels {self.stage_channels} has non-positive width")
        if self.embed_dim < 2:
            p.append(f"embed_dim {self.embed_dim} < 2")
        if self.stage_channels and self.input_size < 2 ** len(self.stage_channels):
            p.append(f"input_size {self.input_size} < 2^{len(self.stage_channels)} "
                     "(one halving per stage)")
        if len(self.attention_modes) != len(self.stage_channels):
            p.append(f"{len(self.attention_modes)} attention modes for "
                     f"{len(self.stage_channels)} stages")
        if any(m not in MODES for m in self.attention_modes):
            p.append(f"attention_modes {self.attention_modes} outside {MODES}")
        if self.attention_ratio < 1 or any(
                c % self.attention_ratio for c in self.stage_channels):
            p.append(f"attention_ratio {self.attention_ratio} must divide every "
                     f"stage width {self.stage_channels}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            p.append(f"spatial_kernel {self.spatial_kernel} must be odd and positive")
        return p

    def canonical_text(self) -> str:
        """Stable key=value form embedded in checkpoints; round-trips exactly."""
        return "".join([
            f"input_channels={self.input_channels}\n",
            f"input_size={self.input_size}\n",
            f"first_kernel={self.first_kernel}\n",
            f"stage_channels={','.join(str(c) for c in self.stage_channels)}\n",
            f"embed_dim={self.embed_dim}\n",
            f"attention_modes={','.join(self.attention_modes)}\n",
            f"attention_ratio={self.attention_ratio}\n",
            f"spatial_kernel={self.spatial_kernel}\n",
            f"normalize_embedding={1 if self.normalize_embedding else 0}\n",
        ])

    @classmethod
    def from_text(cls, text: str) -> "LogoNetConfig":
        kv = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"bad config line {line!r}")
            kv[key] = value
        try:
            return cls(
                input_channels=int(kv["input_channels"]),
                input_size=int(kv["input_size"]),
                first_kernel=int(kv["first_kernel"]),
                stage_channels=tuple(int(c) for c in kv["stage_channels"].split(",")),
                embed_dim=int(kv["embed_dim"]),
                attention_modes=tuple(kv["attention_modes"].split(",")),
                attention_ratio=int(kv["attention_ratio"]),
                spatial_kernel=int(kv["spatial_kernel"]),
                normalize_embedding=kv["normalize_embedding"] == "1",
            )
        except KeyError as missing:
            raise ValueError(f"config text missing key {missing}") from None


@dataclass
class Stage:
    conv_w: Tensor
    conv_b: Tensor
    ca: ChannelAttentionParams
    sa: SpatialAttentionParams


@dataclass
class LogoNetModel:
    config: LogoNetConfig
    first_conv_w: Tensor
    first_conv_b: Tensor
    stages: list = field(default_factory=list)
    head_w: Tensor = None
    head_b: Tensor = None

    def parameters(self):
        """(name, tensor) pairs in the documented fixed order."""
        out = [("first_conv.weight", self.first_conv_w),
               ("first_conv.bias", self.first_conv_b)]
        for i, st in enumerate(self.stages):
            out += [(f"stage{i}.conv.weight", st.conv_w),
                    (f"stage{i}.conv.bias", st.conv_b),
                    (f"stage{i}.ca.mlp_w1", st.ca.mlp_w1),
                    (f"stage{i}.ca.mlp_b1", st.ca.mlp_b1),
                    (f"stage{i}.ca.mlp_w2", st.ca.mlp_w2),
                    (f"stage{i}.ca.mlp_b2", st.ca.mlp_b2),
                    (f"stage{i}.sa.conv.weight", st.sa.conv_weight),
                    (f"stage{i}.sa.conv.bias", st.sa.conv_bias)]
        out += [("head.weight", self.head_w), ("head.bias", self.head_b)]
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    @classmethod
    def from_tensors(cls, config: LogoNetConfig, tensors) -> "LogoNetModel":
        """Rebuild a model from tensors given in the documented order."""
        expected = 2 + 8 * len(config.stage_channels) + 2
        if len(tensors) != expected:
            raise ValueError(f"expected {expected} tensors, got {len(tensors)}")
        it = iter(tensors)
        model = cls(config=config, first_conv_w=next(it), first_conv_b=next(it))
        for _ in config.stage_channels:
            conv_w, conv_b = next(it), next(it)
            ca = ChannelAttentionParams(next(it), next(it), next(it), next(it),
                                        ratio=config.attention_ratio)
            sa = SpatialAttentionParams(next(it), next(it))
            model.stages.append(Stage(conv_w, conv_b, ca, sa))
        model.head_w, model.head_b = next(it), next(it)
        _check_shapes(model)
        return model


def _uniform(rng, fan_in, shape):
    # relu gain: keeps activation variance roughly flat through the stack,
    # which matters at the small pinned learning rate
    s = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-s, s, size=shape).astype(np.float32),
                  requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def init_model(config: LogoNetConfig, seed: int) -> LogoNetModel:
    """Fresh parameters, deterministic in (config, seed).

    Weights are fan-in-scaled uniform (relu gain), biases zero. Draws happen
    in the documented parameter order from a single generator.
    """
    rng = np.random.default_rng(seed)
    c = config
    s0 = c.stage_channels[0]
    k = c.first_kernel
    model = LogoNetModel(
        config=c,
        first_conv_w=_uniform(rng, c.input_channels * k * k,
                              (s0, c.input_channels, k, k)),
        first_conv_b=_zeros(s0),
    )
    prev = s0
    for width in c.stage_channels:
        conv_w = _uniform(rng, prev * 9, (width, prev, 3, 3))
        conv_b = _zeros(width)
        ca = init_channel_attention(width, c.attention_ratio, rng)
        sa = init_spatial_attention(c.spatial_kernel, rng)
        for t in ca.tensors() + sa.tensors():
            t.data = t.data.astype(np.float32)
        model.stages.append(Stage(conv_w, conv_b, ca, sa))
        prev = width
    model.head_w = _uniform(rng, prev, (c.embed_dim, prev))
    model.head_b = _zeros(c.embed_dim)
    return model


def _check_shapes(model: LogoNetModel):
    c = model.config
    s0, k = c.stage_channels[0], c.first_kernel
    if model.first_conv_w.shape != (s0, c.input_channels, k, k):
        raise ValueError(
            f"first conv weight {model.first_conv_w.shape} does not match config "
            f"({s0}, {c.input_channels}, {k}, {k})")
    prev = s0
    for i, (st, width) in enumerate(zip(model.stages, c.stage_channels)):
        if st.conv_w.shape != (width, prev, 3, 3):
            raise ValueError(f"stage{i} conv weight {st.conv_w.shape} does not "
                             f"match config ({width}, {prev}, 3, 3)")
        prev = width
    if model.head_w.shape != (c.embed_dim, prev):
        raise ValueError(f"head weight {model.head_w.shape} does not match "
                         f"config ({c.embed_dim}, {prev})")


def embed(model: LogoNetModel, images: Tensor) -> Tensor:
    """Map a batch of images to embedding rows.

    Pipeline: first conv (stride 1, padding first_kernel//2), then per stage
    a shape-preserving 3x3 conv, ReLU, attention, 2x2/2 maxpool; global
    average pool, linear head, optional row normalization.
    """
    c = model.config
    n = images.shape[0]
    want = (c.input_channels, c.input_size, c.input_size)
    if images.data.ndim != 4 or images.shape[1:] != want:
        raise ValueError(f"expected images shaped [N, {want[0]}, {want[1]}, "
                         f"{want[2]}], got {images.shape}")
    # channels-last internally: conv GEMM operands and their gradients are
    # already in patch order, so no per-layer transposes; values match the
    # channels-first composition
    h = ops.to_channels_last(images)
    h = ops.conv2d_nhwc(h, model.first_conv_w, model.first_conv_b,
                        padding=c.first_kernel // 2)
    for st, mode in zip(model.stages, c.attention_modes):
        h = ops.relu(ops.conv2d_nhwc(h, st.conv_w, st.conv_b, padding=1))
        h = apply_hybrid_nhwc(h, st.ca, st.sa, mode)
        h = ops.maxpool2d_nhwc(h, 2, 2)
    h = ops.reshape(ops.global_avgpool_nhwc(h), (n, c.stage_channels[-1]))
    h = ops.linear(h, model.head_w, model.head_b)
    if c.normalize_embedding:
        h = ops.l2_normalize(h)
    return h


def embed_triplet(model: LogoNetModel, s: Tensor, p_plus: Tensor, p_minus: Tensor):
    """Embed the three triplet batches through the one shared parameter set.

    The branches run as one concatenated batch (a third the GEMM calls of
    three separate passes) and the result is split back into three rows
    blocks.  Identical arithmetic either way: every op here treats rows
    independently.
    """
    if not (s.shape == p_plus.shape == p_minus.shape):
        raise ValueError(f"triplet batches must share a shape, got "
                         f"{s.shape}, {p_plus.shape}, {p_minus.shape}")
    n = s.shape[0]
    fused = embed(model, ops.concat_rows((s, p_plus, p_minus)))
    return (ops.slice_rows(fused, 0, n),
            ops.slice_rows(fused, n, 2 * n),
            ops.slice_rows(fused, 2 * n, 3 * n))


def model_fingerprint(model: LogoNetModel) -> str:
    """16 hex chars over the config text and all parameter bytes, in order."""
    digest = hashlib.sha256()
    digest.update(model.config.canonical_text().encode("utf-8"))
    for name, t in model.parameters():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return digest.hexdigest()[:16]
