"""Hierarchical transformer encoder with an all-linear fusion decoder.

The encoder downsamples through four stages of overlapped patch
merging; each stage stacks attention blocks whose keys and values are
computed on a spatially reduced copy of the sequence, and whose
feed-forward half mixes locality back in with a depthwise 3x3
convolution. Residual connections are normalized after the add. The
decoder projects every stage to a common width, upsamples to the
quarter-resolution grid, fuses, and classifies per patch.

Three hidden-feature groups per block can be gated per instance
through a GateContext: the shared query/key projection columns, the
value/output pair, and the feed-forward hidden layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .gating import GateContext, GatePredictor, apply_gate, dgl_pair_forward
from .kernels import conv_out_size
from .nn import DepthwiseConv3x3, LayerNorm, Linear, Module
from .tensor import Tensor

GATE_KINDS = ("qk", "v", "ffn")
NUM_STAGES = 4


class FeatureMap(NamedTuple):
    """Token sequence plus the spatial grid it reshapes to."""

    tokens: Tensor
    hw: tuple


@dataclass(frozen=True)
class StageConfig:
    dim: int
    depth: int
    heads: int
    sr_ratio: int
    patch_kernel: int
    patch_stride: int
    patch_pad: int

    def __post_init__(self):
        if self.dim < 1 or self.depth < 1 or self.heads < 1:
            raise ContractError(f"stage sizes must be positive: {self}")
        if self.dim % self.heads != 0:
            raise ContractError(
                f"dim {self.dim} not divisible by heads {self.heads}")
        if self.sr_ratio < 1:
            raise ContractError(f"sr_ratio must be >= 1, got {self.sr_ratio}")
        if self.patch_kernel < 1 or self.patch_stride < 1 or self.patch_pad < 0:
            raise ContractError(f"bad patch geometry: {self}")


@dataclass(frozen=True)
class MitConfig:
    stages: tuple
    num_classes: int
    decoder_dim: int
    in_channels: int = 3
    fusion: str = "concat"
    ffn_expand: int = 4
    input_hw: tuple = (512, 512)

    def __post_init__(self):
        if len(self.stages) != NUM_STAGES:
            raise ContractError(
                f"exactly {NUM_STAGES} stages are required, got {len(self.stages)}")
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.decoder_dim < 1:
            raise ContractError(f"decoder_dim must be positive, got {self.decoder_dim}")
        if self.fusion not in ("concat", "add"):
            raise ContractError(f"fusion must be 'concat' or 'add', got {self.fusion!r}")
        if self.ffn_expand < 1:
            raise ContractError(f"ffn_expand must be >= 1, got {self.ffn_expand}")
        if self.in_channels < 1:
            raise ContractError(f"in_channels must be positive, got {self.in_channels}")

    def stage_hw(self, input_hw=None):
        """Feature grid per stage for a given input size."""
        h, w = input_hw if input_hw is not None else self.input_hw
        grids = []
        for s in self.stages:
            h = conv_out_size(h, s.patch_kernel, s.patch_stride, s.patch_pad)
            w = conv_out_size(w, s.patch_kernel, s.patch_stride, s.patch_pad)
            grids.append((h, w))
        return grids


def tiny_config(num_classes: int = 4, input_hw=(32, 32)) -> MitConfig:
    """Four-stage model small enough to train in seconds on a CPU."""
    return MitConfig(
        stages=(
            StageConfig(8, 1, 1, 4, 7, 4, 3),
            StageConfig(16, 1, 1, 2, 3, 2, 1),
            StageConfig(24, 1, 2, 1, 3, 2, 1),
            StageConfig(32, 1, 4, 1, 3, 2, 1),
        ),
        num_classes=num_classes,
        decoder_dim=32,
        fusion="concat",
        input_hw=tuple(input_hw),
    )


def mit_b0_config(num_classes: int = 150, input_hw=(512, 512)) -> MitConfig:
    """The B0 encoder: dims 32/64/160/256, two blocks per stage."""
    return MitConfig(
        stages=(
            StageConfig(32, 2, 1, 8, 7, 4, 3),
            StageConfig(64, 2, 2, 4, 3, 2, 1),
            StageConfig(160, 2, 5, 2, 3, 2, 1),
            StageConfig(256, 2, 8, 1, 3, 2, 1),
        ),
        num_classes=num_classes,
        decoder_dim=256,
        fusion="concat",
        input_hw=tuple(input_hw),
    )


PRESETS = {"tiny": tiny_config, "mit-b0": mit_b0_config}


def seq_to_map(t: Tensor, hw) -> Tensor:
    """(B, N, C) -> (B, C, H, W); requires N == H * W."""
    h, w = hw
    b, n, c = t.data.shape
    if n != h * w:
        raise DimensionError(f"sequence length {n} does not match grid {h}x{w}")
    return T.reshape(t, (b, h, w, c)).transpose(0, 3, 1, 2)


def map_to_seq(t: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    b, c, h, w = t.data.shape
    return T.reshape(t.transpose(0, 2, 3, 1), (b, h * w, c))


class PatchMerge(Module):
    """Overlapped patch embedding: strided patch extraction, linear
    projection, layer norm."""

    def __init__(self, in_channels: int, stage: StageConfig, rng):
        self.kernel = stage.patch_kernel
        self.stride = stage.patch_stride
        self.pad = stage.patch_pad
        self.proj = Linear(in_channels * stage.patch_kernel ** 2, stage.dim, rng)
        self.norm = LayerNorm(stage.dim)

    def __call__(self, x_map: Tensor) -> FeatureMap:
        _, _, h, w = x_map.data.shape
        if h % self.stride != 0 or w % self.stride != 0:
            raise DimensionError(
                f"spatial extents {h}x{w} not divisible by patch stride "
                f"{self.stride}; pad the input by config instead")
        ho = conv_out_size(h, self.kernel, self.stride, self.pad)
        wo = conv_out_size(w, self.kernel, self.stride, self.pad)
        if ho < 1 or wo < 1:
            raise DimensionError(
                f"input {h}x{w} too small for patch kernel {self.kernel} "
                f"stride {self.stride} pad {self.pad}")
        cols = T.patch_extract(x_map, self.kernel, self.stride, self.pad)
        return FeatureMap(self.norm(self.proj(cols)), (ho, wo))


class EfficientAttention(Module):
    """Multi-head attention whose keys and values come from a
    sr_ratio-times spatially reduced sequence. Scores are scaled by
    1 / sqrt(reduced length)."""

    def __init__(self, dim: int, heads: int, sr_ratio: int, rng):
        self.heads = heads
        self.sr_ratio = sr_ratio
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        if sr_ratio > 1:
            self.sr_proj = Linear(dim * sr_ratio ** 2, dim, rng)
            self.sr_norm = LayerNorm(dim)
        else:
            self.sr_proj = None
            self.sr_norm = None

    def _reduce(self, x: Tensor, hw) -> Tensor:
        h, w = hw
        r = self.sr_ratio
        if h % r != 0 or w % r != 0:
            raise DimensionError(
                f"grid {h}x{w} not divisible by reduction ratio {r}")
        cols = T.patch_extract(seq_to_map(x, hw), r, r, 0)
        return self.sr_norm(self.sr_proj(cols))

    def _split_heads(self, t: Tensor) -> Tensor:
        b, n, c = t.data.shape
        d = c // self.heads
        return T.reshape(t, (b, n, self.heads, d)).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, hw, gm_qk=None, gm_v=None,
                 trace=None, layer_id=""):
        b, n, c = x.data.shape
        q = apply_gate(self.wq(x), gm_qk)
        xr = self._reduce(x, hw) if self.sr_ratio > 1 else x
        k = apply_gate(self.wk(xr), gm_qk)
        v = apply_gate(self.wv(xr), gm_v)
        n_red = xr.data.shape[1]
        qh = self._split_heads(q)
        kh = self._split_heads(k)
        vh = self._split_heads(v)
        scores = T.matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(n_red))
        attn = T.softmax_rows(scores)
        mix = T.reshape(T.matmul(attn, vh).transpose(0, 2, 1, 3), (b, n, c))
        if trace is not None:
            trace[(layer_id, "q")] = q.data.copy()
            trace[(layer_id, "v")] = v.data.copy()
            trace[(layer_id, "attn_mix")] = mix.data.copy()
        return self.wo(apply_gate(mix, gm_v))


class MixFfn(Module):
    """Linear expansion, depthwise 3x3 over the grid, GeLU, linear
    contraction; the whole hidden width is one gated pair."""

    def __init__(self, dim: int, hidden: int, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.conv = DepthwiseConv3x3(hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor, hw, gm=None, trace=None, layer_id=""):
        def hidden_fn(y):
            h = T.gelu(map_to_seq(self.conv(seq_to_map(y, hw))))
            if trace is not None:
                trace[(layer_id, "ffn_hidden")] = h.data.copy()
            return h

        _, z = dgl_pair_forward(x, self.fc1.weight, self.fc2.weight, gm,
                                self.fc1.bias, self.fc2.bias, hidden_fn)
        return z


class EncoderLayer(Module):
    """Attention and feed-forward halves, each with a post-add norm."""

    def __init__(self, stage: StageConfig, ffn_expand: int, rng,
                 gated: bool, layer_id: str):
        dim = stage.dim
        hidden = dim * ffn_expand
        self.layer_id = layer_id
        self.attn = EfficientAttention(dim, stage.heads, stage.sr_ratio, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn = MixFfn(dim, hidden, rng)
        self.norm2 = LayerNorm(dim)
        if gated:
            self.gate_qk = GatePredictor(dim, dim, rng)
            self.gate_v = GatePredictor(dim, dim, rng)
            self.gate_ffn = GatePredictor(dim, hidden, rng)
        else:
            self.gate_qk = None
            self.gate_v = None
            self.gate_ffn = None

    def pair_weight(self, kind: str) -> Tensor:
        """First weight of a gated pair; its columns are the gated units."""
        if kind == "qk":
            return self.attn.wq.weight
        if kind == "v":
            return self.attn.wv.weight
        if kind == "ffn":
            return self.ffn.fc1.weight
        raise ContractError(f"unknown gate kind {kind!r}")

    def _predictor(self, kind: str):
        return {"qk": self.gate_qk, "v": self.gate_v, "ffn": self.gate_ffn}[kind]

    def __call__(self, x: Tensor, hw, ctx: Optional[GateContext] = None,
                 trace=None):
        gm_qk = gm_v = gm_ffn = None
        if ctx is not None:
            gm_qk = ctx.gate(self.layer_id, "qk", x,
                             self.pair_weight("qk"), self.gate_qk)
            gm_v = ctx.gate(self.layer_id, "v", x,
                            self.pair_weight("v"), self.gate_v)
        a = self.attn(x, hw, gm_qk, gm_v, trace, self.layer_id)
        x = self.norm1(x + a)
        if ctx is not None:
            gm_ffn = ctx.gate(self.layer_id, "ffn", x,
                              self.pair_weight("ffn"), self.gate_ffn)
        f = self.ffn(x, hw, gm_ffn, trace, self.layer_id)
        return self.norm2(x + f)


class EncoderStage(Module):
    def __init__(self, in_channels: int, stage: StageConfig, ffn_expand: int,
                 rng, gated: bool, stage_idx: int):
        self.merge = PatchMerge(in_channels, stage, rng)
        self.layers = [
            EncoderLayer(stage, ffn_expand, rng, gated, f"s{stage_idx}.l{j}")
            for j in range(stage.depth)
        ]
        self.norm = LayerNorm(stage.dim)

    def __call__(self, x_map: Tensor, ctx=None, trace=None) -> FeatureMap:
        x, hw = self.merge(x_map)
        for layer in self.layers:
            x = layer(x, hw, ctx, trace)
        return FeatureMap(self.norm(x), hw)


class Encoder(Module):
    def __init__(self, cfg: MitConfig, rng, gated: bool):
        self.stages = []
        in_ch = cfg.in_channels
        for i, stage in enumerate(cfg.stages):
            self.stages.append(
                EncoderStage(in_ch, stage, cfg.ffn_expand, rng, gated, i))
            in_ch = stage.dim

    def __call__(self, x_map: Tensor, ctx=None, trace=None):
        feats = []
        cur = x_map
        for stage in self.stages:
            fm = stage(cur, ctx, trace)
            feats.append(fm)
            cur = seq_to_map(fm.tokens, fm.hw)
        return feats


class Decoder(Module):
    """Project each stage to a common width, upsample everything to the
    first stage's grid, fuse, and classify."""

    def __init__(self, cfg: MitConfig, rng):
        d = cfg.decoder_dim
        self.fusion = cfg.fusion
        self.projs = [Linear(s.dim, d, rng) for s in cfg.stages]
        fuse_in = d * len(cfg.stages) if cfg.fusion == "concat" else d
        self.fuse = Linear(fuse_in, d, rng)
        self.head = Linear(d, cfg.num_classes, rng)

    def __call__(self, feats):
        target = feats[0].hw
        maps = []
        for (t, hw), proj in zip(feats, self.projs):
            m = seq_to_map(proj(t), hw)
            if hw != target:
                m = T.bilinear_upsample(m, target)
            maps.append(m)
        if self.fusion == "concat":
            fused = T.concat(maps, axis=1)
        else:
            fused = maps[0]
            for m in maps[1:]:
                fused = fused + m
        s = T.relu(self.fuse(map_to_seq(fused)))
        return seq_to_map(self.head(s), target)


class Segmenter(Module):
    """Encoder plus decoder; forward maps (B, C_in, H, W) images to
    (B, num_classes, H/s, W/s) logits on the first-stage grid."""

    def __init__(self, cfg: MitConfig, seed: int = 0, gated: bool = False):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.gated = gated
        self.encoder = Encoder(cfg, rng, gated)
        self.decoder = Decoder(cfg, rng)

    def encode(self, x, ctx=None, trace=None):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=T.DTYPE))
        if x.data.ndim != 4:
            raise DimensionError(
                f"expected (B, C, H, W) input, got shape {x.data.shape}")
        if x.data.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"expected {self.cfg.in_channels} input channels, "
                f"got {x.data.shape[1]}")
        return self.encoder(x, ctx, trace)

    def forward(self, x, ctx=None, trace=None, return_features=False):
        feats = self.encode(x, ctx, trace)
        logits = self.decoder(feats)
        if return_features:
            return logits, feats
        return logits

    def __call__(self, x, ctx=None, trace=None):
        return self.forward(x, ctx)

    def predict(self, x, ctx=None, out_hw=None):
        """Class map at out_hw (default: input resolution)."""
        x = np.asarray(x, dtype=T.DTYPE)
        if out_hw is None:
            out_hw = x.shape[-2:]
        with T.no_grad():
            logits = self.forward(x, ctx)
            if tuple(logits.data.shape[-2:]) != tuple(out_hw):
                logits = T.bilinear_upsample(logits, out_hw)
        return np.argmax(logits.data, axis=1).astype(np.int64)

    def encoder_layers(self):
        for stage in self.encoder.stages:
            for layer in stage.layers:
                yield layer.layer_id, layer

    def gated_pairs(self):
        """(layer_id, kind, first-weight ndarray) for every gateable pair."""
        for layer_id, layer in self.encoder_layers():
            for kind in GATE_KINDS:
                yield layer_id, kind, layer.pair_weight(kind).data
