"""Dual-branch fusion encoder, dilated context pooling, convolutional LSTM,
and detail-recovering decoder for 7-class lane marking segmentation.

The encoder runs the LIDAR raster and the camera label map through separate
branches; every stride-2 downsampling step concatenates the camera features
into the LIDAR branch at a fixed 3:1 channel ratio, followed by depthwise
separable residual blocks on the fused map. The context head pools the final
map through parallel dilated convolutions, the LSTM threads a spatial hidden
state across consecutive frames, and the decoder restores full resolution
with two bilinear upsampling steps that re-fuse low-level features and the
original LIDAR raster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import SequenceSample, to_network_inputs
from .optim import ParamStore
from .tensor import (
    RunningStats,
    ShapeError,
    Tensor,
    batch_norm,
    bilinear_upsample,
    concat_channels,
    conv2d,
    depthwise_separable_conv,
    global_average_pool,
    relu,
    sigmoid,
    tanh,
)

__all__ = [
    "MODES",
    "NUM_CLASSES",
    "ASPP_RATES",
    "StageSpec",
    "EncoderConfig",
    "HiddenState",
    "ConvLstmCell",
    "FusionLaneModel",
    "encoder_output_size",
    "forward_sequence",
]

MODES = ("fusionlane", "without_lstm")
NUM_CLASSES = 7
ASPP_RATES = (6, 12, 18)

# camera:lidar channel ratio at every fusion point
_BASE_C_CHANNELS = (16, 32, 64, 256)
_DEFAULT_BLOCKS = (1, 2, 4, 1)


def encoder_output_size(size: int) -> int:
    """Spatial size after the four stride-2 stages (output stride 16)."""
    for _ in range(4):
        size = -(-size // 2)
    return size


@dataclass(frozen=True)
class StageSpec:
    l_channels: int
    c_channels: int
    blocks: int

    def __post_init__(self):
        if self.l_channels != 3 * self.c_channels:
            raise ValueError(
                f"stage channels must keep the 3:1 branch ratio, got "
                f"L={self.l_channels}, C={self.c_channels}")

    @property
    def fused_channels(self) -> int:
        return self.l_channels + self.c_channels


@dataclass(frozen=True)
class EncoderConfig:
    stages: tuple
    width_multiplier: float = 1.0

    @classmethod
    def default(cls, width_multiplier: float = 1.0, blocks=_DEFAULT_BLOCKS) -> "EncoderConfig":
        if width_multiplier <= 0:
            raise ValueError(f"width_multiplier must be positive, got {width_multiplier}")
        stages = tuple(
            StageSpec(3 * _scaled(c, width_multiplier), _scaled(c, width_multiplier), b)
            for c, b in zip(_BASE_C_CHANNELS, blocks))
        return cls(stages=stages, width_multiplier=width_multiplier)


def _scaled(channels: int, wm: float) -> int:
    return max(1, round(channels * wm))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


# ---------------------------------------------------------------------------
# parameterized layers


class _Conv:
    def __init__(self, store, name, in_ch, out_ch, k, rng, stride=1, dilation=1, groups=1):
        fan_in = (in_ch // groups) * k * k
        init = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch // groups, k, k))
        self.w = store.create(f"{name}.w", init.astype(np.float32))
        self.stride, self.dilation, self.groups = stride, dilation, groups

    def __call__(self, x):
        return conv2d(x, self.w, stride=self.stride, dilation=self.dilation, groups=self.groups)


class _BatchNorm:
    def __init__(self, store, name, ch, bn_registry):
        self.scale = store.create(f"{name}.scale", np.ones(ch, np.float32))
        self.shift = store.create(f"{name}.shift", np.zeros(ch, np.float32))
        self.stats = RunningStats(ch)
        bn_registry[name] = self.stats

    def __call__(self, x, mode):
        return batch_norm(x, self.scale, self.shift, mode, self.stats)


class _ConvBnRelu:
    def __init__(self, store, name, in_ch, out_ch, k, rng, bn_registry,
                 stride=1, dilation=1):
        self.conv = _Conv(store, name + ".conv", in_ch, out_ch, k, rng,
                          stride=stride, dilation=dilation)
        self.bn = _BatchNorm(store, name + ".bn", out_ch, bn_registry)

    def __call__(self, x, mode):
        return relu(self.bn(self.conv(x), mode))


class _SepConv:
    def __init__(self, store, name, in_ch, out_ch, rng, stride=1):
        depth = rng.normal(0.0, math.sqrt(2.0 / 9.0), size=(in_ch, 1, 3, 3))
        point = rng.normal(0.0, math.sqrt(2.0 / in_ch), size=(out_ch, in_ch, 1, 1))
        self.depth = store.create(f"{name}.depth", depth.astype(np.float32))
        self.point = store.create(f"{name}.point", point.astype(np.float32))
        self.stride = stride

    def __call__(self, x):
        return depthwise_separable_conv(x, self.depth, self.point, stride=self.stride)


class _SepConvBnRelu:
    def __init__(self, store, name, in_ch, out_ch, rng, bn_registry, stride=1):
        self.sep = _SepConv(store, name + ".sep", in_ch, out_ch, rng, stride=stride)
        self.bn = _BatchNorm(store, name + ".bn", out_ch, bn_registry)

    def __call__(self, x, mode):
        return relu(self.bn(self.sep(x), mode))


class _ResBlock:
    """Two depthwise separable conv+BN steps with an identity skip."""

    def __init__(self, store, name, ch, rng, bn_registry):
        self.sep1 = _SepConv(store, name + ".sep1", ch, ch, rng)
        self.bn1 = _BatchNorm(store, name + ".bn1", ch, bn_registry)
        self.sep2 = _SepConv(store, name + ".sep2", ch, ch, rng)
        self.bn2 = _BatchNorm(store, name + ".bn2", ch, bn_registry)

    def __call__(self, x, mode):
        y = relu(self.bn1(self.sep1(x), mode))
        y = self.bn2(self.sep2(y), mode)
        return relu(x + y)


class _EncoderStage:
    """Stride-2 convolution in both branches, 3:1 fusion, then residual blocks."""

    def __init__(self, store, name, l_in, c_in, spec: StageSpec, rng, bn_registry):
        self.l = _ConvBnRelu(store, name + ".l", l_in, spec.l_channels, 3, rng,
                             bn_registry, stride=2)
        self.c = _ConvBnRelu(store, name + ".c", c_in, spec.c_channels, 3, rng,
                             bn_registry, stride=2)
        self.blocks = [
            _ResBlock(store, f"{name}.block{i}", spec.fused_channels, rng, bn_registry)
            for i in range(spec.blocks)
        ]

    def __call__(self, l_x, c_x, mode):
        lf = self.l(l_x, mode)
        cf = self.c(c_x, mode)
        fused = concat_channels([lf, cf])
        for block in self.blocks:
            fused = block(fused, mode)
        return fused, cf


class _Aspp:
    """Parallel 1x1 + dilated 3x3 branches + pooled image-level features,
    concatenated and projected down."""

    def __init__(self, store, name, in_ch, branch_ch, out_ch, rng, bn_registry):
        self.branch_1x1 = _ConvBnRelu(store, name + ".b0", in_ch, branch_ch, 1, rng, bn_registry)
        self.dilated = [
            _ConvBnRelu(store, f"{name}.b{rate}", in_ch, branch_ch, 3, rng,
                        bn_registry, dilation=rate)
            for rate in ASPP_RATES
        ]
        self.image = _ConvBnRelu(store, name + ".image", in_ch, branch_ch, 1, rng, bn_registry)
        self.project = _ConvBnRelu(store, name + ".project", branch_ch * 5, out_ch, 1,
                                   rng, bn_registry)

    def __call__(self, x, mode):
        h, w = x.data.shape[2], x.data.shape[3]
        parts = [self.branch_1x1(x, mode)]
        parts += [b(x, mode) for b in self.dilated]
        pooled = self.image(global_average_pool(x), mode)
        parts.append(bilinear_upsample(pooled, h, w))
        return self.project(concat_channels(parts), mode)


@dataclass
class HiddenState:
    """LSTM memory for one sequence; reset to zeros at every sequence start."""

    h: Tensor
    c: Tensor
    seq_id: int = 0


class ConvLstmCell:
    """Convolutional LSTM cell with per-channel-per-position peephole weights.

    Gate maps come from 3x3 convolutions of the frame input and the previous
    hidden map; the input/forget/output gates additionally peep at the
    previous cell state through elementwise weights. The cell output is
    o * C (optionally o * tanh(C) via ``tanh_cell_output``).
    """

    def __init__(self, store, name, channels, state_hw, rng, tanh_cell_output=False):
        c = channels
        h, w = state_hw
        std = math.sqrt(1.0 / (c * 9))
        def conv_kernel():
            return rng.normal(0.0, std, size=(c, c, 3, 3)).astype(np.float32)
        self.w_xi = store.create(f"{name}.w_xi", conv_kernel())
        self.w_hi = store.create(f"{name}.w_hi", conv_kernel())
        self.w_xf = store.create(f"{name}.w_xf", conv_kernel())
        self.w_hf = store.create(f"{name}.w_hf", conv_kernel())
        self.w_xo = store.create(f"{name}.w_xo", conv_kernel())
        self.w_ho = store.create(f"{name}.w_ho", conv_kernel())
        self.w_xc = store.create(f"{name}.w_xc", conv_kernel())
        self.w_hc = store.create(f"{name}.w_hc", conv_kernel())
        self.w_ci = store.create(f"{name}.w_ci", np.zeros((1, c, h, w), np.float32))
        self.w_cf = store.create(f"{name}.w_cf", np.zeros((1, c, h, w), np.float32))
        self.w_co = store.create(f"{name}.w_co", np.zeros((1, c, h, w), np.float32))
        self.b_i = store.create(f"{name}.b_i", np.zeros((1, c, 1, 1), np.float32))
        # forget gate starts open so early training can carry state across frames
        self.b_f = store.create(f"{name}.b_f", np.ones((1, c, 1, 1), np.float32))
        self.b_o = store.create(f"{name}.b_o", np.zeros((1, c, 1, 1), np.float32))
        self.b_c = store.create(f"{name}.b_c", np.zeros((1, c, 1, 1), np.float32))
        self.channels = c
        self.state_hw = (h, w)
        self.tanh_cell_output = tanh_cell_output

    def zero_state(self, batch: int, seq_id: int = 0) -> HiddenState:
        shape = (batch, self.channels, *self.state_hw)
        return HiddenState(Tensor(np.zeros(shape, np.float32)),
                           Tensor(np.zeros(shape, np.float32)), seq_id)

    def step(self, x: Tensor, state: HiddenState):
        if x.data.shape[2:] != self.state_hw:
            raise ShapeError(
                f"LSTM input spatial size {x.data.shape[2:]} does not match the cell's "
                f"state size {self.state_hw}; the model is pinned to one input size")
        if x.data.shape != state.h.data.shape:
            raise ShapeError(
                f"LSTM state shape {state.h.data.shape} does not match input {x.data.shape}")
        h_prev, c_prev = state.h, state.c
        i = sigmoid(conv2d(x, self.w_xi) + conv2d(h_prev, self.w_hi)
                    + self.w_ci * c_prev + self.b_i)
        f = sigmoid(conv2d(x, self.w_xf) + conv2d(h_prev, self.w_hf)
                    + self.w_cf * c_prev + self.b_f)
        o = sigmoid(conv2d(x, self.w_xo) + conv2d(h_prev, self.w_ho)
                    + self.w_co * c_prev + self.b_o)
        g = tanh(conv2d(x, self.w_xc) + conv2d(h_prev, self.w_hc) + self.b_c)
        c_new = f * c_prev + i * g
        h_new = o * tanh(c_new) if self.tanh_cell_output else o * c_new
        return h_new, HiddenState(h_new, c_new, state.seq_id)


class FusionLaneModel:
    """Full segmentation model; ``mode`` selects the LSTM or frame-independent variant.

    In ``fusionlane`` mode the peephole weights pin the model to one input
    size (given as ``input_size``); ``without_lstm`` models accept any size.
    """

    def __init__(self, mode: str = "fusionlane", width_multiplier: float = 1.0,
                 input_size: int | None = None, block_counts=_DEFAULT_BLOCKS,
                 lstm_layers: int = 1, tanh_cell_output: bool = False,
                 num_classes: int = NUM_CLASSES, seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if mode == "fusionlane":
            if input_size is None:
                raise ValueError("fusionlane mode needs input_size to size the LSTM state")
            if lstm_layers < 1:
                raise ValueError("fusionlane mode needs at least one LSTM layer")
        self.mode = mode
        self.width_multiplier = float(width_multiplier)
        self.input_size = None if input_size is None else int(input_size)
        self.block_counts = tuple(int(b) for b in block_counts)
        self.lstm_layers = int(lstm_layers) if mode == "fusionlane" else 0
        self.tanh_cell_output = bool(tanh_cell_output)
        self.num_classes = int(num_classes)
        self.seed = int(seed)

        rng = np.random.default_rng(seed)
        store = ParamStore()
        self.bn_stats: dict[str, RunningStats] = {}
        self.encoder_config = EncoderConfig.default(width_multiplier, self.block_counts)

        self.stages = []
        l_in, c_in = 3, 1
        for idx, spec in enumerate(self.encoder_config.stages):
            self.stages.append(_EncoderStage(store, f"encoder.stage{idx + 1}",
                                             l_in, c_in, spec, rng, self.bn_stats))
            l_in, c_in = spec.fused_channels, spec.c_channels
        high_ch = self.encoder_config.stages[-1].fused_channels
        self.low_channels = self.encoder_config.stages[1].fused_channels

        wm = width_multiplier
        self.hidden_channels = _scaled(64, wm)
        branch_ch = _scaled(256, wm)
        self.aspp = _Aspp(store, "aspp", high_ch, branch_ch, self.hidden_channels,
                          rng, self.bn_stats)

        self.lstm: list[ConvLstmCell] = []
        if self.mode == "fusionlane":
            state = encoder_output_size(self.input_size)
            for layer in range(self.lstm_layers):
                self.lstm.append(ConvLstmCell(store, f"lstm.{layer}", self.hidden_channels,
                                              (state, state), rng, tanh_cell_output))

        low_red = _scaled(48, wm)
        lbev_red = _scaled(8, wm)
        hid = self.hidden_channels
        self.dec_low = _ConvBnRelu(store, "decoder.low", self.low_channels, low_red, 1,
                                   rng, self.bn_stats)
        self.dec_refine1 = _SepConvBnRelu(store, "decoder.refine1", hid + low_red, hid,
                                          rng, self.bn_stats)
        self.dec_refine2 = _SepConvBnRelu(store, "decoder.refine2", hid, hid,
                                          rng, self.bn_stats)
        self.dec_lbev = _ConvBnRelu(store, "decoder.lbev", 3, lbev_red, 1, rng, self.bn_stats)
        self.dec_refine3 = _ConvBnRelu(store, "decoder.refine3", hid + lbev_red, hid, 3,
                                       rng, self.bn_stats)
        self.classifier = _Conv(store, "decoder.classifier", hid, num_classes, 1, rng)
        self.params = store

    # -- forward pieces ------------------------------------------------------

    def encode(self, lbev, c_region, train: bool = False):
        """Run both branches; returns the output-stride-16 map and the
        stride-4 fused map used as low-level decoder features."""
        lbev, c_region = _as_tensor(lbev), _as_tensor(c_region)
        if lbev.data.shape[2:] != c_region.data.shape[2:]:
            raise ShapeError(
                f"branch inputs disagree spatially: LBEV {lbev.data.shape[2:]} vs "
                f"C-Region {c_region.data.shape[2:]}")
        mode = "train" if train else "infer"
        l_x, c_x = lbev, c_region
        low = None
        for idx, stage in enumerate(self.stages):
            l_x, c_x = stage(l_x, c_x, mode)
            if idx == 1:
                low = l_x
        return l_x, low

    def aspp_forward(self, high, train: bool = False):
        return self.aspp(_as_tensor(high), "train" if train else "infer")

    def decode(self, h, low, lbev, train: bool = False):
        """Two bilinear upsampling steps back to full resolution, fusing the
        reduced low-level map and then the 1x1-convolved original raster."""
        h, low, lbev = _as_tensor(h), _as_tensor(low), _as_tensor(lbev)
        mode = "train" if train else "infer"
        lh, lw = low.data.shape[2], low.data.shape[3]
        s_h, s_w = lbev.data.shape[2], lbev.data.shape[3]
        y = bilinear_upsample(h, lh, lw)
        y = concat_channels([y, self.dec_low(low, mode)])
        y = self.dec_refine1(y, mode)
        y = self.dec_refine2(y, mode)
        y = bilinear_upsample(y, s_h, s_w)
        y = concat_channels([y, self.dec_lbev(lbev, mode)])
        y = self.dec_refine3(y, mode)
        return self.classifier(y)

    def forward_sequence(self, lbev_frames, c_frames, train: bool = False):
        """Per-frame logits with the hidden state threaded through the frames.

        ``lbev_frames`` / ``c_frames`` are equal-length lists of NCHW arrays;
        the state is zero-initialized at the sequence start. In without_lstm
        mode the context features pass straight to the decoder.
        """
        if len(lbev_frames) != len(c_frames):
            raise ShapeError(
                f"got {len(lbev_frames)} LBEV frames but {len(c_frames)} C-Region frames")
        lbev_frames = [_as_tensor(f) for f in lbev_frames]
        c_frames = [_as_tensor(f) for f in c_frames]
        states = None
        if self.mode == "fusionlane":
            batch = lbev_frames[0].data.shape[0]
            states = [cell.zero_state(batch) for cell in self.lstm]
        logits = []
        for lbev, creg in zip(lbev_frames, c_frames):
            high, low = self.encode(lbev, creg, train)
            h = self.aspp_forward(high, train)
            if self.mode == "fusionlane":
                for idx, cell in enumerate(self.lstm):
                    h, states[idx] = cell.step(h, states[idx])
            logits.append(self.decode(h, low, lbev, train))
        return logits


def forward_sequence(model: FusionLaneModel, seq: SequenceSample, train: bool = False):
    """Run one SequenceSample (batch of 1) through the model."""
    lbev_frames, c_frames = [], []
    for frame in seq.frames:
        lbev, creg = to_network_inputs(frame)
        lbev_frames.append(lbev[None])
        c_frames.append(creg[None])
    return model.forward_sequence(lbev_frames, c_frames, train=train)
