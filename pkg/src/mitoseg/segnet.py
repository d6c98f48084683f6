"""Encoder-decoder mitosis segmentation network.

Encoder: one plain double-3×3 level, then three downsampling levels built from
depthwise-separable residual blocks (or plain convs for the ``dsc_*`` ablations).
Decoder: bilinear 2× upsampling, 1×1 channel projection, a skip-fusion gate, and two
depthwise-separable conv layers per level. Head: 1×1 conv + sigmoid.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import Module, Tensor

# variant -> (encoder kind, fusion kind)
VARIANTS = {
    "dsc_cbam": ("plain", "cbam"),
    "dsc_cbam_gru": ("plain", "cbam_gru"),
    "dscrb_cbam": ("dscrb", "cbam"),
    "dscrb_cbam_gru": ("dscrb", "cbam_gru"),
    "dscrb_csag": ("dscrb", "csag"),
}
# simple-addition fusion, used to check that fusion choice only touches fusion parameters
PLUMBING_VARIANTS = {
    "dsc_add": ("plain", "add"),
    "dscrb_add": ("dscrb", "add"),
}
# ablation-table module flags: DSC, CBAM, GRU, DSCRB, CSAG
TABLE_FLAGS = {
    "dsc_cbam": (True, True, False, False, False),
    "dsc_cbam_gru": (True, True, True, False, False),
    "dscrb_cbam": (False, True, False, True, False),
    "dscrb_cbam_gru": (False, True, True, True, False),
    "dscrb_csag": (False, False, False, True, True),
}
TABLE_COLUMNS = ("DSC", "CBAM", "GRU", "DSCRB", "CSAG")
DOWNSAMPLE = 8


class ConfigError(ValueError):
    pass


class PaddingError(ValueError):
    """Input extents are not divisible by the total downsampling factor."""


@dataclass
class SegConfig:
    base_width: int = 32
    levels: int = 4
    attention_reduction: int = 8
    variant: str = "dscrb_csag"
    use_batchnorm: bool = True
    encoder_attention_is_input: bool = True  # GRU role: encoder attention = x, decoder = h
    spatial_gru_kernel: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS and self.variant not in PLUMBING_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.levels != 4:
            raise ConfigError("levels is fixed at 4 (three downsamplings)")
        if self.base_width < 1 or self.attention_reduction < 1:
            raise ConfigError("base_width and attention_reduction must be positive")
        if self.spatial_gru_kernel % 2 == 0:
            raise ConfigError("spatial_gru_kernel must be odd")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * 2 ** i for i in range(self.levels))

    @property
    def encoder_kind(self) -> str:
        return {**VARIANTS, **PLUMBING_VARIANTS}[self.variant][0]

    @property
    def fusion_kind(self) -> str:
        return {**VARIANTS, **PLUMBING_VARIANTS}[self.variant][1]


# -- building blocks -----------------------------------------------------------------
class ConvUnit(Module):
    """conv -> [batchnorm] -> [relu]. The conv has a bias only without batchnorm."""

    def __init__(self, c_in, c_out, k=3, stride=1, bn=True, act=True, separable=False, rng=None):
        if separable:
            self.conv = nd.DepthwiseSeparableConv(c_in, c_out, stride=stride, bias=not bn, rng=rng)
        else:
            self.conv = nd.Conv2d(c_in, c_out, k, stride=stride, bias=not bn, rng=rng)
        self.norm = nd.norm_or_identity(c_out, bn)
        self.act = act

    def forward(self, x):
        y = self.norm(self.conv(x))
        return nd.relu(y) if self.act else y


class DSCRBlockA(Module):
    """Downsampling block: plain 3×3 stride-2 conv, then a DSC layer; 1×1 stride-2 shortcut."""

    def __init__(self, c_in, c_out, bn=True, rng=None):
        self.conv1 = ConvUnit(c_in, c_out, 3, stride=2, bn=bn, rng=rng)
        self.conv2 = ConvUnit(c_out, c_out, bn=bn, act=False, separable=True, rng=rng)
        self.shortcut = ConvUnit(c_in, c_out, 1, stride=2, bn=bn, act=False, rng=rng)

    def forward(self, x):
        return nd.relu(self.conv2(self.conv1(x)) + self.shortcut(x))


class DSCRBlockB(Module):
    """Extent-preserving block: two DSC layers and an identity (or 1×1) shortcut."""

    def __init__(self, c_in, c_out, bn=True, rng=None):
        self.conv1 = ConvUnit(c_in, c_out, bn=bn, separable=True, rng=rng)
        self.conv2 = ConvUnit(c_out, c_out, bn=bn, act=False, separable=True, rng=rng)
        self.shortcut = None if c_in == c_out else ConvUnit(c_in, c_out, 1, bn=bn, act=False, rng=rng)

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return nd.relu(self.conv2(self.conv1(x)) + skip)


def build_dscrb(variant: str, in_channels: int, out_channels: int, use_batchnorm: bool = True,
                rng=None) -> Module:
    if variant == "a":
        return DSCRBlockA(in_channels, out_channels, bn=use_batchnorm, rng=rng)
    if variant == "b":
        return DSCRBlockB(in_channels, out_channels, bn=use_batchnorm, rng=rng)
    raise ConfigError(f"DSCRB variant must be 'a' or 'b', got {variant!r}")


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def encoder_level(kind, c_in, c_out, bn, rng):
    if kind == "dscrb":
        return Sequential(build_dscrb("a", c_in, c_out, bn, rng), build_dscrb("b", c_out, c_out, bn, rng))
    return Sequential(ConvUnit(c_in, c_out, 3, stride=2, bn=bn, rng=rng),
                      ConvUnit(c_out, c_out, 3, bn=bn, rng=rng))


# -- attention and gated fusion --------------------------------------------------------
class CBAM(Module):
    """Channel map: shared MLP over avg/max pooled descriptors. Spatial map: 7×7 conv."""

    def __init__(self, channels, reduction=8, rng=None):
        hidden = max(1, channels // reduction)
        self.mlp_in = nd.Conv2d(channels, hidden, 1, rng=rng)
        self.mlp_out = nd.Conv2d(hidden, channels, 1, rng=rng)
        self.spatial = nd.Conv2d(2, 1, 7, padding=3, rng=rng)

    def channel_map(self, f: Tensor) -> Tensor:
        def mlp(v):
            return self.mlp_out(nd.relu(self.mlp_in(v)))
        return nd.sigmoid(mlp(nd.global_avg_pool(f)) + mlp(nd.global_max_pool(f)))

    def spatial_map(self, f: Tensor) -> Tensor:
        pooled = nd.concat_channels([nd.channel_avg_pool(f), nd.channel_max_pool(f)])
        return nd.sigmoid(self.spatial(pooled))

    def forward(self, f: Tensor) -> tuple[Tensor, Tensor]:
        return self.channel_map(f), self.spatial_map(f)

    def refine(self, f: Tensor) -> Tensor:
        """Sequential channel-then-spatial reweighting."""
        f = f * self.channel_map(f)
        return f * self.spatial_map(f)


def cbam_attention(cbam: CBAM, f: Tensor) -> tuple[Tensor, Tensor]:
    return cbam(f)


class ConvGRUCell(Module):
    """Single-step convolutional GRU.

    z = s(Wz*x + Uz*h), r = s(Wr*x + Ur*h), c = tanh(W*x + U*(r.h)), out = (1-z).h + z.c
    """

    def __init__(self, channels, kernel=1, rng=None):
        conv = lambda bias: nd.Conv2d(channels, channels, kernel, padding=kernel // 2, bias=bias, rng=rng)
        self.w_z, self.u_z = conv(True), conv(False)
        self.w_r, self.u_r = conv(True), conv(False)
        self.w_h, self.u_h = conv(True), conv(False)

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape != h.shape:
            raise nd.ShapeError(f"GRU input {x.shape} and hidden state {h.shape} differ")
        z = nd.sigmoid(self.w_z(x) + self.u_z(h))
        r = nd.sigmoid(self.w_r(x) + self.u_r(h))
        cand = nd.tanh(self.w_h(x) + self.u_h(r * h))
        return (1.0 - z) * h + z * cand


def gru_fuse(cell: ConvGRUCell, x: Tensor, h: Tensor) -> Tensor:
    return cell(x, h)


class CSAG(Module):
    """Channel-spatial attention gate: (E + D) . GRU(CE, CD) . GRU(SE, SD)."""

    def __init__(self, channels, reduction=8, spatial_kernel=1, encoder_is_input=True, rng=None):
        self.cbam = CBAM(channels, reduction, rng=rng)
        self.gru_channel = ConvGRUCell(channels, 1, rng=rng)
        self.gru_spatial = ConvGRUCell(1, spatial_kernel, rng=rng)
        self.encoder_is_input = encoder_is_input

    def gates(self, e: Tensor, d: Tensor) -> tuple[Tensor, Tensor]:
        ce, cd = self.cbam.channel_map(e), self.cbam.channel_map(d)
        se, sd = self.cbam.spatial_map(e), self.cbam.spatial_map(d)
        if self.encoder_is_input:
            return self.gru_channel(ce, cd), self.gru_spatial(se, sd)
        return self.gru_channel(cd, ce), self.gru_spatial(sd, se)

    def forward(self, e: Tensor, d: Tensor) -> Tensor:
        if e.shape != d.shape:
            raise nd.ShapeError(f"CSAG inputs differ: E {e.shape} vs D {d.shape}")
        cf, sf = self.gates(e, d)
        return (e + d) * cf * sf


def csag_fuse(gate: CSAG, e: Tensor, d: Tensor) -> Tensor:
    return gate(e, d)


class CBAMFusion(Module):
    def __init__(self, channels, reduction=8, rng=None):
        self.cbam = CBAM(channels, reduction, rng=rng)

    def forward(self, e, d):
        return self.cbam.refine(e + d)


class CBAMGRUFusion(Module):
    """CBAM on each branch, then a full-resolution GRU merges them (cascade baseline)."""

    def __init__(self, channels, reduction=8, encoder_is_input=True, rng=None):
        self.cbam = CBAM(channels, reduction, rng=rng)
        self.gru = ConvGRUCell(channels, 1, rng=rng)
        self.encoder_is_input = encoder_is_input

    def forward(self, e, d):
        e, d = self.cbam.refine(e), self.cbam.refine(d)
        return self.gru(e, d) if self.encoder_is_input else self.gru(d, e)


class AddFusion(Module):
    def forward(self, e, d):
        return e + d


def make_fusion(kind, channels, cfg: SegConfig, rng):
    if kind == "csag":
        return CSAG(channels, cfg.attention_reduction, cfg.spatial_gru_kernel,
                    cfg.encoder_attention_is_input, rng=rng)
    if kind == "cbam":
        return CBAMFusion(channels, cfg.attention_reduction, rng=rng)
    if kind == "cbam_gru":
        return CBAMGRUFusion(channels, cfg.attention_reduction, cfg.encoder_attention_is_input, rng=rng)
    return AddFusion()


class DecoderLevel(Module):
    def __init__(self, c_in, c_out, cfg: SegConfig, rng):
        bn = cfg.use_batchnorm
        self.project = ConvUnit(c_in, c_out, 1, bn=bn, act=False, rng=rng)
        self.fusion = make_fusion(cfg.fusion_kind, c_out, cfg, rng)
        self.conv1 = ConvUnit(c_out, c_out, bn=bn, separable=True, rng=rng)
        self.conv2 = ConvUnit(c_out, c_out, bn=bn, separable=True, rng=rng)

    def forward(self, d_prev, e, trace=None, level=None):
        up = self.project(nd.bilinear_upsample_2x(d_prev))
        if trace is not None:
            trace[f"U{level}"] = up.shape
        fused = self.fusion(e, up)
        if trace is not None:
            trace[f"CSF{level}"] = fused.shape
        return self.conv2(self.conv1(fused))


class SegModel(Module):
    def __init__(self, config: SegConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        w = config.widths
        bn = config.use_batchnorm
        self.enc1 = Sequential(ConvUnit(3, w[0], 3, bn=bn, rng=rng), ConvUnit(w[0], w[0], 3, bn=bn, rng=rng))
        self.enc2 = encoder_level(config.encoder_kind, w[0], w[1], bn, rng)
        self.enc3 = encoder_level(config.encoder_kind, w[1], w[2], bn, rng)
        self.enc4 = encoder_level(config.encoder_kind, w[2], w[3], bn, rng)
        self.dec3 = DecoderLevel(w[3], w[2], config, rng)
        self.dec2 = DecoderLevel(w[2], w[1], config, rng)
        self.dec1 = DecoderLevel(w[1], w[0], config, rng)
        self.head = nd.Conv2d(w[0], 1, 1, rng=rng)
        self._trace: dict[str, tuple] = {}

    @property
    def trace(self) -> dict[str, tuple]:
        """Shapes of E_i / U_i / CSF_i / D_i from the most recent forward pass."""
        return dict(self._trace)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise nd.ShapeError(f"expected N×3×H×W input, got {x.shape}")
        h, w = x.shape[2:]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise PaddingError(f"input extents {h}×{w} must be divisible by {DOWNSAMPLE}; pad the image first")
        trace: dict[str, tuple] = {}
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        e4 = self.enc4(e3)
        for i, e in enumerate((e1, e2, e3, e4), start=1):
            trace[f"E{i}"] = e.shape
        d3 = self.dec3(e4, e3, trace, 3)
        d2 = self.dec2(d3, e2, trace, 2)
        d1 = self.dec1(d2, e1, trace, 1)
        for i, d in ((3, d3), (2, d2), (1, d1)):
            trace[f"D{i}"] = d.shape
        self._trace = trace
        return nd.sigmoid(self.head(d1))

    def predict(self, images: np.ndarray) -> np.ndarray:
        """N×H×W×3 images (uint8 or float in [0,1]) -> N×H×W probabilities, eval mode, no tape."""
        was_training = self.training
        self.eval()
        try:
            with nd.no_grad():
                return self.forward(Tensor(images_to_nchw(images))).data[:, 0]
        finally:
            self.train(was_training)


def images_to_nchw(images: np.ndarray) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    scale = 1.0 / 255.0 if arr.dtype == np.uint8 else 1.0
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32) * np.float32(scale)


def build_segnet(config: SegConfig | None = None) -> SegModel:
    return SegModel(config or SegConfig())


def seg_forward(model: SegModel, batch: Tensor) -> Tensor:
    return model(batch)


def count_parameters(model: Module) -> dict:
    return nd.parameter_manifest(model)


def architecture_manifest(model: SegModel) -> str:
    """Config echo plus one line per parameter tensor."""
    lines = [f"config.{k} = {v}" for k, v in asdict(model.config).items()]
    manifest = count_parameters(model)
    lines += [f"{name}\t{'x'.join(map(str, shape))}\t{count}" for name, shape, count in manifest["layers"]]
    lines.append(f"total\t{manifest['total']}")
    return "\n".join(lines) + "\n"
