"""ConvFormer assembly and the ablation variants.

Encoder: a Conv stem (1/2) and three residual-shaped hybrid stems (1/4, 1/8,
1/16). The three coarse maps optionally pass through an additional
multi-scale Enhanced DeTrans encoder whose outputs replace them as decoder
skips. Decoder: three stems of ``x2 transposed conv -> concat skip -> two
conv-BN-ReLU``, then a DeConv stem back to full resolution and a 1x1 head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .deform_attn import (
    MultiScaleFeatures,
    flatten_multiscale,
    make_reference_points,
    unflatten_tokens,
)
from .detrans import EnhancedDeTransEncoder, EnhancedDeTransLayer
from .errors import ConfigError
from .layers import BatchNorm2d, Conv2d, ConvBNReLU, TransposeConv2d
from .posenc import sinusoidal_pe
from .tensor import ParameterStore, Tensor

# (use_detrans, use_conv_ffm, use_additional_encoder, use_epe, use_stem_residuals)
VARIANTS: dict[str, tuple[bool, bool, bool, bool, bool]] = {
    "no_detrans": (False, False, False, False, True),
    "detrans": (True, False, False, False, True),
    "no_additional": (True, True, False, False, True),
    "no_epe": (True, True, True, False, True),
    "full": (True, True, True, True, True),
    "no_stem_residuals": (True, True, True, True, False),
}

VARIANT_LABELS = {
    "no_detrans": "ConvFormer w/o DeTrans",
    "detrans": "ConvFormer w DeTrans",
    "no_additional": "ConvFormer w/o Additional Enhanced DeTrans",
    "no_epe": "ConvFormer w/o EPE",
    "full": "ConvFormer",
    "no_stem_residuals": "ConvFormer w/o residual connections",
}

FLAG_NAMES = ("use_detrans", "use_conv_ffm", "use_additional_encoder", "use_epe", "use_stem_residuals")


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 2
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    stem_conv_blocks: int = 2
    heads: int = 4
    points: int = 4
    encoder_dim: int = 32
    encoder_layers: int = 4
    stem_layers: int = 1
    ffm_expansion: int = 4
    level_embed: bool = True
    use_detrans: bool = True
    use_conv_ffm: bool = True
    use_additional_encoder: bool = True
    use_epe: bool = True
    use_stem_residuals: bool = True

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.validate()

    def validate(self) -> None:
        ch = self.stage_channels
        if len(ch) != 4:
            raise ConfigError(f"stage_channels needs 4 entries, got {ch}")
        if any(b <= a for a, b in zip(ch, ch[1:])):
            raise ConfigError(f"stage_channels must be strictly increasing, got {ch}")
        for c in ch + (self.encoder_dim,):
            if c % 4 or c % self.heads:
                raise ConfigError(f"channel width {c} must be divisible by 4 and by heads={self.heads}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("need in_channels >= 1 and num_classes >= 2")
        if self.use_conv_ffm and not self.use_detrans:
            raise ConfigError("use_conv_ffm requires use_detrans")
        if self.use_additional_encoder and not self.use_detrans:
            raise ConfigError("use_additional_encoder requires use_detrans")
        if self.use_epe and not self.use_additional_encoder:
            raise ConfigError("use_epe requires use_additional_encoder")

    @property
    def flags(self) -> tuple[bool, ...]:
        return tuple(getattr(self, n) for n in FLAG_NAMES)


def build_variant(name: str, **overrides) -> ModelConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return ModelConfig(**overrides, **dict(zip(FLAG_NAMES, VARIANTS[name])))


class HybridStem:
    """Residual-shaped hybrid stem: strided conv, then (residual conv stack) + (Enhanced DeTrans)."""

    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, cfg: ModelConfig):
        self.down = ConvBNReLU(store, f"{name}.down", cin, cout, stride=2)
        self.blocks = [ConvBNReLU(store, f"{name}.blocks.{i}", cout, cout) for i in range(cfg.stem_conv_blocks)]
        self.residual = cfg.use_stem_residuals
        self.channels = cout
        self.detrans = []
        if cfg.use_detrans:
            self.detrans = [EnhancedDeTransLayer(store, f"{name}.detrans.{i}", cout, 1, cfg.heads, cfg.points,
                                                 cfg.ffm_expansion, conv_ffm=cfg.use_conv_ffm)
                            for i in range(cfg.stem_layers)]

    def local(self, d: Tensor) -> Tensor:
        h = d
        for blk in self.blocks:
            h = blk(h)
        return ops.add(h, d) if self.residual else h

    def global_(self, d: Tensor) -> Tensor:
        b, c, hh, ww = d.shape
        shapes = [(hh, ww)]
        tokens = flatten_multiscale(MultiScaleFeatures([d]))
        pos = ops.reshape(ops.transpose(ops.reshape(sinusoidal_pe(hh, ww, c), (1, c, hh, ww)), (0, 2, 3, 1)),
                          (1, hh * ww, c))
        refs = make_reference_points(shapes)
        for layer in self.detrans:
            tokens = layer(tokens, pos, refs, shapes)
        return unflatten_tokens(tokens, shapes).levels[0]

    def __call__(self, x: Tensor, ablate_global: bool = False) -> Tensor:
        d = self.down(x)
        out = self.local(d)
        if self.detrans:
            g = self.global_(d)
            out = ops.add(out, np.zeros(g.shape, dtype=g.dtype) if ablate_global else g)
        return out


class DecoderStem:
    def __init__(self, store: ParameterStore, name: str, cin: int, cskip: int):
        self.up = TransposeConv2d(store, f"{name}.up", cin, cskip, 2)
        self.blocks = [ConvBNReLU(store, f"{name}.blocks.0", 2 * cskip, cskip),
                       ConvBNReLU(store, f"{name}.blocks.1", cskip, cskip)]

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        h = ops.concat([self.up(x), skip], axis=1)
        for blk in self.blocks:
            h = blk(h)
        return h


class ConvFormer:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.store = store = ParameterStore(seed=seed, dtype=dtype)
        c = cfg.stage_channels
        self.stem = [ConvBNReLU(store, "stem.down", cfg.in_channels, c[0], stride=2)]
        self.stem += [ConvBNReLU(store, f"stem.blocks.{i}", c[0], c[0]) for i in range(cfg.stem_conv_blocks)]
        self.stages = [HybridStem(store, f"stage{i}", c[i - 1], c[i], cfg) for i in (1, 2, 3)]
        self.encoder = None
        if cfg.use_additional_encoder:
            d = cfg.encoder_dim
            self.proj_in = [Conv2d(store, f"encoder.proj_in.{i}", c[i + 1], d, 1) for i in range(3)]
            self.encoder = EnhancedDeTransEncoder(store, "encoder", d, 3, cfg.encoder_layers, use_epe=cfg.use_epe,
                                                  use_residual=True, level_embed=cfg.level_embed,
                                                  heads=cfg.heads, points=cfg.points,
                                                  expansion=cfg.ffm_expansion, conv_ffm=cfg.use_conv_ffm)
            self.proj_out = [Conv2d(store, f"encoder.proj_out.{i}", d, c[i + 1], 1) for i in range(3)]
        self.decoder = [DecoderStem(store, f"decoder.{i}", c[i + 1], c[i]) for i in (2, 1, 0)]
        self.final_up = TransposeConv2d(store, "head.up", c[0], c[0], 2, bias=False)
        self.final_bn = BatchNorm2d(store, "head.bn", c[0])
        self.head = Conv2d(store, "head.cls", c[0], cfg.num_classes, 1)

    # -- encoder

    def conv_stem(self, x: Tensor) -> Tensor:
        for blk in self.stem:
            x = blk(x)
        return x

    def encoder_forward(self, x: Tensor) -> list[Tensor]:
        """Feature maps at 1/2, 1/4, 1/8 and 1/16 resolution."""
        self._check_input(x)
        feats = [self.conv_stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats

    def additional_encoder(self, coarse: list[Tensor]) -> list[Tensor]:
        ms = MultiScaleFeatures([p(f) for p, f in zip(self.proj_in, coarse)])
        out = self.encoder(ms)
        return [p(f) for p, f in zip(self.proj_out, out.levels)]

    # -- full network

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected input [B, {self.cfg.in_channels}, H, W], got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ConfigError(f"input height and width must be divisible by 16, got {x.shape[2:]}")

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.store.dtype))
        feats = self.encoder_forward(x)
        if self.encoder is not None:
            feats = feats[:1] + self.additional_encoder(feats[1:])
        h = feats[3]
        for dec, skip in zip(self.decoder, (feats[2], feats[1], feats[0])):
            h = dec(h, skip)
        h = ops.relu(self.final_bn(self.final_up(h)))
        return self.head(h)

    __call__ = forward

    def train(self) -> ConvFormer:
        self.store.training = True
        return self

    def eval(self) -> ConvFormer:
        self.store.training = False
        return self

    def num_parameters(self) -> int:
        return self.store.num_parameters()


def convformer_forward(x, model: ConvFormer) -> Tensor:
    return model(x)


def count_parameters(cfg: ModelConfig) -> int:
    return ConvFormer(cfg).num_parameters()
