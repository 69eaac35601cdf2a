"""Full segmentation model and the ablation-variant factory."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from fbchain.errors import ConfigError, ShapeError
from fbchain.fafc import EncoderConfig, FAFCEncoder, he_init
from fbchain.gpa import GPA_MODES, GlobalPyramidAttention, upsample

# Ablation rows, simplest first: (name, connection mode, handover, gpa mode).
ABLATION_ROWS: Tuple[Tuple[str, str, bool, str], ...] = (
    ("baseline", "none", False, "off"),
    ("fafc_r", "residual", False, "off"),
    ("fafc_d", "dense", False, "off"),
    ("fha", "dense", True, "off"),
    ("gpa_gcm", "dense", True, "gcm_only"),
    ("gpa_ppa", "dense", True, "ppa_only"),
    ("full", "dense", True, "full"),
)
ROW_NAMES = tuple(r[0] for r in ABLATION_ROWS)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gpa_mode: str = "full"
    fha_enabled: bool = True
    decoder_channels: List[int] = field(default_factory=lambda: [16, 8])
    input_size: Tuple[int, int] = (32, 32)
    pyramid_scales: Tuple[int, ...] = (1, 2, 4, 8)
    seed: int = 0

    def validate(self) -> None:
        self.encoder.validate()
        L = self.encoder.num_levels
        if self.gpa_mode not in GPA_MODES:
            raise ConfigError(f"gpa_mode must be one of {GPA_MODES}, got {self.gpa_mode!r}")
        if self.fha_enabled and L == 1:
            raise ConfigError("fha_enabled requires at least two encoder levels")
        if self.encoder.feedback_enabled != self.fha_enabled:
            raise ConfigError(
                "encoder.feedback_enabled and fha_enabled disagree "
                f"({self.encoder.feedback_enabled} vs {self.fha_enabled})"
            )
        if len(self.decoder_channels) != L - 1:
            raise ConfigError(
                f"decoder_channels needs {L - 1} entries for {L} levels, got {len(self.decoder_channels)}"
            )
        if any(c < 1 for c in self.decoder_channels):
            raise ConfigError(f"decoder channel widths must be >= 1: {self.decoder_channels}")
        h, w = self.input_size
        factor = 2 ** (L - 1)
        if h % factor or w % factor:
            raise ConfigError(f"input_size {h}x{w} is not divisible by {factor}")
        if self.gpa_mode in ("full", "ppa_only"):
            top = self.encoder.channels_per_level[-1]
            if top % max(self.pyramid_scales):
                raise ConfigError(
                    f"top-level channels {top} must be divisible by the largest pyramid scale "
                    f"{max(self.pyramid_scales)}"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["pyramid_scales"] = list(self.pyramid_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder"))
        d["input_size"] = tuple(d["input_size"])
        d["pyramid_scales"] = tuple(d.get("pyramid_scales", (1, 2, 4, 8)))
        return cls(encoder=enc, **d)


def make_config(
    num_levels: int = 3,
    channels: Sequence[int] = (8, 16, 32),
    depth: Optional[Sequence[int]] = None,
    connection_mode: str = "dense",
    fha_enabled: bool = True,
    gpa_mode: str = "full",
    input_size: Tuple[int, int] = (32, 32),
    decoder_channels: Optional[Sequence[int]] = None,
    pyramid_scales: Sequence[int] = (1, 2, 4, 8),
    seed: int = 0,
) -> ModelConfig:
    """Convenience constructor; decoder widths default to the skip widths."""
    channels = list(channels)
    depth = list(depth) if depth is not None else [3] * num_levels
    if decoder_channels is None:
        decoder_channels = channels[:-1][::-1]
    enc = EncoderConfig(
        num_levels=num_levels,
        depth_per_level=depth,
        channels_per_level=channels,
        connection_mode=connection_mode,
        feedback_enabled=fha_enabled,
    )
    return ModelConfig(
        encoder=enc,
        gpa_mode=gpa_mode,
        fha_enabled=fha_enabled,
        decoder_channels=list(decoder_channels),
        input_size=tuple(input_size),
        pyramid_scales=tuple(pyramid_scales),
        seed=seed,
    )


def ablation_config(row: str, base: Optional[ModelConfig] = None) -> ModelConfig:
    """Config for one ablation row, keeping widths/depths/seed from ``base``."""
    for name, mode, fha, gpa in ABLATION_ROWS:
        if name == row:
            break
    else:
        raise ConfigError(f"unknown ablation row {row!r}; expected one of {ROW_NAMES}")
    base = copy.deepcopy(base) if base is not None else make_config()
    enc = replace(base.encoder, connection_mode=mode, feedback_enabled=fha)
    return replace(base, encoder=enc, fha_enabled=fha, gpa_mode=gpa)


class Decoder(nn.Module):
    """Upsample, concatenate the matching skip, 3x3 conv + ReLU; 1x1 to one logit."""

    def __init__(self, encoder_channels: Sequence[int], decoder_channels: Sequence[int]):
        super().__init__()
        self.blocks = nn.ModuleList()
        in_ch = encoder_channels[-1]
        # decoder_channels[k] is the width after merging skip level L-1-k
        for k, out_ch in enumerate(decoder_channels):
            skip_ch = encoder_channels[-2 - k]
            self.blocks.append(nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1))
            in_ch = out_ch
        self.head = nn.Conv2d(in_ch, 1, 1)

    def forward(self, skips: Sequence[torch.Tensor], bottom: torch.Tensor) -> torch.Tensor:
        """Return logits. ``skips`` are the shallow-to-deep encoder outputs minus the deepest."""
        if len(skips) != len(self.blocks):
            raise ShapeError(f"decoder expects {len(self.blocks)} skips, got {len(skips)}")
        x = bottom
        for block, skip in zip(self.blocks, reversed(skips)):
            x = upsample(x, 2)
            if x.shape[-2:] != skip.shape[-2:]:
                raise ShapeError(
                    f"resolution chain mismatch: upsampled {tuple(x.shape[-2:])} vs skip {tuple(skip.shape[-2:])}"
                )
            x = F.relu(block(torch.cat([x, skip], dim=1)))
        return self.head(x)


class SegmentationNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.encoder.channels_per_level
        self.encoder = FAFCEncoder(config.encoder)
        self.gpa = GlobalPyramidAttention(ch[-1], config.gpa_mode, config.pyramid_scales)
        self.decoder = Decoder(ch, config.decoder_channels)
        he_init(self.decoder)
        # zero head: initial probabilities are 0.5 instead of saturated
        nn.init.zeros_(self.decoder.head.weight)
        if self.gpa.ppa is not None:
            ppa = self.gpa.ppa
            downs = {id(f.down) for f in ppa.fuse.values()}
            he_init(ppa, [m for m in ppa.modules() if isinstance(m, nn.Conv2d) and id(m) not in downs])

    def features(self, x: torch.Tensor):
        """Encoder outputs, chain state and the GPA output."""
        h, w = self.config.input_size
        if x.dim() != 4 or tuple(x.shape[-2:]) != (h, w):
            raise ShapeError(f"expected input of spatial size {h}x{w}, got {tuple(x.shape)}")
        outputs, state = self.encoder(x)
        bridged = self.gpa(outputs[-1])
        return outputs, state, bridged

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        outputs, _, bridged = self.features(x)
        return self.decoder(outputs[:-1], bridged)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def decode(self, encoder_outputs: Sequence[torch.Tensor], gpa_output: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(list(encoder_outputs)[:-1], gpa_output))


def build_model(config: ModelConfig, dtype: torch.dtype = torch.float32) -> SegmentationNet:
    """Construct a model with parameters drawn from ``config.seed``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = SegmentationNet(config)
    return model.to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
