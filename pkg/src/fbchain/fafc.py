"""Feature aggregation feedback chain encoder.

Each level ``n`` owns a main chain of ``depth_per_level[n]`` residual
steps. The first step sits on the backbone; the last one (the tail) is fed
back into the backbone through :class:`~fbchain.fha.FeatureHandover`.
Side chains carry every main-chain feature of level ``n-1`` down to level
``n`` (strided 3x3 conv) where it is added at the same depth.

Level entry (n >= 2, depth 1)::

    phi   = proj(maxpool(handover(backbone[n-1], tail[n-1])))
    S     = side[n, 1] + side[n, 2]
    f[n,1] = phi + S + omega(S)

Chain step (depth i > 1)::

    u      = f[n, i-1] + side[n, i]
    f[n,i] = u + omega(u)

Level 1 has no side inputs, so every step is ``f + omega(f)``.

Connection modes:

* ``none``: no side chains; a plain serial backbone (the baseline).
* ``residual``: side features from the immediately preceding level only.
* ``dense``: additionally, side features from every earlier level at the
  same depth, concatenated and projected by a bias-free 1x1 conv that is
  added on top of the residual sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from fbchain.errors import ConfigError, ShapeError
from fbchain.fha import FeatureHandover, check_same

CONNECTION_MODES = ("none", "residual", "dense")


@dataclass
class EncoderConfig:
    num_levels: int = 3
    depth_per_level: List[int] = field(default_factory=lambda: [3, 3, 3])
    channels_per_level: List[int] = field(default_factory=lambda: [8, 16, 32])
    connection_mode: str = "dense"
    feedback_enabled: bool = True
    in_channels: int = 1

    def validate(self) -> None:
        if self.num_levels < 1:
            raise ConfigError(f"num_levels must be >= 1, got {self.num_levels}")
        if len(self.depth_per_level) != self.num_levels:
            raise ConfigError(
                f"depth_per_level has {len(self.depth_per_level)} entries for {self.num_levels} levels"
            )
        if len(self.channels_per_level) != self.num_levels:
            raise ConfigError(
                f"channels_per_level has {len(self.channels_per_level)} entries for {self.num_levels} levels"
            )
        if any(d < 1 for d in self.depth_per_level):
            raise ConfigError(f"every depth must be >= 1: {self.depth_per_level}")
        if any(c < 1 for c in self.channels_per_level):
            raise ConfigError(f"every channel width must be >= 1: {self.channels_per_level}")
        if self.connection_mode not in CONNECTION_MODES:
            raise ConfigError(
                f"connection_mode must be one of {CONNECTION_MODES}, got {self.connection_mode!r}"
            )
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")


@dataclass
class ChainState:
    """Features recorded during one encoder pass.

    ``main[(n, i)]`` is the main-chain feature at level n, depth i.
    ``side[(n, j)]`` is the side-chain input that arrives at level n from
    depth j of the earlier level(s); it is stored at level n's resolution.
    ``feedback[n]`` is the main-chain tail of level n.
    """

    main: Dict[Tuple[int, int], torch.Tensor] = field(default_factory=dict)
    side: Dict[Tuple[int, int], torch.Tensor] = field(default_factory=dict)
    feedback: Dict[int, torch.Tensor] = field(default_factory=dict)


class LevelProcess(nn.Module):
    """Concatenate (if several inputs), 3x3 conv, batch norm, ReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm = nn.BatchNorm2d(out_channels)

    def forward(self, *inputs: torch.Tensor) -> torch.Tensor:
        for other in inputs[1:]:
            check_same(inputs[0], other, what="level process")
        x = inputs[0] if len(inputs) == 1 else torch.cat(inputs, dim=1)
        return F.relu(self.norm(self.conv(x)))


class SideAlign(nn.Module):
    """Bring a feature ``distance`` levels down: average pool, then strided 3x3 conv."""

    def __init__(self, in_channels: int, out_channels: int, distance: int = 1):
        super().__init__()
        self.pre_pool = 2 ** (distance - 1)
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.pre_pool > 1:
            x = F.avg_pool2d(x, self.pre_pool)
        return self.conv(x)


def he_init(module: nn.Module, linear: Sequence[nn.Module] = ()) -> None:
    """Fan-in scaled normal weights, zero biases.

    Convs listed in ``linear`` feed no ReLU and get unit gain instead of
    sqrt(2), which keeps stacked residual sums from growing with depth.
    """
    linear_ids = {id(m) for m in linear}
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            gain = "linear" if id(m) in linear_ids else "relu"
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity=gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _key(*idx: int) -> str:
    return "_".join(str(i) for i in idx)


class FAFCEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        depth = config.depth_per_level
        ch = config.channels_per_level
        L = config.num_levels

        self.stem = nn.Conv2d(config.in_channels, ch[0], 3, padding=1)
        self.omega = nn.ModuleDict()
        for n in range(1, L + 1):
            for i in range(1, depth[n - 1] + 1):
                self.omega[_key(n, i)] = LevelProcess(ch[n - 1], ch[n - 1])
        self.entry = nn.ModuleDict(
            {_key(n): nn.Conv2d(ch[n - 2], ch[n - 1], 1) for n in range(2, L + 1)}
        )

        mode = config.connection_mode
        self.side = nn.ModuleDict()
        self.side_far = nn.ModuleDict()
        self.dense_mix = nn.ModuleDict()
        if mode in ("residual", "dense"):
            for n in range(2, L + 1):
                for j in self.side_depths(n):
                    self.side[_key(n, j)] = SideAlign(ch[n - 2], ch[n - 1])
        if mode == "dense":
            for n in range(3, L + 1):
                for j in self.side_depths(n):
                    sources = self.far_sources(n, j)
                    for m in sources:
                        self.side_far[_key(m, n, j)] = SideAlign(ch[m - 1], ch[n - 1], n - m)
                    if sources:
                        self.dense_mix[_key(n, j)] = nn.Conv2d(
                            ch[n - 1] * len(sources), ch[n - 1], 1, bias=False
                        )

        self.fha = nn.ModuleDict()
        if config.feedback_enabled:
            for n in range(1, L + 1):
                self.fha[_key(n)] = FeatureHandover(ch[n - 1])

        linear = [c for c in self.modules() if isinstance(c, nn.Conv2d)
                  and not any(c is lp.conv for lp in self.omega.values())]
        he_init(self, linear)

    # -- index bookkeeping -------------------------------------------------

    def side_depths(self, n: int) -> range:
        """Depths j that have a side connection from level n-1 into level n."""
        d = self.config.depth_per_level
        return range(1, min(d[n - 2], d[n - 1]) + 1)

    def far_sources(self, n: int, j: int) -> List[int]:
        """Levels m <= n-2 whose depth-j feature reaches level n in dense mode."""
        d = self.config.depth_per_level
        return [m for m in range(1, n - 1) if j <= d[m - 1]]

    # -- the two processes ------------------------------------------------

    def level_process_omega(self, inputs: Sequence[torch.Tensor], level: int, depth: int) -> torch.Tensor:
        return self.omega[_key(level, depth)](*inputs)

    def cross_level_process_phi(self, tail: torch.Tensor, backbone: torch.Tensor, level: int) -> torch.Tensor:
        """Merge level ``level``'s backbone with its tail and halve the resolution.

        With feedback disabled the level is serial: the tail is the level
        output and is pooled directly.
        """
        check_same(tail, backbone, axes=(0, 1, 2, 3), what="cross-level process")
        h, w = backbone.shape[-2:]
        if h % 2 or w % 2:
            raise ShapeError(f"cannot halve odd spatial size {h}x{w} at level {level}")
        merged = self.level_output(tail, backbone, level)
        return F.max_pool2d(merged, 2)

    def level_output(self, tail: torch.Tensor, backbone: torch.Tensor, level: int) -> torch.Tensor:
        if self.config.feedback_enabled:
            return self.fha[_key(level)](backbone, tail)
        return tail

    # -- forward -----------------------------------------------------------

    def _side_input(self, state: ChainState, n: int, j: int) -> Optional[torch.Tensor]:
        key = _key(n, j)
        if key not in self.side:
            return None
        s = self.side[key](state.main[(n - 1, j)])
        if key in self.dense_mix:
            far = [self.side_far[_key(m, n, j)](state.main[(m, j)]) for m in self.far_sources(n, j)]
            s = s + self.dense_mix[key](torch.cat(far, dim=1))
        state.side[(n, j)] = s
        return s

    def forward(self, image: torch.Tensor):
        cfg = self.config
        if image.dim() != 4:
            raise ShapeError(f"expected (B, C, H, W) input, got {tuple(image.shape)}")
        if image.shape[1] != cfg.in_channels:
            raise ShapeError(f"channel axis mismatch: input has {image.shape[1]}, config expects {cfg.in_channels}")
        factor = 2 ** (cfg.num_levels - 1)
        h, w = image.shape[-2:]
        if h % factor or w % factor:
            raise ShapeError(
                f"input size {h}x{w} is not divisible by 2^(num_levels-1) = {factor}"
            )

        state = ChainState()
        outputs: List[torch.Tensor] = []
        for n in range(1, cfg.num_levels + 1):
            if n == 1:
                prev = self.stem(image)
                f = prev + self.level_process_omega([prev], 1, 1)
            else:
                # same as cross_level_process_phi, reusing the merged output
                phi = self.entry[_key(n)](F.max_pool2d(outputs[-1], 2))
                sides = [s for j in (1, 2) if (s := self._side_input(state, n, j)) is not None]
                if sides:
                    s_sum = sides[0] if len(sides) == 1 else sides[0] + sides[1]
                    f = phi + s_sum + self.level_process_omega([s_sum], n, 1)
                else:
                    f = phi + self.level_process_omega([phi], n, 1)
            state.main[(n, 1)] = f
            for i in range(2, cfg.depth_per_level[n - 1] + 1):
                u = f
                if n >= 2:
                    s = state.side.get((n, i))
                    if s is None:
                        s = self._side_input(state, n, i)
                    if s is not None:
                        u = f + s
                f = u + self.level_process_omega([u], n, i)
                state.main[(n, i)] = f
            state.feedback[n] = f
            outputs.append(self.level_output(f, state.main[(n, 1)], n))
        return outputs, state


def fafc_forward(image: torch.Tensor, encoder: FAFCEncoder):
    """Functional spelling of ``encoder(image)``."""
    return encoder(image)


def output_shapes(config: EncoderConfig, batch: int, height: int, width: int):
    return [
        (batch, c, height // 2 ** n, width // 2 ** n)
        for n, c in enumerate(config.channels_per_level)
    ]
