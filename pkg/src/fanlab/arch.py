"""Network construction: residual blocks, hourglass, stacked FAN, the guided
2D-to-3D variant and the depth regressor."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .errors import ConfigurationError
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor

BLOCK_KINDS = ("hierarchical", "bottleneck")


@dataclass(frozen=True)
class BlockConfig:
    kind: str
    in_channels: int
    out_channels: int

    def validate(self) -> None:
        if self.kind not in BLOCK_KINDS:
            raise ConfigurationError(f"unknown block kind {self.kind!r}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ConfigurationError(f"block channels must be positive: {self.in_channels}->{self.out_channels}")
        if self.kind == "hierarchical" and self.out_channels % 4:
            raise ConfigurationError(
                f"hierarchical block needs out_channels divisible by 4, got {self.out_channels}")
        if self.kind == "bottleneck" and self.out_channels % 2:
            raise ConfigurationError(f"bottleneck block needs even out_channels, got {self.out_channels}")


@dataclass(frozen=True)
class FanConfig:
    num_stacks: int = 4
    hg_depth: int = 4
    width: int = 256
    num_landmarks: int = 68
    in_channels: int = 3
    input_resolution: int = 256
    block: str = "hierarchical"

    @property
    def heatmap_resolution(self) -> int:
        return self.input_resolution // 4

    @property
    def guided(self) -> bool:
        return self.in_channels == 3 + self.num_landmarks

    def validate(self) -> None:
        if not 1 <= self.num_stacks <= 4:
            raise ConfigurationError(f"num_stacks must be in 1..4, got {self.num_stacks}")
        if self.num_landmarks < 1:
            raise ConfigurationError(f"num_landmarks must be positive, got {self.num_landmarks}")
        if self.in_channels not in (3, 3 + self.num_landmarks):
            raise ConfigurationError(
                f"in_channels must be 3 or 3+N={3 + self.num_landmarks}, got {self.in_channels}")
        if self.width % 8:
            raise ConfigurationError(f"width must be divisible by 8, got {self.width}")
        if self.input_resolution % 4:
            raise ConfigurationError(f"input_resolution must be divisible by 4, got {self.input_resolution}")
        check_hourglass_size(self.heatmap_resolution, self.hg_depth)


@dataclass(frozen=True)
class DepthRegressorConfig:
    num_landmarks: int = 68
    width: int = 32
    stages: int = 3
    input_resolution: int = 64

    @property
    def in_channels(self) -> int:
        return 3 + self.num_landmarks

    def validate(self) -> None:
        if self.width % 4 or self.width <= 0:
            raise ConfigurationError(f"depth regressor width must be a positive multiple of 4, got {self.width}")
        reduce = 2 ** (self.stages + 1)
        if self.stages < 1 or self.input_resolution % reduce:
            raise ConfigurationError(
                f"input_resolution {self.input_resolution} not divisible by 2^(stages+1)={reduce}")


PAPER_FAN = FanConfig()
TINY_FAN = FanConfig(num_stacks=2, hg_depth=3, width=32, num_landmarks=5, input_resolution=64)
TINY_DEPTH = DepthRegressorConfig(num_landmarks=5, width=32, stages=2, input_resolution=32)


def check_hourglass_size(size: int, depth: int) -> None:
    """Every level halves the map and the innermost map must stay even (>= 2),
    so ``size`` must be divisible by ``2 ** (depth + 1)``."""
    if depth < 1:
        raise ConfigurationError(f"hourglass depth must be >= 1, got {depth}")
    s = size
    for level in range(depth):
        if s % 2:
            raise ConfigurationError(
                f"hourglass: size {size} cannot be pooled at level {level} (map {s}x{s} is odd)")
        s //= 2
    if s % 2:
        raise ConfigurationError(
            f"hourglass: size {size} is not divisible by 2^(depth+1)={2 ** (depth + 1)}; "
            f"innermost map would be {s}x{s}")


# ---------------------------------------------------------------------------
# blocks


class _BnReluConv(Module):
    """Pre-activation unit: batchnorm -> relu -> conv (no conv bias)."""

    def __init__(self, cin, cout, k, rng, dtype):
        self.bn = BatchNorm2d(cin, dtype=dtype)
        self.conv = Conv2d(cin, cout, k, padding=k // 2, bias=False, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.conv(ops.relu(self.bn(x)))


class HierarchicalBlock(Module):
    """Three cascaded 3x3 branches (out/2, out/4, out/4) concatenated, plus skip."""

    def __init__(self, cfg: BlockConfig, rng, dtype=np.float32):
        cfg.validate()
        c = cfg.out_channels
        self.cfg = cfg
        self.b1 = _BnReluConv(cfg.in_channels, c // 2, 3, rng, dtype)
        self.b2 = _BnReluConv(c // 2, c // 4, 3, rng, dtype)
        self.b3 = _BnReluConv(c // 4, c // 4, 3, rng, dtype)
        self.skip = None if cfg.in_channels == c else Conv2d(cfg.in_channels, c, 1, bias=False, rng=rng, dtype=dtype)

    def forward(self, x):
        o1 = self.b1(x)
        o2 = self.b2(o1)
        o3 = self.b3(o2)
        residual = x if self.skip is None else self.skip(x)
        return ops.add(ops.concat_channels(o1, o2, o3), residual)


class BottleneckBlock(Module):
    """Pre-activation 1x1 -> 3x3 -> 1x1 residual with out/2 intermediate channels."""

    def __init__(self, cfg: BlockConfig, rng, dtype=np.float32):
        cfg.validate()
        c = cfg.out_channels
        self.cfg = cfg
        self.b1 = _BnReluConv(cfg.in_channels, c // 2, 1, rng, dtype)
        self.b2 = _BnReluConv(c // 2, c // 2, 3, rng, dtype)
        self.b3 = _BnReluConv(c // 2, c, 1, rng, dtype)
        self.skip = None if cfg.in_channels == c else Conv2d(cfg.in_channels, c, 1, bias=False, rng=rng, dtype=dtype)

    def forward(self, x):
        out = self.b3(self.b2(self.b1(x)))
        residual = x if self.skip is None else self.skip(x)
        return ops.add(out, residual)


def build_block(cfg: BlockConfig, rng=None, dtype=np.float32) -> Module:
    rng = rng if rng is not None else np.random.default_rng(0)
    cfg.validate()
    cls = HierarchicalBlock if cfg.kind == "hierarchical" else BottleneckBlock
    return cls(cfg, rng, dtype)


# ---------------------------------------------------------------------------
# hourglass


class Hourglass(Module):
    def __init__(self, depth: int, width: int, kind="hierarchical", rng=None, dtype=np.float32):
        if depth < 1:
            raise ConfigurationError(f"hourglass depth must be >= 1, got {depth}")
        rng = rng if rng is not None else np.random.default_rng(0)
        block = BlockConfig(kind, width, width)
        self.depth = depth
        self.up = build_block(block, rng, dtype)
        self.low1 = build_block(block, rng, dtype)
        if depth > 1:
            self.inner = Hourglass(depth - 1, width, kind, rng, dtype)
        else:
            self.inner = build_block(block, rng, dtype)
        self.low3 = build_block(block, rng, dtype)

    def forward(self, x):
        check_hourglass_size(x.shape[2], self.depth)
        check_hourglass_size(x.shape[3], self.depth)
        skip = self.up(x)
        low = self.low3(self.inner(self.low1(ops.maxpool2x2(x))))
        return ops.add(skip, ops.upsample_nearest2x(low))


def build_hourglass(depth: int, width: int, kind="hierarchical", rng=None, dtype=np.float32) -> Hourglass:
    return Hourglass(depth, width, kind, rng, dtype)


# ---------------------------------------------------------------------------
# FAN


class _Stack(Module):
    def __init__(self, cfg: FanConfig, last: bool, rng, dtype):
        w, n = cfg.width, cfg.num_landmarks
        self.hg = Hourglass(cfg.hg_depth, w, cfg.block, rng, dtype)
        self.top = build_block(BlockConfig(cfg.block, w, w), rng, dtype)
        self.conv_last = Conv2d(w, w, 1, rng=rng, dtype=dtype)
        self.bn_last = BatchNorm2d(w, dtype=dtype)
        self.head = Conv2d(w, n, 1, rng=rng, dtype=dtype)
        if not last:
            self.remap_features = Conv2d(w, w, 1, rng=rng, dtype=dtype)
            self.remap_heatmaps = Conv2d(n, w, 1, rng=rng, dtype=dtype)
        self.last = last

    def forward(self, x):
        features = ops.relu(self.bn_last(self.conv_last(self.top(self.hg(x)))))
        heatmaps = self.head(features)
        if self.last:
            return heatmaps, None
        merged = ops.add(ops.add(x, self.remap_features(features)), self.remap_heatmaps(heatmaps))
        return heatmaps, merged


class FAN(Module):
    """Stacked hourglass with intermediate supervision.

    ``forward`` returns one heatmap tensor [B, N, H/4, W/4] per stack.  For a
    guided (2D-to-3D) model pass the N guide channels separately or already
    concatenated with the RGB input.
    """

    def __init__(self, cfg: FanConfig, rng=None, dtype=np.float32):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        w, kind = cfg.width, cfg.block
        self.stem_conv = Conv2d(cfg.in_channels, w // 4, 7, stride=2, padding=3, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(w // 4, dtype=dtype)
        self.stem_b1 = build_block(BlockConfig(kind, w // 4, w // 2), rng, dtype)
        self.stem_b2 = build_block(BlockConfig(kind, w // 2, w // 2), rng, dtype)
        self.stem_b3 = build_block(BlockConfig(kind, w // 2, w), rng, dtype)
        self.stacks = [_Stack(cfg, i == cfg.num_stacks - 1, rng, dtype) for i in range(cfg.num_stacks)]

    def forward(self, x, guides=None) -> list[Tensor]:
        cfg = self.cfg
        if guides is not None:
            if not cfg.guided:
                raise ConfigurationError("guide channels given to an unguided FAN")
            if guides.shape[1] != cfg.num_landmarks:
                raise ConfigurationError(
                    f"expected {cfg.num_landmarks} guide channels, got {guides.shape[1]}")
            x = ops.concat_channels(x, guides)
        if x.shape[1] != cfg.in_channels:
            raise ConfigurationError(f"FAN expects {cfg.in_channels} input channels, got {x.shape[1]}")
        if x.shape[2] != cfg.input_resolution or x.shape[3] != cfg.input_resolution:
            raise ConfigurationError(
                f"FAN expects {cfg.input_resolution}x{cfg.input_resolution} input, got {x.shape[2]}x{x.shape[3]}")
        h = ops.relu(self.stem_bn(self.stem_conv(x)))
        h = ops.maxpool2x2(self.stem_b1(h))
        h = self.stem_b3(self.stem_b2(h))
        outputs = []
        for stack in self.stacks:
            heatmaps, h = stack(h)
            outputs.append(heatmaps)
        return outputs


def build_fan(cfg: FanConfig, rng=None, dtype=np.float32) -> FAN:
    return FAN(cfg, rng, dtype)


def build_2d_to_3d_fan(cfg: FanConfig, rng=None, dtype=np.float32) -> FAN:
    if cfg.in_channels != 3 + cfg.num_landmarks:
        raise ConfigurationError(
            f"2D-to-3D FAN needs in_channels = 3+N = {3 + cfg.num_landmarks}, got {cfg.in_channels}")
    return FAN(cfg, rng, dtype)


# ---------------------------------------------------------------------------
# depth regressor


class DepthRegressor(Module):
    """Residual trunk mapping image + N heatmaps to N depth values.

    The final layer is a convolution whose kernel covers the whole remaining
    map, i.e. a fully connected layer that keeps spatial information.
    """

    def __init__(self, cfg: DepthRegressorConfig, rng=None, dtype=np.float32):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        w = cfg.width
        self.stem_conv = Conv2d(cfg.in_channels, w, 7, stride=2, padding=3, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(w, dtype=dtype)
        blocks = []
        cin = w
        for i in range(cfg.stages):
            cout = w * 2 if i > 0 else w
            blocks.append(build_block(BlockConfig("bottleneck", cin, cout), rng, dtype))
            cin = cout
        self.blocks = blocks
        self.out_bn = BatchNorm2d(cin, dtype=dtype)
        k = cfg.input_resolution // 2 ** (cfg.stages + 1)
        self.fc = Conv2d(cin, cfg.num_landmarks, k, rng=rng, dtype=dtype)

    def forward(self, image, heatmaps) -> Tensor:
        if image.shape[2:] != heatmaps.shape[2:]:
            raise ConfigurationError(
                f"image {image.shape[2:]} and heatmaps {heatmaps.shape[2:]} differ spatially")
        if heatmaps.shape[1] != self.cfg.num_landmarks:
            raise ConfigurationError(f"expected {self.cfg.num_landmarks} heatmaps, got {heatmaps.shape[1]}")
        if image.shape[2] != self.cfg.input_resolution:
            raise ConfigurationError(f"depth regressor expects {self.cfg.input_resolution}px input")
        h = ops.relu(self.stem_bn(self.stem_conv(ops.concat_channels(image, heatmaps))))
        for block in self.blocks:
            h = ops.maxpool2x2(block(h))
        h = self.fc(ops.relu(self.out_bn(h)))
        return ops.reshape(h, (h.shape[0], self.cfg.num_landmarks))


def build_depth_regressor(cfg: DepthRegressorConfig, rng=None, dtype=np.float32) -> DepthRegressor:
    return DepthRegressor(cfg, rng, dtype)


# ---------------------------------------------------------------------------
# size accounting


def count_parameters(model: Module) -> int:
    return sum(p.size for _, p in model.named_parameters())


def size_sweep_configs(base: FanConfig = PAPER_FAN) -> list[FanConfig]:
    """Shrinking ladder: drop stacks one at a time down to 1, then narrow the
    blocks so each rung loses roughly one third of the single-stack size."""
    configs = [replace(base, num_stacks=s) for s in range(base.num_stacks, 0, -1)]
    one = configs[-1]
    for keep in (2 / 3, 1 / 3):
        width = max(8, int(round(base.width * math.sqrt(keep) / 8)) * 8)
        if width < configs[-1].width:
            configs.append(replace(one, width=width))
    return configs
