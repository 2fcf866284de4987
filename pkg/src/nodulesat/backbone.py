"""3D DenseNet-BC voxel encoder ending in global average pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DimensionError
from .nn import functional as F
from .nn.layers import BatchNorm3d, Module
from .nn.tensor import Tensor, concat


@dataclass(frozen=True)
class BackboneConfig:
    growth: int = 2
    repeats: tuple[int, ...] = (1, 1)
    theta: float = 2
    bottleneck: int = 4
    alpha: float = 0.1
    stem: int | None = None
    edge: int = 8

    def __post_init__(self):
        object.__setattr__(self, "repeats", tuple(int(r) for r in self.repeats))
        if self.growth < 1 or self.bottleneck < 1:
            raise ConfigurationError("growth rate and bottleneck must be >= 1")
        if not self.repeats or min(self.repeats) < 1:
            raise ConfigurationError(f"block repeats must be positive, got {self.repeats}")
        if self.theta < 1:
            raise ConfigurationError(f"compression theta must be >= 1, got {self.theta}")
        if self.stem_width < 1 or self.edge < 1:
            raise ConfigurationError("stem width and edge length must be >= 1")
        if self.edge % (2 ** self.n_transitions):
            raise ConfigurationError(
                f"input edge {self.edge} not divisible by 2^{self.n_transitions} (one halving per transition)"
            )

    @property
    def stem_width(self) -> int:
        return self.stem if self.stem is not None else 2 * self.growth

    @property
    def n_transitions(self) -> int:
        return len(self.repeats) - 1

    def channel_progression(self) -> list[int]:
        """Channel count after the stem, after each block and after each transition."""
        c = self.stem_width
        seq = [c]
        for i, r in enumerate(self.repeats):
            c += r * self.growth
            seq.append(c)
            if i < self.n_transitions:
                c = int(c // self.theta)
                seq.append(c)
        return seq

    @property
    def out_channels(self) -> int:
        return self.channel_progression()[-1]


#: false-positive-reduction backbone (48^3 input)
FPR_BACKBONE = BackboneConfig(growth=16, repeats=(4, 4, 4, 4), edge=48)
#: malignancy backbone (32^3 input)
MALIGNANCY_BACKBONE = BackboneConfig(growth=32, repeats=(3, 8, 4), edge=32)
#: desk-scale default used in tests
TINY_BACKBONE = BackboneConfig(growth=2, repeats=(1, 1), edge=8)


class Conv3d(Module):
    """Bias-free 3D convolution, weights (cout, cin, k, k, k)."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, padding: int = 0):
        super().__init__()
        self.padding = padding
        std = math.sqrt(2.0 / (cin * kernel**3))
        self.W = Tensor(rng.normal(0.0, std, (cout, cin, kernel, kernel, kernel)), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.W, stride=1, padding=self.padding)


class DenseLayer(Module):
    """BN-act-conv1^3(B*k)-BN-act-conv3^3(k), concatenated onto the input."""

    def __init__(self, cin: int, growth: int, bottleneck: int, alpha: float, rng: np.random.Generator):
        super().__init__()
        self.alpha = alpha
        width = bottleneck * growth
        self.bn1 = BatchNorm3d(cin)
        self.conv1 = Conv3d(cin, width, 1, rng)
        self.bn2 = BatchNorm3d(width)
        self.conv2 = Conv3d(width, growth, 3, rng, padding=1)
        self.out_channels = cin + growth
        self.bottleneck_width = width

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(F.leaky_relu(self.bn1(x), self.alpha))
        h = self.conv2(F.leaky_relu(self.bn2(h), self.alpha))
        return concat([x, h], axis=1)


class Transition(Module):
    """BN-act-conv1^3 to floor(c/theta) channels, then 2^3 average pooling."""

    def __init__(self, cin: int, theta: float, alpha: float, rng: np.random.Generator):
        super().__init__()
        self.alpha = alpha
        self.out_channels = int(cin // theta)
        if self.out_channels < 1:
            raise ConfigurationError(f"transition would leave {self.out_channels} channels")
        self.bn = BatchNorm3d(cin)
        self.conv = Conv3d(cin, self.out_channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        if any(d % 2 for d in x.shape[2:]):
            raise ConfigurationError(f"transition needs even spatial extent, got {x.shape[2:]}")
        return F.avg_pool3d(self.conv(F.leaky_relu(self.bn(x), self.alpha)), 2)


class DenseBlock(Module):
    def __init__(self, cin: int, repeats: int, growth: int, bottleneck: int, alpha: float, rng):
        super().__init__()
        self.layers = []
        c = cin
        for j in range(repeats):
            layer = DenseLayer(c, growth, bottleneck, alpha, rng)
            setattr(self, f"layer{j}", layer)
            self.layers.append(layer)
            c = layer.out_channels
        self.out_channels = c

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class DenseNet3D(Module):
    """stem -> (block, transition)* -> block -> BN -> act -> GAP.

    Input (n, 1, e, e, e) or (n, e, e, e); output (n, out_channels).
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.stem = Conv3d(1, config.stem_width, 3, rng, padding=1)
        c = config.stem_width
        self.stages = []
        for i, r in enumerate(config.repeats):
            block = DenseBlock(c, r, config.growth, config.bottleneck, config.alpha, rng)
            setattr(self, f"block{i}", block)
            self.stages.append(block)
            c = block.out_channels
            if i < config.n_transitions:
                trans = Transition(c, config.theta, config.alpha, rng)
                setattr(self, f"trans{i}", trans)
                self.stages.append(trans)
                c = trans.out_channels
        self.bn = BatchNorm3d(c)
        self.out_channels = c

    def batchnorms(self) -> list[BatchNorm3d]:
        out = []

        def walk(mod):
            for _, child in mod.named_children():
                if isinstance(child, BatchNorm3d):
                    out.append(child)
                else:
                    walk(child)

        walk(self)
        return out

    def forward(self, x: Tensor) -> Tensor:
        return backbone_forward(x, self)


def backbone_forward(v, net: DenseNet3D, mode: str | None = None) -> Tensor:
    """Feature vectors for a batch of cubic patches.

    ``v`` may be a Tensor/array of shape (n, 1, e, e, e), (n, e, e, e) or a
    single (e, e, e) patch; ``mode`` ('train'/'eval') overrides the module state.
    """
    x = v if isinstance(v, Tensor) else Tensor(np.asarray(getattr(v, "voxels", v), dtype=np.float64))
    if x.ndim == 3:
        x = x.reshape(1, 1, *x.shape)
    elif x.ndim == 4:
        x = x.reshape(x.shape[0], 1, *x.shape[1:])
    e = net.config.edge
    if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (e, e, e):
        raise ConfigurationError(f"backbone expects single-channel {e}^3 patches, got shape {x.shape}")
    was = net.training
    if mode is not None:
        net.train(mode == "train")
    try:
        h = net.stem(x)
        for stage in net.stages:
            h = stage(h)
        h = F.leaky_relu(net.bn(h), net.config.alpha)
        return F.global_avg_pool3d(h)
    finally:
        net.train(was)


def dense_layer(x: Tensor, layer: DenseLayer) -> Tensor:
    if x.ndim != 5 or x.shape[1] != layer.bn1.channels:
        raise DimensionError(f"dense layer expects {layer.bn1.channels} input channels, got {x.shape}")
    return layer(x)


def transition(x: Tensor, layer: Transition) -> Tensor:
    return layer(x)
