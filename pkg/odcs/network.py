"""
U-shaped generator and conditioned multi-scale feature extractor
================================================================

Both networks are stacks of :class:`Block` (convolution or transposed
convolution, optional batch norm, activation) described by a config object,
so the same code builds the full-size networks and desk-scale variants
(``width_scale`` < 1, smaller ``input_size``).
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError
from .ops import (
    BN_EPS,
    BN_MOMENTUM,
    LEAKY_SLOPE,
    BatchNormState,
    ConvSpec,
    activation,
    batch_statistics,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv_transpose2d,
)
from .tensor import Tensor

SeedLike = Union[int, Sequence[int]]
Shape = Tuple[int, int, int]

DEFAULT_ENCODER_WIDTHS = (32, 64, 128, 256, 256, 256, 256, 256)
DEFAULT_EXTRACTOR_WIDTHS = (32, 64, 128, 256)
INIT_STD = 0.02


def scale_width(width: int, scale: Fraction) -> int:
    """Channel width after applying ``scale``, never below one channel"""
    return max(1, int(Fraction(width) * scale))


def _check_scale(scale: Fraction):
    if not 0 < scale <= 1:
        raise DimensionError(f"width_scale must lie in (0, 1], got {scale}")


@dataclass(frozen=True)
class BlockSpec:
    name: str
    conv: ConvSpec
    transposed: bool
    batchnorm: bool
    activation: str
    in_shape: Shape
    out_shape: Shape


@dataclass(frozen=True)
class GeneratorConfig:
    """
    Encoder-decoder generator geometry.

    Every encoder block halves the spatial size with a 4x4 stride-2 convolution
    (padding 1, or padding 2 once the input is already 1x1); every decoder block
    mirrors its encoder block and restores that block's input size.
    """

    input_channels: int = 3
    output_channels: int = 1
    encoder_widths: Tuple[int, ...] = DEFAULT_ENCODER_WIDTHS
    width_scale: Fraction = Fraction(1)
    input_size: int = 256
    init_seed: SeedLike = 0
    init_std: float = INIT_STD
    leaky_slope: float = LEAKY_SLOPE
    bn_momentum: float = BN_MOMENTUM
    bn_eps: float = BN_EPS

    @property
    def depth(self) -> int:
        return len(self.encoder_widths)

    def widths(self) -> List[int]:
        return [scale_width(w, Fraction(self.width_scale)) for w in self.encoder_widths]

    def blocks(self) -> List[BlockSpec]:
        _check_scale(Fraction(self.width_scale))
        if self.input_size <= 0 or self.input_size % 2:
            raise DimensionError(f"input_size must be a positive even integer, got {self.input_size}")
        if self.depth == 0:
            raise DimensionError("generator needs at least one encoder block")

        widths = self.widths()
        encoder: List[BlockSpec] = []
        size, channels = self.input_size, self.input_channels
        for i, width in enumerate(widths):
            pad = 1 if size >= 2 else 2
            spec = ConvSpec.square(channels, width, kernel=4, stride=2, padding=pad)
            out = spec.output_size((size, size))[0]
            encoder.append(BlockSpec(
                name=f"encoder.{i}", conv=spec, transposed=False, batchnorm=i > 0,
                activation="leaky_relu", in_shape=(channels, size, size), out_shape=(width, out, out),
            ))
            size, channels = out, width

        decoder: List[BlockSpec] = []
        prev_channels = 0
        for k in range(self.depth):
            mirror = encoder[self.depth - 1 - k]
            in_c = mirror.out_shape[0] + prev_channels
            last = k == self.depth - 1
            out_c = self.output_channels if last else mirror.in_shape[0]
            in_size, target = mirror.out_shape[1], mirror.in_shape[1]
            pad = mirror.conv.padding[0]
            op = target - ((in_size - 1) * 2 - 2 * pad + 4)
            if not 0 <= op < 2:
                raise DimensionError(
                    f"decoder.{k}: cannot restore size {target} from {in_size} with a 4x4 stride-2 transposed convolution")
            spec = ConvSpec.square(in_c, out_c, kernel=4, stride=2, padding=pad, output_padding=op)
            decoder.append(BlockSpec(
                name=f"decoder.{k}", conv=spec, transposed=True, batchnorm=not last,
                activation="tanh" if last else "relu",
                in_shape=(in_c, in_size, in_size), out_shape=(out_c, target, target),
            ))
            prev_channels = out_c
        return encoder + decoder

    def layer_table(self) -> List[Tuple[str, Shape, Shape]]:
        """(block name, input C×H×W, output C×H×W) for every block, in execution order"""
        return [(b.name, b.in_shape, b.out_shape) for b in self.blocks()]


@dataclass(frozen=True)
class FeatureExtractorConfig:
    """
    Conditioned feature extractor geometry. The input is the 3-channel condition
    image concatenated with the 1-channel segmentation map.
    """

    input_channels: int = 4
    widths: Tuple[int, ...] = DEFAULT_EXTRACTOR_WIDTHS
    strides: Tuple[int, ...] = (2, 2, 2, 1)
    paddings: Tuple[int, ...] = (1, 1, 1, 1)
    kernel: int = 4
    width_scale: Fraction = Fraction(1)
    input_size: int = 256
    batchnorm: bool = True
    init_seed: SeedLike = 1
    init_std: float = INIT_STD
    leaky_slope: float = LEAKY_SLOPE
    bn_momentum: float = BN_MOMENTUM
    bn_eps: float = BN_EPS

    def blocks(self) -> List[BlockSpec]:
        _check_scale(Fraction(self.width_scale))
        if not len(self.widths) == len(self.strides) == len(self.paddings):
            raise DimensionError("widths, strides and paddings must have one entry per layer")
        blocks = []
        size, channels = self.input_size, self.input_channels
        for i, (w, s, p) in enumerate(zip(self.widths, self.strides, self.paddings)):
            width = scale_width(w, Fraction(self.width_scale))
            spec = ConvSpec.square(channels, width, kernel=self.kernel, stride=s, padding=p)
            out = spec.output_size((size, size))[0]
            if out <= 0:
                raise DimensionError(f"extractor.{i}: input size {size} too small for {spec}")
            blocks.append(BlockSpec(
                name=f"layer.{i}", conv=spec, transposed=False, batchnorm=self.batchnorm,
                activation="leaky_relu", in_shape=(channels, size, size), out_shape=(width, out, out),
            ))
            size, channels = out, width
        return blocks


NetworkConfig = Union[GeneratorConfig, FeatureExtractorConfig]


def init_weights(config: NetworkConfig, seed: Optional[SeedLike] = None) -> "OrderedDict[str, np.ndarray]":
    """
    Fresh parameters for ``config``: weights ~ Normal(0, init_std), biases 0,
    batch-norm gamma 1 and beta 0. Deterministic per seed.
    """
    rng = np.random.default_rng(config.init_seed if seed is None else seed)
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for block in config.blocks():
        spec = block.conv
        if block.transposed:
            shape = (spec.in_channels, spec.out_channels) + spec.kernel
        else:
            shape = (spec.out_channels, spec.in_channels) + spec.kernel
        params[f"{block.name}.weight"] = rng.normal(0.0, config.init_std, shape).astype(np.float32)
        params[f"{block.name}.bias"] = np.zeros(spec.out_channels, dtype=np.float32)
        if block.batchnorm:
            params[f"{block.name}.gamma"] = np.ones(spec.out_channels, dtype=np.float32)
            params[f"{block.name}.beta"] = np.zeros(spec.out_channels, dtype=np.float32)
    return params


class Block:
    """Convolution (or transposed convolution), optional batch norm, activation"""

    def __init__(self, spec: BlockSpec, params: Dict[str, np.ndarray], slope: float,
                 bn_momentum: float, bn_eps: float):
        self.spec = spec
        self.slope = slope
        self.weight = Tensor(params[f"{spec.name}.weight"], requires_grad=True)
        self.bias = Tensor(params[f"{spec.name}.bias"], requires_grad=True)
        self.gamma: Optional[Tensor] = None
        self.beta: Optional[Tensor] = None
        self.state: Optional[BatchNormState] = None
        if spec.batchnorm:
            self.gamma = Tensor(params[f"{spec.name}.gamma"], requires_grad=True)
            self.beta = Tensor(params[f"{spec.name}.beta"], requires_grad=True)
            self.state = BatchNormState.fresh(spec.conv.out_channels, bn_momentum, bn_eps)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        conv = conv_transpose2d if self.spec.transposed else conv2d
        y = conv(x, self.weight, self.bias, self.spec.conv)
        if self.state is not None:
            y = batchnorm2d(y, self.gamma, self.beta, self.state, training)
        return activation(y, self.spec.activation, self.slope)

    def pair(self, real: Tensor, fake: Tensor) -> Tuple[Tensor, Tensor]:
        """Apply the block to both inputs, normalizing each with the batch statistics of ``real``"""
        conv = conv_transpose2d if self.spec.transposed else conv2d
        yr = conv(real, self.weight, self.bias, self.spec.conv)
        yf = conv(fake, self.weight, self.bias, self.spec.conv)
        if self.state is not None:
            stats = batch_statistics(yr)
            yr = batchnorm2d(yr, self.gamma, self.beta, self.state, stats=stats)
            yf = batchnorm2d(yf, self.gamma, self.beta, self.state, stats=stats)
        return (activation(yr, self.spec.activation, self.slope),
                activation(yf, self.spec.activation, self.slope))

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield f"{self.spec.name}.weight", self.weight
        yield f"{self.spec.name}.bias", self.bias
        if self.gamma is not None:
            yield f"{self.spec.name}.gamma", self.gamma
            yield f"{self.spec.name}.beta", self.beta

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        if self.state is not None:
            yield f"{self.spec.name}.running_mean", self.state.running_mean
            yield f"{self.spec.name}.running_var", self.state.running_var


class Network:
    """Shared parameter, buffer and mode handling"""

    def __init__(self, config: NetworkConfig, params: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        self.training = True
        specs = config.blocks()
        if params is None:
            params = init_weights(config)
        self.blocks = [
            Block(s, params, config.leaky_slope, config.bn_momentum, config.bn_eps) for s in specs
        ]

    def train(self, mode: bool = True) -> "Network":
        self.training = mode
        return self

    def eval(self) -> "Network":
        return self.train(False)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(item for block in self.blocks for item in block.named_parameters())

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(item for block in self.blocks for item in block.named_buffers())

    def load_buffers(self, buffers: Dict[str, np.ndarray]):
        for block in self.blocks:
            if block.state is None:
                continue
            name = block.spec.name
            block.state.running_mean = np.array(buffers[f"{name}.running_mean"], dtype=np.float32)
            block.state.running_var = np.array(buffers[f"{name}.running_var"], dtype=np.float32)

    def load_parameters(self, params: Dict[str, np.ndarray]):
        for name, tensor in self.named_parameters().items():
            value = np.asarray(params[name], dtype=np.float32)
            if value.shape != tensor.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} does not match {tensor.shape}")
            tensor.data[...] = value

    def requires_grad_(self, flag: bool) -> "Network":
        for tensor in self.named_parameters().values():
            tensor.requires_grad = flag
        return self

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def _check_input(self, x: Tensor, channels: int):
        size = self.config.input_size
        if x.ndim != 4:
            raise DimensionError(f"expected N, C, H, W input, got shape {x.shape}")
        if x.shape[1] != channels:
            raise DimensionError(f"channel axis 1 has {x.shape[1]} channels, expected {channels}")
        if x.shape[2:] != (size, size):
            raise DimensionError(f"spatial axes 2-3 are {x.shape[2:]}, network is built for {size}x{size}")


class Generator(Network):
    """
    U-shaped encoder-decoder. Decoder block ``k`` consumes the previous decoder
    output concatenated with the mirrored encoder block's output; the last
    decoder block emits a Tanh map in [-1, 1].
    """

    config: GeneratorConfig

    def __init__(self, config: Optional[GeneratorConfig] = None,
                 params: Optional[Dict[str, np.ndarray]] = None):
        super().__init__(config or GeneratorConfig(), params)
        depth = self.config.depth
        self.encoder = self.blocks[:depth]
        self.decoder = self.blocks[depth:]

    def forward(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        self._check_input(x, self.config.input_channels)
        skips = []
        h = x
        for block in self.encoder:
            h = block(h, self.training)
            skips.append(h)
            if trace is not None:
                trace.append((block.spec.name, h.shape[1:]))
        depth = self.config.depth
        for k, block in enumerate(self.decoder):
            if k > 0:
                h = concat_channels(h, skips[depth - 1 - k])
            h = block(h, self.training)
            if trace is not None:
                trace.append((block.spec.name, h.shape[1:]))
        return h

    __call__ = forward


@dataclass
class FeaturePyramid:
    """Per-layer feature maps, shallowest first"""

    features: List[Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    def __getitem__(self, index: int) -> Tensor:
        return self.features[index]

    @property
    def channels(self) -> List[int]:
        return [f.shape[1] for f in self.features]


class FeatureExtractor(Network):
    config: FeatureExtractorConfig

    def __init__(self, config: Optional[FeatureExtractorConfig] = None,
                 params: Optional[Dict[str, np.ndarray]] = None):
        super().__init__(config or FeatureExtractorConfig(), params)

    def forward(self, condition: Tensor, seg: Tensor) -> FeaturePyramid:
        self._check_pair(condition, seg)
        h = concat_channels(condition, seg)
        self._check_input(h, self.config.input_channels)
        pyramid = FeaturePyramid()
        for block in self.blocks:
            h = block(h, self.training)
            pyramid.features.append(h)
        return pyramid

    def forward_pair(self, condition: Tensor, real: Tensor,
                     fake: Tensor) -> Tuple[FeaturePyramid, FeaturePyramid]:
        """
        Pyramids of ``(condition, real)`` and ``(condition, fake)``.

        Every batch-norm layer normalizes both branches with the batch
        statistics of the ``real`` branch, so identical inputs give identical
        pyramids whatever the mode. Running statistics are not touched.
        """
        if real.shape != fake.shape:
            raise DimensionError(f"real {real.shape} and fake {fake.shape} segmentations differ")
        self._check_pair(condition, real)
        hr = concat_channels(condition, real)
        hf = concat_channels(condition, fake)
        self._check_input(hr, self.config.input_channels)
        real_pyramid, fake_pyramid = FeaturePyramid(), FeaturePyramid()
        for block in self.blocks:
            hr, hf = block.pair(hr, hf)
            real_pyramid.features.append(hr)
            fake_pyramid.features.append(hf)
        return real_pyramid, fake_pyramid

    @staticmethod
    def _check_pair(condition: Tensor, seg: Tensor):
        if condition.ndim != 4 or seg.ndim != 4:
            raise DimensionError(f"expected N, C, H, W inputs, got {condition.shape} and {seg.shape}")
        if condition.shape[0] != seg.shape[0] or condition.shape[2:] != seg.shape[2:]:
            raise DimensionError(
                f"condition {condition.shape} and segmentation {seg.shape} differ on axes 0, 2 or 3")

    __call__ = forward


def generator_forward(g: Generator, x: Tensor) -> Tensor:
    return g.forward(x)


def feature_extract(f: FeatureExtractor, condition: Tensor, seg: Tensor) -> FeaturePyramid:
    return f.forward(condition, seg)
