"""Gated-convolution encoder/decoder for masked single-image denoising.

The network consumes the masked image concatenated with its Bernoulli mask
(2C input channels). The encoder keeps 48 channels at every scale and
pools five times down to H/32; the decoder upsamples five times, mixing in
the matching-scale encoder output through skip concatenation, with 96-channel
vanilla convolutions and dropout everywhere except the bare final layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, RngStream, Tensor

ENCODER_CHANNELS = 48
DECODER_CHANNELS = 96
NUM_SCALES = 5
LRELU_SLOPE = 0.2
SCALE_FACTOR = 2 ** NUM_SCALES  # input dims must divide by this


def _he_uniform(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class GatedConvLayer:
    """Two 3x3 convolutions; output = lrelu(feature) * sigmoid(gating)."""

    def __init__(self, weight_f: Tensor, bias_f: Tensor,
                 weight_g: Tensor, bias_g: Tensor, slope: float = LRELU_SLOPE):
        if weight_f.shape != weight_g.shape:
            raise ValueError("gating and feature weights must have identical shapes")
        self.weight_f = weight_f
        self.bias_f = bias_f
        self.weight_g = weight_g
        self.bias_g = bias_g
        self.slope = slope

    @classmethod
    def create(cls, cin: int, cout: int, rng: np.random.Generator, dtype) -> "GatedConvLayer":
        shape = (cout, cin, 3, 3)
        return cls(
            weight_f=Tensor(_he_uniform(rng, shape, dtype), requires_grad=True),
            bias_f=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
            weight_g=Tensor(_he_uniform(rng, shape, dtype), requires_grad=True),
            # gates start mostly open so features flow at step 0
            bias_g=Tensor(np.full(cout, 1.0, dtype=dtype), requires_grad=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        return ops.gated_conv2d(x, self.weight_f, self.bias_f,
                                self.weight_g, self.bias_g, self.slope)

    def parameters(self):
        return [("weight_f", self.weight_f), ("bias_f", self.bias_f),
                ("weight_g", self.weight_g), ("bias_g", self.bias_g)]


class ConvLayer:
    """Vanilla 3x3 convolution, optionally followed by leaky ReLU."""

    def __init__(self, weight: Tensor, bias: Tensor, activate: bool, slope: float = LRELU_SLOPE):
        self.weight = weight
        self.bias = bias
        self.activate = activate
        self.slope = slope

    @classmethod
    def create(cls, cin: int, cout: int, rng: np.random.Generator, dtype,
               activate: bool = True) -> "ConvLayer":
        return cls(
            weight=Tensor(_he_uniform(rng, (cout, cin, 3, 3), dtype), requires_grad=True),
            bias=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
            activate=activate,
        )

    def forward(self, x: Tensor) -> Tensor:
        out = ops.conv2d(x, self.weight, self.bias)
        if self.activate:
            out = ops.leaky_relu(out, self.slope)
        return out

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def gated_conv_forward(layer: GatedConvLayer, x: Tensor) -> Tensor:
    """Apply one gated-convolution layer (see :class:`GatedConvLayer`)."""
    return layer.forward(x)


@dataclass
class DecoderStage:
    conv1: ConvLayer
    conv2: ConvLayer


@dataclass(frozen=True)
class ShapeManifest:
    """Layer-by-layer parameter inventory, a pure function of (C, gconv)."""

    entries: tuple  # of (name, shape, count)

    @property
    def total_parameters(self) -> int:
        return sum(count for _, _, count in self.entries)

    def as_text(self) -> str:
        name_w = max(len(n) for n, _, _ in self.entries)
        shape_strs = ["x".join(str(d) for d in s) for _, s, _ in self.entries]
        shape_w = max(len(s) for s in shape_strs)
        lines = [f"{'layer':<{name_w}}  {'shape':<{shape_w}}  params"]
        for (name, _, count), s in zip(self.entries, shape_strs):
            lines.append(f"{name:<{name_w}}  {s:<{shape_w}}  {count}")
        lines.append(f"{'total':<{name_w}}  {'':<{shape_w}}  {self.total_parameters}")
        return "\n".join(lines)


class DenoiserNetwork:
    """Encoder/decoder assembly; see the module docstring for wiring."""

    def __init__(self, channels: int, p_drop: float, gconv_enabled: bool,
                 encoder: list, decoder: list[DecoderStage], output_layer: ConvLayer):
        self.channels = channels
        self.p_drop = p_drop
        self.gconv_enabled = gconv_enabled
        self.encoder = encoder
        self.decoder = decoder
        self.output_layer = output_layer

    def forward(self, net_input: Tensor, dropout_active: bool,
                dropout_rng: np.random.Generator) -> Tensor:
        """Run the 2C-channel input through the full U-shape.

        Dropout layers draw from ``dropout_rng`` in a fixed layer order, so
        the realized sub-network is a pure function of the generator state.
        """
        c, h, w = net_input.shape
        if c != 2 * self.channels:
            raise ValueError(f"expected {2 * self.channels} input channels (image + mask), got {c}")
        if h % SCALE_FACTOR or w % SCALE_FACTOR:
            raise ValueError(f"spatial dims must be multiples of {SCALE_FACTOR}, got {h}x{w}")

        x = self.encoder[0].forward(net_input)
        x = self.encoder[1].forward(x)
        skips = [x]
        for layer in self.encoder[2:]:
            x = ops.max_pool2(x)
            x = layer.forward(x)
            skips.append(x)

        x = skips.pop()  # bottleneck, H/32
        for stage in self.decoder:
            x = ops.upsample_nearest2(x)
            skip = skips.pop()
            assert skip.shape[0] == ENCODER_CHANNELS and skip.shape[1:] == x.shape[1:], \
                f"skip {skip.shape} incompatible with decoder input {x.shape}"
            x = ops.concat_channels(x, skip)
            x = stage.conv1.forward(x)
            x = ops.dropout(x, self.p_drop, dropout_rng, dropout_active)
            x = stage.conv2.forward(x)
            x = ops.dropout(x, self.p_drop, dropout_rng, dropout_active)
        return self.output_layer.forward(x)

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, layer in enumerate(self.encoder):
            named.extend((f"enc{i}.{n}", t) for n, t in layer.parameters())
        for i, stage in enumerate(self.decoder):
            named.extend((f"dec{i}.conv1.{n}", t) for n, t in stage.conv1.parameters())
            named.extend((f"dec{i}.conv2.{n}", t) for n, t in stage.conv2.parameters())
        named.extend((f"out.{n}", t) for n, t in self.output_layer.parameters())
        return named

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite parameters from named arrays; names and shapes must match."""
        named = dict(self.parameters())
        if set(named) != set(values):
            missing = sorted(set(named) - set(values))
            extra = sorted(set(values) - set(named))
            raise ValueError(f"parameter name mismatch: missing={missing} unexpected={extra}")
        for name, tensor in named.items():
            arr = np.asarray(values[name], dtype=tensor.dtype)
            if arr.shape != tensor.shape:
                raise ValueError(f"parameter '{name}' has shape {arr.shape}, expected {tensor.shape}")
            tensor.data = arr.copy()

    def shape_manifest(self) -> ShapeManifest:
        entries = tuple((name, tuple(t.shape), int(t.size)) for name, t in self.parameters())
        return ShapeManifest(entries)


def build_network(channels: int, p_drop: float, gconv_enabled: bool = True,
                  rng: RngStream | None = None, dtype=DEFAULT_DTYPE) -> DenoiserNetwork:
    """Assemble the denoiser for C-channel images (C in {1, 3}).

    Encoder: two 2C->48 / 48->48 convolutions, then five pool+conv scales.
    When ``gconv_enabled`` is off, every gated layer becomes a vanilla
    convolution with leaky ReLU (the ablation configuration).
    """
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"p_drop must be in [0, 1), got {p_drop}")
    if rng is None:
        rng = RngStream(0)
    gen = rng.generator()

    def enc_layer(cin, cout):
        if gconv_enabled:
            return GatedConvLayer.create(cin, cout, gen, dtype)
        return ConvLayer.create(cin, cout, gen, dtype, activate=True)

    k = ENCODER_CHANNELS
    encoder = [enc_layer(2 * channels, k), enc_layer(k, k)]
    encoder.extend(enc_layer(k, k) for _ in range(NUM_SCALES))

    decoder = []
    up_channels = k  # the bottleneck carries 48; later stages carry 96
    for _ in range(NUM_SCALES):
        conv1 = ConvLayer.create(up_channels + k, DECODER_CHANNELS, gen, dtype, activate=True)
        conv2 = ConvLayer.create(DECODER_CHANNELS, DECODER_CHANNELS, gen, dtype, activate=True)
        decoder.append(DecoderStage(conv1, conv2))
        up_channels = DECODER_CHANNELS

    output_layer = ConvLayer.create(DECODER_CHANNELS, channels, gen, dtype, activate=False)
    return DenoiserNetwork(channels, p_drop, gconv_enabled, encoder, decoder, output_layer)


def assemble_input(masked_image_chw: np.ndarray, mask: np.ndarray) -> Tensor:
    """Concatenate the masked image with the mask replicated to C channels."""
    c, h, w = masked_image_chw.shape
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match image {h}x{w}")
    tiled = np.broadcast_to(mask.astype(masked_image_chw.dtype), (c, h, w))
    return Tensor(np.concatenate([masked_image_chw, tiled], axis=0))


def network_forward(net: DenoiserNetwork, masked_image: np.ndarray, mask: np.ndarray,
                    dropout_active: bool, rng: RngStream) -> np.ndarray:
    """Predict an (H, W, C) image from a masked input.

    The output is the raw network prediction; clamping to [0, 1] happens
    only when images are exported.
    """
    img = np.asarray(masked_image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] != net.channels:
        raise ValueError(f"expected (H, W, {net.channels}) image, got shape {np.asarray(masked_image).shape}")
    chw = np.ascontiguousarray(img.transpose(2, 0, 1))
    net_input = assemble_input(chw, np.asarray(mask))
    out = net.forward(net_input, dropout_active, rng.generator())
    return out.data.transpose(1, 2, 0)
