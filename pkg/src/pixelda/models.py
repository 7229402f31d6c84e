"""Generator, discriminator, and task classifier.

All three are plain parameter registries plus a forward method; there is no
layer-object framework beyond the few helpers here. Weights start from
N(0, 0.02^2), biases from zero, batch-norm scales from one. Construction is
deterministic given a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import GraphError, Parameter, Tensor, concat
from .nn_ops import (
    TRAIN,
    batch_norm,
    conv2d,
    dropout,
    flatten,
    fully_connected,
    leaky_relu,
    max_pool2d,
    pointwise_activation,
    relu,
    sigmoid,
    softmax,
    stochastic_regularizers,
    tanh,
)

WEIGHT_STDDEV = 0.02


@dataclass
class GeneratorConfig:
    image_height: int
    image_width: int
    image_channels: int
    residual_blocks: int = 6
    filters: int = 64
    noise_dim: int = 10


@dataclass
class DiscriminatorConfig:
    image_height: int
    image_width: int
    image_channels: int
    base_filters: int = 64
    dropout_keep: float = 0.9
    noise_stddev: float = 0.2


@dataclass
class TaskClassifierConfig:
    image_height: int
    image_width: int
    class_count: int
    source_channels: int
    adapted_channels: int
    private_layers: str = "conv:32,relu,pool:2"
    shared_layers: str = "conv:64,relu,pool:2,flatten,fc:128,relu"
    pose_head: bool = False


@dataclass
class NoiseSpec:
    """Shape and range of the generator's noise input: uniform on (-1, 1)."""

    dim: int = 10


class Network:
    """Named Parameter registry plus non-trainable buffers (running stats)."""

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.buffers = {}

    def parameter(self, name, array):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, array)
        self.params[name] = p
        return p

    def buffer(self, name, array):
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        self.buffers[name] = array
        return array

    def parameters(self):
        return list(self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        """name -> array for everything a checkpoint must carry."""
        out = {name: p.value.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out


def _weight(rng, shape, dtype):
    return rng.normal(0.0, WEIGHT_STDDEV, shape).astype(dtype)


class ConvLayer:
    def __init__(self, net, name, cin, cout, rng, dtype, stride=1, bias=True):
        self.stride = stride
        self.kernel = net.parameter(f"{name}/kernel", _weight(rng, (cout, cin, 3, 3), dtype))
        self.bias = None
        if bias:
            self.bias = net.parameter(f"{name}/bias", np.zeros(cout, dtype=dtype))

    def __call__(self, x):
        y = conv2d(x, self.kernel.value, stride=self.stride)
        if self.bias is not None:
            y = y + self.bias.value.reshape((1, -1, 1, 1))
        return y


class BatchNormLayer:
    def __init__(self, net, name, channels, dtype):
        self.scale = net.parameter(f"{name}/scale", np.ones(channels, dtype=dtype))
        self.offset = net.parameter(f"{name}/offset", np.zeros(channels, dtype=dtype))
        self.running_mean = net.buffer(f"{name}/running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = net.buffer(f"{name}/running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x, mode):
        return batch_norm(x, self.scale.value, self.offset.value,
                          self.running_mean, self.running_var, mode)


class DenseLayer:
    def __init__(self, net, name, dim_in, units, rng, dtype):
        self.weight = net.parameter(f"{name}/weight", _weight(rng, (dim_in, units), dtype))
        self.bias = net.parameter(f"{name}/bias", np.zeros(units, dtype=dtype))

    def __call__(self, x):
        return fully_connected(x, self.weight.value, self.bias.value)


class Generator(Network):
    """Residual refiner: image + one noise plane in, restyled image out.

    The noise vector goes through a dense layer into an extra H x W channel
    concatenated onto the input. A stride-1 stem and `residual_blocks`
    conv-bn pairs keep resolution; a final 3x3 conv with tanh lands the
    output in [-1, 1] with the same channel count as the input.
    """

    def __init__(self, config, seed, dtype=np.float32):
        super().__init__("generator")
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        hw = c.image_height * c.image_width
        self.noise_fc = DenseLayer(self, "noise_fc", c.noise_dim, hw, rng, dtype)
        self.stem = ConvLayer(self, "stem", c.image_channels + 1, c.filters, rng, dtype,
                              bias=False)
        self.stem_bn = BatchNormLayer(self, "stem_bn", c.filters, dtype)
        self.blocks = []
        for i in range(c.residual_blocks):
            conv1 = ConvLayer(self, f"block{i}/conv1", c.filters, c.filters, rng, dtype,
                              bias=False)
            bn1 = BatchNormLayer(self, f"block{i}/bn1", c.filters, dtype)
            conv2 = ConvLayer(self, f"block{i}/conv2", c.filters, c.filters, rng, dtype,
                              bias=False)
            bn2 = BatchNormLayer(self, f"block{i}/bn2", c.filters, dtype)
            self.blocks.append((conv1, bn1, conv2, bn2))
        self.out_conv = ConvLayer(self, "out", c.filters, c.image_channels, rng, dtype)

    def forward(self, x, z, mode):
        c = self.config
        n = x.data.shape[0]
        if x.data.shape[1:] != (c.image_channels, c.image_height, c.image_width):
            raise GraphError(
                f"generator built for {c.image_channels}x{c.image_height}x"
                f"{c.image_width} inputs, got {x.data.shape}"
            )
        if z.data.shape != (n, c.noise_dim):
            raise GraphError(f"noise must be ({n}, {c.noise_dim}), got {z.data.shape}")
        plane = self.noise_fc(z).reshape((n, 1, c.image_height, c.image_width))
        h = concat([x, plane], axis=1)
        h = relu(self.stem_bn(self.stem(h), mode))
        for conv1, bn1, conv2, bn2 in self.blocks:
            r = relu(bn1(conv1(h), mode))
            r = bn2(conv2(r), mode)
            h = h + r
        return tanh(self.out_conv(h))


class Discriminator(Network):
    """Conv stack ending in one sigmoid verdict per image.

    First conv keeps resolution, the rest halve it (doubling the filter
    count each time) until the feature map is at most 4 pixels on its short
    side. Every conv is followed by leaky-relu then additive Gaussian noise
    and dropout, the two regularizers that keep D from winning outright.
    """

    def __init__(self, config, seed, dtype=np.float32):
        super().__init__("discriminator")
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        if min(c.image_height, c.image_width) < 4:
            raise ValueError("discriminator needs inputs of at least 4x4")
        self.convs = []
        self.filter_counts = []
        h, w, cin, f = c.image_height, c.image_width, c.image_channels, c.base_filters
        self.convs.append(ConvLayer(self, "conv0", cin, f, rng, dtype, stride=1))
        self.filter_counts.append(f)
        i = 1
        while min(h, w) > 4:
            cin, f = f, f * 2
            h, w = math.ceil(h / 2), math.ceil(w / 2)
            self.convs.append(ConvLayer(self, f"conv{i}", cin, f, rng, dtype, stride=2))
            self.filter_counts.append(f)
            i += 1
        self.verdict = DenseLayer(self, "verdict", f * h * w, 1, rng, dtype)

    def forward(self, x, mode, rng=None):
        c = self.config
        if x.data.shape[1:] != (c.image_channels, c.image_height, c.image_width):
            raise GraphError(
                f"discriminator built for {c.image_channels}x{c.image_height}x"
                f"{c.image_width} inputs, got {x.data.shape}"
            )
        if mode == TRAIN and rng is None and (c.dropout_keep < 1 or c.noise_stddev > 0):
            raise ValueError("discriminator train-mode forward needs an rng")
        h = x
        for conv in self.convs:
            h = leaky_relu(conv(h))
            h = stochastic_regularizers(h, c.dropout_keep, c.noise_stddev, rng, mode)
        return sigmoid(self.verdict(flatten(h))).reshape((-1,))


class ClassifierOutput:
    """logits/probabilities always; quaternion only when the pose head exists."""

    __slots__ = ("logits", "probabilities", "quaternion")

    def __init__(self, logits, probabilities, quaternion=None):
        self.logits = logits
        self.probabilities = probabilities
        self.quaternion = quaternion


class LayerStack:
    """Sequence of layers described by a compact comma-separated spec.

    Tokens: conv:F (3x3, stride 1, relu NOT implied), conv:F:S for stride S,
    pool:K, fc:U, bn, dropout:KEEP, flatten, and the activations relu /
    lrelu / tanh / sigmoid. The constructor threads the input shape through
    the tokens so dense layers know their fan-in.
    """

    def __init__(self, net, prefix, spec, input_shape, rng, dtype):
        self.entries = []
        shape = tuple(input_shape)  # (C, H, W) or (D,)
        for idx, token in enumerate([t.strip() for t in spec.split(",") if t.strip()]):
            name = f"{prefix}/{idx}_{token.split(':')[0]}"
            parts = token.split(":")
            kind = parts[0]
            if kind == "conv":
                if len(shape) != 3:
                    raise ValueError(f"{prefix}: conv after flatten in {spec!r}")
                filters = int(parts[1])
                stride = int(parts[2]) if len(parts) > 2 else 1
                layer = ConvLayer(net, name, shape[0], filters, rng, dtype, stride=stride)
                shape = (filters, math.ceil(shape[1] / stride), math.ceil(shape[2] / stride))
                self.entries.append(("conv", layer))
            elif kind == "pool":
                k = int(parts[1])
                if len(shape) != 3 or shape[1] % k or shape[2] % k:
                    raise ValueError(f"{prefix}: pool:{k} does not fit shape {shape}")
                shape = (shape[0], shape[1] // k, shape[2] // k)
                self.entries.append(("pool", k))
            elif kind == "fc":
                units = int(parts[1])
                dim = int(np.prod(shape))
                layer = DenseLayer(net, name, dim, units, rng, dtype)
                shape = (units,)
                self.entries.append(("fc", layer))
            elif kind == "bn":
                layer = BatchNormLayer(net, name, shape[0], dtype)
                self.entries.append(("bn", layer))
            elif kind == "dropout":
                self.entries.append(("dropout", float(parts[1])))
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
                self.entries.append(("flatten", None))
            elif kind in ("relu", "lrelu", "tanh", "sigmoid"):
                self.entries.append(("act", kind))
            else:
                raise ValueError(f"unknown layer token {token!r} in {spec!r}")
        self.output_shape = shape

    def __call__(self, x, mode, rng=None):
        for kind, arg in self.entries:
            if kind == "conv":
                x = arg(x)
            elif kind == "pool":
                x = max_pool2d(x, arg)
            elif kind == "fc":
                if x.data.ndim != 2:
                    x = flatten(x)
                x = arg(x)
            elif kind == "bn":
                x = arg(x, mode)
            elif kind == "dropout":
                x = dropout(x, arg, rng, mode)
            elif kind == "flatten":
                x = flatten(x)
            else:
                x = pointwise_activation(x, arg)
        return x


class TaskClassifier(Network):
    """Classifier with per-stream private trunks and a shared tail.

    Source and adapted pixels pass through their own private stack first;
    only the shared stack and heads see both. A softmax head always exists;
    a 4-unit pose head (unit-normalized, w >= 0) is added on request.
    """

    SOURCE = "source"
    ADAPTED = "adapted"

    def __init__(self, config, seed, dtype=np.float32):
        super().__init__("classifier")
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        if c.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {c.class_count}")
        shape_s = (c.source_channels, c.image_height, c.image_width)
        shape_a = (c.adapted_channels, c.image_height, c.image_width)
        self.private = {
            self.SOURCE: LayerStack(self, "private_source", c.private_layers, shape_s,
                                    rng, dtype),
            self.ADAPTED: LayerStack(self, "private_adapted", c.private_layers, shape_a,
                                     rng, dtype),
        }
        ps, pa = (self.private[k].output_shape for k in (self.SOURCE, self.ADAPTED))
        if ps != pa:
            raise ValueError(f"private stacks disagree on output shape: {ps} vs {pa}")
        self.shared = LayerStack(self, "shared", c.shared_layers, ps, rng, dtype)
        feat = int(np.prod(self.shared.output_shape))
        self.class_head = DenseLayer(self, "class_head", feat, c.class_count, rng, dtype)
        self.pose_head_layer = None
        if c.pose_head:
            self.pose_head_layer = DenseLayer(self, "pose_head", feat, 4, rng, dtype)

    def stream_params(self, stream):
        prefix = f"private_{stream}/"
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    def forward(self, x, stream, mode, rng=None):
        if stream not in (self.SOURCE, self.ADAPTED):
            raise ValueError(f"stream must be 'source' or 'adapted', got {stream!r}")
        h = self.private[stream](x, mode, rng)
        h = self.shared(h, mode, rng)
        if h.data.ndim != 2:
            h = flatten(h)
        logits = self.class_head(h)
        probs = softmax(logits)
        quat = None
        if self.pose_head_layer is not None:
            raw = self.pose_head_layer(h)
            norm = ((raw * raw).sum(axis=1, keepdims=True) + 1e-12).sqrt()
            unit = raw / norm
            # antipodal ambiguity: canonicalize to a non-negative scalar part
            sign = np.where(unit.data[:, :1] >= 0, 1.0, -1.0).astype(unit.data.dtype)
            quat = unit * Tensor(sign)
        return ClassifierOutput(logits, probs, quat)


@dataclass
class ModelBundle:
    generator: Generator
    discriminator: Discriminator
    classifier: TaskClassifier


def spawn_seeds(seed, count):
    """Deterministic child seeds; one master seed drives every consumer."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def build_models(gen_cfg, disc_cfg, task_cfg, seed, dtype=np.float32):
    sg, sd, st = spawn_seeds(seed, 3)
    return ModelBundle(
        generator=Generator(gen_cfg, sg, dtype),
        discriminator=Discriminator(disc_cfg, sd, dtype),
        classifier=TaskClassifier(task_cfg, st, dtype),
    )
