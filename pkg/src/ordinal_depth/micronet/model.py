"""Multi-stream ordinal classifier.

Two point-patch streams (strided convs, no pooling), three scale streams
(padded convs, each optionally followed by a dense or bottleneck block,
then 2x2 pooling) and the two location masks are flattened, concatenated
and classified by FC-400 -> ReLU -> FC-3 -> log-softmax.
"""

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import InvalidConfig, ShapeMismatch
from . import ops
from .layers import (
    AvgPool2, BatchNorm, Bottleneck, Conv2d, DenseBlock, Layer, Linear,
    MaxPool2, ReLU, Sequential, named_layers,
)

STREAMS = ("patch1", "patch2", "scale1", "scale2", "scale3", "masks")
BLOCK_KINDS = ("none", "dense", "bottleneck")

INPUT_SIZES = {
    "patch1": 16, "patch2": 16,
    "scale1": 32, "scale2": 40, "scale3": 48,
    "masks": 32,
}

# (kernel, stride, outputs) per layer
PATCH_LAYERS = ((3, 2, 24), (3, 1, 24), (3, 2, 40), (3, 1, 40))
SCALE_WIDTHS = (24, 24, 48, 48)

STREAM_PRESETS = {
    "patches": ("patch1", "patch2"),
    "box": ("patch1", "patch2", "scale1"),
    "single": ("patch1", "patch2", "scale1", "masks"),
    "all": STREAMS,
}


@dataclass
class ModelConfig:
    streams: tuple = STREAMS
    block_kind: str = "dense"
    dense_layers_per_block: int = 5
    growth_rate: int = 5
    blocks_per_stream: int = 4
    fc_width: int = 400
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.streams, str):
            self.streams = (self.streams,)
        unknown = set(self.streams) - set(STREAMS)
        if unknown:
            raise InvalidConfig(f"unknown streams {sorted(unknown)}")
        self.streams = tuple(s for s in STREAMS if s in set(self.streams))
        if not self.streams or self.streams == ("masks",):
            raise InvalidConfig("at least one image stream must be enabled")
        if self.block_kind not in BLOCK_KINDS:
            raise InvalidConfig(f"block_kind must be one of {BLOCK_KINDS}")
        if self.growth_rate < 1 or self.dense_layers_per_block < 1:
            raise InvalidConfig("growth_rate and dense_layers_per_block must be >= 1")
        if not 1 <= self.blocks_per_stream <= len(SCALE_WIDTHS):
            raise InvalidConfig(f"blocks_per_stream must be in 1..{len(SCALE_WIDTHS)}")
        if self.fc_width < 1:
            raise InvalidConfig("fc_width must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["streams"] = list(self.streams)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "streams": tuple(d.get("streams", STREAMS))})


def patch_stream(rng, dtype):
    layers, c = [], 3
    for kernel, stride, out in PATCH_LAYERS:
        layers += [Conv2d(rng, c, out, kernel, stride, 1, dtype, bias=False), BatchNorm(out, dtype), ReLU()]
        c = out
    return Sequential(*layers), c


def scale_stream(rng, config, dtype):
    layers, c = [], 3
    for width in SCALE_WIDTHS[: config.blocks_per_stream]:
        layers.append(Conv2d(rng, c, width, 3, 1, 1, dtype, bias=False))
        c = width
        if config.block_kind == "dense":
            block = DenseBlock(rng, c, config.dense_layers_per_block, config.growth_rate, dtype)
            layers.append(block)
            c = block.c_out
        elif config.block_kind == "bottleneck":
            layers.append(Bottleneck(rng, c, dtype=dtype))
        layers += [BatchNorm(c, dtype), ReLU()]
        layers.append(MaxPool2() if config.block_kind == "bottleneck" else AvgPool2())
    return Sequential(*layers), c


def stream_output_shape(name, config):
    """Spatial size and channel count a stream hands to the head."""
    size = INPUT_SIZES[name]
    if name == "masks":
        return size, 2
    if name.startswith("patch"):
        for kernel, stride, _ in PATCH_LAYERS:
            size = ops.conv_output_size(size, kernel, stride, 1)
        return size, PATCH_LAYERS[-1][2]
    c = 3
    for width in SCALE_WIDTHS[: config.blocks_per_stream]:
        c = width
        if config.block_kind == "dense":
            c += config.dense_layers_per_block * config.growth_rate
        size //= 2
    return size, c


class OrdinalNet(Layer):
    """The full classifier; ``forward`` takes a dict of NHWC arrays keyed
    by stream name (``masks`` holds both masks as two channels)."""

    def __init__(self, config, dtype=np.float32):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        self.feature_widths = {}
        for name in config.streams:
            if name.startswith("patch"):
                self.children[name], _ = patch_stream(rng, dtype)
            elif name.startswith("scale"):
                self.children[name], _ = scale_stream(rng, config, dtype)
            size, c = stream_output_shape(name, config)
            self.feature_widths[name] = size * size * c
        f_in = sum(self.feature_widths.values())
        self.children["fc1"] = Linear(rng, f_in, config.fc_width, dtype)
        self.children["relu"] = ReLU()
        self.children["fc2"] = Linear(rng, config.fc_width, 3, dtype)

    def forward(self, inputs, train=False):
        feats = []
        for name in self.config.streams:
            x = np.asarray(inputs[name], dtype=self.dtype)
            size = INPUT_SIZES[name]
            if x.ndim != 4 or x.shape[1:3] != (size, size):
                raise ShapeMismatch(f"{name}: expected (N,{size},{size},C), got {x.shape}")
            if name != "masks":
                x = self.children[name].forward(x, train)
            feats.append(x.reshape(x.shape[0], -1))
        n = feats[0].shape[0]
        if any(f.shape[0] != n for f in feats):
            raise ShapeMismatch("streams disagree on batch size")
        h = np.concatenate(feats, axis=1)
        h = self.children["fc1"].forward(h, train)
        h = self.children["relu"].forward(h, train)
        h = self.children["fc2"].forward(h, train)
        self._logp = ops.log_softmax(h)
        self._shapes = [(name, f.shape[1]) for name, f in zip(self.config.streams, feats)]
        return self._logp

    def backward(self, dlogp):
        d = ops.log_softmax_backward(dlogp, self._logp)
        d = self.children["fc2"].backward(d)
        d = self.children["relu"].backward(d)
        d = self.children["fc1"].backward(d)
        start = 0
        for name, width in self._shapes:
            if name != "masks":
                seg = d[:, start : start + width]
                layer = self.children[name]
                layer.backward(seg.reshape(self._stream_out_shape(name, d.shape[0])))
            start += width

    def _stream_out_shape(self, name, n):
        size, c = stream_output_shape(name, self.config)
        return (n, size, size, c)

    def loss_and_grad(self, inputs, labels, train=True):
        logp = self.forward(inputs, train)
        loss, dlogp = ops.nll_loss(logp, labels)
        self.backward(dlogp)
        return loss, logp

    # parameter access ---------------------------------------------------

    def named_params(self):
        for prefix, layer in named_layers(self):
            for key, arr in layer.params.items():
                yield f"{prefix}.{key}", arr

    def named_grads(self):
        for prefix, layer in named_layers(self):
            for key in layer.params:
                yield f"{prefix}.{key}", layer.grads.get(key)

    def named_buffers(self):
        for prefix, layer in named_layers(self):
            for key, arr in layer.buffers.items():
                yield f"{prefix}.{key}", arr

    def state(self):
        """Ordered name -> array mapping of parameters then buffers."""
        out = dict(self.named_params())
        out.update(self.named_buffers())
        return out

    def load_state(self, state):
        for name, arr in self.state().items():
            arr[...] = state[name]

    def num_params(self):
        return sum(a.size for _, a in self.named_params())

    def astype(self, dtype):
        """A copy of this model with every array cast to ``dtype``."""
        other = OrdinalNet(self.config, dtype)
        other.load_state(self.state())
        return other


def build_model(config):
    return OrdinalNet(config)


def forward(model, inputs, mode="eval"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model.forward(inputs, train=mode == "train")
