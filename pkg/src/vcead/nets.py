"""Network architectures: MobileNet-style encoder, mirrored decoder, heads.

Layer composition rules (the checkpoint format and the parameter-count
tests both depend on these staying exact):

* stem: conv k x k stride s, no bias, then per-channel affine, then act.
* inverted-residual block: 1x1 expand conv (skipped when the expanded
  width equals the input width) + affine + act; depthwise k x k + affine
  + act; optional squeeze-excite; 1x1 project conv + affine (no act).
  Convs inside blocks carry no bias (the affine beta plays that role).
  Expanded width = round(in_channels * expansion_ratio). Squeeze-excite
  reduces to max(1, expanded // 4) and uses biased dense layers. The
  residual shortcut exists iff stride == 1 and in == out channels.
* latent: 1x1 conv to latent_channels, no bias, affine, hardswish.
* decoder: one stage per stride-2 step of the encoder, each = nearest 2x
  upsample, depthwise 3x3 (no bias) + affine + relu, 1x1 conv (no bias)
  + affine + relu. Stage widths walk the encoder's pre-downsample widths
  in reverse, with the last floored at 8. A final biased 1x1 conv +
  sigmoid maps to image channels.
* classifier head: global average pool, dense(latent -> 2) with bias.
* semi head: global average pool, dense(latent -> 64) + relu,
  dense(64 -> 2), biases on both.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, mul, relu


# ---------------------------------------------------------------------------
# module system


class Module:
    """Container for parameters and submodules; attribute order is layer order."""

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out: List[Tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def count_parameters(module: Module) -> int:
    """Exact number of learnable scalars."""
    return int(sum(p.size for p in module.parameters()))


def _he_conv(rng: np.random.Generator, shape: Tuple[int, ...], dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    std = math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


def _he_dense(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    std = math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, bias: bool = False, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.weight = Tensor(_he_conv(rng, (out_channels, in_channels, kernel, kernel),
                                      dtype), requires_grad=True, dtype=dtype)
        if bias:
            self.bias = Tensor(np.zeros(out_channels, dtype=dtype),
                               requires_grad=True, dtype=dtype)
        self._bias = bias
        self.stride = stride
        self.padding = (kernel - 1) // 2

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias if self._bias else None,
                          stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int, stride: int = 1,
                 bias: bool = False, *, rng: np.random.Generator,
                 dtype=np.float32):
        self.weight = Tensor(_he_conv(rng, (channels, 1, kernel, kernel), dtype),
                             requires_grad=True, dtype=dtype)
        if bias:
            self.bias = Tensor(np.zeros(channels, dtype=dtype),
                               requires_grad=True, dtype=dtype)
        self._bias = bias
        self.stride = stride
        self.padding = (kernel - 1) // 2

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight,
                                    self.bias if self._bias else None,
                                    stride=self.stride, padding=self.padding)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.weight = Tensor(_he_dense(rng, in_features, out_features, dtype),
                             requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype),
                           requires_grad=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)


class ChannelAffine(Module):
    """Per-channel scale and shift standing in for inference-mode batchnorm."""

    def __init__(self, channels: int, *, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True,
                            dtype=dtype)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True,
                           dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm_inference_affine(x, self.gamma, self.beta)


_ACTIVATIONS = {"relu": ops.relu, "hardswish": ops.hardswish, "sigmoid": ops.sigmoid}


class SqueezeExcite(Module):
    """pool -> dense -> relu -> dense -> sigmoid -> channel scale."""

    def __init__(self, channels: int, *, rng: np.random.Generator, dtype=np.float32):
        reduced = max(1, channels // 4)
        self.fc1 = Dense(channels, reduced, rng=rng, dtype=dtype)
        self.fc2 = Dense(reduced, channels, rng=rng, dtype=dtype)
        self._channels = channels

    def forward(self, x: Tensor) -> Tensor:
        s = ops.global_avg_pool(x)
        s = ops.sigmoid(self.fc2(relu(self.fc1(s))))
        n = x.shape[0]
        return mul(x, s.reshape(n, self._channels, 1, 1))


# ---------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class BlockSpec:
    expansion_ratio: float
    out_channels: int
    kernel: int = 3
    stride: int = 1
    use_squeeze_excite: bool = False
    activation: str = "relu"

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"BlockSpec: stride must be 1 or 2, got {self.stride}")
        if self.expansion_ratio < 1:
            raise ValueError(
                f"BlockSpec: expansion_ratio must be >= 1, got {self.expansion_ratio}")
        if self.out_channels < 1:
            raise ValueError(
                f"BlockSpec: out_channels must be >= 1, got {self.out_channels}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"BlockSpec: unknown activation {self.activation!r}")

    def expanded(self, in_channels: int) -> int:
        return int(round(in_channels * self.expansion_ratio))


@dataclass(frozen=True)
class EncoderPreset:
    name: str
    stem_channels: int
    stem_kernel: int
    stem_stride: int
    stem_activation: str
    blocks: Tuple[BlockSpec, ...]
    latent_channels: int

    @property
    def downsample_stages(self) -> int:
        d = 1 if self.stem_stride == 2 else 0
        return d + sum(1 for b in self.blocks if b.stride == 2)

    @property
    def total_stride(self) -> int:
        return 2 ** self.downsample_stages

    def channel_plan(self, in_channels: int) -> List[int]:
        """Channel width after the stem and after each block."""
        widths = [self.stem_channels]
        for b in self.blocks:
            widths.append(b.out_channels)
        return widths

    def pre_downsample_widths(self, in_channels: int) -> List[int]:
        """Channel width entering each stride-2 stage, in encoder order."""
        widths = []
        if self.stem_stride == 2:
            widths.append(in_channels)
        current = self.stem_channels
        for b in self.blocks:
            if b.stride == 2:
                widths.append(current)
            current = b.out_channels
        return widths

    def latent_shape(self, in_shape: Tuple[int, int, int]) -> Tuple[int, int, int]:
        c, h, w = in_shape
        s = self.total_stride
        if h % s or w % s:
            raise ShapeError(
                f"preset {self.name!r}: input {h}x{w} must be divisible by "
                f"the total stride {s}")
        return (self.latent_channels, h // s, w // s)


def _mobilenet_small_blocks() -> Tuple[BlockSpec, ...]:
    # canonical MobileNetV3-Small stage table; expansion ratios reproduce
    # the published expanded widths via round(in * ratio)
    rows = [
        # (expanded, out, kernel, stride, se, act), input width in comments
        (16, 16, 3, 2, True, "relu"),       # in 16
        (72, 24, 3, 2, False, "relu"),      # in 16
        (88, 24, 3, 1, False, "relu"),      # in 24
        (96, 40, 5, 2, True, "hardswish"),  # in 24
        (240, 40, 5, 1, True, "hardswish"),
        (240, 40, 5, 1, True, "hardswish"),
        (120, 48, 5, 1, True, "hardswish"),
        (144, 48, 5, 1, True, "hardswish"),
        (288, 96, 5, 2, True, "hardswish"),
        (576, 96, 5, 1, True, "hardswish"),
        (576, 96, 5, 1, True, "hardswish"),
    ]
    blocks = []
    in_c = 16
    for expanded, out, k, s, se, act in rows:
        blocks.append(BlockSpec(expansion_ratio=expanded / in_c, out_channels=out,
                                kernel=k, stride=s, use_squeeze_excite=se,
                                activation=act))
        in_c = out
    return tuple(blocks)


PRESETS = {
    "identity_width": EncoderPreset(
        name="identity_width",
        stem_channels=8, stem_kernel=3, stem_stride=1, stem_activation="relu",
        blocks=(BlockSpec(1.0, 8, 3, 1, False, "relu"),),
        latent_channels=8,
    ),
    "stem_only": EncoderPreset(
        name="stem_only",
        stem_channels=4, stem_kernel=3, stem_stride=2, stem_activation="hardswish",
        blocks=(),
        latent_channels=4,
    ),
    "desk_tiny": EncoderPreset(
        name="desk_tiny",
        stem_channels=8, stem_kernel=3, stem_stride=1, stem_activation="hardswish",
        blocks=(
            BlockSpec(2.0, 16, 3, 2, False, "relu"),
            BlockSpec(2.0, 24, 3, 2, True, "hardswish"),
            BlockSpec(2.0, 32, 3, 2, False, "hardswish"),
        ),
        latent_channels=32,
    ),
    "desk_small": EncoderPreset(
        name="desk_small",
        stem_channels=16, stem_kernel=3, stem_stride=2, stem_activation="hardswish",
        blocks=(
            BlockSpec(1.0, 16, 3, 1, True, "relu"),
            BlockSpec(4.0, 24, 3, 2, False, "relu"),
            BlockSpec(3.0, 24, 3, 1, False, "relu"),
            BlockSpec(4.0, 40, 5, 2, True, "hardswish"),
            BlockSpec(3.0, 48, 5, 1, True, "hardswish"),
        ),
        latent_channels=96,
    ),
    "mobilenet_small_full": EncoderPreset(
        name="mobilenet_small_full",
        stem_channels=16, stem_kernel=3, stem_stride=2, stem_activation="hardswish",
        blocks=_mobilenet_small_blocks(),
        latent_channels=576,
    ),
}


def get_preset(name: str) -> EncoderPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# networks


class InvertedResidual(Module):
    def __init__(self, in_channels: int, spec: BlockSpec, *,
                 rng: np.random.Generator, dtype=np.float32):
        expanded = spec.expanded(in_channels)
        self._expand = expanded != in_channels
        if self._expand:
            self.expand_conv = Conv2d(in_channels, expanded, 1, rng=rng, dtype=dtype)
            self.expand_affine = ChannelAffine(expanded, dtype=dtype)
        self.depthwise = DepthwiseConv2d(expanded, spec.kernel, spec.stride,
                                         rng=rng, dtype=dtype)
        self.depthwise_affine = ChannelAffine(expanded, dtype=dtype)
        if spec.use_squeeze_excite:
            self.se = SqueezeExcite(expanded, rng=rng, dtype=dtype)
        self.project_conv = Conv2d(expanded, spec.out_channels, 1, rng=rng, dtype=dtype)
        self.project_affine = ChannelAffine(spec.out_channels, dtype=dtype)
        self._use_se = spec.use_squeeze_excite
        self._act = _ACTIVATIONS[spec.activation]
        self._residual = spec.stride == 1 and in_channels == spec.out_channels

    def forward(self, x: Tensor) -> Tensor:
        h = x
        if self._expand:
            h = self._act(self.expand_affine(self.expand_conv(h)))
        h = self._act(self.depthwise_affine(self.depthwise(h)))
        if self._use_se:
            h = self.se(h)
        h = self.project_affine(self.project_conv(h))
        if self._residual:
            h = ops.add(x, h)
        return h


class Encoder(Module):
    def __init__(self, preset: EncoderPreset, in_channels: int, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.stem_conv = Conv2d(in_channels, preset.stem_channels,
                                preset.stem_kernel, preset.stem_stride,
                                rng=rng, dtype=dtype)
        self.stem_affine = ChannelAffine(preset.stem_channels, dtype=dtype)
        blocks = []
        current = preset.stem_channels
        for spec in preset.blocks:
            blocks.append(InvertedResidual(current, spec, rng=rng, dtype=dtype))
            current = spec.out_channels
        self.blocks = blocks
        self.latent_conv = Conv2d(current, preset.latent_channels, 1,
                                  rng=rng, dtype=dtype)
        self.latent_affine = ChannelAffine(preset.latent_channels, dtype=dtype)
        self._stem_act = _ACTIVATIONS[preset.stem_activation]
        self._preset = preset
        self._in_channels = in_channels

    @property
    def preset(self) -> EncoderPreset:
        return self._preset

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self._in_channels:
            raise ShapeError(
                f"encoder {self._preset.name!r}: expected N x {self._in_channels} "
                f"x H x W input, got {x.shape}")
        s = self._preset.total_stride
        if x.shape[2] % s or x.shape[3] % s:
            raise ShapeError(
                f"encoder {self._preset.name!r}: spatial size {x.shape[2]}x"
                f"{x.shape[3]} must be divisible by the total stride {s}")
        h = self._stem_act(self.stem_affine(self.stem_conv(x)))
        for block in self.blocks:
            h = block(h)
        return ops.hardswish(self.latent_affine(self.latent_conv(h)))


class Decoder(Module):
    """Inverts the encoder's spatial reduction; output in [0, 1] via sigmoid."""

    def __init__(self, preset: EncoderPreset, out_channels: int, *,
                 rng: np.random.Generator, dtype=np.float32):
        widths = [max(w, 8) if i == preset.downsample_stages - 1 else w
                  for i, w in enumerate(
                      reversed(preset.pre_downsample_widths(out_channels)))]
        stages = []
        current = preset.latent_channels
        for w in widths:
            stages.append(_DecoderStage(current, w, rng=rng, dtype=dtype))
            current = w
        self.stages = stages
        self.final_conv = Conv2d(current, out_channels, 1, bias=True,
                                 rng=rng, dtype=dtype)
        self._preset = preset

    def forward(self, z: Tensor) -> Tensor:
        h = z
        for stage in self.stages:
            h = stage(h)
        return ops.sigmoid(self.final_conv(h))


class _DecoderStage(Module):
    def __init__(self, in_channels: int, out_channels: int, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.depthwise = DepthwiseConv2d(in_channels, 3, 1, rng=rng, dtype=dtype)
        self.depthwise_affine = ChannelAffine(in_channels, dtype=dtype)
        self.pointwise = Conv2d(in_channels, out_channels, 1, rng=rng, dtype=dtype)
        self.pointwise_affine = ChannelAffine(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = ops.upsample_nearest(x, 2)
        h = relu(self.depthwise_affine(self.depthwise(h)))
        return relu(self.pointwise_affine(self.pointwise(h)))


class ClassifierHead(Module):
    def __init__(self, latent_channels: int, *, rng: np.random.Generator,
                 dtype=np.float32):
        self.fc = Dense(latent_channels, 2, rng=rng, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        return self.fc(ops.global_avg_pool(z))


class SemiHead(Module):
    def __init__(self, latent_channels: int, hidden: int = 64, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Dense(latent_channels, hidden, rng=rng, dtype=dtype)
        self.fc2 = Dense(hidden, 2, rng=rng, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(ops.global_avg_pool(z))))


class Classifier(Module):
    kind = "classifier"

    def __init__(self, preset: EncoderPreset, in_channels: int = 3, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.encoder = Encoder(preset, in_channels, rng=rng, dtype=dtype)
        self.head = ClassifierHead(preset.latent_channels, rng=rng, dtype=dtype)
        self.preset_name = preset.name
        self.in_channels = in_channels
        self.trained = False

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.encoder(x))


class Autoencoder(Module):
    kind = "autoencoder"

    def __init__(self, preset: EncoderPreset, in_channels: int = 3, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.encoder = Encoder(preset, in_channels, rng=rng, dtype=dtype)
        self.decoder = Decoder(preset, in_channels, rng=rng, dtype=dtype)
        self.preset_name = preset.name
        self.in_channels = in_channels
        self.trained = False

    def forward(self, x: Tensor) -> Tensor:
        return self.decoder(self.encoder(x))


class SemiSupervisedNet(Module):
    kind = "semi"

    def __init__(self, preset: EncoderPreset, in_channels: int = 3, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.encoder = Encoder(preset, in_channels, rng=rng, dtype=dtype)
        self.decoder = Decoder(preset, in_channels, rng=rng, dtype=dtype)
        self.head = SemiHead(preset.latent_channels, rng=rng, dtype=dtype)
        self.preset_name = preset.name
        self.in_channels = in_channels
        self.trained = False

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        z = self.encoder(x)
        return self.decoder(z), self.head(z)


_LEARNER_TYPES = {
    "classifier": Classifier,
    "autoencoder": Autoencoder,
    "semi": SemiSupervisedNet,
}


@dataclass
class ModelBundle:
    """The three base learners, each with its own weights over one preset."""

    preset_name: str
    in_channels: int
    classifier: Classifier
    autoencoder: Autoencoder
    semi: SemiSupervisedNet

    def learners(self):
        return (("classifier", self.classifier), ("autoencoder", self.autoencoder),
                ("semi", self.semi))

    def all_trained(self) -> bool:
        return all(net.trained for _, net in self.learners())


def build_bundle(preset_name: str, in_channels: int = 3, seed: int = 0,
                 dtype=np.float32) -> ModelBundle:
    preset = get_preset(preset_name)
    rng = np.random.default_rng(seed)
    return ModelBundle(
        preset_name=preset_name,
        in_channels=in_channels,
        classifier=Classifier(preset, in_channels, rng=rng, dtype=dtype),
        autoencoder=Autoencoder(preset, in_channels, rng=rng, dtype=dtype),
        semi=SemiSupervisedNet(preset, in_channels, rng=rng, dtype=dtype),
    )


def _check_images(net, images) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    if x.ndim == 3:
        x = Tensor(x.data[None], dtype=x.dtype)
    if x.ndim != 4 or x.shape[1] != net.in_channels:
        raise ShapeError(
            f"{net.kind}: expected N x {net.in_channels} x H x W images, "
            f"got {x.shape}")
    return x


def classifier_forward(bundle: ModelBundle, images) -> Tensor:
    """Logits (N, 2): column 0 normal, column 1 anomaly."""
    return bundle.classifier(_check_images(bundle.classifier, images))


def ae_forward(bundle: ModelBundle, images) -> Tensor:
    """Reconstruction with the same shape as the input, values in [0, 1]."""
    return bundle.autoencoder(_check_images(bundle.autoencoder, images))


def semi_forward(bundle: ModelBundle, images) -> Tensor:
    """Logits (N, 2) from the semi-supervised head."""
    _, logits = bundle.semi(_check_images(bundle.semi, images))
    return logits


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "vcead-checkpoint/1"


def save_checkpoint(path, network) -> None:
    """Write a self-describing JSON checkpoint; round-trips bit-exactly."""
    entries = []
    for name, p in network.named_parameters():
        entries.append({
            "name": name,
            "shape": list(p.shape),
            "dtype": str(p.data.dtype),
            "data": base64.b64encode(np.ascontiguousarray(p.data).tobytes()).decode(),
        })
    doc = {
        "format": CHECKPOINT_FORMAT,
        "kind": network.kind,
        "preset": network.preset_name,
        "in_channels": network.in_channels,
        "trained": bool(network.trained),
        "params": entries,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Rebuild a learner from a checkpoint written by :func:`save_checkpoint`."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    cls = _LEARNER_TYPES[doc["kind"]]
    first_dtype = np.dtype(doc["params"][0]["dtype"]) if doc["params"] else np.float32
    net = cls(get_preset(doc["preset"]), doc["in_channels"],
              rng=np.random.default_rng(0), dtype=first_dtype)
    stored = {e["name"]: e for e in doc["params"]}
    for name, p in net.named_parameters():
        if name not in stored:
            raise ValueError(f"{path}: checkpoint missing parameter {name!r}")
        entry = stored.pop(name)
        arr = np.frombuffer(base64.b64decode(entry["data"]),
                            dtype=np.dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"]).copy()
        if tuple(arr.shape) != p.shape:
            raise ValueError(
                f"{path}: parameter {name!r} shape {arr.shape} != expected {p.shape}")
        p.data = arr
    if stored:
        raise ValueError(f"{path}: unexpected parameters {sorted(stored)}")
    net.trained = bool(doc.get("trained", False))
    return net
