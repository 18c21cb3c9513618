"""Desk-scale encoder / ASPP / decoder segmenter with a TAFT insertion point.

The encoder emits a stride-4 low-level feature and a stride-16 high-level
feature. Only the high-level feature is transformed; the ASPP block and the
decoder (both in the ``decoder`` parameter group) turn the transformed
feature plus the low-level skip into 2-channel logits at input resolution.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .core import ReferenceSet
from .errors import CheckpointError, DimensionError

LOW_STRIDE = 4
HIGH_STRIDE = 16

MAGIC = b"TAFT"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    high_channels: int = 64
    aspp_rates: list[int] = field(default_factory=lambda: [1, 2, 4, 6])
    aspp_branch_channels: int = 32
    aspp_channels: int = 64
    low_proj_channels: int = 16
    decoder_channels: int = 32

    @property
    def low_channels(self) -> int:
        return self.stage_channels[1]

    @classmethod
    def tiny(cls) -> ModelConfig:
        """Small enough for exhaustive finite-difference checks (D = 8)."""
        return cls(stage_channels=[4, 6, 8], high_channels=8, aspp_rates=[1, 2],
                   aspp_branch_channels=4, aspp_channels=8, low_proj_channels=4, decoder_channels=6)


@dataclass
class FeaturePair:
    low_level: Tensor
    high_level: Tensor


class ConvLayer:
    """3x3 or 1x1 convolution with bias; He-normal weights, zero bias."""

    def __init__(self, name: str, c_in: int, c_out: int, k: int, group: str, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight = Parameter(rng.standard_normal((c_out, c_in, k, k)) * std, group, f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), group, f"{name}.bias")
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k // 2)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, dilation=self.dilation,
                         padding=self.padding)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class SegNet:
    """Encoder f, decoder g (with ASPP) and the TAFT reference vectors."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        c1, c2, c3 = cfg.stage_channels
        d = cfg.high_channels
        self.encoder = [
            ConvLayer("enc.s1.down", 3, c1, 3, "encoder", rng, stride=2),
            ConvLayer("enc.s1.conv", c1, c1, 3, "encoder", rng),
            ConvLayer("enc.s2.down", c1, c2, 3, "encoder", rng, stride=2),
            ConvLayer("enc.s2.conv", c2, c2, 3, "encoder", rng),
            ConvLayer("enc.s3.down", c2, c3, 3, "encoder", rng, stride=2),
            ConvLayer("enc.s3.conv", c3, c3, 3, "encoder", rng),
            ConvLayer("enc.s4.down", c3, d, 3, "encoder", rng, stride=2),
            ConvLayer("enc.s4.conv", d, d, 3, "encoder", rng),
        ]
        b = cfg.aspp_branch_channels
        self.aspp_pointwise = ConvLayer("aspp.b1x1", d, b, 1, "decoder", rng)
        self.aspp_branches = [ConvLayer(f"aspp.r{r}", d, b, 3, "decoder", rng, dilation=r)
                              for r in cfg.aspp_rates]
        self.aspp_fuse = ConvLayer("aspp.fuse", b * (1 + len(cfg.aspp_rates)), cfg.aspp_channels, 1,
                                   "decoder", rng)
        self.low_proj = ConvLayer("dec.low_proj", cfg.low_channels, cfg.low_proj_channels, 1, "decoder", rng)
        self.dec_conv1 = ConvLayer("dec.conv1", cfg.aspp_channels + cfg.low_proj_channels,
                                   cfg.decoder_channels, 3, "decoder", rng)
        self.dec_conv2 = ConvLayer("dec.conv2", cfg.decoder_channels, cfg.decoder_channels, 3, "decoder", rng)
        self.classifier = ConvLayer("dec.classifier", cfg.decoder_channels, 2, 1, "decoder", rng)
        self.refs = ReferenceSet.random(d, rng)
        self.init_rng = rng

    # -- parameter collections

    def encoder_params(self) -> list[Parameter]:
        return [p for layer in self.encoder for p in layer.parameters()]

    def aspp_params(self) -> list[Parameter]:
        layers = [self.aspp_pointwise, *self.aspp_branches, self.aspp_fuse]
        return [p for layer in layers for p in layer.parameters()]

    def decoder_params(self) -> list[Parameter]:
        layers = [self.low_proj, self.dec_conv1, self.dec_conv2, self.classifier]
        return [p for layer in layers for p in layer.parameters()]

    def parameters(self) -> list[Parameter]:
        return self.encoder_params() + self.aspp_params() + self.decoder_params() + self.refs.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def cast(self) -> None:
        for p in self.parameters():
            p.cast()

    # -- forward pieces

    def encode(self, image: Tensor) -> FeaturePair:
        h, w = image.shape[-2:]
        if h % HIGH_STRIDE or w % HIGH_STRIDE:
            raise DimensionError(f"input {h}x{w} is not a multiple of {HIGH_STRIDE}")
        x = image
        low = None
        for i, layer in enumerate(self.encoder):
            x = ad.relu(layer(x))
            if i == 3:
                low = x
        return FeaturePair(low_level=low, high_level=x)

    def aspp(self, h_a: Tensor) -> Tensor:
        branches = [ad.relu(self.aspp_pointwise(h_a))]
        branches += [ad.relu(conv(h_a)) for conv in self.aspp_branches]
        return self.aspp_fuse(ad.concat_channels(branches))

    def decode(self, aspp_out: Tensor, low_level: Tensor, out_size: tuple[int, int] | None = None) -> Tensor:
        lh, lw = low_level.shape[-2:]
        ah, aw = aspp_out.shape[-2:]
        ratio = HIGH_STRIDE // LOW_STRIDE
        if (lh, lw) != (ah * ratio, aw * ratio):
            raise DimensionError(f"low-level grid {lh}x{lw} is not 4x the ASPP grid {ah}x{aw}")
        up = ad.bilinear_resize(aspp_out, lh, lw)
        low = ad.relu(self.low_proj(low_level))
        x = ad.concat_channels([up, low])
        x = ad.relu(self.dec_conv1(x))
        x = ad.relu(self.dec_conv2(x))
        logits = self.classifier(x)
        oh, ow = out_size if out_size is not None else (lh * LOW_STRIDE, lw * LOW_STRIDE)
        return ad.bilinear_resize(logits, oh, ow)

    def head(self, h_a: Tensor, low_level: Tensor) -> Tensor:
        """Decoder g applied to the task-agnostic feature."""
        return self.decode(self.aspp(h_a), low_level)


def encoder_forward(image: Tensor, model: SegNet) -> FeaturePair:
    return model.encode(image)


def aspp_forward(h_a: Tensor, model: SegNet) -> Tensor:
    return model.aspp(h_a)


def decoder_forward(aspp_out: Tensor, low_level: Tensor, model: SegNet) -> Tensor:
    return model.decode(aspp_out, low_level)


def predict_mask(logits) -> np.ndarray:
    """Pixel-wise argmax over (fg, bg) channels; ties go to background."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (data[..., 0, :, :] > data[..., 1, :, :]).astype(np.uint8)


# ------------------------------------------------------------------ checkpoints


@dataclass
class CheckpointData:
    model: SegNet
    episode_index: int
    rng_state: dict


def _write_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path: str | Path, model: SegNet, episode_index: int, rng_state: dict) -> None:
    """Serialize parameters, Adam moments, RNG state and episode counter.

    Layout (little-endian): magic ``TAFT``, u32 version, u32 manifest length,
    UTF-8 JSON manifest, f32 values in manifest order, f32 Adam first moments,
    f32 Adam second moments, u32 length + JSON RNG state, u64 episode counter.
    """
    params = model.parameters()
    manifest = {
        "model": asdict(model.config),
        "params": [{"name": p.name, "group": p.group, "shape": list(p.shape), "step": p.step_count}
                   for p in params],
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    rng_bytes = json.dumps(rng_state, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(manifest_bytes)))
    buf.write(manifest_bytes)
    for p in params:
        _write_array(buf, p.data)
    for p in params:
        _write_array(buf, p.adam_m)
    for p in params:
        _write_array(buf, p.adam_v)
    buf.write(struct.pack("<I", len(rng_bytes)))
    buf.write(rng_bytes)
    buf.write(struct.pack("<Q", episode_index))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> CheckpointData:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a TAFT checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        (mlen,) = struct.unpack_from("<I", raw, 8)
        offset = 12
        manifest = json.loads(raw[offset:offset + mlen].decode("utf-8"))
        offset += mlen
        model = SegNet(ModelConfig(**manifest["model"]))
        params = model.parameters()
        entries = manifest["params"]
        if [e["name"] for e in entries] != [p.name for p in params]:
            raise CheckpointError(f"{path}: parameter manifest does not match the model layout")

        def read(shape):
            nonlocal offset
            count = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
            offset += 4 * count
            return arr.astype(ad.get_dtype())

        for p, e in zip(params, entries):
            if list(p.shape) != e["shape"] or p.group != e["group"]:
                raise CheckpointError(f"{path}: entry {e['name']} has shape/group {e['shape']}/{e['group']}")
            p.data = read(p.shape)
            p.step_count = int(e["step"])
        for p in params:
            p.adam_m = read(p.shape)
        for p in params:
            p.adam_v = read(p.shape)
        (rlen,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        rng_state = json.loads(raw[offset:offset + rlen].decode("utf-8"))
        offset += rlen
        (episode_index,) = struct.unpack_from("<Q", raw, offset)
    except (struct.error, ValueError, KeyError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or malformed checkpoint ({exc})") from exc
    return CheckpointData(model=model, episode_index=int(episode_index), rng_state=rng_state)
