"""Encoder-decoder change network over a 6-channel (before RGB, after RGB) input.

Checkpoint layout (``.sdck``), all integers little-endian::

    b"SDCK" | u32 version (=1) | u32 n | n bytes UTF-8 JSON config
    | float32 blobs, one per tensor, in ``UNetModel.state_arrays()`` order

Per conv the blobs are weight then bias; per batch norm gamma, beta,
running_mean, running_var.  The encoder levels come first (shallow to
deep), then the decoder levels (deep to shallow), then the 1x1 head.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .labels import ChangeMaps, ImagePair
from .tensor import (DTYPE, BatchNorm2d, Conv2d, ConvParams, ConvTranspose2d,
                     Layer, ReLU, Sequential, ShapeError, Sigmoid)

MAGIC = b"SDCK"
VERSION = 1
FULL_SIZE = (256, 512)

PRESETS = {
    "A": (16, 32, 64, 128, 256),
    "B": (16, 32, 64),
    "C": (16, 32, 64, 128),
}


class CheckpointError(ValueError):
    pass


@dataclass
class UNetConfig:
    encoder_widths: tuple[int, ...]
    input_size: tuple[int, int] = FULL_SIZE
    use_skip: bool = True
    input_channels: int = 6
    output_channels: int = 4
    preset: str | None = None

    def __post_init__(self):
        self.encoder_widths = tuple(int(c) for c in self.encoder_widths)
        self.input_size = tuple(int(s) for s in self.input_size)
        widths = self.encoder_widths
        if not widths or any(c < 1 for c in widths):
            raise ValueError(f"encoder widths must be non-empty and positive, got {widths}")
        if any(a >= b for a, b in zip(widths, widths[1:])):
            raise ValueError(f"encoder widths must be strictly increasing, got {widths}")
        factor = 2 ** len(widths)
        h, w = self.input_size
        if h < 1 or w < 1 or h % factor or w % factor:
            raise ValueError(f"input size {h}x{w} must be divisible by 2^{len(widths)} = {factor} "
                             f"for {len(widths)} encoder levels")

    @property
    def depth(self):
        return len(self.encoder_widths)

    def to_dict(self):
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["input_size"] = list(self.input_size)
        return d


def preset(name: str, input_size=FULL_SIZE, **kw) -> UNetConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r} (expected one of {', '.join(PRESETS)})")
    return UNetConfig(PRESETS[name], input_size=input_size, preset=name, **kw)


def conv_block(c_in, c_out, stride, rng):
    return Sequential(Conv2d(c_in, c_out, 3, stride, 1, rng), BatchNorm2d(c_out), ReLU())


class UNetModel(Layer):
    """f: per level conv-BN-ReLU then stride-2 conv-BN-ReLU.

    g mirrors it: stride-2 transposed conv, concat with the encoder feature
    of the same resolution, conv-BN-ReLU.  A 1x1 conv and a sigmoid give the
    four change maps.
    """

    def __init__(self, config: UNetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        widths = config.encoder_widths
        self.encoder = []
        c = config.input_channels
        for w in widths:
            self.encoder.append((conv_block(c, w, 1, rng), conv_block(w, w, 2, rng)))
            c = w
        self.decoder = []
        for w in reversed(widths):
            up = ConvTranspose2d(c, w, 2, rng)
            merge = conv_block(2 * w if config.use_skip else w, w, 1, rng)
            self.decoder.append((up, merge))
            c = w
        self.head = Sequential(Conv2d(c, config.output_channels, 1, 1, 0, rng), Sigmoid())
        self.training = True

    def _layers(self):
        for a, down in self.encoder:
            yield a
            yield down
        for up, merge in self.decoder:
            yield up
            yield merge
        yield self.head

    def param_groups(self):
        return [g for layer in self._layers() for g in layer.param_groups()]

    def train(self, mode=True):
        self.training = mode
        for layer in self._layers():
            layer.train(mode)
        return self

    def forward(self, x):
        x = np.asarray(x)
        cfg = self.config
        expected = (cfg.input_channels, *cfg.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError("model input", x.shape, ("n", *expected))
        skips = []
        h = x
        for a, down in self.encoder:
            h = a.forward(h)
            skips.append(h)
            h = down.forward(h)
        for (up, merge), skip in zip(self.decoder, reversed(skips)):
            h = up.forward(h)
            if cfg.use_skip:
                if h.shape[2:] != skip.shape[2:]:
                    raise ShapeError("skip connection spatial mismatch", h.shape, skip.shape)
                h = np.concatenate([h, skip], axis=1)
            h = merge.forward(h)
        return self.head.forward(h)

    def backward(self, grad_out):
        g = self.head.backward(grad_out)
        skip_grads = []
        for up, merge in reversed(self.decoder):
            g = merge.backward(g)
            if self.config.use_skip:
                half = g.shape[1] // 2
                skip_grads.append(g[:, half:])
                g = g[:, :half]
            g = up.backward(g)
        for level in reversed(range(len(self.encoder))):
            a, down = self.encoder[level]
            g = down.backward(g)
            if self.config.use_skip:
                g = g + skip_grads[level]
            g = a.backward(g)
        return g

    def state_arrays(self):
        """Every persistent array in checkpoint order."""
        for group in self.param_groups():
            if isinstance(group, ConvParams):
                yield from (group.weight, group.bias)
            else:
                yield from (group.gamma, group.beta, group.running_mean, group.running_var)


def build(config: UNetConfig, seed: int = 0) -> UNetModel:
    return UNetModel(config, seed)


def param_count(model: UNetModel) -> int:
    """Trainable scalars (conv weights/biases, batch-norm gamma/beta)."""
    return sum(v.size for v, _ in model.parameters())


def pair_to_input(pairs) -> np.ndarray:
    if isinstance(pairs, ImagePair):
        pairs = [pairs]
    x = np.stack([np.concatenate([p.before, p.after], axis=-1) for p in pairs])
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=DTYPE)


def maps_to_target(maps) -> np.ndarray:
    if isinstance(maps, ChangeMaps):
        maps = [maps]
    return np.stack([m.stack() for m in maps]).astype(DTYPE)


def forward(model: UNetModel, pairs) -> np.ndarray:
    """Eval-mode scores ``(n, 4, h, w)`` for one pair or a list of pairs."""
    model.eval()
    return model.forward(pair_to_input(pairs))


def binarize(scores: np.ndarray, threshold: float) -> list[ChangeMaps]:
    hit = (np.asarray(scores) >= threshold).astype(np.uint8)
    return [ChangeMaps.from_masks(s[0], s[1], s[2]) for s in hit]


def predict(model: UNetModel, pair, threshold: float = 0.5):
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    maps = binarize(forward(model, pair), threshold)
    return maps[0] if isinstance(pair, ImagePair) else maps


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: UNetModel, path) -> None:
    header = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for arr in model.state_arrays():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, expect_preset: str | None = None) -> UNetModel:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    version, n = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 12 + n:
        raise CheckpointError(f"{path}: truncated config block")
    try:
        cfg = UNetConfig(**json.loads(data[12:12 + n].decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"{path}: invalid config block: {e}") from None
    if expect_preset is not None:
        expected = preset(expect_preset)
        if cfg.encoder_widths != expected.encoder_widths:
            raise CheckpointError(f"{path}: checkpoint widths {cfg.encoder_widths} do not match "
                                  f"preset {expect_preset} {expected.encoder_widths}")
    model = build(cfg)
    offset = 12 + n
    for arr in model.state_arrays():
        nbytes = arr.size * 4
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated parameter data")
        arr[...] = np.frombuffer(data, dtype="<f4", count=arr.size, offset=offset).reshape(arr.shape)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return model
