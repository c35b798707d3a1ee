"""VGG-style convolutional classifier exposing pre-pooling spatial features."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"ATDM"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    """``block_channels`` lists one entry per conv-relu-pool block; an entry may be a
    list of widths for several 3×3 convs before the block's pool (VGG16 layout)."""

    input_channels: int = 3
    block_channels: list = field(default_factory=lambda: [16, 32])
    num_classes: int = 4
    input_size: int = 32

    def blocks(self) -> list[list[int]]:
        return [list(b) if isinstance(b, (list, tuple)) else [b] for b in self.block_channels]

    def conv_widths(self) -> list[int]:
        return [c for b in self.blocks() for c in b]

    def validate(self) -> None:
        if self.input_channels < 1:
            raise ConfigError("input_channels must be positive")
        if not self.block_channels or any(not b for b in self.blocks()) or any(c < 1 for c in self.conv_widths()):
            raise ConfigError("block_channels must be a non-empty list of positive ints")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size < 1 or self.input_size % (2 ** len(self.block_channels)):
            raise ConfigError(
                f"input_size {self.input_size} not divisible by 2^{len(self.block_channels)}"
            )

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** len(self.block_channels)

    @property
    def feature_channels(self) -> int:
        return self.conv_widths()[-1]

    def parameter_count(self) -> int:
        total, c_in = 0, self.input_channels
        for c_out in self.conv_widths():
            total += c_in * c_out * 9 + c_out
            c_in = c_out
        return total + c_in * self.num_classes + self.num_classes

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        unknown = set(d) - {"input_channels", "block_channels", "num_classes", "input_size"}
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        cfg = cls(**{**asdict(cls()), **d})
        cfg.block_channels = [[int(c) for c in b] if isinstance(b, (list, tuple)) else int(b)
                              for b in cfg.block_channels]
        return cfg


# 13 convs in 5 pooled stages; use with input_size divisible by 32
VGG16_BLOCKS = [[64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512]]


@dataclass
class ForwardRecord:
    features: Tensor  # N×C×h×w, before global average pooling
    logits: Tensor  # N×K
    probs: Tensor  # N×K


class Model:
    def __init__(self, config: ModelConfig, parameters: dict[str, Tensor]):
        self.config = config
        self.parameters = parameters
        self.frozen = False
        self.meta: dict = {}  # provenance carried through checkpoints

    def named_parameters(self):
        return list(self.parameters.items())

    def trainable(self) -> list[Tensor]:
        return [p for p in self.parameters.values() if p.requires_grad]

    def freeze(self) -> Model:
        for name, p in self.parameters.items():
            self.parameters[name] = Tensor(p.data, requires_grad=False)
        self.frozen = True
        return self

    def clone(self, requires_grad: bool = True) -> Model:
        params = {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in self.parameters.items()}
        return Model(ModelConfig.from_dict(asdict(self.config)), params)

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters.values())

    def param_hash(self) -> str:
        return parameter_hash(self)

    def extract_features(self, batch: Tensor) -> Tensor:
        x, i = batch, 0
        for block in self.config.blocks():
            for _ in block:
                x = T.relu(T.conv2d(x, self.parameters[f"conv{i}.weight"], self.parameters[f"conv{i}.bias"], padding=1))
                i += 1
            x = T.max_pool2d(x, 2)
        return x

    def head(self, features: Tensor) -> Tensor:
        pooled = T.global_avg_pool(features)
        return T.linear(pooled, self.parameters["fc.weight"], self.parameters["fc.bias"])

    def __call__(self, batch: Tensor) -> ForwardRecord:
        return forward_with_features(self, batch)


def build_model(config: ModelConfig, seed: int, dtype=T.DEFAULT_DTYPE) -> Model:
    """Kaiming-uniform (fan-in) weights, zero biases; deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    c_in = config.input_channels
    for i, c_out in enumerate(config.conv_widths()):
        bound = np.sqrt(6.0 / (c_in * 9))
        params[f"conv{i}.weight"] = Tensor(rng.uniform(-bound, bound, (c_out, c_in, 3, 3)).astype(dtype), True)
        params[f"conv{i}.bias"] = Tensor(np.zeros(c_out, dtype=dtype), True)
        c_in = c_out
    bound = np.sqrt(6.0 / c_in)
    params["fc.weight"] = Tensor(rng.uniform(-bound, bound, (config.num_classes, c_in)).astype(dtype), True)
    params["fc.bias"] = Tensor(np.zeros(config.num_classes, dtype=dtype), True)
    return Model(config, params)


def forward_with_features(model: Model, batch: Tensor | np.ndarray) -> ForwardRecord:
    batch = T.as_tensor(batch)
    cfg = model.config
    if batch.ndim != 4 or batch.shape[1] != cfg.input_channels:
        raise T.ShapeError(f"expected N×{cfg.input_channels}×S×S input, got {batch.shape}")
    if batch.shape[2] != cfg.input_size or batch.shape[3] != cfg.input_size:
        raise T.ShapeError(f"input spatial size {batch.shape[2:]} != configured {cfg.input_size}")
    features = model.extract_features(batch)
    if not features.requires_grad:
        # Frozen models still need d(logit)/d(features) for Grad-CAM.
        features = Tensor(features.data, requires_grad=True)
    logits = model.head(features)
    return ForwardRecord(features, logits, T.softmax(logits))


def parameter_hash(model: Model) -> str:
    h = hashlib.sha256()
    for name in sorted(model.parameters):
        arr = model.parameters[name].data
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    """Layout: magic, u32 version, u64 config length, JSON config, u64 tensor count,
    then per tensor a u64-length-prefixed UTF-8 name and an ATD1 tensor blob.
    ``meta`` (run provenance) rides along in the JSON header under "meta"."""
    header = asdict(model.config)
    meta = model.meta if meta is None else meta
    if meta:
        header["meta"] = meta
    cfg = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<Q", len(model.parameters)))
        for name in sorted(model.parameters):
            raw = name.encode()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            T.write_tensor(fh, model.parameters[name].data)


def _read(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def load_checkpoint(path, expected: ModelConfig | None = None) -> Model:
    path = Path(path)
    with open(path, "rb") as fh:
        if _read(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<Q", _read(fh, 8))
        header = json.loads(_read(fh, n).decode())
        meta = header.pop("meta", {})
        config = ModelConfig.from_dict(header)
        (count,) = struct.unpack("<Q", _read(fh, 8))
        params = {}
        for _ in range(count):
            (n,) = struct.unpack("<Q", _read(fh, 8))
            name = _read(fh, n).decode()
            try:
                params[name] = Tensor(T.read_tensor(fh), requires_grad=True)
            except ValueError as exc:
                raise CheckpointError(f"{path}: {exc}") from exc
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    if expected is not None and asdict(expected) != asdict(config):
        raise CheckpointError(f"checkpoint config {asdict(config)} does not match expected {asdict(expected)}")
    reference = build_model(config, seed=0)
    for name, p in reference.parameters.items():
        if name not in params or params[name].shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name!r} missing or mis-shaped for config")
    if set(params) != set(reference.parameters):
        raise CheckpointError(f"{path}: unexpected parameters {sorted(set(params) - set(reference.parameters))}")
    model = Model(config, params)
    model.meta = meta
    return model
