"""The FourCropNet layer graph, parameter accounting and checkpoint I/O."""
from __future__ import annotations

import dataclasses
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import ChecksumError, ConfigError, DataError, DimensionMismatchError, VersionError
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    Layer,
    MaxPool2D,
    Param,
    ReLU,
    ResidualBlock,
    ResidualBlockConfig,
)

MAGIC = b"FCN1"
FORMAT_VERSION = 1

# Probe points whose shapes are fixed by the architecture description.
PROBES = ("stem_pool", "block1", "block2_pool", "block3_pool")

PARAMETER_NOTE = (
    "Note: the published complexity table lists 6.5 million learnable parameters for "
    "FourCropNet. Neither head variant derivable from the layer-by-layer description "
    "reaches that figure (GAP head: {gap:,}; flatten head: {flatten:,}). "
    "The totals above are exact enumerations of this implementation."
)


@dataclass
class ModelConfig:
    input_size: int = 224
    channel_plan: tuple = (32, 32, 64, 128)
    fc_plan: tuple = (256, 128)
    dropout: float = 0.5
    num_classes: int = 15
    se_reduction: int = 16
    head: str = "gap"
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.channel_plan = tuple(int(c) for c in self.channel_plan)
        self.fc_plan = tuple(int(c) for c in self.fc_plan)
        self.validate()

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.channel_plan) != 4:
            raise ConfigError("channel_plan must have exactly 4 entries")
        if self.input_size < 8 or self.input_size % 8:
            raise ConfigError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.head not in ("gap", "flatten"):
            raise ConfigError(f"head must be 'gap' or 'flatten', got {self.head!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.channel_plan[3] % self.se_reduction:
            raise ConfigError("se_reduction must divide the last channel width")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channel_plan"] = list(self.channel_plan)
        d["fc_plan"] = list(self.fc_plan)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerRow:
    name: str
    kind: str
    output_shape: tuple
    params: int


@dataclass
class ParameterCount:
    rows: list[LayerRow] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(r.params for r in self.rows)

    def by_name(self) -> dict[str, int]:
        return {r.name: r.params for r in self.rows}


class FourCropNet:
    """Conv stem, three residual blocks (the last with SE attention), dense classifier."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, class_names=None):
        self.config = config = config or ModelConfig()
        self.seed = seed
        self.class_names = list(class_names) if class_names else [f"class_{i}" for i in range(config.num_classes)]
        if len(self.class_names) != config.num_classes:
            raise ConfigError("class_names length must equal num_classes")
        init_rng, drop_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
        c0, c1, c2, c3 = config.channel_plan
        f1, f2 = config.fc_plan
        bn = dict(bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)

        def res(name, cin, cout, se=False):
            return ResidualBlock(name, ResidualBlockConfig(cin, cout, se, config.se_reduction), init_rng, **bn)

        final = config.input_size // 8
        head_features = c3 if config.head == "gap" else final * final * c3
        self.layers: list[Layer] = [
            Conv2D("stem.conv", tc.ConvSpec(3, c0), init_rng),
            BatchNorm("stem.bn", c0, config.bn_momentum, config.bn_eps),
            ReLU("stem.relu"),
            MaxPool2D("stem_pool"),
            res("block1", c0, c1),
            res("block2", c1, c2),
            MaxPool2D("block2_pool"),
            res("block3", c2, c3, se=True),
            MaxPool2D("block3_pool"),
            GlobalAvgPool("head.gap") if config.head == "gap" else Flatten("head.flatten"),
            Dense("fc1", head_features, f1, init_rng),
            ReLU("fc1.relu"),
            Dropout("fc1.dropout", config.dropout, drop_rng),
            Dense("fc2", f1, f2, init_rng),
            ReLU("fc2.relu"),
            Dropout("fc2.dropout", config.dropout, drop_rng),
            Dense("logits", f2, config.num_classes, init_rng),
        ]
        self.activations: dict[str, np.ndarray] = {}
        names = [p.name for p in self.params()]
        assert len(names) == len(set(names)), "duplicate parameter names"

    # parameter registry

    def params(self):
        for layer in self.layers:
            yield from layer.params()

    def trainable_params(self) -> list[Param]:
        return [p for p in self.params() if p.trainable]

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype) -> "FourCropNet":
        for p in self.params():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    @property
    def dtype(self):
        return next(self.params()).value.dtype

    def set_dropout(self, enabled: bool):
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.enabled = enabled

    # computation

    def _check_input(self, images):
        s = self.config.input_size
        if images.ndim != 4:
            raise DimensionMismatchError("rank", 4, images.ndim)
        if images.shape[1] != s:
            raise DimensionMismatchError("height", s, images.shape[1])
        if images.shape[2] != s:
            raise DimensionMismatchError("width", s, images.shape[2])
        if images.shape[3] != 3:
            raise DimensionMismatchError("channels", 3, images.shape[3])

    def forward(self, images, train: bool = False) -> np.ndarray:
        """Return logits of shape (N, num_classes); probe outputs land in ``self.activations``."""
        images = np.asarray(images)
        self._check_input(images)
        x = images.astype(self.dtype, copy=False)
        self.activations = {}
        for layer in self.layers:
            x = layer.forward(x, train)
            if layer.name in PROBES:
                self.activations[layer.name] = x
        return x

    __call__ = forward

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def predict_proba(self, images, batch_size: int = 32) -> np.ndarray:
        out = [tc.softmax(self.forward(images[i:i + batch_size]))
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0)

    def predict(self, images, batch_size: int = 32):
        """Return (class indices, confidences). Ties resolve to the lowest class index."""
        proba = self.predict_proba(images, batch_size)
        classes = proba.argmax(axis=1)
        return classes, proba[np.arange(len(classes)), classes]

    # accounting

    def iter_leaf_layers(self):
        def walk(layer):
            if layer._children:
                for child in layer._children:
                    yield from walk(child)
            else:
                yield layer

        for layer in self.layers:
            yield from walk(layer)

    def summary_rows(self, batch: int = 1) -> list[LayerRow]:
        """Per-layer rows with output shapes for a (batch, S, S, 3) probe; computed symbolically."""

        def row(layer, shape):
            n = sum(p.size for p in layer.params() if p.trainable)
            return LayerRow(layer.name, type(layer).__name__, shape, n)

        rows = []
        shape = (batch, self.config.input_size, self.config.input_size, 3)
        for layer in self.layers:
            if isinstance(layer, ResidualBlock):
                for path in (layer.branch, layer.skip):
                    inner = shape
                    for child in path:
                        inner = child.output_shape(inner)
                        rows.append(row(child, inner))
                shape = layer.output_shape(shape)
                rows.append(LayerRow(layer.name, "ResidualAdd", shape, 0))
            else:
                shape = layer.output_shape(shape)
                rows.append(row(layer, shape))
        return rows


def build_model(config: ModelConfig | None = None, seed: int = 0, class_names=None) -> FourCropNet:
    return FourCropNet(config, seed, class_names)


def count_parameters(model: FourCropNet) -> ParameterCount:
    """Trainable scalars per leaf layer; BN running statistics are excluded."""
    rows = []
    shapes = {r.name: r.output_shape for r in model.summary_rows()}
    for layer in model.iter_leaf_layers():
        n = sum(p.size for p in layer.params() if p.trainable)
        rows.append(LayerRow(layer.name, type(layer).__name__, shapes.get(layer.name, ()), n))
    return ParameterCount(rows)


def head_totals(config: ModelConfig) -> dict[str, int]:
    """Parameter totals for both head variants of ``config``."""
    totals = {}
    for head in ("gap", "flatten"):
        cfg = dataclasses.replace(config, head=head)
        totals[head] = count_parameters(FourCropNet(cfg, seed=0)).total
    return totals


def format_summary(model: FourCropNet) -> str:
    out = io.StringIO()
    out.write(f"{'layer':<22}{'kind':<22}{'output shape':<22}{'params':>12}\n")
    out.write("-" * 78 + "\n")
    for row in model.summary_rows():
        shape = "(" + ",".join(str(s) for s in row.output_shape[1:]) + ")"
        out.write(f"{row.name:<22}{row.kind:<22}{shape:<22}{row.params:>12,}\n")
    out.write("-" * 78 + "\n")
    totals = head_totals(model.config)
    out.write(f"total trainable parameters ({model.config.head} head): {count_parameters(model).total:,}\n")
    out.write(f"total with gap head:     {totals['gap']:,}\n")
    out.write(f"total with flatten head: {totals['flatten']:,}\n")
    out.write(PARAMETER_NOTE.format(**totals) + "\n")
    return out.getvalue()


# checkpoints

def _header(model: FourCropNet) -> bytes:
    meta = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "dtype": np.dtype(model.dtype).name,
        "class_names": model.class_names,
        "seed": model.seed,
    }
    return json.dumps(meta, sort_keys=True).encode()


def save_checkpoint(model: FourCropNet, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = _header(model)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for p in model.params():
        name = p.name.encode()
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", p.value.ndim))
        buf.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        buf.write(np.ascontiguousarray(p.value, dtype=p.value.dtype.newbyteorder("<")).tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint_header(path) -> dict:
    data = _read_verified(path)
    (n,) = struct.unpack_from("<I", data, 4)
    return json.loads(data[8:8 + n])


def _read_verified(path) -> bytes:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 12:
        raise ChecksumError(f"{path}: checkpoint is truncated")
    if data[:4] != MAGIC:
        raise ChecksumError(f"{path}: bad magic bytes {data[:4]!r}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError(f"{path}: CRC-32 mismatch (corrupt or truncated checkpoint)")
    return data[:-4]


def load_checkpoint(path, expect: dict | None = None) -> FourCropNet:
    """Load a checkpoint. ``expect`` maps config fields to required values."""
    data = _read_verified(path)
    (n,) = struct.unpack_from("<I", data, 4)
    meta = json.loads(data[8:8 + n])
    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionError("format_version", FORMAT_VERSION, meta.get("format_version"))
    cfg = ModelConfig.from_dict(meta["config"])
    for key, value in (expect or {}).items():
        if getattr(cfg, key) != value:
            raise VersionError(key, value, getattr(cfg, key))
    dtype = np.dtype(meta["dtype"])
    with tc.precision(dtype):
        model = FourCropNet(cfg, seed=meta.get("seed", 0), class_names=meta["class_names"])
    offset = 8 + n
    registry = list(model.params())
    for p in registry:
        (ln,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset:offset + ln].decode()
        offset += ln
        if name != p.name:
            raise VersionError("parameter", p.name, name)
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        if tuple(shape) != p.value.shape:
            raise VersionError(f"{name}.shape", p.value.shape, tuple(shape))
        count = int(np.prod(shape))
        nbytes = count * dtype.itemsize
        p.value = np.frombuffer(data, dtype=dtype.newbyteorder("<"), count=count, offset=offset).reshape(shape).astype(dtype)
        p.grad = np.zeros_like(p.value)
        offset += nbytes
    if offset != len(data):
        raise ChecksumError(f"{path}: {len(data) - offset} unexpected trailing bytes")
    return model
