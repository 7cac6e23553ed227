"""TinyVLSM: a small text-conditioned segmentation network with adapters.

Image branch: ``len(encoder_channels)`` blocks of 3x3 conv -> relu -> adapter ->
2x average pool. Text branch: embedding lookup -> masked mean-pool -> linear ->
adapter. The text embedding modulates the bottleneck features (FiLM) and the
decoder upsamples back to full resolution, adding each block's adapted
features on the way up. Adapters sit in both branches; everything else is
the backbone.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .data import PAD_ID
from .tensor import Tensor
from .tensor.io import TensorFormatError, read_tensor, write_tensor

BACKBONE, ADAPTER = "backbone", "adapter"
ADAPTER_TAG = "adapter"
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    context_length: int = 16
    vocab_size: int = 7
    embed_dim: int = 32
    adapter_dim: int = 64
    encoder_channels: tuple = (16, 32)
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.adapter_dim < 1:
            raise ValueError("adapter_dim must be >= 1")
        if self.context_length < 1:
            raise ValueError("context_length must be >= 1")
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise ValueError("encoder_channels must be a non-empty list of positive widths")
        if self.image_size % self.downsampling or self.image_size < self.downsampling:
            raise ValueError(f"image_size {self.image_size} not divisible by {self.downsampling}")
        if self.in_channels < 1 or self.vocab_size < 2 or self.embed_dim < 1:
            raise ValueError("invalid dimensions")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def downsampling(self) -> int:
        return 2 ** len(self.encoder_channels)

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "desk":
            base = {}
        elif name == "paper":
            base = {"image_size": 352, "context_length": 77}
        else:
            raise ValueError(f"unknown preset {name!r}")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d


def parameter_shapes(config: ModelConfig) -> dict:
    """Name -> (shape, partition), in initialization order."""
    shapes = {}
    r, D = config.adapter_dim, config.embed_dim
    chans = (config.in_channels,) + config.encoder_channels
    for i, (cin, cout) in enumerate(zip(chans, chans[1:]), start=1):
        shapes[f"enc{i}.conv.w"] = ((cout, cin, 3, 3), BACKBONE)
        shapes[f"enc{i}.conv.b"] = ((cout,), BACKBONE)
        shapes[f"enc{i}.adapter.down"] = ((cout, r), ADAPTER)
        shapes[f"enc{i}.adapter.up"] = ((r, cout), ADAPTER)
    shapes["text.embed"] = ((config.vocab_size, D), BACKBONE)
    shapes["text.proj.w"] = ((D, D), BACKBONE)
    shapes["text.proj.b"] = ((D,), BACKBONE)
    shapes["text.adapter.down"] = ((D, r), ADAPTER)
    shapes["text.adapter.up"] = ((r, D), ADAPTER)
    c_last = config.encoder_channels[-1]
    for kind in ("gamma", "beta"):
        shapes[f"film.{kind}.w"] = ((D, c_last), BACKBONE)
        shapes[f"film.{kind}.b"] = ((c_last,), BACKBONE)
    enc = config.encoder_channels
    for i in range(len(enc), 0, -1):
        cin = enc[i] if i < len(enc) else enc[-1]
        shapes[f"dec{i}.conv.w"] = ((enc[i - 1], cin, 3, 3), BACKBONE)
        shapes[f"dec{i}.conv.b"] = ((enc[i - 1],), BACKBONE)
    shapes["head.w"] = ((1, enc[0], 1, 1), BACKBONE)
    shapes["head.b"] = ((1,), BACKBONE)
    return shapes


@dataclass
class ModelParams:
    """Named parameter arrays plus their backbone/adapter partition."""

    arrays: dict
    partition: dict

    def __post_init__(self):
        if set(self.arrays) != set(self.partition):
            raise ValueError("every parameter needs exactly one partition entry")
        bad = {p for p in self.partition.values()} - {BACKBONE, ADAPTER}
        if bad:
            raise ValueError(f"unknown partitions {bad}")
        for arr in self.arrays.values():
            arr.flags.writeable = False

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def names(self, partition: Optional[str] = None) -> list:
        return [n for n in self.arrays if partition is None or self.partition[n] == partition]

    def count(self, partition: Optional[str] = None) -> int:
        return sum(self.arrays[n].size for n in self.names(partition))

    def leaves(self, trainable=()) -> dict:
        """Name -> Tensor leaf; names in ``trainable`` get ``requires_grad``."""
        trainable = set(trainable)
        out = {}
        for name, arr in self.arrays.items():
            t = Tensor.__new__(Tensor)
            t.data, t.requires_grad, t.grad, t.node = arr, name in trainable, None, None
            out[name] = t
        return out

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ModelParams":
        arrays = dict(self.arrays)
        for name, arr in updates.items():
            if name not in arrays:
                raise KeyError(name)
            if arr.shape != arrays[name].shape:
                raise T.ShapeError(f"{name}: shape {arr.shape} != {arrays[name].shape}")
            arrays[name] = np.array(arr, dtype=arrays[name].dtype)
        return ModelParams(arrays, dict(self.partition))

    def equal(self, other: "ModelParams") -> bool:
        return (
            list(self.arrays) == list(other.arrays)
            and self.partition == other.partition
            and all(
                a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.arrays.values(), other.arrays.values())
            )
        )


def init_params(config: ModelConfig) -> ModelParams:
    """Glorot-uniform weights, zero biases, zero adapter up-projections."""
    rng = np.random.default_rng(config.seed)
    dtype = config.np_dtype
    arrays, partition = {}, {}
    for name, (shape, part) in parameter_shapes(config).items():
        if name.endswith(".b") or name.endswith("adapter.up"):
            arr = np.zeros(shape)
        else:
            if len(shape) == 4:
                field_size = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * field_size, shape[0] * field_size
            else:
                fan_in, fan_out = shape
            s = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-s, s, shape)
        arrays[name] = arr.astype(dtype)
        partition[name] = part
    return ModelParams(arrays, partition)


def trainable_parameters(params: ModelParams) -> list:
    """Names of the adapter partition (both branches)."""
    return params.names(ADAPTER)


# -- forward pieces -----------------------------------------------------------

def _leaves(params) -> Mapping[str, Tensor]:
    return params.leaves() if isinstance(params, ModelParams) else params


def adapter_forward(x: Tensor, down: Tensor, up: Tensor) -> Tensor:
    """Residual bottleneck ``x + relu(x @ down) @ up`` over the last axis."""
    d = x.shape[-1]
    if down.ndim != 2 or up.ndim != 2 or down.shape[0] != d or up.shape != (down.shape[1], d):
        raise T.ShapeError(f"adapter shapes {down.shape}/{up.shape} do not fit width {d}")
    flat = x if x.ndim == 2 else T.reshape(x, (-1, d))
    out = flat + T.matmul(T.relu(T.matmul(flat, down)), up)
    return out if x.ndim == 2 else T.reshape(out, x.shape)


def _channel_adapter(feat: Tensor, down: Tensor, up: Tensor) -> Tensor:
    B, C, H, W = feat.shape
    vecs = T.transpose(feat, (0, 2, 3, 1))
    out = adapter_forward(T.reshape(vecs, (B * H * W, C)), down, up)
    return T.transpose(T.reshape(out, (B, H, W, C)), (0, 3, 1, 2))


def _add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    B, C, H, W = x.shape
    return x + T.expand(T.reshape(b, (1, C, 1, 1)), (B, C, H, W))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + T.expand(T.reshape(b, (1, -1)), (x.shape[0], w.shape[1]))


def _as_batch(images, config: ModelConfig) -> Tensor:
    if not isinstance(images, Tensor):
        images = Tensor(images, dtype=config.np_dtype)
    if images.ndim == 3:
        images = T.reshape(images, (1,) + images.shape)
    expected = (config.in_channels, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise T.ShapeError(f"image batch shape {images.shape} does not match {expected}")
    return images


def encode_image_batch(images, params, config: ModelConfig, adapters: bool = True):
    """Bottleneck features (B, C, h, w) and the per-block skip features."""
    p = _leaves(params)
    x = _as_batch(images, config)
    skips = []
    for i in range(1, len(config.encoder_channels) + 1):
        h = T.relu(_add_channel_bias(T.conv2d(x, p[f"enc{i}.conv.w"], 1, 1), p[f"enc{i}.conv.b"]))
        if adapters:
            h = _channel_adapter(h, p[f"enc{i}.adapter.down"], p[f"enc{i}.adapter.up"])
        skips.append(h)
        x = T.avg_pool2d(h, 2)
    return x, skips


def encode_image(image, params, config: ModelConfig, adapters: bool = True) -> Tensor:
    """Feature map (C, h, w) for a single (3, H, W) image."""
    feats, _ = encode_image_batch(image, params, config, adapters)
    if feats.shape[0] != 1:
        raise T.ShapeError("encode_image takes one image; use encode_image_batch")
    return T.reshape(feats, feats.shape[1:])


def _pool_weights(tokens: np.ndarray, dtype) -> np.ndarray:
    nonpad = (tokens != PAD_ID).astype(dtype)
    count = nonpad.sum(axis=1, keepdims=True)
    return nonpad / np.maximum(count, 1)


def encode_text_batch(tokens, params, config: ModelConfig, adapters: bool = True) -> Tensor:
    p = _leaves(params)
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.ndim != 2 or tokens.shape[1] != config.context_length:
        raise T.ShapeError(f"token batch shape {tokens.shape} does not match context {config.context_length}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise IndexError(f"token id out of range [0, {config.vocab_size})")
    B, L = tokens.shape
    D = config.embed_dim
    emb = T.embedding(p["text.embed"], tokens)  # (B, L, D)
    w = np.repeat(_pool_weights(tokens, emb.dtype)[:, :, None], D, axis=2)
    pooled = T.reduce("sum", emb * Tensor(w, dtype=emb.dtype), axes=1)
    out = _linear(pooled, p["text.proj.w"], p["text.proj.b"])
    if adapters:
        out = adapter_forward(out, p["text.adapter.down"], p["text.adapter.up"])
    return out


def encode_text(tokens, params, config: ModelConfig, adapters: bool = True) -> Tensor:
    """Embedding vector (embed_dim,) for one token sequence."""
    out = encode_text_batch(tokens, params, config, adapters)
    if out.shape[0] != 1:
        raise T.ShapeError("encode_text takes one sequence; use encode_text_batch")
    return T.reshape(out, (config.embed_dim,))


def film(feat: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel modulation ``feat * (1 + gamma) + beta`` with (B, C) gamma/beta."""
    B, C, H, W = feat.shape
    if gamma.shape != (B, C) or beta.shape != (B, C):
        raise T.ShapeError(f"FiLM parameters must be ({B}, {C})")
    g = T.expand(T.reshape(1.0 + gamma, (B, C, 1, 1)), feat.shape)
    b = T.expand(T.reshape(beta, (B, C, 1, 1)), feat.shape)
    return feat * g + b


def decode(feat: Tensor, skips, params, config: ModelConfig) -> Tensor:
    p = _leaves(params)
    x = feat
    for i in range(len(config.encoder_channels), 0, -1):
        x = T.upsample_nearest(x, 2)
        x = _add_channel_bias(T.conv2d(x, p[f"dec{i}.conv.w"], 1, 1), p[f"dec{i}.conv.b"])
        x = T.relu(x + skips[i - 1])
    return _add_channel_bias(T.conv2d(x, p["head.w"]), p["head.b"])


def forward_batch(images, tokens, params, config: ModelConfig, adapters: bool = True,
                  conditioning: bool = True) -> Tensor:
    """Raw logits (B, 1, H, W). ``conditioning=False`` skips the FiLM step."""
    p = _leaves(params)
    feats, skips = encode_image_batch(images, p, config, adapters)
    if conditioning:
        text = encode_text_batch(tokens, p, config, adapters)
        if text.shape[0] != feats.shape[0]:
            raise T.ShapeError("image and token batches differ in size")
        gamma = _linear(text, p["film.gamma.w"], p["film.gamma.b"])
        beta = _linear(text, p["film.beta.w"], p["film.beta.b"])
        feats = film(feats, gamma, beta)
    return decode(feats, skips, p, config)


def forward(image, tokens, params, config: ModelConfig) -> Tensor:
    """Logits (1, H, W) for one (3, H, W) image and its prompt tokens."""
    logits = forward_batch(image, tokens, params, config)
    if logits.shape[0] != 1:
        raise T.ShapeError("forward takes one sample; use forward_batch")
    return T.reshape(logits, logits.shape[1:])


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + bytes([CKPT_VERSION]) + struct.pack("<I", len(params)))
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(bytes([0 if params.partition[name] == BACKBONE else 1]))
        write_tensor(buf, arr)
    return buf.getvalue()


def params_from_bytes(blob: bytes) -> ModelParams:
    buf = io.BytesIO(blob)
    head = buf.read(9)
    if len(head) != 9 or head[:4] != CKPT_MAGIC:
        raise CheckpointError("missing CKPT header")
    if head[4] != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {head[4]}")
    (count,) = struct.unpack("<I", head[5:9])
    arrays, partition = {}, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack("<H", buf.read(2))
            name = buf.read(n).decode("utf-8")
            part = buf.read(1)
            if len(part) != 1 or part[0] not in (0, 1):
                raise CheckpointError(f"{name}: bad partition byte")
            arrays[name] = np.array(read_tensor(buf).data)
            partition[name] = BACKBONE if part[0] == 0 else ADAPTER
    except (struct.error, TensorFormatError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return ModelParams(arrays, partition)


def save_checkpoint(path, params: ModelParams) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> ModelParams:
    with open(path, "rb") as fh:
        params = params_from_bytes(fh.read())
    if config is not None:
        check_compatible(params, config)
    return params


def check_compatible(params: ModelParams, config: ModelConfig) -> None:
    expected = parameter_shapes(config)
    if set(expected) != set(params.arrays):
        raise CheckpointError("checkpoint parameter names do not match the model config")
    for name, (shape, part) in expected.items():
        if params[name].shape != shape or params.partition[name] != part:
            raise CheckpointError(f"{name}: checkpoint has {params[name].shape}, config needs {shape}")
