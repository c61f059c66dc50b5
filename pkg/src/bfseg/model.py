"""Full network assembly and parameter management.

The network is a four-stage hierarchical encoder (overlapped patch embedding,
then patch-merge + transformer blocks per stage), a token bridge that re-views
every scale at the stage-1 channel width and runs transformer blocks over the
concatenated multi-scale sequence, and a decoder that patch-expands back up,
fusing skip features by concatenation + linear projection, ending in a
pixel-wise linear head.

Checkpoints are little-endian binary (magic ``BFS1``); the architecture
config travels as a JSON sidecar with the exact ``ModelConfig`` field names.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from bfseg import layers as L
from bfseg import tensor as T
from bfseg.tensor import ConfigError, ShapeError, Tensor

CHECKPOINT_MAGIC = b"BFS1"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable, truncated, or inconsistent."""


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 3
    embed_dims: tuple = (16, 32, 64, 128)
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = (1, 2, 4, 8)
    sr_ratios: tuple = (8, 4, 2, 1)
    bridge_depth: int = 4
    bridge_ratio: int = 1
    ffn_expansion: int = 4
    image_size: int = 64
    bridge_skips: bool = True  # decoder skips use bridged features; flip for ablation

    def __post_init__(self):
        self.embed_dims = tuple(self.embed_dims)
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)
        self.sr_ratios = tuple(self.sr_ratios)
        self.validate()

    def validate(self):
        if self.image_size % 32:
            raise ConfigError(f"image_size must be a multiple of 32, got {self.image_size}")
        for name in ("embed_dims", "depths", "heads", "sr_ratios"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{name} must have 4 entries, got {getattr(self, name)}")
        c1 = self.embed_dims[0]
        for i, (c, h, r) in enumerate(zip(self.embed_dims, self.heads, self.sr_ratios)):
            if c % h:
                raise ConfigError(f"stage {i + 1}: dim {c} not divisible by {h} heads")
            if c % c1:
                raise ConfigError(
                    f"stage {i + 1}: dim {c} not divisible by stage-1 dim {c1} (bridge re-view)"
                )
            if self.grid(i) % r:
                raise ConfigError(
                    f"stage {i + 1}: reduction ratio {r} does not divide grid {self.grid(i)}"
                )
        if self.bridge_depth < 0:
            raise ConfigError(f"bridge_depth must be >= 0, got {self.bridge_depth}")
        if self.bridge_ratio < 1:
            raise ConfigError(f"bridge_ratio must be >= 1, got {self.bridge_ratio}")
        if self.bridge_ratio > 1 and self.bridge_tokens() % self.bridge_ratio:
            raise ConfigError(
                f"bridge_ratio {self.bridge_ratio} does not divide the "
                f"{self.bridge_tokens()}-token bridge sequence"
            )
        if self.ffn_expansion < 1:
            raise ConfigError(f"ffn_expansion must be >= 1, got {self.ffn_expansion}")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be positive")

    def grid(self, stage):
        """Grid side length of stage 0..3: image_size / 4, / 8, / 16, / 32."""
        return self.image_size >> (2 + stage)

    def bridge_segments(self):
        c1 = self.embed_dims[0]
        return [L.Segment(self.grid(i), self.grid(i), self.embed_dims[i] // c1) for i in range(4)]

    def bridge_tokens(self):
        return sum(s.tokens for s in self.bridge_segments())

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class FeaturePyramid:
    """Multi-scale token features, one [N, L_i, C_i] tensor per stage."""

    features: list  # 4 Tensors
    dims: list  # 4 (height, width) pairs

    def shapes(self):
        return [f.shape for f in self.features]


@dataclass
class StageParams:
    embed: L.EmbedParams  # patch embed (stage 1) or merge conv (stages 2-4)
    blocks: list


@dataclass
class DecoderStageParams:
    expand: L.ExpandParams
    fuse: L.LinearParams  # concat(skip, up) -> stage width
    blocks: list


@dataclass
class ModelParams:
    stages: list  # 4 StageParams
    bridge_blocks: list
    decoder: list  # 3 DecoderStageParams, for stages 3, 2, 1
    final_expand: L.ExpandParams
    head: L.LinearParams


# -- parameter traversal -------------------------------------------------------


def named_parameters(tree, prefix=""):
    """Yield (name, holder, attr) for every parameter tensor, depth-first in
    declaration order.  Names are stable and key the checkpoint format."""
    if dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            v = getattr(tree, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            if isinstance(v, Tensor):
                yield name, tree, f.name
            elif dataclasses.is_dataclass(v) or isinstance(v, (list, tuple)):
                yield from named_parameters(v, name)
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            yield from named_parameters(v, f"{prefix}.{i}")


def named_tensors(tree, prefix=""):
    for name, holder, attr in named_parameters(tree, prefix):
        yield name, getattr(holder, attr)


def count_parameters(params):
    return sum(t.size for _, t in named_tensors(params))


def zero_grads(params):
    for _, t in named_tensors(params):
        t.zero_grad()


# -- initialization --------------------------------------------------------------


def init_params(config, seed=0, dtype=np.float64):
    """Build all parameters, reproducibly from the seed.

    Weights are normal(0, 0.02) truncated at two standard deviations; biases
    and norm shifts start at zero, norm scales at one.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    e = config.ffn_expansion
    stages = []
    for i in range(4):
        cin = config.in_channels if i == 0 else config.embed_dims[i - 1]
        kernel = 7 if i == 0 else 3
        stages.append(
            StageParams(
                embed=L.init_embed(rng, cin, config.embed_dims[i], kernel, dtype=dtype),
                blocks=[
                    L.init_block(
                        rng, config.embed_dims[i], config.heads[i], config.sr_ratios[i], e,
                        dtype=dtype,
                    )
                    for _ in range(config.depths[i])
                ],
            )
        )
    c1 = config.embed_dims[0]
    bridge_blocks = [
        L.init_block(
            rng, c1, config.heads[0], config.bridge_ratio, e,
            token_axis_reduce=True, dtype=dtype,
        )
        for _ in range(config.bridge_depth)
    ]
    decoder = []
    for i in (2, 1, 0):  # decode stages 3, 2, 1
        c_up = config.embed_dims[i + 1]
        c = config.embed_dims[i]
        decoder.append(
            DecoderStageParams(
                expand=L.init_expand(rng, c_up, factor=2, dtype=dtype),
                fuse=L.init_linear(rng, c_up // 2 + c, c, dtype=dtype),
                blocks=[
                    L.init_block(rng, c, config.heads[i], config.sr_ratios[i], e, dtype=dtype)
                    for _ in range(config.depths[i])
                ],
            )
        )
    return ModelParams(
        stages=stages,
        bridge_blocks=bridge_blocks,
        decoder=decoder,
        final_expand=L.init_expand(rng, c1, factor=4, dtype=dtype),
        head=L.init_linear(rng, c1, config.num_classes, dtype=dtype),
    )


def cast_params(params, dtype):
    """Re-type every parameter in place (e.g. float32 for training runs)."""
    for _, holder, attr in named_parameters(params):
        t = getattr(holder, attr)
        setattr(holder, attr, Tensor(t.array.astype(dtype), requires_grad=True))
    return params


# -- forward passes ----------------------------------------------------------------


def encode(img, config, params):
    """Hierarchical features at grids H/4, H/8, H/16, H/32."""
    n, c, h, w = img.shape if isinstance(img, Tensor) else np.shape(img)
    if h != config.image_size or w != config.image_size:
        raise ShapeError(
            f"encoder expects {config.image_size}x{config.image_size} input, got {h}x{w}"
        )
    if c != config.in_channels:
        raise ShapeError(f"encoder expects {config.in_channels} channels, got {c}")
    features, dims = [], []
    x = img
    gh = gw = None
    for i, stage in enumerate(params.stages):
        if i == 0:
            x, gh, gw = L.overlap_patch_embed(x, stage.embed, stride=4, padding=3)
        else:
            x, gh, gw = L.patch_merge(x, gh, gw, stage.embed)
        for block in stage.blocks:
            x = L.transformer_block(x, gh, gw, block)
        features.append(x)
        dims.append((gh, gw))
    return FeaturePyramid(features, dims)


def bridge(pyramid, config, params):
    """Mix all scales: re-view at stage-1 width, concatenate on the token
    axis, run the bridge blocks, split and restore the original shapes.

    With zero bridge blocks this is the exact identity.
    """
    c1 = config.embed_dims[0]
    segments = config.bridge_segments()
    n = pyramid.features[0].shape[0]
    flats = []
    for f, seg in zip(pyramid.features, segments):
        if f.shape[1] * f.shape[2] != seg.tokens * c1:
            raise ConfigError(
                f"pyramid feature {f.shape} does not re-view to {seg.tokens} width-{c1} tokens"
            )
        flats.append(T.reshape(f, (n, seg.tokens, c1)))
    seq = T.concat(flats, axis=1)
    for block in params.bridge_blocks:
        seq = L.transformer_block_mixed(seq, segments, block)
    parts = T.split(seq, [s.tokens for s in segments], axis=1)
    features = [
        T.reshape(part, f.shape) for part, f in zip(parts, pyramid.features)
    ]
    return FeaturePyramid(features, list(pyramid.dims))


def decode(pyramid, config, params):
    """Expand back to full resolution with skip fusion; emit class logits."""
    x = pyramid.features[3]
    gh, gw = pyramid.dims[3]
    for stage_params, i in zip(params.decoder, (2, 1, 0)):
        x, gh, gw = L.patch_expand(x, gh, gw, stage_params.expand)
        skip = pyramid.features[i]
        if skip.shape[:2] != x.shape[:2]:
            raise ShapeError(
                f"skip feature {skip.shape} does not align with decoder tokens {x.shape}"
            )
        x = L.linear(T.concat([x, skip], axis=2), stage_params.fuse)
        for block in stage_params.blocks:
            x = L.transformer_block(x, gh, gw, block)
    x, gh, gw = L.patch_expand(x, gh, gw, params.final_expand)
    x = L.linear(x, params.head)
    n = x.shape[0]
    return T.transpose(T.reshape(x, (n, gh, gw, config.num_classes)), (0, 3, 1, 2))


def forward(img, config, params):
    """decode(bridge(encode(img))); deterministic, no stochastic layers."""
    enc = encode(img, config, params)
    mixed = bridge(enc, config, params)
    if not config.bridge_skips:
        # ablation: raw encoder skips, bridged bottleneck
        mixed = FeaturePyramid(enc.features[:3] + [mixed.features[3]], list(enc.dims))
    return decode(mixed, config, params)


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(params, path):
    """Write all parameters as little-endian binary, in traversal order."""
    entries = list(named_tensors(params))
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(entries))
    for name, t in entries:
        raw = name.encode("utf-8")
        arr = t.array
        tag = 0 if arr.dtype == np.float32 else 1
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += struct.pack("<B", tag)
        blob += arr.astype(_DTYPE_TAGS[tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def read_checkpoint(path):
    """Parse a checkpoint into an ordered {name: ndarray} dict."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint {path}: ran out reading {what}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        (tag,) = struct.unpack("<B", take(1, f"{name} dtype"))
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: entry {name} has unknown dtype tag {tag}")
        dtype = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(nbytes, f"{name} values"), dtype=dtype).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError(f"{path}: {len(view) - pos} trailing bytes after last entry")
    return out


def load_checkpoint(path, config):
    """Rebuild ModelParams from a checkpoint, validated against the config."""
    loaded = read_checkpoint(path)
    params = init_params(config, seed=0)
    expected = {name: (holder, attr) for name, holder, attr in named_parameters(params)}
    missing = sorted(set(expected) - set(loaded))
    if missing:
        raise CheckpointError(f"{path}: missing parameter entry {missing[0]}")
    extra = sorted(set(loaded) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected parameter entry {extra[0]}")
    for name, arr in loaded.items():
        holder, attr = expected[name]
        want = getattr(holder, attr).shape
        if tuple(arr.shape) != want:
            raise CheckpointError(
                f"{path}: entry {name} has shape {tuple(arr.shape)}, config expects {want}"
            )
        setattr(holder, attr, Tensor(arr.copy(), requires_grad=True))
    return params


def save_config(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config.to_json())


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return ModelConfig.from_json(fh.read())
    except OSError as e:
        raise CheckpointError(f"cannot read model config {path}: {e}") from e
