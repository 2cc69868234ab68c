"""Generator and conditional patch discriminator assembly, init, and checkpoints."""
from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import (
    FtrBlockParams,
    ResBlockParams,
    TransformerBlockParams,
    ftr_block,
    init_ftr_block,
    init_res_block,
    init_transformer_block,
    res_block,
    res_branch,
    transformer_block,
)
from .errors import ContractError
from .params import ConvParams, init_conv, iter_parameters, named_parameters
from .tensor import Parameter, Tensor
from .twrnn import AttentionParams, attention_map, init_attention

CHECKPOINT_MAGIC = "SPAFORMER-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    base_channels: int = 32
    encoder_levels: int = 3
    n_ftr_blocks: int = 4
    twrnn_steps: int = 4
    use_transformer: bool = True
    use_ftr: bool = True
    seed: int = 0
    blocks_per_level: int = 2
    normalize_qk: bool = True
    share_wheel_weights: bool = False
    dropout: float = 0.2
    disc_channels: int = 32
    disc_levels: int = 4

    def __post_init__(self):
        if self.base_channels < 1 or self.encoder_levels < 1:
            raise ContractError("base_channels and encoder_levels must both be >= 1")
        if self.twrnn_steps < 1:
            raise ContractError("twrnn_steps must be >= 1")
        if self.disc_channels < 1 or self.disc_levels < 1:
            raise ContractError("disc_channels and disc_levels must both be >= 1")

    @property
    def stride_multiple(self) -> int:
        return 2 ** (self.encoder_levels - 1)

    def level_channels(self, level: int) -> int:
        return self.base_channels * 2**level


@dataclass
class EncoderLevel:
    blocks: list[TransformerBlockParams]
    down: ConvParams | None


@dataclass
class DecoderLevel:
    up: ConvParams
    fuse: ConvParams
    blocks: list[TransformerBlockParams]


@dataclass
class GeneratorParams:
    embed: ConvParams
    encoder: list[EncoderLevel]
    decoder: list[DecoderLevel]
    feature: ConvParams
    pre_res: list[ResBlockParams]
    attention: AttentionParams
    attention_res: list[ResBlockParams]
    post_res: list[ResBlockParams]
    ftr: list[FtrBlockParams]
    out: ConvParams


@dataclass
class DiscriminatorParams:
    levels: list[ConvParams]
    score: ConvParams


@dataclass
class GeneratorOutput:
    restored: Tensor
    attention: Tensor
    attention_steps: list[Tensor]


@dataclass
class SpAFormer:
    config: ModelConfig
    generator: GeneratorParams
    discriminator: DiscriminatorParams

    def generator_parameters(self) -> list[Parameter]:
        return list(iter_parameters(self.generator))

    def discriminator_parameters(self) -> list[Parameter]:
        return list(iter_parameters(self.discriminator))

    def named_parameters(self) -> dict[str, Parameter]:
        return named_parameters([self.generator, self.discriminator])

    def generate(self, image: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> GeneratorOutput:
        return generator_forward(image, self.config, self.generator, training=training, rng=rng)

    def discriminate(self, condition: Tensor, candidate: Tensor) -> Tensor:
        return discriminator_forward(condition, candidate, self.discriminator)


def init_generator(config: ModelConfig, rng: np.random.Generator) -> GeneratorParams:
    c0 = config.base_channels
    levels = config.encoder_levels
    nb = config.blocks_per_level if config.use_transformer else 0

    encoder = []
    for lv in range(levels):
        c = config.level_channels(lv)
        blocks = [init_transformer_block(rng, f"G.enc{lv}.tb{i}", c) for i in range(nb)]
        down = None
        if lv < levels - 1:
            down = init_conv(rng, f"G.enc{lv}.down", (config.level_channels(lv + 1), c, 3, 3))
        encoder.append(EncoderLevel(blocks, down))

    decoder = []
    for lv in range(levels - 2, -1, -1):
        c = config.level_channels(lv)
        up = init_conv(rng, f"G.dec{lv}.up", (c, config.level_channels(lv + 1), 1, 1))
        fuse = init_conv(rng, f"G.dec{lv}.fuse", (c, 2 * c, 1, 1))
        blocks = [init_transformer_block(rng, f"G.dec{lv}.tb{i}", c) for i in range(nb)]
        decoder.append(DecoderLevel(up, fuse, blocks))

    return GeneratorParams(
        embed=init_conv(rng, "G.embed", (c0, 3, 3, 3)),
        encoder=encoder,
        decoder=decoder,
        feature=init_conv(rng, "G.feature", (c0, c0, 3, 3)),
        pre_res=[init_res_block(rng, f"G.pre_res{i}", c0) for i in range(3)],
        attention=init_attention(rng, "G.twrnn", c0, share_wheels=config.share_wheel_weights),
        attention_res=[init_res_block(rng, f"G.att_res{i}", c0) for i in range(3)],
        post_res=[init_res_block(rng, f"G.post_res{i}", c0) for i in range(2)],
        ftr=[init_ftr_block(rng, f"G.ftr{i}", c0) for i in range(config.n_ftr_blocks if config.use_ftr else 0)],
        out=init_conv(rng, "G.out", (3, c0, 3, 3), zero=True),
    )


def init_discriminator(config: ModelConfig, rng: np.random.Generator) -> DiscriminatorParams:
    levels = []
    c_in = 6
    for i in range(config.disc_levels):
        c_out = config.disc_channels * 2 ** min(i, 3)
        levels.append(init_conv(rng, f"D.level{i}", (c_out, c_in, 3, 3)))
        c_in = c_out
    return DiscriminatorParams(levels, init_conv(rng, "D.score", (1, c_in, 3, 3)))


def init_params(config: ModelConfig) -> SpAFormer:
    """Deterministic in ``config.seed``; the generator's output conv starts at zero."""
    gen_seed, disc_seed = np.random.SeedSequence(config.seed).spawn(2)
    return SpAFormer(
        config,
        init_generator(config, np.random.default_rng(gen_seed)),
        init_discriminator(config, np.random.default_rng(disc_seed)),
    )


def _conv(x, p: ConvParams, mode="full_3x3", stride=1, padding=None):
    if padding is None:
        padding = 1 if mode == "full_3x3" else 0
    return T.conv2d(x, p.weight, p.bias, mode, stride, padding)


def check_image_shape(image: Tensor, config: ModelConfig) -> None:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ContractError(f"generator expects an (N, 3, H, W) image, got {image.shape}")
    m = config.stride_multiple
    h, w = image.shape[2:]
    if h % m or w % m or h == 0 or w == 0:
        raise ContractError(
            f"image height and width must be divisible by {m} (2**(encoder_levels-1)), got {h}x{w}"
        )


def transformer_stage(x: Tensor, config: ModelConfig, g: GeneratorParams, training: bool, rng) -> Tensor:
    """Multi-level encoder-decoder; transformer blocks sit at every level when enabled."""
    h = T.relu(_conv(x, g.embed))
    skips = []
    for level in g.encoder:
        for block in level.blocks:
            h = transformer_block(h, block, config.normalize_qk)
        skips.append(h)
        if level.down is not None:
            h = T.relu(_conv(h, level.down, stride=2))
    for level, skip in zip(g.decoder, reversed(skips[:-1])):
        h = T.relu(_conv(T.upsample2x(h), level.up, "pointwise_1x1"))
        h = T.relu(_conv(T.concat_channels([h, skip]), level.fuse, "pointwise_1x1"))
        h = T.dropout(h, config.dropout, rng, training)
        for block in level.blocks:
            h = transformer_block(h, block, config.normalize_qk)
    return h


def generator_forward(
    image: Tensor,
    config: ModelConfig,
    params: GeneratorParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> GeneratorOutput:
    """Restore a shadow image in [-1, 1].

    transformer encoder-decoder -> 3x3 feature conv -> 3 res blocks ->
    recurrent attention -> 3 attention-gated res blocks -> 2 res blocks ->
    Fourier residual chain -> output conv giving a residual added to the input.
    The sum is clamped to [-1, 1] only outside training.
    """
    check_image_shape(image, config)
    g = params
    h = transformer_stage(image, config, g, training, rng)
    h = T.relu(_conv(h, g.feature))
    for block in g.pre_res:
        h = res_block(h, block)
    att, att_steps = attention_map(h, g.attention, config.twrnn_steps)
    for block in g.attention_res:
        h = T.add(h, T.mul_map(res_branch(h, block), att))
    for block in g.post_res:
        h = res_block(h, block)
    for block in g.ftr:
        h = ftr_block(h, block)
    residual = _conv(h, g.out)
    restored = T.add(image, residual)
    if not training:
        restored = T.clamp(restored, -1.0, 1.0)
    return GeneratorOutput(restored, att, att_steps)


def discriminator_forward(condition: Tensor, candidate: Tensor, params: DiscriminatorParams) -> Tensor:
    """Raw (pre-sigmoid) patch scores for a (condition, candidate) image pair."""
    if condition.shape != candidate.shape:
        raise ContractError(f"discriminator: condition {condition.shape} and candidate {candidate.shape} differ")
    if condition.ndim != 4 or condition.shape[1] != 3:
        raise ContractError(f"discriminator expects (N, 3, H, W) images, got {condition.shape}")
    h = T.concat_channels([condition, candidate])
    for level in params.levels:
        h = T.leaky_relu(_conv(h, level, stride=2), 0.2)
    return _conv(h, params.score)


# ---------------------------------------------------------------------------
# checkpoints: text manifest, blank line, then one little-endian float32 blob


def _config_line(config: ModelConfig) -> str:
    parts = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        parts.append(f"{f.name}={int(v) if isinstance(v, bool) else v}")
    return "config " + " ".join(parts)


def _parse_config_line(line: str) -> ModelConfig:
    kwargs = {}
    types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    for item in line.split()[1:]:
        key, value = item.split("=", 1)
        if key not in types:
            raise ContractError(f"checkpoint config has unknown field {key!r}")
        kind = types[key]
        if kind in ("bool", bool):
            kwargs[key] = bool(int(value))
        elif kind in ("int", int):
            kwargs[key] = int(value)
        else:
            kwargs[key] = float(value)
    return ModelConfig(**kwargs)


def checkpoint_bytes(model: SpAFormer) -> bytes:
    params = model.named_parameters()
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", _config_line(model.config)]
    blob = io.BytesIO()
    offset = 0
    for name, p in params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        shape = "x".join(str(s) for s in p.shape)
        lines.append(f"param {name} {shape} {offset}")
        blob.write(raw)
        offset += len(raw)
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    return header + blob.getvalue()


def save_checkpoint(model: SpAFormer, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> SpAFormer:
    raw = Path(path).read_bytes()
    head, sep, blob = raw.partition(b"\n\n")
    if not sep:
        raise ContractError(f"{path}: missing manifest terminator")
    try:
        lines = head.decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise ContractError(f"{path}: not a checkpoint file") from None
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    if magic[1] != str(CHECKPOINT_VERSION):
        raise ContractError(f"{path}: unsupported checkpoint version {magic[1]}")
    if len(lines) < 2 or not lines[1].startswith("config "):
        raise ContractError(f"{path}: missing config line")
    model = init_params(_parse_config_line(lines[1]))
    params = model.named_parameters()
    seen = set()
    for line in lines[2:]:
        parts = line.split()
        if len(parts) != 4 or parts[0] != "param":
            raise ContractError(f"{path}: malformed manifest line {line!r}")
        _, name, shape_s, offset_s = parts
        shape = tuple(int(s) for s in shape_s.split("x"))
        if name not in params:
            raise ContractError(f"{path}: unknown parameter {name}")
        p = params[name]
        if shape != p.shape:
            raise ContractError(f"{path}: {name} has shape {shape}, model expects {p.shape}")
        count = int(np.prod(shape))
        start = int(offset_s)
        if start < 0 or start + 4 * count > len(blob):
            raise ContractError(f"{path}: data for {name} runs past the end of the file (truncated?)")
        p.data[...] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ContractError(f"{path}: missing parameters {sorted(missing)[:5]}")
    return model
