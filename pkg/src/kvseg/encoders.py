"""Encoder families: pure ViT (SETR), ResNet-stem hybrid (CE) and CvT.

All encoders map an ``(N, 3, H, W)`` batch to tokens ``(N, n, d)`` laid out
row-major over an ``(H/16) x (W/16)`` grid. None of them use a class token.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, MultiHeadAttention, PositionalMixer, Variant, attend
from .errors import ConfigurationError, DimensionError
from .nn import MLP, BatchNorm2d, Conv2d, LayerNorm, Module, he_normal, parameter
from .tensor import Tensor

POS_EMBED_STD = 0.02
TOTAL_STRIDE = 16


class Family(str, enum.Enum):
    SETR = "SETR"
    CE = "CE"
    CVT = "CVT"


@dataclass(frozen=True)
class StageDescriptor:
    embed_kernel: int
    embed_stride: int
    d_model: int
    heads: int
    depth: int

    def __post_init__(self):
        if min(self.embed_kernel, self.embed_stride, self.d_model, self.heads) < 1 or self.depth < 0:
            raise ConfigurationError(f"invalid CvT stage {self}")
        if self.d_model % self.heads:
            raise ConfigurationError(f"CvT stage width {self.d_model} not divisible by {self.heads} heads")


CVT13_STAGES = (
    StageDescriptor(7, 4, 64, 1, 1),
    StageDescriptor(3, 2, 192, 3, 2),
    StageDescriptor(3, 2, 384, 6, 10),
)


@dataclass(frozen=True)
class EncoderConfig:
    family: Family
    image_size: int
    d_model: int
    heads: int
    layers: int
    variant: Variant = Variant.QKV
    pos_dim: int | None = None
    patch_size: int = 16
    mlp_ratio: float = 4.0
    ce_blocks: tuple[int, int, int] = (3, 4, 9)
    ce_width: int = 64
    cvt_stages: tuple[StageDescriptor, ...] = field(default=CVT13_STAGES)

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.family is Family.SETR:
            if self.image_size % self.patch_size:
                raise ConfigurationError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")
        elif self.image_size % TOTAL_STRIDE:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by {TOTAL_STRIDE}")
        if self.family is Family.CE and (len(self.ce_blocks) != 3 or min(self.ce_blocks) < 1):
            raise ConfigurationError("ce_blocks needs three positive block counts")
        if self.family is Family.CVT:
            if len(self.cvt_stages) != 3:
                raise ConfigurationError("CvT needs exactly three stages")
            stride = int(np.prod([s.embed_stride for s in self.cvt_stages]))
            if stride != TOTAL_STRIDE:
                raise ConfigurationError(f"CvT stage strides multiply to {stride}, expected {TOTAL_STRIDE}")
        for d, h in self.attention_shapes():
            AttentionConfig(self.variant, d, h, self.pos_dim)

    def attention_shapes(self) -> list[tuple[int, int]]:
        if self.family is Family.CVT:
            return [(s.d_model, s.heads) for s in self.cvt_stages]
        return [(self.d_model, self.heads)]

    def attention(self, d_model: int | None = None, heads: int | None = None) -> AttentionConfig:
        return AttentionConfig(self.variant, d_model or self.d_model, heads or self.heads, self.pos_dim)

    @property
    def grid(self) -> int:
        """Side of the token grid handed to the decoder."""
        if self.family is Family.SETR:
            return self.image_size // self.patch_size
        return self.image_size // TOTAL_STRIDE

    @property
    def out_dim(self) -> int:
        return self.cvt_stages[-1].d_model if self.family is Family.CVT else self.d_model

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.d_model))


def cvt_grids(cfg: EncoderConfig) -> list[int]:
    grids, g = [], cfg.image_size
    for s in cfg.cvt_stages:
        g = (g + 2 * (s.embed_kernel // 2) - s.embed_kernel) // s.embed_stride + 1
        grids.append(g)
    return grids


def patch_embed(image: Tensor, w: Tensor, b: Tensor, p: int) -> Tensor:
    """Split into non-overlapping ``p x p`` patches and project: ``Z = P W + b``.

    Patch vectors are flattened channel-major (index ``c*p*p + r*p + col``),
    patches are numbered row-major. ``w`` is ``(p*p*C, d)``.
    """
    batched = image.ndim == 4
    x = image if batched else image.reshape(1, *image.shape)
    n, c, h, wd = x.shape
    if h % p or wd % p:
        raise DimensionError(f"image {h}x{wd} not divisible by patch size {p}")
    gh, gw = h // p, wd // p
    x = x.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, gh * gw, c * p * p)
    z = x @ w + b
    return z if batched else z.reshape(*z.shape[1:])


class TransformerBlock(Module):
    """Pre-norm block: ``x += MHA(LN(x)); x += MLP(LN(x))``."""

    def __init__(self, cfg: AttentionConfig, hidden: int, n_max: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg, n_max, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.mlp = MLP(cfg.d_model, hidden, rng)

    def forward(self, x: Tensor, grid: int | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def vit_encode(tokens: Tensor, blocks: list[TransformerBlock]) -> Tensor:
    """Run the transformer trunk; zero blocks is the identity."""
    for block in blocks:
        tokens = block(tokens)
    return tokens


class PatchEmbedding(Module):
    """Patch projection plus learned positional embeddings (``n x d``)."""

    def __init__(self, channels: int, patch: int, d: int, n: int, rng: np.random.Generator):
        super().__init__()
        self.patch = patch
        fan_in = patch * patch * channels
        self.weight = he_normal(rng, (fan_in, d), fan_in)
        self.bias = parameter(np.zeros(d))
        self.pos_embed = parameter(rng.normal(0.0, POS_EMBED_STD, size=(n, d)))

    def forward(self, image: Tensor, with_pos: bool = True) -> Tensor:
        z = patch_embed(image, self.weight, self.bias, self.patch)
        return z + self.pos_embed if with_pos else z


class SETREncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d, n = cfg.d_model, cfg.grid**2
        self.embed = PatchEmbedding(3, cfg.patch_size, d, n, rng)
        self.blocks = [TransformerBlock(cfg.attention(), cfg.hidden, n, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(d)

    def forward(self, images: Tensor) -> Tensor:
        return self.norm(vit_encode(self.embed(images), self.blocks))


class Bottleneck(Module):
    """ResNet-50 bottleneck (stride on the 3x3 conv); convs carry no bias."""

    expansion = 4

    def __init__(self, c_in: int, width: int, stride: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        c_out = width * self.expansion
        self.conv1 = Conv2d(c_in, width, 1, rng, bias=False)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, rng, stride=stride, padding=1, bias=False)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, c_out, 1, rng, bias=False)
        self.bn3 = BatchNorm2d(c_out, zero_init=zero_init)
        self.downsample = None
        if stride != 1 or c_in != c_out:
            self.downsample = Conv2d(c_in, c_out, 1, rng, stride=stride, bias=False)
            self.down_bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x)))
        out = T.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        identity = x if self.downsample is None else self.down_bn(self.downsample(x))
        return T.relu(out + identity)


class CEStem(Module):
    """First four convolutional layers of ResNet-50 (conv1 + three bottleneck stages).

    Stage block counts default to ``[3, 4, 9]``: the third stage is widened
    from six to nine blocks. Output has ``16 * width`` channels at stride 16.
    """

    def __init__(self, blocks: tuple[int, ...], width: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        self.conv1 = Conv2d(3, width, 7, rng, stride=2, padding=3, bias=False)
        self.bn1 = BatchNorm2d(width)
        self.stages = []
        c_in = width
        for i, (count, stride) in enumerate(zip(blocks, (1, 2, 2))):
            w = width * 2**i
            stage = []
            for b in range(count):
                stage.append(Bottleneck(c_in, w, stride if b == 0 else 1, rng, zero_init))
                c_in = w * Bottleneck.expansion
            self.stages.append(_Sequential(stage))
        self.out_channels = c_in

    def forward(self, image: Tensor) -> Tensor:
        if image.shape[-1] % TOTAL_STRIDE or image.shape[-2] % TOTAL_STRIDE:
            raise DimensionError(f"CE stem needs sides divisible by {TOTAL_STRIDE}, got {image.shape}")
        unbatched = image.ndim == 3
        x = image.reshape(1, *image.shape) if unbatched else image
        x = T.relu(self.bn1(self.conv1(x)))
        x = T.max_pool2d(x, 3, 2, 1)
        for stage in self.stages:
            x = stage(x)
        return x.reshape(*x.shape[1:]) if unbatched else x


class _Sequential(Module):
    def __init__(self, layers: list[Module]):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def ce_stem(image: Tensor, stem: CEStem) -> Tensor:
    return stem(image)


class CEEncoder(Module):
    """ResNet stem -> 1x1 patch embedding on the stride-16 map -> ViT trunk."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        self.cfg = cfg
        d, n = cfg.d_model, cfg.grid**2
        self.stem = CEStem(cfg.ce_blocks, cfg.ce_width, rng, zero_init)
        self.embed = PatchEmbedding(self.stem.out_channels, 1, d, n, rng)
        self.blocks = [TransformerBlock(cfg.attention(), cfg.hidden, n, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(d)

    def forward(self, images: Tensor) -> Tensor:
        return self.norm(vit_encode(self.embed(self.stem(images)), self.blocks))


class ConvAttention(Module):
    """CvT attention: 3x3 depthwise conv over the token grid, then a d x d
    projection, per branch. The KV variant has no query branch."""

    def __init__(self, cfg: AttentionConfig, n_max: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        branches = ("k", "v") if cfg.variant is not Variant.QKV else ("q", "k", "v")
        for b in branches:
            setattr(self, f"dw_{b}", he_normal(rng, (d, 1, 3, 3), 9))
            setattr(self, f"w_{b}", he_normal(rng, (d, d), d))
        self.w_out = he_normal(rng, (d, d), d)
        if cfg.variant is Variant.KV_POS:
            self.pos = PositionalMixer(n_max, cfg.pos_dim)

    def _branch(self, grid_x: Tensor, name: str) -> Tensor:
        d = self.cfg.d_model
        y = T.conv2d(grid_x, getattr(self, f"dw_{name}"), None, 1, 1, groups=d)
        n, _, h, w = y.shape
        return y.reshape(n, d, h * w).transpose(0, 2, 1) @ getattr(self, f"w_{name}")

    def forward(self, x: Tensor, grid: int, trace: dict | None = None) -> Tensor:
        n, seq, d = x.shape
        grid_x = x.transpose(0, 2, 1).reshape(n, d, grid, seq // grid)
        q = self._branch(grid_x, "q") if self.cfg.variant is Variant.QKV else None
        k = self._branch(grid_x, "k")
        v = self._branch(grid_x, "v")
        pos = self.pos.parts() if self.cfg.variant is Variant.KV_POS else None
        return attend(q, k, v, self.cfg, pos=pos, trace=trace) @ self.w_out


class CvTBlock(Module):
    def __init__(self, cfg: AttentionConfig, hidden: int, n_max: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d_model)
        self.attn = ConvAttention(cfg, n_max, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.mlp = MLP(cfg.d_model, hidden, rng)

    def forward(self, x: Tensor, grid: int) -> Tensor:
        x = x + self.attn(self.norm1(x), grid)
        return x + self.mlp(self.norm2(x))


class CvTStage(Module):
    def __init__(self, c_in: int, s: StageDescriptor, grid: int, enc: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.desc = s
        self.grid = grid
        self.embed = Conv2d(c_in, s.d_model, s.embed_kernel, rng, stride=s.embed_stride, padding=s.embed_kernel // 2)
        self.embed_norm = LayerNorm(s.d_model)
        att = enc.attention(s.d_model, s.heads)
        hidden = int(round(enc.mlp_ratio * s.d_model))
        self.blocks = [CvTBlock(att, hidden, grid * grid, rng) for _ in range(s.depth)]

    def forward(self, x: Tensor) -> Tensor:
        """``(N, C_in, H, W)`` -> tokens ``(N, h*w, d)``."""
        y = self.embed(x)
        n, d, h, w = y.shape
        tokens = self.embed_norm(y.reshape(n, d, h * w).transpose(0, 2, 1))
        for block in self.blocks:
            tokens = block(tokens, h)
        return tokens


class CvTEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stages = []
        c_in = 3
        for s, g in zip(cfg.cvt_stages, cvt_grids(cfg)):
            self.stages.append(CvTStage(c_in, s, g, cfg, rng))
            c_in = s.d_model
        self.norm = LayerNorm(c_in)

    def forward(self, images: Tensor) -> Tensor:
        x = images
        tokens = None
        for stage in self.stages:
            tokens = stage(x)
            n, seq, d = tokens.shape
            x = tokens.transpose(0, 2, 1).reshape(n, d, stage.grid, seq // stage.grid)
        return self.norm(tokens)


def build_encoder(cfg: EncoderConfig, rng: np.random.Generator, zero_init: bool = False) -> Module:
    if cfg.family is Family.SETR:
        return SETREncoder(cfg, rng)
    if cfg.family is Family.CE:
        return CEEncoder(cfg, rng, zero_init)
    return CvTEncoder(cfg, rng)
