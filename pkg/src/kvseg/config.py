"""``key = value`` model configuration files.

Recognised keys::

    family       SETR | CE | CVT                       (required)
    attention    QKV | KV | KV_POS                     (default QKV)
    image_size   square input side in pixels           (224)
    patch_size   SETR patch side                       (16; SETR only)
    d_model      transformer width                     (768; SETR/CE)
    layers       transformer blocks                    (12; SETR/CE)
    heads        attention heads                       (12; SETR/CE)
    mlp_ratio    MLP hidden width / d_model            (4)
    pos_dim      positional channels m                 (50; KV_POS only)
    num_classes  decoder outputs incl. background      (4)
    ce_blocks    bottleneck counts of the 3 stages     (3, 4, 9; CE only)
    ce_width     stem width; stage outputs 4w/8w/16w   (64; CE only)
    cvt_stages   kernel/stride/dim/heads/depth, x3     (CvT-13; CVT only)
    decoder_convs  3x3 convs per decoder stage         (2)

Blank lines and ``#`` comments are ignored; unknown or inapplicable keys
are rejected with the offending line number.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .attention import Variant
from .decoder import DecoderConfig
from .encoders import CVT13_STAGES, EncoderConfig, Family, StageDescriptor
from .errors import ConfigurationError

KEYS = (
    "family",
    "attention",
    "image_size",
    "patch_size",
    "d_model",
    "layers",
    "heads",
    "mlp_ratio",
    "pos_dim",
    "num_classes",
    "ce_blocks",
    "ce_width",
    "cvt_stages",
    "decoder_convs",
)

_ONLY = {
    "patch_size": {Family.SETR},
    "d_model": {Family.SETR, Family.CE},
    "layers": {Family.SETR, Family.CE},
    "heads": {Family.SETR, Family.CE},
    "ce_blocks": {Family.CE},
    "ce_width": {Family.CE},
    "cvt_stages": {Family.CVT},
}

DEFAULT_POS_DIM = 50


@dataclass(frozen=True)
class ModelConfig:
    family: Family
    attention: Variant = Variant.QKV
    image_size: int = 224
    patch_size: int = 16
    d_model: int = 768
    layers: int = 12
    heads: int = 12
    mlp_ratio: float = 4.0
    pos_dim: int | None = None
    num_classes: int = 4
    ce_blocks: tuple[int, int, int] = (3, 4, 9)
    ce_width: int = 64
    cvt_stages: tuple[StageDescriptor, ...] = field(default=CVT13_STAGES)
    decoder_convs: int = 2

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "attention", Variant(self.attention))
        if self.attention is Variant.KV_POS and self.pos_dim is None:
            object.__setattr__(self, "pos_dim", DEFAULT_POS_DIM)
        if self.attention is not Variant.KV_POS and self.pos_dim is not None:
            raise ConfigurationError("pos_dim is only valid with attention = KV_POS")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must include background and at least one class")
        # both derived configs validate themselves
        self.encoder_config()
        self.decoder_config()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            family=self.family,
            image_size=self.image_size,
            d_model=self.d_model,
            heads=self.heads,
            layers=self.layers,
            variant=self.attention,
            pos_dim=self.pos_dim,
            patch_size=self.patch_size,
            mlp_ratio=self.mlp_ratio,
            ce_blocks=tuple(self.ce_blocks),
            ce_width=self.ce_width,
            cvt_stages=tuple(self.cvt_stages),
        )

    def decoder_config(self) -> DecoderConfig:
        enc = self.encoder_config()
        ratio = self.image_size // enc.grid
        stages = int(round(math.log2(ratio)))
        if 2**stages != ratio:
            raise ConfigurationError(f"decoder needs a power-of-two upsampling ratio, got {ratio}")
        return DecoderConfig(
            in_dim=enc.out_dim,
            grid=enc.grid,
            stages=stages,
            num_classes=self.num_classes,
            convs_per_stage=self.decoder_convs,
        )

    @property
    def seq_len(self) -> int:
        return self.encoder_config().grid ** 2

    def with_variant(self, variant: Variant | str, pos_dim: int | None = None) -> "ModelConfig":
        variant = Variant(variant)
        if variant is Variant.KV_POS:
            pos_dim = pos_dim or self.pos_dim or DEFAULT_POS_DIM
        return replace(self, attention=variant, pos_dim=pos_dim if variant is Variant.KV_POS else None)

    def applicable_keys(self) -> list[str]:
        keys = []
        for key in KEYS:
            if key in _ONLY and self.family not in _ONLY[key]:
                continue
            if key == "pos_dim" and self.attention is not Variant.KV_POS:
                continue
            keys.append(key)
        return keys

    def canonical_text(self) -> str:
        return "".join(f"{k} = {_format_value(getattr(self, k))}\n" for k in self.applicable_keys())

    def config_hash(self) -> str:
        """64-bit digest of the canonical text, as 16 hex digits."""
        return hashlib.blake2b(self.canonical_text().encode(), digest_size=8).hexdigest()

    @property
    def name(self) -> str:
        suffix = {Family.SETR: "", Family.CE: "-CE", Family.CVT: "-CVT"}[self.family]
        att = {Variant.QKV: "QKV", Variant.KV: "KV", Variant.KV_POS: "KV-pos"}[self.attention]
        return f"SETR-{att}{suffix}"


def _format_value(value) -> str:
    if isinstance(value, (Family, Variant)):
        return value.value
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple) and value and isinstance(value[0], StageDescriptor):
        return ", ".join(
            f"{s.embed_kernel}/{s.embed_stride}/{s.d_model}/{s.heads}/{s.depth}" for s in value
        )
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _int(text: str, key: str, line: int, minimum: int = 1) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ConfigurationError(f"{key} must be an integer, got {text!r}", line) from None
    if value < minimum:
        raise ConfigurationError(f"{key} must be >= {minimum}, got {value}", line)
    return value


def _parse_value(key: str, text: str, line: int):
    if key == "family":
        try:
            return Family(text.upper())
        except ValueError:
            raise ConfigurationError(f"unknown family {text!r}", line) from None
    if key == "attention":
        try:
            return Variant.parse(text)
        except ConfigurationError as exc:
            raise ConfigurationError(str(exc), line) from None
    if key == "mlp_ratio":
        try:
            value = float(text)
        except ValueError:
            raise ConfigurationError(f"mlp_ratio must be a number, got {text!r}", line) from None
        if value <= 0:
            raise ConfigurationError("mlp_ratio must be positive", line)
        return value
    if key == "ce_blocks":
        parts = [p for p in text.replace(",", " ").split()]
        if len(parts) != 3:
            raise ConfigurationError("ce_blocks needs three integers", line)
        return tuple(_int(p, key, line) for p in parts)
    if key == "cvt_stages":
        stages = []
        for chunk in text.split(","):
            fields = chunk.strip().split("/")
            if len(fields) != 5:
                raise ConfigurationError(f"cvt stage {chunk.strip()!r} needs kernel/stride/dim/heads/depth", line)
            k, s, d, h = (_int(f, key, line) for f in fields[:4])
            depth = _int(fields[4], key, line, minimum=0)
            try:
                stages.append(StageDescriptor(k, s, d, h, depth))
            except ConfigurationError as exc:
                raise ConfigurationError(str(exc), line) from None
        return tuple(stages)
    return _int(text, key, line)


def parse_config(text: str) -> ModelConfig:
    values: dict = {}
    lines: dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigurationError(f"expected 'key = value', got {content!r}", number)
        key, value = (part.strip() for part in content.split("=", 1))
        if key not in KEYS:
            raise ConfigurationError(f"unknown key {key!r}", number)
        if key in values:
            raise ConfigurationError(f"duplicate key {key!r}", number)
        values[key] = _parse_value(key, value, number)
        lines[key] = number
    if "family" not in values:
        raise ConfigurationError("missing required key 'family'")
    family = values["family"]
    for key, families in _ONLY.items():
        if key in values and family not in families:
            raise ConfigurationError(f"key {key!r} does not apply to family {family.value}", lines[key])
    if "pos_dim" in values and values.get("attention", Variant.QKV) is not Variant.KV_POS:
        raise ConfigurationError("pos_dim is only valid with attention = KV_POS", lines["pos_dim"])
    try:
        return ModelConfig(**values)
    except ConfigurationError as exc:
        if exc.line is None:
            raise ConfigurationError(str(exc), _blame_line(str(exc), lines)) from None
        raise


def _blame_line(message: str, lines: dict[str, int]) -> int | None:
    for key, number in lines.items():
        if key in message:
            return number
    return None


def load_config(path) -> ModelConfig:
    path = Path(path)
    if not path.exists() and not path.suffix:
        fixture = fixture_path(path.name)
        if fixture.exists():
            path = fixture
    return parse_config(path.read_text())


def fixture_path(name: str) -> Path:
    """Path of a bundled config, e.g. ``fixture_path("setr-kv")``."""
    if not name.endswith(".cfg"):
        name += ".cfg"
    return Path(str(resources.files("kvseg") / "configs" / name))


def list_fixtures() -> list[str]:
    folder = Path(str(resources.files("kvseg") / "configs"))
    return sorted(p.stem for p in folder.glob("*.cfg"))
