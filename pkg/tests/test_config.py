import pytest

from kvseg.attention import Variant
from kvseg.config import ModelConfig, list_fixtures, load_config, parse_config
from kvseg.encoders import Family
from kvseg.errors import ConfigurationError

PUBLISHED_ROWS = {
    "setr-qkv": "SETR-QKV",
    "setr-kv": "SETR-KV",
    "setr-kv-pos": "SETR-KV-pos",
    "setr-qkv-ce": "SETR-QKV-CE",
    "setr-kv-ce": "SETR-KV-CE",
    "setr-qkv-cvt": "SETR-QKV-CVT",
    "setr-kv-cvt": "SETR-KV-CVT",
}


def test_fixtures_present():
    names = list_fixtures()
    for name, title in PUBLISHED_ROWS.items():
        assert name in names
        assert load_config(name).name == title


def test_defaults():
    cfg = parse_config("family = SETR\n")
    assert (cfg.image_size, cfg.patch_size, cfg.d_model, cfg.layers, cfg.heads) == (224, 16, 768, 12, 12)
    assert cfg.attention is Variant.QKV and cfg.num_classes == 4 and cfg.seq_len == 196
    assert parse_config("family = SETR\nattention = KV_POS\n").pos_dim == 50


def test_comments_and_blank_lines():
    cfg = parse_config("# header\n\nfamily = CE   # trailing\nattention = kv\nce_blocks = 2, 2, 2\n")
    assert cfg.family is Family.CE and cfg.attention is Variant.KV and cfg.ce_blocks == (2, 2, 2)


@pytest.mark.parametrize(
    "text,line",
    [
        ("family = SETR\nbogus = 1\n", 2),
        ("family = SETR\nlayers = 2\nlayers = 3\n", 3),
        ("family = CVT\n\nd_model = 64\n", 3),
        ("family = SETR\nce_blocks = 1, 1, 1\n", 2),
        ("family = SETR\npos_dim = 8\n", 2),
        ("family = SETR\nheads = many\n", 2),
        ("family = SETR\nno equals sign\n", 2),
        ("family = SETR\nattention = QK\n", 2),
        ("family = SETR\nd_model = 100\nheads = 12\n", 2),
    ],
)
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigurationError) as exc:
        parse_config(text)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}:")


def test_missing_family():
    with pytest.raises(ConfigurationError):
        parse_config("layers = 2\n")


def test_canonical_round_trip_and_hash():
    for name in list_fixtures():
        cfg = load_config(name)
        again = parse_config(cfg.canonical_text())
        assert again == cfg
        assert again.config_hash() == cfg.config_hash()
        assert len(cfg.config_hash()) == 16
    a, b = load_config("setr-qkv"), load_config("setr-kv")
    assert a.config_hash() != b.config_hash()


def test_with_variant():
    cfg = load_config("setr-qkv").with_variant("KV_POS")
    assert cfg.attention is Variant.KV_POS and cfg.pos_dim == 50
    assert cfg.with_variant(Variant.KV).pos_dim is None


def test_decoder_stage_count_follows_grid():
    assert load_config("setr-qkv").decoder_config().stages == 4
    assert load_config("desk-setr-kv").decoder_config().stages == 3
    assert ModelConfig(Family.CVT).decoder_config().in_dim == 384
