import numpy as np
import pytest

from kvseg import tensor as T
from kvseg.complexity import audit_model
from kvseg.config import load_config
from kvseg.decoder import DecoderConfig, PUPDecoder, flatten_grid, pup_decode, reshape_tokens
from kvseg.errors import ConfigurationError, DimensionError
from kvseg.gradcheck import gradient_check

from conftest import tensor


def test_reshape_tokens_layout(double, rng):
    tokens = rng.standard_normal((9, 6))
    grid = reshape_tokens(tensor(tokens), 3).data
    assert grid.shape == (6, 3, 3)
    for i in range(9):
        np.testing.assert_array_equal(grid[:, i // 3, i % 3], tokens[i])


def test_reshape_tokens_edge_cases(double, rng):
    one = rng.standard_normal((1, 5))
    assert np.array_equal(reshape_tokens(tensor(one), 1).data[:, 0, 0], one[0])
    assert reshape_tokens(tensor(np.zeros((196, 4))), 14).shape == (4, 14, 14)
    batch = tensor(rng.standard_normal((2, 16, 3)))
    assert np.array_equal(flatten_grid(reshape_tokens(batch, 4)).data, batch.data)
    with pytest.raises(DimensionError):
        reshape_tokens(tensor(np.zeros((10, 4))), 3)


def test_widths_halve():
    cfg = DecoderConfig(768, 14, 4, 4)
    assert cfg.widths() == [768, 384, 192, 96, 48]
    assert cfg.out_size == 224
    with pytest.raises(ConfigurationError):
        DecoderConfig(40, 2, 4, 2)
    with pytest.raises(ConfigurationError):
        DecoderConfig(16, 2, 4, 3)


def test_full_size_decoder_output_shape(rng):
    dec = PUPDecoder(DecoderConfig(768, 14, 4, 4), rng)
    with T.precision("single"), T.no_grad():
        out = pup_decode(T.Tensor(rng.standard_normal((768, 14, 14))), dec)
    assert out.shape == (4, 224, 224)


@pytest.mark.parametrize("stages,grid", [(1, 3), (2, 2), (3, 1)])
def test_output_size_independent_of_weights(rng, stages, grid):
    for seed in (0, 1):
        dec = PUPDecoder(DecoderConfig(32, grid, stages, 3), np.random.default_rng(seed))
        assert dec(T.Tensor(rng.standard_normal((2, 32, grid, grid)))).shape == (2, 3, grid * 2**stages, grid * 2**stages)


def test_zero_features_give_classifier_bias(double, rng):
    dec = PUPDecoder(DecoderConfig(16, 2, 2, 3), rng)
    for name, p in dec.named_parameters():
        if name.endswith("conv.bias"):
            p.data[:] = 0.0
    dec.classifier.bias.data[:] = [0.5, -1.0, 2.0]
    out = dec(tensor(np.zeros((16, 2, 2)))).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.array([0.5, -1.0, 2.0])[:, None, None], (3, 8, 8)))


def test_decoder_gradcheck(double, rng):
    dec = PUPDecoder(DecoderConfig(16, 2, 2, 3), rng)
    feat = tensor(rng.standard_normal((2, 16, 2, 2)), True)
    target = rng.integers(0, 3, size=(2, 8, 8))
    params = dict(dec.named_parameters(), feat=feat)
    assert gradient_check(lambda: T.cross_entropy(dec(feat), target), params) <= 1e-5


def test_decoder_macs_closed_form():
    """Audit MACs equal direct conv arithmetic for the 768-wide, 14x14 decoder."""
    report = audit_model(load_config("setr-qkv"))
    dec = sum(e.macs for e in report.entries if e.path.startswith("decoder."))
    by_hand, c, g = 0, 768, 14
    for _ in range(4):
        by_hand += 9 * c * (c // 2) * g * g + 9 * (c // 2) ** 2 * g * g
        c, g = c // 2, g * 2
    by_hand += 48 * 4 * 224 * 224
    assert dec == by_hand == 3_130_982_400
