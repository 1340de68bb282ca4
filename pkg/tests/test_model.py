import pytest
import torch

from malenia.attributes import ASPECTS, default_schema
from malenia.errors import ShapeError, UnknownValueError
from malenia.model import NUM_DECODER_BLOCKS, BankIndexView, MaleniaModel


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = MaleniaModel(schema=default_schema())
    m.set_provider_vectors(torch.randn(40, 64))
    return m


def test_bank_index_view_matches_schema_order():
    schema = default_schema()
    view = BankIndexView(schema)
    assert view.num_descriptions == 40
    expected_id = 1
    for aspect in ASPECTS:
        for value in schema.vocab[aspect]:
            assert view.lookup(aspect, value) == expected_id
            assert view.value_of(expected_id) == (aspect, value)
            expected_id += 1
    with pytest.raises(UnknownValueError):
        view.lookup("Shape", "Bogus")


def test_model_block_count_and_token_shape(model):
    assert len(model.blocks) == NUM_DECODER_BLOCKS == 3
    assert model.tokens.shape == (16, 32)


def test_forward_contract(model):
    x = torch.randn(2, 1, 32, 32, 32)
    pyramid, tokens_per_block, logits_per_block = model(x)
    assert len(tokens_per_block) == len(logits_per_block) == 3
    for tokens in tokens_per_block:
        assert tokens.shape == (2, 16, 32)
    expected_spatial = [(1, 1, 1), (2, 2, 2), (4, 4, 4)]
    for logits, spatial in zip(logits_per_block, expected_spatial):
        assert logits.shape == (2, 16, *spatial)


def test_bank_vectors_shape_and_background_row(model):
    bank = model.bank_vectors()
    assert bank.shape == (41, 32)
    assert torch.equal(bank[0], model.background_embedding)


def test_set_provider_vectors_rejects_wrong_shape(model):
    with pytest.raises(ShapeError):
        model.set_provider_vectors(torch.randn(39, 64))


def test_clamp_temperature():
    m = MaleniaModel(schema=default_schema())
    with torch.no_grad():
        m.tau.fill_(5.0)
    m.clamp_temperature()
    assert float(m.tau.detach()) == pytest.approx(1.0)
    with torch.no_grad():
        m.tau.fill_(1e-5)
    m.clamp_temperature()
    assert float(m.tau.detach()) == pytest.approx(0.01)


def test_normalized_tokens_have_unit_norm():
    torch.manual_seed(1)
    m = MaleniaModel(schema=default_schema(), normalize_tokens=True)
    m.set_provider_vectors(torch.randn(40, 64))
    _, tokens_per_block, _ = m(torch.randn(1, 1, 32, 32, 32))
    for tokens in tokens_per_block:
        norms = tokens.norm(dim=-1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)
    bank_norms = m.bank_vectors().norm(dim=-1)
    assert torch.allclose(bank_norms, torch.ones_like(bank_norms), atol=1e-5)
