import numpy as np
import pytest

from warmseq.errors import SchemeError
from warmseq.model import count_params, lm_loss, Batch
from warmseq.optim import Adam
from warmseq import autodiff as ad
from warmseq.schemes import SCHEMES, InitScheme, build_model, get_scheme

from conftest import tiny_config
from helpers import SIZES, archives_for, assert_partition, source_archive


def configured(scheme, **changes):
    return scheme.configure(tiny_config(**changes), SIZES)


@pytest.mark.parametrize("name", sorted(SCHEMES))
def test_report_matches_prediction(name):
    scheme = SCHEMES[name]
    config = configured(scheme)
    model, report = build_model(config, scheme, archives_for(scheme, config))
    assert_partition(model, report, count_params(config, scheme))


@pytest.mark.parametrize("name", ["BERT2BERT", "BERTSHARE", "BERT2GPT", "GPT"])
@pytest.mark.parametrize("mods", [dict(embeddings_only=True), dict(layers_only=True), dict(layer_subset=(1, 0))])
def test_modifiers_match_prediction(name, mods):
    scheme = SCHEMES[name].with_modifiers(**mods)
    config = configured(scheme, num_layers=2)
    model, report = build_model(config, scheme, archives_for(scheme, config))
    assert_partition(model, report, count_params(config, scheme))


def test_layer_subset_shorter_than_model():
    scheme = SCHEMES["BERT2RND"].with_modifiers(layer_subset=(1,))
    config = configured(scheme, num_layers=2)
    archive = source_archive(config, "bert")
    model, report = build_model(config, scheme, {"encoder": archive})
    assert_partition(model, report, count_params(config, scheme))
    assert np.array_equal(model.params["encoder/layer_0/ffn/inner_w"].data, archive["encoder/layer_1/ffn/inner_w"])


def test_warm_values_copied():
    scheme = SCHEMES["BERT2GPT"]
    config = configured(scheme)
    archives = archives_for(scheme, config)
    model, _ = build_model(config, scheme, archives)
    assert np.array_equal(model.params["decoder/layer_1/self/key_w"].data, archives["decoder"]["decoder/layer_1/self/key_w"])
    assert np.array_equal(model.params["encoder/embeddings/word"].data, archives["encoder"]["embeddings/word"])
    assert np.array_equal(model.params["decoder/embeddings/word"].data, archives["decoder"]["embeddings/word"])


def test_bertshare_single_adam_step_moves_both_sides_identically():
    scheme = SCHEMES["BERTSHARE"]
    config = configured(scheme)
    model, _ = build_model(config, scheme, archives_for(scheme, config))
    enc, dec = "encoder/layer_0/self/query_w", "decoder/layer_0/self/query_w"
    before = model.params[enc].data.copy()
    batch = Batch(np.array([[2, 5, 6, 3]]), np.ones((1, 4), dtype=bool), np.array([[2, 7, 8, 3]]), np.ones((1, 4), dtype=bool))
    optimizer = Adam(model.unique_params())
    ad.backward(lm_loss(model, batch))
    optimizer.step(1e-3)
    assert not np.array_equal(model.params[enc].data, before)
    assert np.array_equal(model.params[enc].data, model.params[dec].data)
    assert dec not in optimizer.params


def test_missing_or_wrong_archive():
    scheme = SCHEMES["BERT2RND"]
    config = configured(scheme)
    with pytest.raises(SchemeError):
        build_model(config, scheme, {})
    with pytest.raises(SchemeError):
        build_model(config, scheme, {"encoder": source_archive(config, "gpt")})


def test_invalid_schemes():
    with pytest.raises(SchemeError):
        InitScheme("X", encoder_source="bert", decoder_only=True)
    with pytest.raises(SchemeError):
        InitScheme("X", encoder_source="bert", decoder_source="gpt", share_encoder_decoder=True)
    with pytest.raises(SchemeError):
        get_scheme("BERT2XYZ")
    with pytest.raises(SchemeError):
        SCHEMES["BERT2BERT"].with_modifiers(embeddings_only=True, layers_only=True)
