import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warmseq.checkpoint import (GPT_STYLE_RULES, ROBERTA_STYLE_RULES, MappingRules, TensorArchive, archive_bytes,
                                convert_foreign, embeddings_only, load_archive, model_archive, parse_archive,
                                parse_layer_list, save_archive, select_layer_subset, warm_start,
                                without_word_embeddings)
from warmseq.errors import FormatError, IncompatibleCheckpointError, RuleError, SelectionError
from warmseq.model import Seq2SeqModel

from conftest import tiny_config


def random_archive(rng, n=5):
    tensors = {}
    for i in range(n):
        shape = tuple(rng.integers(1, 5, size=rng.integers(0, 4)))
        dtype = np.float32 if rng.random() < 0.5 else np.float64
        tensors[f"t{i}/w"] = rng.normal(size=shape).astype(dtype)
    return TensorArchive(tensors, "native", {"note": "x"})


def test_byte_round_trip(tmp_path, rng):
    archive = random_archive(rng)
    path = tmp_path / "a.wsck"
    save_archive(archive, path)
    loaded = load_archive(path)
    assert loaded.identical(archive)
    assert archive_bytes(loaded) == path.read_bytes()


def test_layout_header(rng):
    blob = archive_bytes(TensorArchive({"x": np.zeros((2, 3), np.float32)}, "native", {}))
    assert blob[:4] == b"WSCK"
    assert struct.unpack_from("<I", blob, 4)[0] == 1


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "flip", "trailing"])
def test_corruption_detected(mutate, rng):
    blob = bytearray(archive_bytes(random_archive(rng)))
    if mutate == "magic":
        blob[0:4] = b"XXXX"
    elif mutate == "version":
        blob[4:8] = struct.pack("<I", 9)
    elif mutate == "truncate":
        blob = blob[:-3]
    elif mutate == "flip":
        blob[-6] ^= 0xFF
    else:
        blob += b"\0"
    with pytest.raises(FormatError):
        parse_archive(bytes(blob))


def test_payload_checksum_is_crc32():
    value = np.arange(3, dtype=np.float32)
    blob = archive_bytes(TensorArchive({"v": value}, "native", {}))
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(value.tobytes())


def test_split_concat_bijection(rng):
    fused = rng.normal(size=(12, 4)).astype(np.float32)
    archive = TensorArchive({"h0/attn/c_attn/w": fused, "h0/ln/g": np.ones(4, np.float32)}, "gpt-like", {})
    rules = MappingRules.parse("split3 h*/attn/c_attn/w axis=0 h*/attn/q/w h*/attn/k/w h*/attn/v/w\n")
    split, unmatched = rules.apply(archive)
    assert unmatched == ["h0/ln/g"]
    assert np.array_equal(split["h0/attn/k/w"], fused[4:8])
    back, _ = rules.inverse().apply(split)
    assert back.identical(archive)


def test_default_split_names():
    rules = MappingRules.parse("split3 enc/qkv_w axis=1\n")
    out, _ = rules.apply(TensorArchive({"enc/qkv_w": np.zeros((2, 6), np.float32)}, "native", {}))
    assert out.names() == ["enc/query_w", "enc/key_w", "enc/value_w"]


def test_bad_split_and_collision():
    archive = TensorArchive({"a/w": np.zeros((4, 2), np.float32), "b/w": np.zeros(1, np.float32)}, "native", {})
    with pytest.raises(RuleError):
        MappingRules.parse("split3 a/w axis=0\n").apply(archive)
    with pytest.raises(RuleError):
        MappingRules.parse("rename */w x/w\n").apply(archive)
    with pytest.raises(RuleError):
        MappingRules.parse("explode a/w\n")


def test_concat_order_independent():
    parts = {n: np.full((1, 2), i, np.float32) for i, n in enumerate(["v", "q", "k"])}
    rules = MappingRules.parse("concat3 q k v axis=0 qkv\n")
    out, _ = rules.apply(TensorArchive(parts, "native", {}))
    assert out.names() == ["qkv"]
    assert np.array_equal(out["qkv"][:, 0], [1, 2, 0])


def gpt_like_archive(rng, layers=2, h=8, f=12, vocab=11, positions=20):
    t = {"wte": rng.normal(size=(vocab, h)), "wpe": rng.normal(size=(positions, h)),
         "wtt": rng.normal(size=(2, h)), "ln_e/g": rng.normal(size=h), "ln_e/b": rng.normal(size=h)}
    for i in range(layers):
        t[f"h{i}/attn/c_attn/w"] = rng.normal(size=(3 * h, h))
        t[f"h{i}/attn/c_attn/b"] = rng.normal(size=3 * h)
        t[f"h{i}/attn/c_proj/w"] = rng.normal(size=(h, h))
        t[f"h{i}/attn/c_proj/b"] = rng.normal(size=h)
        t[f"h{i}/mlp/c_fc/w"] = rng.normal(size=(f, h))
        t[f"h{i}/mlp/c_fc/b"] = rng.normal(size=f)
        t[f"h{i}/mlp/c_proj/w"] = rng.normal(size=(h, f))
        t[f"h{i}/mlp/c_proj/b"] = rng.normal(size=h)
        for ln in ("ln_1", "ln_2"):
            t[f"h{i}/{ln}/g"] = rng.normal(size=h)
            t[f"h{i}/{ln}/b"] = rng.normal(size=h)
    return TensorArchive({k: v.astype(np.float32) for k, v in t.items()}, "gpt-like", {})


def test_gpt_layout_conversion_and_warm_start(rng):
    foreign = gpt_like_archive(rng)
    converted = convert_foreign(foreign, MappingRules.parse(GPT_STYLE_RULES), strict=True)
    fused = foreign["h1/attn/c_attn/w"]
    assert np.array_equal(converted["decoder/layer_1/self/value_w"], fused[16:24].T)
    assert np.array_equal(converted["decoder/layer_0/ffn/inner_w"], foreign["h0/mlp/c_fc/w"].T)
    assert np.array_equal(converted["embeddings/word"], foreign["wte"])
    model = Seq2SeqModel(tiny_config(decoder_only=True))
    report = warm_start(model, converted, "decoder")
    assert report.random == []
    assert np.array_equal(model.params["embeddings/position"].data, foreign["wpe"][:16])
    back = convert_foreign(converted, MappingRules.parse(GPT_STYLE_RULES).inverse())
    assert back.identical(foreign)


def test_roberta_rules_parse():
    rules = MappingRules.parse(ROBERTA_STYLE_RULES)
    assert MappingRules.parse(rules.text()).text() == rules.text()


def test_warm_start_shape_mismatch():
    model = Seq2SeqModel(tiny_config())
    other = model_archive(Seq2SeqModel(tiny_config(hidden_size=12, num_heads=2)), "bert-like")
    with pytest.raises(IncompatibleCheckpointError):
        warm_start(model, other, "encoder")


def test_native_round_trip_restores_model(rng):
    model = Seq2SeqModel(tiny_config(), seed=5)
    fresh = Seq2SeqModel(tiny_config(), seed=6)
    report = warm_start(fresh, model_archive(model))
    assert report.random == []
    for name, t in model.unique_params().items():
        assert np.array_equal(t.data, fresh.params[name].data)


def test_selectors():
    archive = model_archive(Seq2SeqModel(tiny_config(num_layers=3)), "bert-like")
    encoder_only = archive.with_tensors({n: v for n, v in archive.tensors.items() if not n.startswith("decoder/")})
    assert all(n.startswith("embeddings/") for n in embeddings_only(archive).names())
    assert "embeddings/word" not in without_word_embeddings(archive)
    picked = select_layer_subset(encoder_only, [2, 0])
    assert picked.layer_indices("encoder") == [0, 1]
    assert np.array_equal(picked["encoder/layer_0/ffn/inner_w"], archive["encoder/layer_2/ffn/inner_w"])
    with pytest.raises(SelectionError):
        select_layer_subset(encoder_only, [5])
    with pytest.raises(SelectionError):
        embeddings_only(TensorArchive({"x": np.zeros(1, np.float32)}, "native", {}))


def test_parse_layer_list():
    assert parse_layer_list("8,9,12-14") == [8, 9, 12, 13, 14]


names = st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=3).map("/".join)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rename_transpose_inverse_property(seed):
    rng = np.random.default_rng(seed)
    tensors = {f"blk{i}/w": rng.normal(size=(2, 3)).astype(np.float32) for i in range(3)}
    archive = TensorArchive(tensors, "native", {})
    rules = MappingRules.parse("rename blk*/w layer_*/kernel\ntranspose layer_*/kernel\n")
    out, unmatched = rules.apply(archive)
    assert unmatched == [] and out["layer_1/kernel"].shape == (3, 2)
    back, _ = rules.inverse().apply(out)
    assert back.identical(archive)
