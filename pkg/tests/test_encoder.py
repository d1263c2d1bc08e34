import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from petl_retrieval.config import EncoderConfig
from petl_retrieval.encoder import (
    BOS_ID,
    EOS_ID,
    TokenSequence,
    block_forward,
    build_model,
    convert_clip_state_dict,
    embed_image_tokens,
    embed_text_tokens,
    encode,
    l2_normalize,
    load_backbone,
    pool_and_project,
    read_checkpoint,
    save_checkpoint,
)
from petl_retrieval.errors import ConfigError, InputError, NumericalError


@pytest.fixture
def model(toy_cfg):
    return build_model(toy_cfg, seed=0, dtype=torch.float64)


def _images(cfg, n, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, cfg.image_size, cfg.image_size, 3, generator=g, dtype=torch.float64)


def test_full_scale_image_sequence_length():
    cfg = EncoderConfig()
    m = build_model(cfg, device="meta")
    x = embed_image_tokens(torch.zeros(1, 224, 224, 3, device="meta"), m)
    assert x.tokens.shape == (1, 50, 768)


def test_image_sequence_length_64_16():
    cfg = EncoderConfig.toy(image_size=64, patch_size=16)
    x = embed_image_tokens(torch.zeros(64, 64, 3), build_model(cfg))
    assert x.tokens.shape[1] == 17


def test_zero_projection_gives_cls_and_zero_patches(model, toy_cfg):
    with torch.no_grad():
        model.visual.patch_embed.weight.zero_()
        model.visual.pos_embed.zero_()
    x = embed_image_tokens(_images(toy_cfg, 2), model)
    assert torch.equal(x.tokens[:, 1:], torch.zeros_like(x.tokens[:, 1:]))
    assert torch.equal(x.tokens[0, 0], model.visual.cls_token.reshape(-1))


def test_patch_flattening_matches_conv(model, toy_cfg):
    img = _images(toy_cfg, 2)
    w = model.visual.patch_embed.weight.reshape(toy_cfg.vision_width, 3, toy_cfg.patch_size, toy_cfg.patch_size)
    conv = torch.nn.functional.conv2d(img.permute(0, 3, 1, 2), w, stride=toy_cfg.patch_size)
    expected = conv.flatten(2).transpose(1, 2)
    got = embed_image_tokens(img, model).tokens[:, 1:] - model.visual.pos_embed[1:]
    torch.testing.assert_close(got, expected, rtol=1e-10, atol=1e-10)


def test_image_shape_mismatch_is_config_error(model):
    with pytest.raises(ConfigError):
        embed_image_tokens(torch.zeros(1, 16, 16, 3, dtype=torch.float64), model)


def test_text_tokens_structure(model):
    x = embed_text_tokens([BOS_ID, 7, 12, EOS_ID], model)
    assert x.tokens.shape[1] == 4
    assert int(x.eos_index[0]) == 3


def test_zero_positional_table_gives_word_rows(model):
    ids = [BOS_ID, 7, 12, EOS_ID]
    with torch.no_grad():
        model.text.pos_embed.zero_()
    x = embed_text_tokens(ids, model)
    assert torch.equal(x.tokens[0], model.text.token_embed.weight[ids])


def test_text_overlong_and_out_of_vocab(model, toy_cfg):
    with pytest.raises(InputError):
        embed_text_tokens([BOS_ID] + [5] * (toy_cfg.context_length - 1) + [EOS_ID], model)
    with pytest.raises(InputError):
        embed_text_tokens([BOS_ID, toy_cfg.vocab_size, EOS_ID], model)


def test_zero_block_weights_is_identity(model):
    with torch.no_grad():
        for blk in model.visual.blocks:
            for name, p in blk.named_parameters():
                if not name.startswith("ln"):
                    p.zero_()
    x = embed_image_tokens(_images(model.config, 3), model)
    for layer in range(model.config.layers):
        assert torch.equal(block_forward(x, layer, model).tokens, x.tokens)


def test_block_layer_out_of_range(model):
    x = embed_image_tokens(_images(model.config, 1), model)
    with pytest.raises(ConfigError):
        block_forward(x, model.config.layers, model)


@given(
    layers=st.integers(1, 3),
    heads=st.sampled_from([1, 2, 4]),
    head_dim=st.sampled_from([4, 8]),
    grid=st.integers(1, 3),
    n_words=st.integers(1, 6),
)
def test_blocks_preserve_shape(layers, heads, head_dim, grid, n_words):
    cfg = EncoderConfig.toy(layers=layers, vision_heads=heads, text_heads=heads,
                            vision_width=heads * head_dim, text_width=heads * head_dim,
                            patch_size=4, image_size=4 * grid)
    m = build_model(cfg, seed=1)
    seqs = [
        embed_image_tokens(torch.randn(2, cfg.image_size, cfg.image_size, 3), m),
        embed_text_tokens([[BOS_ID, *range(4, 4 + n_words), EOS_ID], [BOS_ID, 5, EOS_ID]], m),
    ]
    for x in seqs:
        for layer in range(layers):
            y = block_forward(x, layer, m)
            assert y.tokens.shape == x.tokens.shape
            x = y


def test_l2_normalize_examples():
    z = l2_normalize(torch.tensor([[3.0, 4.0]], dtype=torch.float64))
    assert torch.allclose(z, torch.tensor([[0.6, 0.8]], dtype=torch.float64))
    u = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
    assert torch.equal(l2_normalize(u), u)
    with pytest.raises(NumericalError):
        l2_normalize(torch.zeros(1, 2))


def test_pool_needs_eos(model):
    x = embed_text_tokens([BOS_ID, 5, EOS_ID], model)
    with pytest.raises(InputError):
        pool_and_project(x.replace(eos_index=None), model)


def test_text_pools_eos_row_and_ignores_padding(model):
    short = [BOS_ID, 9, EOS_ID]
    alone = model.encode_texts([short])
    padded = model.encode_texts([short, [BOS_ID, 9, 10, 11, 12, EOS_ID]])
    torch.testing.assert_close(alone[0], padded[0], rtol=0, atol=1e-12)


def test_encode_deterministic_and_unit_norm(model, toy_cfg):
    imgs = _images(toy_cfg, 5, seed=3)
    a = encode(imgs, model, "image")
    b = encode(imgs, model, "image")
    assert torch.equal(a, b)
    assert torch.equal(encode(imgs, model, "image", dropout_p=0.0), a)
    assert (a.norm(dim=1) - 1).abs().max() < 1e-6
    t = model.encode_texts([[BOS_ID, 4, 5, EOS_ID], [BOS_ID, 6, EOS_ID]])
    assert (t.norm(dim=1) - 1).abs().max() < 1e-6


def test_encode_rejects_bad_dropout(model, toy_cfg):
    with pytest.raises(ConfigError):
        encode(_images(toy_cfg, 1), model, "image", dropout_p=1.0)


def test_augmented_pass_differs_and_is_seeded(model, toy_cfg):
    imgs = _images(toy_cfg, 2)
    a1 = encode(imgs, model, "image", 0.2, torch.Generator().manual_seed(5))
    a2 = encode(imgs, model, "image", 0.2, torch.Generator().manual_seed(5))
    assert torch.equal(a1, a2)
    assert not torch.equal(a1, encode(imgs, model, "image"))


def test_same_seed_same_weights(toy_cfg):
    a = build_model(toy_cfg, seed=4).state_dict()
    b = build_model(toy_cfg, seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_checkpoint_roundtrip(tmp_path, toy_cfg):
    src = build_model(toy_cfg, seed=1)
    path = save_checkpoint(src, tmp_path / "m.safetensors", metadata={"note": "x"})
    tensors, header = read_checkpoint(path)
    assert header["note"] == "x"
    assert set(tensors) == set(src.state_dict())
    assert all(t.dtype == torch.float32 for t in tensors.values())
    dst = build_model(toy_cfg, seed=2)
    load_backbone(dst, path)
    for k, v in src.state_dict().items():
        assert torch.equal(dst.state_dict()[k], v)


def test_checkpoint_shape_mismatch(tmp_path, toy_cfg):
    path = save_checkpoint(build_model(toy_cfg), tmp_path / "m.safetensors")
    with pytest.raises(ConfigError):
        load_backbone(build_model(EncoderConfig.toy(embed_dim=8)), path)


def test_missing_checkpoint(tmp_path, model):
    with pytest.raises(InputError):
        load_backbone(model, tmp_path / "absent.safetensors")


_TO_CLIP = [
    ("visual.patch_embed.weight", "visual.conv1.weight"),
    ("visual.cls_token", "visual.class_embedding"),
    ("visual.pos_embed", "visual.positional_embedding"),
    ("text.token_embed", "token_embedding"),
    ("text.pos_embed", "positional_embedding"),
    ("text.ln_post", "ln_final"),
    ("text.proj", "text_projection"),
    ("text.blocks", "transformer.resblocks"),
    ("visual.blocks", "visual.transformer.resblocks"),
    (".ln1", ".ln_1"),
    (".ln2", ".ln_2"),
    (".attn.qkv.weight", ".attn.in_proj_weight"),
    (".attn.qkv.bias", ".attn.in_proj_bias"),
    (".attn.proj", ".attn.out_proj"),
    (".mlp.w1", ".mlp.c_fc"),
    (".mlp.w2", ".mlp.c_proj"),
]


def test_clip_state_dict_converts_one_to_one(toy_cfg):
    ours = build_model(toy_cfg, seed=0).state_dict()
    s, w = toy_cfg.patch_size, toy_cfg.vision_width
    clip = {"logit_scale": torch.tensor(4.6)}
    for name, t in ours.items():
        new = name
        for a, b in _TO_CLIP:
            new = new.replace(a, b)
        clip[new] = t.reshape(w, 3, s, s) if name == "visual.patch_embed.weight" else t
    converted = convert_clip_state_dict(clip)
    assert set(converted) == set(ours)
    for k, v in converted.items():
        assert torch.equal(v, ours[k]), k


def test_token_sequence_length():
    seq = TokenSequence(torch.zeros(2, 7, 4), "image")
    assert seq.length == 7
    assert np.array_equal(seq.replace(n_prompts=3).tokens.shape, (2, 7, 4))
