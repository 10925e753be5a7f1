import os

import numpy as np
import pytest
import torch

from vlseg.errors import ValidationError
from vlseg.vlm import (AnchorTextEncoder, HashTextEncoder, PatchVisionEncoder,
                       build_prompts, convert_state_dict, encoder_fingerprint,
                       load_encoder_checkpoint, load_weight_map, partition_parameters,
                       random_text_anchors, save_encoder_checkpoint, tiny_encoder)


# -- prompts -------------------------------------------------------------

def test_build_prompts_basic():
    assert build_prompts(["cow"], "a photo of a {}") == ["a photo of a cow"]


def test_build_prompts_empty():
    assert build_prompts([], "a photo of a {}") == []


def test_build_prompts_preserves_order():
    out = build_prompts(["armchair", "deckchair"], "a photo of a {}")
    assert out == ["a photo of a armchair", "a photo of a deckchair"]


@pytest.mark.parametrize("template", ["no placeholder", "two {} holes {}"])
def test_build_prompts_rejects_bad_template(template):
    with pytest.raises(ValidationError):
        build_prompts(["x"], template)


# -- text encoders ---------------------------------------------------------

def test_encode_text_deterministic():
    enc = HashTextEncoder(dim=16)
    out = enc.encode(["a photo of a cat", "a photo of a cat"])
    torch.testing.assert_close(out[0], out[1])


def test_encode_text_shape():
    enc = HashTextEncoder(dim=24)
    out = enc.encode([f"prompt {i}" for i in range(5)])
    assert out.shape == (5, 24)
    assert enc.encode([]).shape == (0, 24)


def test_encode_text_truncates_with_warning():
    enc = HashTextEncoder(dim=8, context_length=3)
    with pytest.warns(UserWarning, match="truncating"):
        long = enc.encode(["one two three four five"])
    short = enc.encode(["one two three"])
    torch.testing.assert_close(long, short)


def test_anchor_encoder_separation():
    anchors = random_text_anchors(3, 16, seed=0)
    gram = anchors @ anchors.T
    torch.testing.assert_close(gram, torch.eye(3), atol=1e-5, rtol=0)
    enc = AnchorTextEncoder(dim=16, class_names=["a", "b"], seed=1)
    out = enc.encode(["a photo of a a", "a photo of a b", "something else"])
    assert out.shape == (3, 16)
    assert abs(out[0] @ out[1]) < 1e-5


def test_random_anchors_reject_overflow():
    with pytest.raises(ValidationError):
        random_text_anchors(10, 4)


@pytest.mark.skipif("VLSEG_VLM_CHECKPOINT" not in os.environ,
                    reason="needs a converted pretrained checkpoint")
def test_pretrained_text_semantics():
    # With real vision-language weights, related prompts must score closer
    # than unrelated ones.
    from vlseg.vlm import PrecomputedTextEncoder
    enc = PrecomputedTextEncoder(os.environ["VLSEG_TEXT_EMBEDDINGS"])
    cat, dog, light = enc.encode([
        "a photo of a cat", "a photo of a dog", "a photo of a traffic light"])

    def cos(a, b):
        return float(a @ b / (a.norm() * b.norm()))

    assert cos(cat, dog) > cos(cat, light)


# -- vision encoder ----------------------------------------------------------

def test_dense_shape_contract(encoder):
    image = torch.rand(3, 64, 64)
    out = encoder.encode_image_dense(image)
    assert out.shape == (4, 4, encoder.out_dim)


def test_dense_shape_large_input(encoder):
    image = torch.rand(1, 3, 512, 512)
    out = encoder.encode_image_dense(image)
    assert out.shape == (1, 32, 32, encoder.out_dim)


def test_dense_rejects_indivisible(encoder):
    with pytest.raises(ValidationError, match="divisible"):
        encoder.encode_image_dense(torch.rand(3, 60, 64))


def test_dense_modes_differ(encoder):
    image = torch.rand(3, 64, 64)
    standard = encoder.encode_image_dense(image)
    value_only = encoder.encode_image_dense(image, dense_mode="value_only")
    assert not torch.allclose(standard, value_only)


def test_constant_image_has_lower_patch_variance(encoder):
    torch.manual_seed(0)
    constant = torch.full((3, 64, 64), 0.5)
    natural = torch.rand(3, 64, 64)
    var_const = encoder.encode_image_dense(constant).flatten(0, 1).var(dim=0).mean()
    var_nat = encoder.encode_image_dense(natural).flatten(0, 1).var(dim=0).mean()
    assert var_const < var_nat


def test_text_and_vision_dims_match(encoder):
    text = HashTextEncoder(dim=encoder.out_dim).encode(["a"])
    dense = encoder.encode_image_dense(torch.rand(3, 64, 64))
    assert text.shape[1] == dense.shape[-1]


def test_skip_grids_per_block(encoder):
    dense, skips = encoder.forward_features(torch.rand(2, 3, 64, 64))
    assert len(skips) == encoder.depth
    for skip in skips:
        assert skip.shape == (2, encoder.embed_dim, 4, 4)


# -- parameter partition -------------------------------------------------

def test_partition_spatial_examples(encoder):
    part = partition_parameters(encoder, "spatial")
    assert "blocks.3.attn.qkv.weight" in part.trainable
    assert "blocks.3.mlp.fc1.weight" in part.frozen
    assert "pos_embed" in part.trainable
    assert "patch_embed.weight" in part.frozen
    assert "blocks.0.ln1.weight" in part.frozen
    assert "ln_post.weight" in part.frozen


@pytest.mark.parametrize("mode", ["spatial", "full", "frozen"])
def test_partition_is_bipartition(encoder, mode):
    part = partition_parameters(encoder, mode)
    names = {n for n, _ in encoder.named_parameters()}
    assert part.trainable | part.frozen == names
    assert not (part.trainable & part.frozen)
    if mode == "full":
        assert part.frozen == set()
    if mode == "frozen":
        assert part.trainable == set()


def test_partition_rejects_unknown_mode(encoder):
    with pytest.raises(ValidationError):
        partition_parameters(encoder, "lora")


def test_partition_untagged_parameter_named(encoder):
    encoder.rogue = torch.nn.Parameter(torch.zeros(1))
    with pytest.raises(ValidationError, match="rogue"):
        partition_parameters(encoder, "spatial")


def test_partition_apply_sets_requires_grad(encoder):
    partition_parameters(encoder, "spatial").apply(encoder)
    for name, param in encoder.named_parameters():
        if ".mlp." in name:
            assert not param.requires_grad
        if ".attn." in name:
            assert param.requires_grad


def test_logit_scale_is_never_trainable(encoder):
    names = {n for n, _ in encoder.named_parameters()}
    assert "logit_scale" not in names
    assert float(encoder.logit_scale) == 100.0


# -- checkpoints -----------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, encoder):
    path = tmp_path / "enc.npz"
    save_encoder_checkpoint(encoder, path)
    loaded = load_encoder_checkpoint(path)
    image = torch.rand(1, 3, 64, 64)
    torch.testing.assert_close(loaded.encode_image_dense(image),
                               encoder.encode_image_dense(image))
    assert encoder_fingerprint(loaded) == encoder_fingerprint(encoder)


def test_weight_map_parse(tmp_path):
    path = tmp_path / "map.txt"
    path.write_text(
        "# comment\n"
        "visual.blocks.0.attn.in_proj_weight -> blocks.0.attn.qkv.weight\n"
        "visual.pos -> pos_embed  # trailing comment\n"
    )
    mapping = load_weight_map(path)
    assert mapping == {
        "visual.blocks.0.attn.in_proj_weight": "blocks.0.attn.qkv.weight",
        "visual.pos": "pos_embed",
    }


def test_weight_map_rejects_bad_lines(tmp_path):
    path = tmp_path / "map.txt"
    path.write_text("just a name\n")
    with pytest.raises(ValidationError):
        load_weight_map(path)


def test_convert_state_dict(tmp_path):
    source = {"src.a": np.ones(3), "src.b": np.zeros(2), "src.unused": np.ones(1)}
    mapping = {"src.a": "dst.a", "src.b": "dst.b"}
    with pytest.warns(UserWarning, match="unmapped"):
        out = convert_state_dict(source, mapping)
    assert set(out) == {"dst.a", "dst.b"}
    with pytest.raises(ValidationError, match="missing"):
        convert_state_dict({}, mapping)


def test_tiny_encoder_is_deterministic():
    a, b = tiny_encoder(seed=5), tiny_encoder(seed=5)
    assert encoder_fingerprint(a) == encoder_fingerprint(b)
