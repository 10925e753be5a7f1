import dataclasses
import json

import numpy as np
import pytest
import torch
import yaml

from conftest import SHAPE_CLASSES, small_decoder_config
from vlseg.corpus import AugmentationRecipe, load_split, read_split
from vlseg.decoder import SegModel
from vlseg.errors import ConfigurationError
from vlseg.objective import LossConfig
from vlseg.trainer import (TrainConfig, Trainer, config_from_dict, config_hash,
                           config_to_dict, fit, load_checkpoint_model, load_config,
                           poly_lr, sliding_window_infer)
from vlseg.vlm import HashTextEncoder, tiny_encoder


def shapes_config(shapes_root, tmp_path, **overrides) -> TrainConfig:
    kwargs = dict(
        root=str(shapes_root),
        class_names=list(SHAPE_CLASSES),
        epochs=1,
        batch_labeled=2,
        batch_unlabeled=2,
        base_lr=1e-3,
        backbone_lr_multiplier=0.1,
        crop_size=64,
        text_encoder="anchors",
        out_dir=str(tmp_path / "run"),
        encoder={"logit_scale": 25.0},
        decoder=small_decoder_config(),
        augment=AugmentationRecipe(crop_size=64, scale_range=(0.75, 1.5)),
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


# -- poly schedule -------------------------------------------------------------

def test_poly_lr_endpoints():
    assert poly_lr(0, 100, 0.01) == 0.01
    assert poly_lr(100, 100, 0.01) == 0.0


def test_poly_lr_midpoint():
    expected = 0.01 * 0.5 ** 0.9  # 0.0053588...
    assert abs(poly_lr(50, 100, 0.01, 0.9) - expected) < 1e-12
    assert abs(poly_lr(50, 100, 0.01, 0.9) - 0.01 * 0.5358867312681466) < 1e-12


def test_poly_lr_clamps_with_warning():
    with pytest.warns(UserWarning, match="clamp"):
        assert poly_lr(150, 100, 0.01) == 0.0


# -- configuration ----------------------------------------------------------

def test_config_yaml_roundtrip(tmp_path, shapes_root):
    cfg = shapes_config(shapes_root, tmp_path)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(config_to_dict(cfg)))
    loaded = load_config(path)
    assert config_hash(loaded) == config_hash(cfg)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigurationError, match="unknown"):
        config_from_dict({"not_a_key": 1})


def test_config_validation_errors():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=-1).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(base_lr=0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(fine_tune_mode="adapters").validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(loss=LossConfig(tau=1.5)).validate()


# -- sliding-window inference ----------------------------------------------

def build_tiny_model(seed=0):
    torch.manual_seed(seed)
    model = SegModel(tiny_encoder(seed=seed), small_decoder_config())
    text = HashTextEncoder(dim=32).encode([f"c{i}" for i in range(3)])
    return model, text


def test_sliding_window_single_window_equals_forward():
    model, text = build_tiny_model()
    image = np.random.default_rng(0).random((48, 48, 3)).astype(np.float32)
    probs = sliding_window_infer(model, image, text, window=64, stride=16)
    with torch.no_grad():
        direct = torch.softmax(
            model(torch.as_tensor(image).permute(2, 0, 1), text), dim=0)
    np.testing.assert_allclose(probs, direct.permute(1, 2, 0).numpy(), atol=1e-6)


class _FixedLogitModel(torch.nn.Module):
    """Emits the same logit vector at every pixel; isolates the stitching."""

    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float32)
        self.encoder = tiny_encoder(seed=0)

    def forward(self, image, text):
        h, w = image.shape[-2:]
        return self.logits[:, None, None].expand(-1, h, w)


def test_sliding_window_constant_image_constant_output():
    # A model that predicts the same distribution everywhere must yield a
    # spatially constant stitched map regardless of window overlap counts.
    model = _FixedLogitModel([0.3, -0.2, 1.1])
    text = HashTextEncoder(dim=32).encode(["a", "b", "c"])
    image = np.full((96, 96, 3), 0.25, dtype=np.float32)
    probs = sliding_window_infer(model, image, text, window=64, stride=32)
    spread = probs.max(axis=(0, 1)) - probs.min(axis=(0, 1))
    assert spread.max() < 1e-7
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_sliding_window_matches_naive_accumulation():
    model, text = build_tiny_model(seed=1)
    image = np.random.default_rng(1).random((96, 96, 3)).astype(np.float32)
    probs = sliding_window_infer(model, image, text, window=64, stride=32)

    # independent brute-force accumulation over the same grid
    accum = np.zeros((96, 96, 3), dtype=np.float64)
    counts = np.zeros((96, 96, 1), dtype=np.float64)
    tensor = torch.as_tensor(image).permute(2, 0, 1)
    with torch.no_grad():
        for y in (0, 32):
            for x in (0, 32):
                logits = model(tensor[:, y:y + 64, x:x + 64], text)
                win = torch.softmax(logits, dim=0).permute(1, 2, 0).double().numpy()
                accum[y:y + 64, x:x + 64] += win
                counts[y:y + 64, x:x + 64] += 1.0
    np.testing.assert_allclose(probs, accum / counts, atol=1e-6)


def test_sliding_window_rejects_non_patch_window():
    model, text = build_tiny_model()
    image = np.zeros((32, 32, 3), dtype=np.float32)
    with pytest.raises(Exception, match="divisible"):
        sliding_window_infer(model, image, text, window=50)


# -- train_step ---------------------------------------------------------------

def test_train_step_lr_zero_keeps_parameters(shapes_root, tmp_path):
    cfg = shapes_config(shapes_root, tmp_path, base_lr=1e-12)
    trainer = Trainer(cfg)
    # force a plain zero learning rate through the group bases
    for group in trainer.optimizer.param_groups:
        group["base_lr"] = 0.0
    labeled, unlabeled = load_split(read_split(shapes_root))
    trainer.prepare_guidance(unlabeled)
    before = {n: p.detach().clone() for n, p in trainer.model.named_parameters()}
    trainer.train_step(labeled[:2], unlabeled[:2])
    for name, param in trainer.model.named_parameters():
        assert torch.equal(before[name], param), name


def test_train_step_fully_masked_unlabeled_path(shapes_root, tmp_path):
    # tau = 1.0 masks every pseudo-label (softmax probabilities are < 1), and
    # lambda_dc0 = 0 disables guidance: the update is driven by L_s alone.
    cfg = shapes_config(shapes_root, tmp_path,
                        loss=LossConfig(tau=1.0, lambda_dc0=0.0))
    trainer = Trainer(cfg)
    labeled, unlabeled = load_split(read_split(shapes_root))
    record = trainer.train_step(labeled[:2], unlabeled[:2])
    assert record.L_u == 0.0
    assert record.masked_frac_tau == 0.0
    assert record.L_dc_contrib == 0.0


def test_train_step_supervised_loss_decreases(shapes_root, tmp_path):
    cfg = shapes_config(shapes_root, tmp_path, supervised_only=True, base_lr=3e-3)
    trainer = Trainer(cfg)
    labeled, _ = load_split(read_split(shapes_root))
    losses = []
    for _ in range(50):
        record = trainer.train_step(labeled, [])
        losses.append(record.L_s)
    first = np.mean(losses[:10])
    last = np.mean(losses[-10:])
    assert last < first, f"supervised loss did not decrease: {first:.4f} -> {last:.4f}"


def test_freeze_guarantee_short(shapes_root, tmp_path):
    cfg = shapes_config(shapes_root, tmp_path)
    trainer = Trainer(cfg)
    labeled, unlabeled = load_split(read_split(shapes_root))
    trainer.prepare_guidance(unlabeled)
    roles = trainer.model.encoder.parameter_roles()
    for _ in range(5):
        trainer.train_step(labeled[:2], unlabeled[:2])
    changed_attention = False
    for name, param in trainer.model.encoder.named_parameters():
        same = torch.equal(param, trainer.initial_encoder_state[name])
        if roles[name] in ("mlp", "norm", "patch_embed", "other"):
            assert same, f"{name} should be frozen"
        if roles[name] == "attention" and not same:
            changed_attention = True
    assert changed_attention
    assert not torch.equal(trainer.model.encoder.pos_embed,
                           trainer.initial_encoder_state["pos_embed"])


# -- fit ------------------------------------------------------------------------

def test_fit_zero_epochs(shapes_root, tmp_path):
    cfg = shapes_config(shapes_root, tmp_path, epochs=0)
    result = fit(cfg)
    assert result.records == []
    data = torch.load(result.last_checkpoint, weights_only=False)
    assert data["step"] == 0


def test_fit_writes_records_stream(shapes_root, tmp_path):
    cfg = shapes_config(shapes_root, tmp_path, epochs=1)
    result = fit(cfg)
    lines = (tmp_path / "run" / "records.jsonl").read_text().splitlines()
    assert len(lines) == len(result.records) == 8  # 16 unlabeled / batch 2
    record = json.loads(lines[0])
    assert set(record) == {"step", "L_s", "L_u", "L_dc_contrib", "lambda_dc",
                           "masked_frac_tau", "masked_frac_zeta"}


def test_fit_deterministic_across_runs(shapes_root, tmp_path):
    cfg_a = shapes_config(shapes_root, tmp_path, epochs=1,
                          out_dir=str(tmp_path / "a"))
    cfg_b = shapes_config(shapes_root, tmp_path, epochs=1,
                          out_dir=str(tmp_path / "b"))
    res_a, res_b = fit(cfg_a), fit(cfg_b)
    assert [dataclasses.asdict(r) for r in res_a.records] == \
           [dataclasses.asdict(r) for r in res_b.records]
    assert res_a.history[-1]["miou"] == res_b.history[-1]["miou"]


def test_fit_resume_matches_uninterrupted(shapes_root, tmp_path):
    cfg_full = shapes_config(shapes_root, tmp_path, epochs=2,
                             out_dir=str(tmp_path / "full"))
    full = fit(cfg_full)

    cfg_half = shapes_config(shapes_root, tmp_path, epochs=1,
                             out_dir=str(tmp_path / "half"),
                             loss=LossConfig(total_steps=16))
    half = fit(cfg_half)
    cfg_rest = shapes_config(shapes_root, tmp_path, epochs=2,
                             out_dir=str(tmp_path / "rest"),
                             loss=LossConfig(total_steps=16))
    rest = fit(cfg_rest, resume=half.last_checkpoint)

    # the full run also took 16 total steps (2 epochs x 8 steps)
    full_records = [dataclasses.asdict(r) for r in full.records]
    resumed_records = [dataclasses.asdict(r) for r in half.records + rest.records]
    assert resumed_records == full_records
    assert rest.history[-1]["miou"] == full.history[-1]["miou"]

    ckpt_full = torch.load(full.last_checkpoint, weights_only=False)
    ckpt_rest = torch.load(rest.last_checkpoint, weights_only=False)
    for name, value in ckpt_full["model"].items():
        assert torch.equal(value, ckpt_rest["model"][name]), name


def test_checkpoint_roundtrip_rebuilds_model(shapes_root, tmp_path):
    cfg = shapes_config(shapes_root, tmp_path, epochs=1)
    result = fit(cfg)
    trainer, loaded_cfg = load_checkpoint_model(result.last_checkpoint)
    assert config_hash(loaded_cfg) == config_hash(cfg)
    assert trainer.step == len(result.records)
    labeled, _ = load_split(read_split(shapes_root))
    metrics = trainer.evaluate(labeled)
    assert 0.0 <= metrics["miou"] <= 1.0


def test_fit_missing_labeled_split_fails(tmp_path):
    cfg = shapes_config(tmp_path, tmp_path)  # empty root
    with pytest.raises(FileNotFoundError):
        fit(cfg)
