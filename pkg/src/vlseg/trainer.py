"""Semi-supervised training loop.

One epoch is a pass over the unlabeled set with the labeled loader cycling.
Each step draws its randomness from generators seeded by (run seed, step), so
a run resumed from a checkpoint reproduces the uninterrupted loss trajectory
bit-compatibly on the same hardware and precision.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from . import corpus as corpus_mod
from .corpus import (AugmentationRecipe, SegSample, apply_cutmix, apply_weak_to_grid,
                     read_split_file, sample_channel_mask, strong_augment_pair,
                     weak_augment, weak_augment_with_params)
from .decoder import DecoderConfig, SegModel
from .errors import ConfigurationError, NumericError, ValidationError
from .guidance import (ClassDefinitionSet, DensePseudoLabel, PseudoLabelCache,
                       class_definitions_from_names, load_class_definitions,
                       pseudolabel_image)
from .objective import (LossConfig, PredictionSet, lambda_schedule, supervised_loss,
                        total_loss, unlabeled_loss_terms)
from .vlm import (AnchorTextEncoder, FINE_TUNE_MODES, HashTextEncoder,
                  PatchVisionEncoder, PrecomputedTextEncoder, build_prompts,
                  encoder_fingerprint, load_encoder_checkpoint, partition_parameters)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Every hyperparameter of a run in one validated record.

    See README for the YAML schema; nested sections map onto LossConfig,
    DecoderConfig, and AugmentationRecipe.
    """

    root: str = "."
    class_names: list[str] = field(default_factory=lambda: list(corpus_mod.SHAPES_CLASSES))
    epochs: int = 1
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    base_lr: float = 1e-4
    backbone_lr_multiplier: float = 0.01
    poly_power: float = 0.9
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    crop_size: int = 512
    fine_tune_mode: str = "spatial"
    seed: int = 0
    supervised_only: bool = False
    feature_drop_rate: float = 0.5
    defs_path: Optional[str] = None
    labeled_split: str = "labeled.txt"
    unlabeled_split: str = "unlabeled.txt"
    val_split: str = "val.txt"
    out_dir: str = "runs/default"
    cache_dir: Optional[str] = None
    encoder: dict = field(default_factory=dict)
    text_encoder: str = "hash"
    text_seed: int = 0
    prompt_template: str = "a photo of a {}"
    eval_window: Optional[int] = None
    eval_stride: Optional[int] = None
    loss: LossConfig = field(default_factory=LossConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    augment: AugmentationRecipe = field(default_factory=AugmentationRecipe)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_labeled", "batch_unlabeled", "crop_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be positive, got {self.base_lr}")
        if self.fine_tune_mode not in FINE_TUNE_MODES:
            raise ConfigurationError(
                f"fine_tune_mode must be one of {FINE_TUNE_MODES}, got {self.fine_tune_mode!r}")
        if not 0.0 <= self.feature_drop_rate < 1.0:
            raise ConfigurationError("feature_drop_rate must be in [0, 1)")
        if not self.class_names:
            raise ConfigurationError("class_names must be nonempty")
        try:
            self.loss.validate()
            self.decoder.validate()
            self.augment.validate()
        except ValidationError as err:
            raise ConfigurationError(str(err)) from err


_NESTED = {"loss": LossConfig, "decoder": DecoderConfig, "augment": AugmentationRecipe}
_TUPLE_FIELDS = {"betas", "jitter_strength", "scale_range", "aspp_dilations",
                 "skip_taps", "skip_channels", "fuse_channels"}


def _build_section(cls, data: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    coerced = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
               for k, v in data.items()}
    return cls(**coerced)


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data or {})
    kwargs = {}
    for name, cls in _NESTED.items():
        if name in data:
            kwargs[name] = _build_section(cls, data.pop(name) or {})
    cfg = _build_section(TrainConfig, {**data, **kwargs})
    cfg.validate()
    return cfg


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: Path | str) -> TrainConfig:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected a mapping at top level")
    return config_from_dict(raw)


def config_hash(cfg: TrainConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def poly_lr(step: int, total: int, base: float, power: float = 0.9) -> float:
    """Polynomial decay: base at step 0, zero at step == total."""
    if total <= 0:
        raise ConfigurationError(f"total steps must be positive, got {total}")
    if step < 0 or step > total:
        warnings.warn(f"poly_lr: step {step} outside [0, {total}], clamping")
        step = min(max(step, 0), total)
    return base * (1.0 - step / total) ** power


# ---------------------------------------------------------------------------
# Sliding-window inference
# ---------------------------------------------------------------------------

def sliding_window_infer(model: SegModel, image: np.ndarray, text_embeds: torch.Tensor,
                         window: int, stride: Optional[int] = None) -> np.ndarray:
    """Average overlapping window probabilities over a full image.

    image: H x W x 3 float in [0, 1]. The image is padded symmetrically to a
    patch multiple; windows larger than the padded image shrink to cover it
    exactly, so a window >= image equals a single direct forward pass.
    Returns (H, W, N) probabilities.
    """
    if stride is None:
        stride = max(1, window // 2)
    patch = model.encoder.patch_size
    if window % patch:
        raise ValidationError(f"window {window} must be divisible by patch size {patch}")
    h, w = image.shape[:2]
    ph = (patch - h % patch) % patch
    pw = (patch - w % patch) % patch
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="symmetric") if ph or pw else image
    hp, wp = padded.shape[:2]
    wh, ww = min(window, hp), min(window, wp)

    def positions(extent: int, size: int) -> list[int]:
        pos = list(range(0, extent - size + 1, stride))
        if pos[-1] != extent - size:
            pos.append(extent - size)
        return pos

    tensor = torch.as_tensor(padded, dtype=torch.float32).permute(2, 0, 1)
    n = text_embeds.shape[0]
    accum = torch.zeros(n, hp, wp, dtype=torch.float64)
    counts = torch.zeros(hp, wp, dtype=torch.float64)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for y in positions(hp, wh):
            for x in positions(wp, ww):
                logits = model(tensor[:, y:y + wh, x:x + ww], text_embeds)
                probs = torch.softmax(logits, dim=0).double()
                accum[:, y:y + wh, x:x + ww] += probs
                counts[y:y + wh, x:x + ww] += 1.0
    if was_training:
        model.train()
    probs = (accum / counts).permute(1, 2, 0)[:h, :w]
    return probs.float().numpy()


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class LossRecord:
    """One line of the training record stream."""

    step: int
    L_s: float
    L_u: float
    L_dc_contrib: float
    lambda_dc: float
    masked_frac_tau: float
    masked_frac_zeta: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


def _to_batch(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.as_tensor(np.stack(images), dtype=torch.float32).permute(0, 3, 1, 2)


def _build_text_encoder(cfg: TrainConfig, dim: int):
    if cfg.text_encoder == "hash":
        return HashTextEncoder(dim=dim)
    if cfg.text_encoder == "anchors":
        return AnchorTextEncoder(dim=dim, class_names=cfg.class_names,
                                 template=cfg.prompt_template, seed=cfg.text_seed)
    return PrecomputedTextEncoder(cfg.text_encoder)


def build_encoder(cfg: TrainConfig) -> PatchVisionEncoder:
    spec = dict(cfg.encoder)
    checkpoint = spec.pop("checkpoint", None)
    if checkpoint:
        if spec:
            raise ConfigurationError("encoder checkpoint and inline hyperparameters both given")
        return load_encoder_checkpoint(checkpoint)
    spec.setdefault("patch_size", 16)
    spec.setdefault("embed_dim", 32)
    spec.setdefault("depth", 4)
    spec.setdefault("num_heads", 4)
    spec.setdefault("mlp_ratio", 2.0)
    spec.setdefault("base_image_size", 64)
    return PatchVisionEncoder(**spec)


class Trainer:
    """Owns the single trainable model; all weight mutation happens here."""

    def __init__(self, cfg: TrainConfig):
        cfg.validate()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        encoder = build_encoder(cfg)
        if cfg.crop_size % encoder.patch_size:
            raise ConfigurationError(
                f"crop_size {cfg.crop_size} not divisible by patch size {encoder.patch_size}")
        decoder_cfg = cfg.decoder
        if not decoder_cfg.decoupled and decoder_cfg.num_classes is None:
            decoder_cfg = dataclasses.replace(decoder_cfg, num_classes=len(cfg.class_names))
        self.model = SegModel(encoder, decoder_cfg)
        self.frozen_encoder = copy.deepcopy(encoder)
        self.frozen_encoder.eval()
        for p in self.frozen_encoder.parameters():
            p.requires_grad_(False)

        self.partition = partition_parameters(encoder, cfg.fine_tune_mode)
        self.partition.apply(encoder)
        self.initial_encoder_state = {
            name: p.detach().clone() for name, p in encoder.named_parameters()
        }

        self.text_encoder = _build_text_encoder(cfg, encoder.out_dim)
        prompts = build_prompts(cfg.class_names, cfg.prompt_template)
        self.text = self.text_encoder.encode(prompts)

        encoder_params = [p for n, p in encoder.named_parameters() if n in self.partition.trainable]
        groups = []
        if encoder_params:
            groups.append({"params": encoder_params,
                           "base_lr": cfg.base_lr * cfg.backbone_lr_multiplier,
                           "lr": cfg.base_lr * cfg.backbone_lr_multiplier})
        groups.append({"params": list(self.model.decoder.parameters()),
                       "base_lr": cfg.base_lr, "lr": cfg.base_lr})
        self.optimizer = torch.optim.AdamW(groups, lr=cfg.base_lr,
                                           betas=tuple(cfg.betas),
                                           weight_decay=cfg.weight_decay)

        self.step = 0
        self.epoch = 0
        self.total_steps: Optional[int] = cfg.loss.total_steps
        self.history: list[dict] = []
        self.pseudo_labels: dict[str, DensePseudoLabel] = {}
        self.defs: Optional[ClassDefinitionSet] = None

    # -- guidance ----------------------------------------------------------

    @property
    def guidance_enabled(self) -> bool:
        return (not self.cfg.supervised_only) and self.cfg.loss.lambda_dc0 > 0

    def load_definitions(self) -> ClassDefinitionSet:
        if self.defs is None:
            if self.cfg.defs_path:
                self.defs = load_class_definitions(self.cfg.defs_path,
                                                   expected_classes=self.cfg.class_names)
            else:
                self.defs = class_definitions_from_names(self.cfg.class_names)
        return self.defs

    def prepare_guidance(self, unlabeled: Sequence[SegSample]) -> None:
        """Compute (or load cached) frozen-model pseudo-labels for every
        unlabeled image at its native resolution."""
        if not self.guidance_enabled:
            return
        defs = self.load_definitions()
        cache_dir = Path(self.cfg.cache_dir or Path(self.cfg.out_dir) / "cache")
        cache = PseudoLabelCache(cache_dir, defs.fingerprint(),
                                 encoder_fingerprint(self.frozen_encoder))
        for sample in unlabeled:
            label = cache.get(sample.id)
            if label is None:
                h, w = sample.image.shape[:2]
                patch = self.frozen_encoder.patch_size
                ph = (patch - h % patch) % patch
                pw = (patch - w % patch) % patch
                image = np.pad(sample.image, ((0, ph), (0, pw), (0, 0)), mode="symmetric") \
                    if ph or pw else sample.image
                label = pseudolabel_image(image, defs, self.frozen_encoder,
                                          self.text_encoder, out_hw=(h + ph, w + pw),
                                          template=self.cfg.prompt_template)
                label = DensePseudoLabel(probs=label.probs[:h, :w],
                                         confidence=label.confidence[:h, :w])
                cache.put(sample.id, label)
            self.pseudo_labels[sample.id] = label

    # -- one optimization step ---------------------------------------------

    def _apply_lr(self) -> None:
        # Without a configured step budget there is nothing to decay against.
        for group in self.optimizer.param_groups:
            if self.total_steps:
                group["lr"] = poly_lr(min(self.step, self.total_steps), self.total_steps,
                                      group["base_lr"], self.cfg.poly_power)
            else:
                group["lr"] = group["base_lr"]

    def train_step(self, labeled_batch: Sequence[SegSample],
                   unlabeled_batch: Sequence[SegSample]) -> LossRecord:
        cfg = self.cfg
        n_classes = len(cfg.class_names)
        rng = np.random.default_rng([cfg.seed, 9176, self.step])
        rng_l, rng_u, rng_s, rng_f = rng.spawn(4)
        self.model.train()

        images, masks = [], []
        for sample in labeled_batch:
            aug = weak_augment(sample, cfg.augment, rng_l)
            images.append(aug.image)
            masks.append(aug.mask)
        x_l = _to_batch(images)
        y_l = torch.as_tensor(np.stack(masks))
        logits_l = self.model(x_l, self.text)
        loss_s = supervised_loss(logits_l.permute(0, 2, 3, 1), y_l)

        lambda_dc = 0.0
        if cfg.supervised_only or not unlabeled_batch:
            loss_u = torch.zeros((), dtype=loss_s.dtype)
            terms = None
        else:
            if self.total_steps:
                sched_cfg = dataclasses.replace(cfg.loss, total_steps=self.total_steps)
                lambda_dc = lambda_schedule(min(self.step, self.total_steps), sched_cfg)
            else:
                lambda_dc = cfg.loss.lambda_dc0
            weak_samples, valids, dc_probs, dc_confs = [], [], [], []
            for sample in unlabeled_batch:
                aug, params = weak_augment_with_params(sample, cfg.augment, rng_u)
                weak_samples.append(aug)
                ones = np.ones(sample.image.shape[:2], dtype=np.float32)
                valids.append(apply_weak_to_grid(ones, params, fill=0.0) >= 0.5)
                if self.guidance_enabled:
                    label = self.pseudo_labels[sample.id]
                    probs = apply_weak_to_grid(label.probs, params, fill=1.0 / n_classes)
                    probs = probs / probs.sum(axis=-1, keepdims=True)
                    dc_probs.append(probs)
                    dc_confs.append(apply_weak_to_grid(label.confidence, params, fill=0.0))

            x_u_w = _to_batch([s.image for s in weak_samples])
            with torch.no_grad():
                p_u = torch.softmax(self.model(x_u_w, self.text), dim=1).permute(0, 2, 3, 1)

            pair = strong_augment_pair(weak_samples, cfg.augment, rng_s)
            boxes1 = torch.as_tensor(pair.boxes1)
            boxes2 = torch.as_tensor(pair.boxes2)
            valid = torch.as_tensor(np.stack(valids))

            dense, skips = self.model.encoder.forward_features(x_u_w)
            keep = np.stack([
                sample_channel_mask(dense.shape[1], cfg.feature_drop_rate, rng_f)
                for _ in range(dense.shape[0])
            ])
            scale = torch.as_tensor(keep, dtype=dense.dtype) / (1.0 - cfg.feature_drop_rate)
            dense_p = dense * scale[:, :, None, None]
            logits_fp = self.model.decode_features(dense_p, skips, self.text,
                                                   x_u_w.shape[-2:])
            p_fp = torch.softmax(logits_fp, dim=1).permute(0, 2, 3, 1)
            p_p1 = torch.softmax(self.model(_to_batch([s.image for s in pair.view1]),
                                            self.text), dim=1).permute(0, 2, 3, 1)
            p_p2 = torch.softmax(self.model(_to_batch([s.image for s in pair.view2]),
                                            self.text), dim=1).permute(0, 2, 3, 1)

            preds = PredictionSet(
                p_u=p_u, p_fp=p_fp, p_p1=p_p1, p_p2=p_p2,
                valid=valid,
                p_u_1=apply_cutmix(p_u, boxes1), p_u_2=apply_cutmix(p_u, boxes2),
                valid_1=apply_cutmix(valid, boxes1), valid_2=apply_cutmix(valid, boxes2),
            )
            if self.guidance_enabled:
                dc = torch.as_tensor(np.stack(dc_probs))
                conf = torch.as_tensor(np.stack(dc_confs))
                preds.p_dc, preds.dc_confidence = dc, conf
                preds.p_dc_1 = apply_cutmix(dc, boxes1)
                preds.p_dc_2 = apply_cutmix(dc, boxes2)
                preds.dc_confidence_1 = apply_cutmix(conf, boxes1)
                preds.dc_confidence_2 = apply_cutmix(conf, boxes2)
            terms = unlabeled_loss_terms(preds, cfg.loss, lambda_dc)
            loss_u = terms.total

        loss = total_loss(loss_s, loss_u)
        self.optimizer.zero_grad()
        loss.backward()
        self._apply_lr()
        self.optimizer.step()
        record = LossRecord(
            step=self.step,
            L_s=float(loss_s.detach()),
            L_u=float(loss_u.detach()),
            L_dc_contrib=terms.dc_contrib if terms else 0.0,
            lambda_dc=lambda_dc,
            masked_frac_tau=terms.masked_frac_tau if terms else 0.0,
            masked_frac_zeta=terms.masked_frac_zeta if terms else 0.0,
        )
        self.step += 1
        return record

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, samples: Sequence[SegSample]) -> dict:
        from .evalcli import ConfusionMatrix, accumulate, iou_report
        n = len(self.cfg.class_names)
        window = self.cfg.eval_window or self.cfg.crop_size
        stride = self.cfg.eval_stride or max(1, window // 2)
        cm = ConfusionMatrix.empty(n)
        for sample in samples:
            probs = sliding_window_infer(self.model, sample.image, self.text, window, stride)
            accumulate(cm, probs.argmax(axis=-1), sample.mask)
        report = iou_report(cm)
        return {"miou": report.miou,
                "per_class": {name: iou for name, iou in
                              zip(self.cfg.class_names, report.per_class)}}

    # -- checkpointing -------------------------------------------------------

    def save_checkpoint(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "version": 1,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "total_steps": self.total_steps,
            "config": config_to_dict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "rng": {"torch": torch.get_rng_state()},
            "history": self.history,
        }, path)
        return path

    def load_checkpoint(self, path: Path | str) -> None:
        data = torch.load(Path(path), map_location="cpu", weights_only=False)
        if data.get("version") != 1:
            raise ConfigurationError(f"unsupported checkpoint version in {path}")
        if data["config_hash"] != config_hash(self.cfg):
            warnings.warn("checkpoint was produced by a different configuration")
        self.model.load_state_dict(data["model"])
        self.optimizer.load_state_dict(data["optimizer"])
        self.step = data["step"]
        self.epoch = data["epoch"]
        self.total_steps = data["total_steps"]
        self.history = list(data["history"])
        torch.set_rng_state(data["rng"]["torch"])


def load_checkpoint_model(path: Path | str) -> tuple[Trainer, TrainConfig]:
    """Rebuild a trainer (model + config) from a saved checkpoint."""
    data = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = config_from_dict(data["config"])
    trainer = Trainer(cfg)
    trainer.load_checkpoint(path)
    return trainer, cfg


# ---------------------------------------------------------------------------
# Fit loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    last_checkpoint: Path
    best_checkpoint: Optional[Path]
    history: list[dict]
    records: list[LossRecord]


def _epoch_batches(ids: Sequence[int], batch: int, rng: np.random.Generator,
                   cycle_to: Optional[int] = None) -> list[list[int]]:
    order = rng.permutation(len(ids)).tolist()
    if cycle_to is not None:
        need = cycle_to * batch
        reps = -(-need // max(1, len(order)))
        order = (order * reps)[:need]
    return [order[i * batch:(i + 1) * batch] for i in range(len(order) // batch)]


def fit(cfg: TrainConfig, resume: Optional[Path | str] = None) -> FitResult:
    """Train per the configuration, evaluating and checkpointing each epoch."""
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = corpus_mod.read_split(Path(cfg.root), cfg.labeled_split, cfg.unlabeled_split)
    labeled, unlabeled = corpus_mod.load_split(split)
    if not labeled:
        raise ConfigurationError("training requires at least one labeled sample")
    val_path = Path(cfg.root) / cfg.val_split
    val_ids = read_split_file(val_path)
    val_samples = [corpus_mod.load_sample(Path(cfg.root), i, with_mask=True) for i in val_ids]

    trainer = Trainer(cfg)
    # The epoch length follows the unlabeled set even for the supervised-only
    # baseline, so ablations compare runs with identical step counts.
    if unlabeled:
        steps_per_epoch = max(1, len(unlabeled) // cfg.batch_unlabeled)
    else:
        steps_per_epoch = max(1, len(labeled) // cfg.batch_labeled)
    trainer.total_steps = cfg.loss.total_steps or max(1, cfg.epochs * steps_per_epoch)
    trainer.prepare_guidance(unlabeled)
    if resume:
        trainer.load_checkpoint(resume)

    records: list[LossRecord] = []
    records_path = out_dir / "records.jsonl"
    best_miou = max((h["miou"] for h in trainer.history), default=-1.0)
    best_path = out_dir / "best.ckpt" if (out_dir / "best.ckpt").exists() or cfg.epochs else None

    with records_path.open("a") as stream:
        for epoch in range(trainer.epoch, cfg.epochs):
            trainer.epoch = epoch
            rng_epoch = np.random.default_rng([cfg.seed, 551, epoch])
            rng_l, rng_u = rng_epoch.spawn(2)
            if unlabeled:
                unlabeled_batches = _epoch_batches(range(len(unlabeled)),
                                                   cfg.batch_unlabeled, rng_u)
            else:
                unlabeled_batches = [[] for _ in range(steps_per_epoch)]
            labeled_batches = _epoch_batches(range(len(labeled)), cfg.batch_labeled,
                                             rng_l, cycle_to=len(unlabeled_batches))
            for bl, bu in zip(labeled_batches, unlabeled_batches):
                try:
                    record = trainer.train_step([labeled[i] for i in bl],
                                                [unlabeled[i] for i in bu])
                except NumericError as err:
                    last = out_dir / "last.ckpt"
                    raise NumericError(
                        f"{err}; last good checkpoint: "
                        f"{last if last.exists() else 'none saved yet'}") from err
                records.append(record)
                stream.write(record.to_json() + "\n")
            trainer.epoch = epoch + 1
            metrics = trainer.evaluate(val_samples)
            metrics["epoch"] = epoch
            metrics["step"] = trainer.step
            trainer.history.append(metrics)
            trainer.save_checkpoint(out_dir / "last.ckpt")
            if metrics["miou"] > best_miou:
                best_miou = metrics["miou"]
                best_path = trainer.save_checkpoint(out_dir / "best.ckpt")

    last_path = trainer.save_checkpoint(out_dir / "last.ckpt")
    return FitResult(last_checkpoint=last_path, best_checkpoint=best_path,
                     history=trainer.history, records=records)
