"""Dense pseudo-labels from a frozen vision-language encoder.

The frozen encoder scores every pixel against a set of concept phrases (one
or more per class, taken from annotation-guideline class definitions); the
best-scoring concept of a class gives that class its score. High-confidence
pixels then guide the consistency training.

Class-definition file schema (YAML):

    classes: [background, circle, square]   # dataset class order
    concepts:                                # optional; omitted classes
      background: [background, floor]        # default to their own name
      circle: [circle, disk, round shape]

Pseudo-labels are deterministic for fixed weights, so they are computed once
per image and cached on disk keyed by image id, definition hash, and encoder
fingerprint.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .decoder import cosine_similarity_grid
from .errors import ValidationError
from .vlm import DEFAULT_PROMPT_TEMPLATE, PatchVisionEncoder, build_prompts


@dataclass
class ClassDefinitionSet:
    """Ordered class names and the concept phrases owned by each class."""

    classes: list[str]
    concepts: dict[int, list[str]]

    def validate(self) -> None:
        if len(set(self.classes)) != len(self.classes):
            raise ValidationError("duplicate class names")
        for index in range(len(self.classes)):
            phrases = self.concepts.get(index)
            if not phrases:
                raise ValidationError(
                    f"class {self.classes[index]!r} has an empty concept list")

    def flat_concepts(self) -> tuple[list[str], list[int]]:
        """All concept phrases in class order plus each phrase's owning class."""
        phrases, owners = [], []
        for index in range(len(self.classes)):
            for phrase in self.concepts[index]:
                phrases.append(phrase)
                owners.append(index)
        return phrases, owners

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for index, name in enumerate(self.classes):
            digest.update(name.encode("utf-8"))
            for phrase in self.concepts[index]:
                digest.update(b"\x00" + phrase.encode("utf-8"))
            digest.update(b"\x01")
        return digest.hexdigest()


def class_definitions_from_names(classes: Sequence[str]) -> ClassDefinitionSet:
    """Each class defined by its own name only."""
    defs = ClassDefinitionSet(classes=list(classes),
                              concepts={i: [name] for i, name in enumerate(classes)})
    defs.validate()
    return defs


def load_class_definitions(path: Path | str,
                           expected_classes: Optional[Sequence[str]] = None
                           ) -> ClassDefinitionSet:
    """Parse and validate a class-definition file.

    Unknown class names under `concepts` are fatal; duplicate phrases within
    one class are dropped with a warning; classes without an entry fall back
    to their own name.
    """
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict) or "classes" not in raw:
        raise ValidationError(f"{path}: expected a mapping with a 'classes' list")
    classes = [str(c) for c in raw["classes"]]
    if expected_classes is not None and list(expected_classes) != classes:
        raise ValidationError(
            f"{path}: class order {classes} does not match dataset classes "
            f"{list(expected_classes)}")
    by_name = raw.get("concepts") or {}
    unknown = sorted(set(by_name) - set(classes))
    if unknown:
        raise ValidationError(f"{path}: concepts listed for unknown classes {unknown}")
    concepts: dict[int, list[str]] = {}
    for index, name in enumerate(classes):
        entry = by_name.get(name, None)
        phrases = [name] if entry is None else [str(p) for p in entry]
        if not phrases:
            raise ValidationError(f"{path}: class {name!r} has an empty concept list")
        deduped = list(dict.fromkeys(phrases))
        if len(deduped) != len(phrases):
            warnings.warn(f"{path}: duplicate concepts for class {name!r} dropped")
        concepts[index] = deduped
    defs = ClassDefinitionSet(classes=classes, concepts=concepts)
    defs.validate()
    return defs


def bundled_definitions_path(name: str) -> Path:
    """Path of a class-definition file shipped with the package
    (voc, cityscapes, voc_gpt, voc_oxford)."""
    path = Path(__file__).parent / "data" / f"{name}_defs.yaml"
    if not path.exists():
        raise ValidationError(f"no bundled class definitions named {name!r}")
    return path


# ---------------------------------------------------------------------------
# Dense pseudo-labels
# ---------------------------------------------------------------------------

@dataclass
class DensePseudoLabel:
    """Per-pixel class probabilities plus the confidence used for gating.

    confidence is the per-pixel maximum of the raw max-aggregated class
    scores, recorded before any renormalization: the scores of a pixel need
    not sum to one (several classes can share concept mass), so thresholding
    must use this stored field rather than assume normalized probabilities.
    """

    probs: np.ndarray
    confidence: np.ndarray

    def validate(self) -> None:
        if self.probs.shape[:-1] != self.confidence.shape:
            raise ValidationError(
                f"probs {self.probs.shape} and confidence {self.confidence.shape} disagree")
        if (self.probs < 0).any():
            raise ValidationError("pseudo-label probabilities must be non-negative")


def concept_scores(image: np.ndarray, defs: ClassDefinitionSet,
                   frozen_encoder: PatchVisionEncoder, text_encoder,
                   template: str = DEFAULT_PROMPT_TEMPLATE) -> np.ndarray:
    """Softmax over all concepts of the patch-wise similarity logits.

    image: H x W x 3 float in [0, 1]. Returns (h, w, M) with one probability
    column per concept phrase; rows sum to one. The similarity logits are
    scaled by the frozen encoder's learned logit scale before the softmax.
    """
    defs.validate()
    phrases, _ = defs.flat_concepts()
    prompts = build_prompts(phrases, template)
    with torch.no_grad():
        text = text_encoder.encode(prompts)
        tensor = torch.as_tensor(image, dtype=torch.float32).permute(2, 0, 1).unsqueeze(0)
        dense, _ = frozen_encoder.forward_features(tensor, dense_mode="value_only")
        sims = cosine_similarity_grid(dense, text)[0]
        logits = frozen_encoder.logit_scale * sims
        probs = torch.softmax(logits, dim=0).permute(1, 2, 0)
    return probs.numpy()


def aggregate_concepts(p_concept: np.ndarray, defs: ClassDefinitionSet) -> DensePseudoLabel:
    """Max-aggregate concept probabilities to class scores.

    p_concept: (h, w, M) over the flattened concept list. Each class scores as
    the maximum of its own concepts; the per-pixel maximum over classes is the
    stored confidence. Scores are returned raw (no renormalization).
    """
    _, owners = defs.flat_concepts()
    if p_concept.shape[-1] != len(owners):
        raise ValidationError(
            f"expected {len(owners)} concept columns, got {p_concept.shape[-1]}")
    owners = np.asarray(owners)
    n = len(defs.classes)
    scores = np.zeros(p_concept.shape[:-1] + (n,), dtype=p_concept.dtype)
    for a in range(n):
        scores[..., a] = p_concept[..., owners == a].max(axis=-1)
    return DensePseudoLabel(probs=scores, confidence=scores.max(axis=-1))


def upsample_pseudo_label(label: DensePseudoLabel, out_hw: tuple[int, int]) -> DensePseudoLabel:
    """Bilinearly upsample to the resolution where the loss is applied, then
    renormalize the class scores per pixel; confidence upsamples alongside."""
    probs = torch.as_tensor(label.probs, dtype=torch.float32).permute(2, 0, 1).unsqueeze(0)
    conf = torch.as_tensor(label.confidence, dtype=torch.float32)[None, None]
    probs = F.interpolate(probs, size=out_hw, mode="bilinear", align_corners=False)
    conf = F.interpolate(conf, size=out_hw, mode="bilinear", align_corners=False)
    probs = probs / probs.sum(dim=1, keepdim=True)
    return DensePseudoLabel(probs=probs[0].permute(1, 2, 0).numpy(),
                            confidence=conf[0, 0].numpy())


def pseudolabel_image(image: np.ndarray, defs: ClassDefinitionSet,
                      frozen_encoder: PatchVisionEncoder, text_encoder,
                      out_hw: Optional[tuple[int, int]] = None,
                      template: str = DEFAULT_PROMPT_TEMPLATE) -> DensePseudoLabel:
    """Concept scores -> class aggregation -> upsampling to `out_hw`
    (defaults to the image resolution)."""
    scores = concept_scores(image, defs, frozen_encoder, text_encoder, template)
    label = aggregate_concepts(scores, defs)
    if out_hw is None:
        out_hw = image.shape[:2]
    return upsample_pseudo_label(label, out_hw)


# ---------------------------------------------------------------------------
# On-disk cache
# ---------------------------------------------------------------------------

class PseudoLabelCache:
    """One compressed array file per image, keyed by (image id, definition
    hash, encoder fingerprint). Writes are atomic (temp file then rename)."""

    def __init__(self, directory: Path | str, defs_hash: str, encoder_hash: str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.suffix = f"{defs_hash[:12]}_{encoder_hash[:12]}"

    def path_for(self, image_id: str) -> Path:
        return self.directory / f"{image_id}_{self.suffix}.npz"

    def get(self, image_id: str) -> Optional[DensePseudoLabel]:
        path = self.path_for(image_id)
        if not path.exists():
            return None
        data = np.load(path)
        return DensePseudoLabel(probs=data["probs"], confidence=data["confidence"])

    def put(self, image_id: str, label: DensePseudoLabel) -> Path:
        path = self.path_for(image_id)
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as handle:
                np.savez_compressed(handle, probs=label.probs, confidence=label.confidence)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        return path
