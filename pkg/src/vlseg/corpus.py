"""Dataset handling for semi-supervised segmentation.

Covers split loading, the weak (geometric) and strong (photometric + CutMix)
augmentation pipeline, channel-level feature perturbation, and a synthetic
shapes corpus so experiments and tests run without any benchmark download.

Dataset layout on disk:

    <root>/images/<id>.png|.jpg    RGB image
    <root>/masks/<id>.png          single-channel palette mask, ignore=255
    <root>/labeled.txt             one id per line
    <root>/unlabeled.txt           one id per line
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
from PIL import Image

from .errors import ValidationError

IGNORE_INDEX = 255


# ---------------------------------------------------------------------------
# Core records
# ---------------------------------------------------------------------------

@dataclass
class SegSample:
    """One image with an optional dense label mask.

    image is H x W x 3 float in [0, 1]; mask is H x W integer class indices
    with IGNORE_INDEX marking pixels excluded from losses and metrics.
    """

    image: np.ndarray
    mask: Optional[np.ndarray]
    id: str

    def validate(self, num_classes: Optional[int] = None) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"sample {self.id}: image must be HxWx3, got {self.image.shape}")
        if self.mask is not None:
            if self.mask.shape != self.image.shape[:2]:
                raise ValidationError(
                    f"sample {self.id}: mask shape {self.mask.shape} does not match "
                    f"image shape {self.image.shape[:2]}"
                )
            if num_classes is not None:
                values = np.unique(self.mask)
                bad = values[(values != IGNORE_INDEX) & ((values < 0) | (values >= num_classes))]
                if bad.size:
                    raise ValidationError(
                        f"sample {self.id}: mask contains invalid class indices {bad.tolist()}"
                    )


@dataclass
class SplitSpec:
    """Which ids of a dataset root form the labeled and unlabeled sets."""

    root: Path
    labeled_ids: list[str]
    unlabeled_ids: list[str]

    def validate(self) -> None:
        overlap = set(self.labeled_ids) & set(self.unlabeled_ids)
        if overlap:
            raise ValidationError(f"labeled and unlabeled ids overlap: {sorted(overlap)}")


@dataclass
class AugmentationRecipe:
    """Parameters of the weak/strong augmentation pipeline.

    jitter_strength is (brightness, contrast, saturation, hue); a strength of
    zero disables the corresponding jitter. hflip_prob controls the horizontal
    flip of the weak augmentation (0 disables it).
    """

    jitter_strength: tuple[float, float, float, float] = (0.5, 0.5, 0.5, 0.25)
    grayscale_prob: float = 0.2
    cutmix_prob: float = 0.5
    scale_range: tuple[float, float] = (0.5, 2.0)
    crop_size: int = 512
    hflip_prob: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("grayscale_prob", "cutmix_prob", "hflip_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {value}")
        lo, hi = self.scale_range
        if lo > hi or lo <= 0:
            raise ValidationError(f"scale_range must satisfy 0 < low <= high, got {self.scale_range}")
        if self.crop_size <= 0:
            raise ValidationError(f"crop_size must be positive, got {self.crop_size}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


# ---------------------------------------------------------------------------
# Split loading
# ---------------------------------------------------------------------------

def read_split_file(path: Path) -> list[str]:
    if not path.exists():
        raise FileNotFoundError(f"split file not found: {path}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def read_split(root: Path | str, labeled_file: str = "labeled.txt",
               unlabeled_file: str = "unlabeled.txt") -> SplitSpec:
    root = Path(root)
    spec = SplitSpec(
        root=root,
        labeled_ids=read_split_file(root / labeled_file),
        unlabeled_ids=read_split_file(root / unlabeled_file),
    )
    spec.validate()
    return spec


def _find_image_path(root: Path, sample_id: str) -> Path:
    for ext in (".png", ".jpg", ".jpeg"):
        candidate = root / "images" / f"{sample_id}{ext}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no image file for id '{sample_id}' under {root / 'images'}")


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.int64)


def load_sample(root: Path, sample_id: str, with_mask: bool) -> SegSample:
    image = load_image(_find_image_path(root, sample_id))
    mask = None
    if with_mask:
        mask_path = root / "masks" / f"{sample_id}.png"
        if not mask_path.exists():
            raise FileNotFoundError(f"no mask file for labeled id '{sample_id}' at {mask_path}")
        mask = load_mask(mask_path)
    sample = SegSample(image=image, mask=mask, id=sample_id)
    sample.validate()
    return sample


def load_split(spec: SplitSpec) -> tuple[list[SegSample], list[SegSample]]:
    """Load labeled and unlabeled samples in the order given by the split files.

    Unlabeled samples never carry a mask, even if one exists on disk.
    """
    spec.validate()
    labeled = [load_sample(spec.root, i, with_mask=True) for i in spec.labeled_ids]
    unlabeled = [load_sample(spec.root, i, with_mask=False) for i in spec.unlabeled_ids]
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# Weak augmentation: random scale, crop with ignore padding, horizontal flip
# ---------------------------------------------------------------------------

@dataclass
class WeakParams:
    """Geometry drawn for one weak augmentation, replayable onto aligned grids."""

    scale: float
    crop_y: int
    crop_x: int
    flip: bool
    crop_size: int
    scaled_hw: tuple[int, int]


def draw_weak_params(image_hw: tuple[int, int], recipe: AugmentationRecipe,
                     rng: np.random.Generator) -> WeakParams:
    recipe.validate()
    h, w = image_hw
    scale = float(rng.uniform(*recipe.scale_range))
    sh, sw = max(1, round(h * scale)), max(1, round(w * scale))
    crop = recipe.crop_size
    pad_h, pad_w = max(sh, crop), max(sw, crop)
    crop_y = int(rng.integers(0, pad_h - crop + 1))
    crop_x = int(rng.integers(0, pad_w - crop + 1))
    flip = bool(rng.random() < recipe.hflip_prob)
    return WeakParams(scale=scale, crop_y=crop_y, crop_x=crop_x, flip=flip,
                      crop_size=crop, scaled_hw=(sh, sw))


def _resize(array: np.ndarray, hw: tuple[int, int], interpolation: int) -> np.ndarray:
    if array.shape[:2] == hw:
        return array.copy()
    out = cv2.resize(array, (hw[1], hw[0]), interpolation=interpolation)
    return out


def apply_weak_to_image(image: np.ndarray, params: WeakParams) -> np.ndarray:
    scaled = _resize(image.astype(np.float32), params.scaled_hw, cv2.INTER_LINEAR)
    crop = params.crop_size
    pad_h = max(0, crop - scaled.shape[0])
    pad_w = max(0, crop - scaled.shape[1])
    if pad_h or pad_w:
        scaled = np.pad(scaled, ((0, pad_h), (0, pad_w), (0, 0)), constant_values=0.0)
    out = scaled[params.crop_y:params.crop_y + crop, params.crop_x:params.crop_x + crop]
    if params.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def apply_weak_to_mask(mask: np.ndarray, params: WeakParams) -> np.ndarray:
    scaled = _resize(mask.astype(np.int64), params.scaled_hw, cv2.INTER_NEAREST)
    crop = params.crop_size
    pad_h = max(0, crop - scaled.shape[0])
    pad_w = max(0, crop - scaled.shape[1])
    if pad_h or pad_w:
        scaled = np.pad(scaled, ((0, pad_h), (0, pad_w)), constant_values=IGNORE_INDEX)
    out = scaled[params.crop_y:params.crop_y + crop, params.crop_x:params.crop_x + crop]
    if params.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def apply_weak_to_grid(grid: np.ndarray, params: WeakParams, fill: float) -> np.ndarray:
    """Replay the weak geometry onto a float grid (H x W or H x W x C) aligned
    with the original image, e.g. guidance probabilities or confidences.
    Padded regions are filled with `fill`."""
    scaled = _resize(grid.astype(np.float32), params.scaled_hw, cv2.INTER_LINEAR)
    crop = params.crop_size
    pad_h = max(0, crop - scaled.shape[0])
    pad_w = max(0, crop - scaled.shape[1])
    if pad_h or pad_w:
        pads = ((0, pad_h), (0, pad_w)) + ((0, 0),) * (scaled.ndim - 2)
        scaled = np.pad(scaled, pads, constant_values=fill)
    out = scaled[params.crop_y:params.crop_y + crop, params.crop_x:params.crop_x + crop]
    if params.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def weak_augment_with_params(sample: SegSample, recipe: AugmentationRecipe,
                             rng: np.random.Generator) -> tuple[SegSample, WeakParams]:
    # The scaled image is padded up to crop_size, so any crop_size is reachable.
    params = draw_weak_params(sample.image.shape[:2], recipe, rng)
    image = apply_weak_to_image(sample.image, params)
    mask = apply_weak_to_mask(sample.mask, params) if sample.mask is not None else None
    return SegSample(image=image, mask=mask, id=sample.id), params


def weak_augment(sample: SegSample, recipe: AugmentationRecipe,
                 rng: np.random.Generator) -> SegSample:
    """Random scale, crop with ignore padding, and horizontal flip.

    The mask (when present) undergoes the identical geometry with nearest
    interpolation; padded mask pixels become IGNORE_INDEX.
    """
    out, _ = weak_augment_with_params(sample, recipe, rng)
    return out


# ---------------------------------------------------------------------------
# Strong augmentation: color jitter, grayscale, CutMix across the batch
# ---------------------------------------------------------------------------

def _adjust_colors(image: np.ndarray, recipe: AugmentationRecipe,
                   rng: np.random.Generator) -> np.ndarray:
    b, c, s, hue = recipe.jitter_strength
    out = image.astype(np.float32)
    f_b = float(rng.uniform(max(0.0, 1 - b), 1 + b))
    f_c = float(rng.uniform(max(0.0, 1 - c), 1 + c))
    f_s = float(rng.uniform(max(0.0, 1 - s), 1 + s))
    f_h = float(rng.uniform(-hue, hue))
    if f_b != 1.0:
        out = out * f_b
    if f_c != 1.0:
        mean = out.mean()
        out = (out - mean) * f_c + mean
    if f_s != 1.0:
        gray = out @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        out = gray[..., None] + (out - gray[..., None]) * f_s
    if f_h != 0.0:
        hsv = cv2.cvtColor(np.clip(out, 0.0, 1.0), cv2.COLOR_RGB2HSV)
        hsv[..., 0] = (hsv[..., 0] + f_h * 360.0) % 360.0
        out = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return np.clip(out, 0.0, 1.0)


def _to_grayscale(image: np.ndarray) -> np.ndarray:
    gray = image @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    return np.repeat(gray[..., None], 3, axis=2)


def sample_cutmix_box(hw: tuple[int, int], rng: np.random.Generator,
                      area_range: tuple[float, float] = (0.25, 0.5),
                      aspect_range: tuple[float, float] = (0.5, 2.0)) -> np.ndarray:
    """Boolean H x W mask marking one rectangular paste region."""
    h, w = hw
    area = float(rng.uniform(*area_range)) * h * w
    aspect = float(rng.uniform(*aspect_range))
    bh = min(h, max(1, round(math.sqrt(area / aspect))))
    bw = min(w, max(1, round(math.sqrt(area * aspect))))
    y = int(rng.integers(0, h - bh + 1))
    x = int(rng.integers(0, w - bw + 1))
    box = np.zeros((h, w), dtype=bool)
    box[y:y + bh, x:x + bw] = True
    return box


def apply_cutmix(values, boxes):
    """Mix each element with its batch partner inside the recorded box.

    values is (B, H, W, ...) (numpy array or torch tensor); boxes is a
    boolean (B, H, W) array. Element i receives the pixels of element
    (i + 1) % B inside box i. Works identically for images, masks,
    probability grids, and confidence maps, so pseudo-labels can be mixed
    exactly like the inputs they belong to.
    """
    n = values.shape[0]
    out = values.clone() if hasattr(values, "clone") else values.copy()
    for i in range(n):
        j = (i + 1) % n
        out[i][boxes[i]] = values[j][boxes[i]]
    return out


@dataclass
class StrongAugmentPair:
    """Two independently perturbed views of a batch plus their CutMix boxes."""

    view1: list[SegSample]
    view2: list[SegSample]
    boxes1: np.ndarray
    boxes2: np.ndarray


def _strong_view(batch: Sequence[SegSample], recipe: AugmentationRecipe,
                 rng: np.random.Generator) -> tuple[list[SegSample], np.ndarray]:
    h, w = batch[0].image.shape[:2]
    images = []
    for sample in batch:
        img = _adjust_colors(sample.image, recipe, rng)
        if rng.random() < recipe.grayscale_prob:
            img = _to_grayscale(img)
        images.append(img)
    boxes = np.zeros((len(batch), h, w), dtype=bool)
    for i in range(len(batch)):
        if rng.random() < recipe.cutmix_prob:
            boxes[i] = sample_cutmix_box((h, w), rng)
    stacked = apply_cutmix(np.stack(images), boxes)
    mixed_masks = None
    if all(s.mask is not None for s in batch):
        mixed_masks = apply_cutmix(np.stack([s.mask for s in batch]), boxes)
    out = []
    for i, sample in enumerate(batch):
        mask = mixed_masks[i] if mixed_masks is not None else None
        out.append(SegSample(image=stacked[i], mask=mask, id=sample.id))
    return out, boxes


def strong_augment_pair(batch: Sequence[SegSample], recipe: AugmentationRecipe,
                        rng: np.random.Generator) -> StrongAugmentPair:
    """Two strong views per sample: color jitter, random grayscale, CutMix.

    CutMix pastes a rectangle from the next sample in the batch; the boxes are
    recorded so pseudo-labels can be mixed identically via apply_cutmix.
    """
    if not batch:
        raise ValidationError("strong_augment_pair requires a nonempty batch")
    shapes = {s.image.shape[:2] for s in batch}
    if len(shapes) != 1:
        raise ValidationError(f"batch samples must share spatial size, got {shapes}")
    recipe.validate()
    view1, boxes1 = _strong_view(batch, recipe, rng)
    view2, boxes2 = _strong_view(batch, recipe, rng)
    return StrongAugmentPair(view1=view1, view2=view2, boxes1=boxes1, boxes2=boxes2)


# ---------------------------------------------------------------------------
# Feature perturbation: channel dropout on dense encoder output
# ---------------------------------------------------------------------------

def sample_channel_mask(num_channels: int, drop_rate: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask with exactly floor(drop_rate * C) channels dropped."""
    if not 0.0 <= drop_rate < 1.0:
        raise ValidationError(f"drop_rate must be in [0, 1), got {drop_rate}")
    k = int(drop_rate * num_channels)
    keep = np.ones(num_channels, dtype=bool)
    if k:
        keep[rng.choice(num_channels, size=k, replace=False)] = False
    return keep


def feature_perturb(features: np.ndarray, drop_rate: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Zero a random channel subset and rescale survivors by 1/(1 - drop_rate).

    features is (..., C); the channel axis is last.
    """
    keep = sample_channel_mask(features.shape[-1], drop_rate, rng)
    scale = keep.astype(features.dtype) / (1.0 - drop_rate)
    return features * scale


# ---------------------------------------------------------------------------
# Synthetic shapes corpus
# ---------------------------------------------------------------------------

SHAPES_CLASSES = ("background", "circle", "square")

# Disjoint hue bands keep the classes separable while leaving wide intra-class
# appearance variation, so a handful of labeled images underdetermines the
# decision boundary and the unlabeled corpus carries real information.
_HUE_BANDS = {"background": (0.22, 0.42), "circle": (0.96, 1.10), "square": (0.55, 0.70)}


def _hsv_color(kind: str, rng: np.random.Generator) -> np.ndarray:
    lo, hi = _HUE_BANDS[kind]
    h = float(rng.uniform(lo, hi)) % 1.0
    s = float(rng.uniform(0.45, 0.9))
    v = float(rng.uniform(0.35, 0.9))
    import colorsys
    return np.array(colorsys.hsv_to_rgb(h, s, v), dtype=np.float32)


def _textured_background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = _hsv_color("background", rng)
    coarse = rng.uniform(-0.1, 0.1, (8, 8, 3)).astype(np.float32)
    noise = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_LINEAR)
    return np.clip(base[None, None] + noise, 0.0, 1.0)


def _render_shapes_image(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    image = _textured_background(size, rng)
    mask = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]

    radius = int(rng.integers(size // 8, size // 4 + 1))
    cy, cx = rng.integers(radius, size - radius, 2)
    circle = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    image[circle] = _hsv_color("circle", rng)
    mask[circle] = 1

    side = int(rng.integers(size // 5, size // 2 + 1))
    sy, sx = rng.integers(0, size - side, 2)
    square = np.zeros_like(circle)
    square[sy:sy + side, sx:sx + side] = True
    image[square] = _hsv_color("square", rng)
    mask[square] = 2

    image = np.clip(image + rng.normal(0.0, 0.02, image.shape).astype(np.float32), 0.0, 1.0)
    return image.astype(np.float32), mask


def save_mask_png(mask: np.ndarray, path: Path, palette: Optional[list[int]] = None) -> None:
    im = Image.fromarray(mask.astype(np.uint8), mode="P")
    if palette is None:
        from .evalcli import voc_palette
        palette = voc_palette()
    im.putpalette(palette)
    im.save(path)


def generate_shapes_corpus(root: Path | str, n_labeled: int = 4, n_unlabeled: int = 16,
                           n_val: int = 8, image_size: int = 64, seed: int = 0) -> Path:
    """Write a self-contained corpus of colored shapes on textured background.

    Classes: 0 background, 1 circle, 2 square. Produces labeled.txt,
    unlabeled.txt, and val.txt split files under `root`.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    groups = {"labeled": n_labeled, "unlabeled": n_unlabeled, "val": n_val}
    ids: dict[str, list[str]] = {g: [] for g in groups}
    index = 0
    for group, count in groups.items():
        for _ in range(count):
            sample_id = f"shapes_{index:04d}"
            index += 1
            image, mask = _render_shapes_image(image_size, rng)
            Image.fromarray((image * 255).round().astype(np.uint8)).save(
                root / "images" / f"{sample_id}.png")
            save_mask_png(mask, root / "masks" / f"{sample_id}.png")
            ids[group].append(sample_id)
    (root / "labeled.txt").write_text("\n".join(ids["labeled"]) + "\n")
    (root / "unlabeled.txt").write_text("\n".join(ids["unlabeled"]) + "\n")
    (root / "val.txt").write_text("\n".join(ids["val"]) + "\n")
    return root
