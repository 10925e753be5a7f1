"""Vision-language backbone abstraction.

A ViT-style patch encoder with role-tagged parameters, text encoders that map
prompts into the same joint space, prompt construction, the spatial
fine-tuning parameter partition, and checkpoint ingestion for published
vision-language weights.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError

PARAMETER_ROLES = ("attention", "mlp", "norm", "patch_embed", "pos_embed", "other")

DEFAULT_PROMPT_TEMPLATE = "a photo of a {}"


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------

def build_prompts(names: Iterable[str], template: str = DEFAULT_PROMPT_TEMPLATE) -> list[str]:
    """Substitute each name into a single-placeholder template, keeping order."""
    if template.count("{}") != 1:
        raise ValidationError(
            f"prompt template must contain exactly one '{{}}' placeholder: {template!r}"
        )
    return [template.format(name) for name in names]


# ---------------------------------------------------------------------------
# Text encoders
# ---------------------------------------------------------------------------

class HashTextEncoder:
    """Deterministic stand-in text encoder for experiments without checkpoints.

    Each distinct prompt maps to a fixed random vector derived from a hash of
    its (truncated) text, so identical prompts always produce identical rows.
    Carries no semantics; real vision-language behavior requires embeddings
    computed from a published model (see PrecomputedTextEncoder).
    """

    def __init__(self, dim: int = 32, context_length: int = 77):
        self.dim = dim
        self.context_length = context_length

    def _truncate(self, prompt: str) -> str:
        tokens = prompt.split()
        if len(tokens) > self.context_length:
            warnings.warn(
                f"prompt exceeds context length {self.context_length}, truncating: {prompt!r}"
            )
            tokens = tokens[: self.context_length]
        return " ".join(tokens)

    def encode(self, prompts: Iterable[str]) -> torch.Tensor:
        rows = []
        for prompt in prompts:
            digest = hashlib.sha256(self._truncate(prompt).encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            rng = np.random.default_rng(seed)
            rows.append(rng.standard_normal(self.dim))
        if not rows:
            return torch.zeros((0, self.dim), dtype=torch.float32)
        return torch.as_tensor(np.stack(rows), dtype=torch.float32)


class PrecomputedTextEncoder:
    """Text embeddings computed elsewhere (e.g. by a published model) and
    stored as an .npz with arrays 'prompts' (strings) and 'embeddings' (N x D)."""

    def __init__(self, path: Path | str):
        data = np.load(Path(path), allow_pickle=False)
        prompts = [str(p) for p in data["prompts"]]
        self.embeddings = {p: e for p, e in zip(prompts, data["embeddings"])}
        self.dim = int(data["embeddings"].shape[1])
        self.context_length = int(data.get("context_length", 77))

    def encode(self, prompts: Iterable[str]) -> torch.Tensor:
        rows = []
        for prompt in prompts:
            if prompt not in self.embeddings:
                raise ValidationError(f"no precomputed embedding for prompt: {prompt!r}")
            rows.append(self.embeddings[prompt])
        if not rows:
            return torch.zeros((0, self.dim), dtype=torch.float32)
        return torch.as_tensor(np.stack(rows), dtype=torch.float32)


def random_text_anchors(n: int, dim: int, seed: int = 0) -> torch.Tensor:
    """Fixed random, mutually orthogonal unit anchors: one well-separated
    embedding per class, for runs without any language checkpoint."""
    if n > dim:
        raise ValidationError(f"cannot draw {n} orthogonal anchors in dimension {dim}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
    return torch.as_tensor(q.T.copy(), dtype=torch.float32)


class AnchorTextEncoder:
    """Fixed orthogonal anchor per class prompt, hash fallback for any other
    phrase. Gives classes well-separated embeddings in synthetic runs while
    still encoding arbitrary concept prompts deterministically."""

    def __init__(self, dim: int, class_names: Sequence[str],
                 template: str = DEFAULT_PROMPT_TEMPLATE, seed: int = 0):
        self.dim = dim
        self.context_length = 77
        anchors = random_text_anchors(len(class_names), dim, seed)
        prompts = build_prompts(class_names, template)
        self.anchors = {prompt: anchors[i] for i, prompt in enumerate(prompts)}
        self._fallback = HashTextEncoder(dim=dim)

    def encode(self, prompts: Iterable[str]) -> torch.Tensor:
        rows = []
        for prompt in prompts:
            if prompt in self.anchors:
                rows.append(self.anchors[prompt])
            else:
                rows.append(self._fallback.encode([prompt])[0])
        if not rows:
            return torch.zeros((0, self.dim), dtype=torch.float32)
        return torch.stack(rows)


def encode_text(encoder, prompts: Iterable[str]) -> torch.Tensor:
    """Encode prompts to an N x D array; row i corresponds to prompt i."""
    return encoder.encode(list(prompts))


# ---------------------------------------------------------------------------
# Patch transformer vision encoder
# ---------------------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValidationError(f"embed dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)

    def value_path(self, x: torch.Tensor) -> torch.Tensor:
        # Per-token value projection without attention mixing; used for the
        # dense extraction of the frozen guidance path.
        b, n, d = x.shape
        v = F.linear(x, self.qkv.weight[2 * d:], self.qkv.bias[2 * d:])
        return self.proj(v)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor, value_only: bool = False) -> torch.Tensor:
        if value_only:
            x = x + self.attn.value_path(self.ln1(x))
        else:
            x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class PatchVisionEncoder(nn.Module):
    """ViT-style encoder producing one joint-space embedding per patch.

    Every parameter carries a layer role in PARAMETER_ROLES; the spatial
    fine-tuning partition is derived from these tags. The logit scale used by
    the guidance softmax is a buffer, never fine-tuned.
    """

    def __init__(self, patch_size: int = 16, embed_dim: int = 32, depth: int = 4,
                 num_heads: int = 4, mlp_ratio: float = 4.0, out_dim: Optional[int] = None,
                 base_image_size: int = 64, logit_scale: float = 100.0):
        super().__init__()
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.out_dim = out_dim or embed_dim
        self.base_image_size = base_image_size
        self.base_grid = base_image_size // patch_size

        self.patch_embed = nn.Conv2d(3, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + self.base_grid ** 2, embed_dim))
        self.blocks = nn.ModuleList(
            Block(embed_dim, num_heads, mlp_ratio) for _ in range(depth)
        )
        self.ln_post = nn.LayerNorm(embed_dim)
        self.proj = nn.Linear(embed_dim, self.out_dim, bias=False)
        self.register_buffer("logit_scale", torch.tensor(float(logit_scale)))

        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def parameter_roles(self) -> dict[str, str]:
        roles = {}
        for name, _ in self.named_parameters():
            if name.startswith("patch_embed"):
                roles[name] = "patch_embed"
            elif name == "pos_embed":
                roles[name] = "pos_embed"
            elif ".attn." in name:
                roles[name] = "attention"
            elif ".mlp." in name:
                roles[name] = "mlp"
            elif ".ln1." in name or ".ln2." in name or name.startswith("ln_post"):
                roles[name] = "norm"
            elif name == "cls_token" or name.startswith("proj"):
                roles[name] = "other"
            else:
                raise ValidationError(f"parameter without a role tag: {name}")
        return roles

    def _pos_embed_for(self, grid_hw: tuple[int, int]) -> torch.Tensor:
        gh, gw = grid_hw
        if (gh, gw) == (self.base_grid, self.base_grid):
            return self.pos_embed
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:].reshape(1, self.base_grid, self.base_grid, -1)
        patch_pos = patch_pos.permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(gh, gw), mode="bilinear", align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, gh * gw, -1)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def forward_features(self, images: torch.Tensor, dense_mode: str = "standard"):
        """Run the encoder over a batch of images.

        images: (B, 3, H, W) with H and W divisible by patch_size.
        Returns (dense, skips): dense is (B, out_dim, h, w) joint-space patch
        embeddings; skips is the list of per-block patch-token grids
        (B, embed_dim, h, w) for decoder skip connections.

        dense_mode 'standard' runs full attention in every block (the
        trainable path). 'value_only' replaces the last block's attention by
        its per-token value projection, which turns an image-level encoder
        into a dense feature extractor for the frozen guidance path.
        """
        if dense_mode not in ("standard", "value_only"):
            raise ValidationError(f"unknown dense_mode: {dense_mode!r}")
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValidationError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        b, _, h, w = images.shape
        if h % self.patch_size or w % self.patch_size:
            raise ValidationError(
                f"image size {h}x{w} not divisible by patch size {self.patch_size}"
            )
        gh, gw = h // self.patch_size, w // self.patch_size
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(b, -1, -1)
        x = torch.cat([cls, x], dim=1) + self._pos_embed_for((gh, gw))
        skips = []
        for i, block in enumerate(self.blocks):
            value_only = dense_mode == "value_only" and i == self.depth - 1
            x = block(x, value_only=value_only)
            tokens = x[:, 1:].transpose(1, 2).reshape(b, self.embed_dim, gh, gw)
            skips.append(tokens)
        x = self.proj(self.ln_post(x[:, 1:]))
        dense = x.transpose(1, 2).reshape(b, self.out_dim, gh, gw)
        return dense, skips

    def encode_image_dense(self, image: torch.Tensor, dense_mode: str = "standard") -> torch.Tensor:
        """Per-patch joint-space embeddings, channels last.

        Accepts (3, H, W) or (B, 3, H, W); returns (h, w, D) or (B, h, w, D)
        with h = H / patch_size, w = W / patch_size.
        """
        squeeze = image.ndim == 3
        if squeeze:
            image = image.unsqueeze(0)
        dense, _ = self.forward_features(image, dense_mode=dense_mode)
        dense = dense.permute(0, 2, 3, 1)
        return dense[0] if squeeze else dense


def tiny_encoder(seed: int = 0, **overrides) -> PatchVisionEncoder:
    """Small randomly initialized backbone satisfying every shape contract;
    runs all property tests without downloading a checkpoint."""
    kwargs = dict(patch_size=16, embed_dim=32, depth=4, num_heads=4,
                  mlp_ratio=2.0, base_image_size=64)
    kwargs.update(overrides)
    torch.manual_seed(seed)
    return PatchVisionEncoder(**kwargs)


# ---------------------------------------------------------------------------
# Spatial fine-tuning partition
# ---------------------------------------------------------------------------

@dataclass
class ParameterPartition:
    """Named split of encoder parameters into trainable and frozen sets."""

    trainable: set[str]
    frozen: set[str]
    mode: str

    def validate(self, all_names: Iterable[str]) -> None:
        names = set(all_names)
        if self.trainable & self.frozen:
            raise ValidationError(
                f"partition overlap: {sorted(self.trainable & self.frozen)}")
        if self.trainable | self.frozen != names:
            missing = names - (self.trainable | self.frozen)
            extra = (self.trainable | self.frozen) - names
            raise ValidationError(f"partition does not cover parameters "
                                  f"(missing={sorted(missing)}, extra={sorted(extra)})")

    def apply(self, encoder: nn.Module) -> None:
        for name, param in encoder.named_parameters():
            param.requires_grad_(name in self.trainable)


FINE_TUNE_MODES = ("spatial", "full", "frozen")


def partition_parameters(encoder: PatchVisionEncoder, mode: str) -> ParameterPartition:
    """Split encoder parameters by fine-tuning mode.

    spatial: attention layers and position embeddings train; the locally
    operating MLPs stay frozen to preserve their pre-trained semantics, as do
    normalization layers and the patch embedding. full: everything trains.
    frozen: nothing trains.
    """
    if mode not in FINE_TUNE_MODES:
        raise ValidationError(f"unknown fine-tune mode {mode!r}, expected one of {FINE_TUNE_MODES}")
    roles = encoder.parameter_roles()
    trainable, frozen = set(), set()
    for name, role in roles.items():
        if role not in PARAMETER_ROLES:
            raise ValidationError(f"parameter {name} has unknown role {role!r}")
        if mode == "full":
            trainable.add(name)
        elif mode == "frozen":
            frozen.add(name)
        else:
            if role in ("attention", "pos_embed"):
                trainable.add(name)
            else:
                frozen.add(name)
    partition = ParameterPartition(trainable=trainable, frozen=frozen, mode=mode)
    partition.validate(roles.keys())
    return partition


# ---------------------------------------------------------------------------
# Checkpoint ingestion
# ---------------------------------------------------------------------------

_META_KEY = "__meta__"


def save_encoder_checkpoint(encoder: PatchVisionEncoder, path: Path | str) -> None:
    """Write a flat archive of named arrays plus a metadata record."""
    arrays = {name: p.detach().cpu().numpy() for name, p in encoder.named_parameters()}
    arrays["logit_scale"] = encoder.logit_scale.cpu().numpy()
    meta = {
        "format_version": 1,
        "patch_size": encoder.patch_size,
        "embed_dim": encoder.embed_dim,
        "depth": encoder.depth,
        "num_heads": encoder.num_heads,
        "mlp_ratio": encoder.mlp_ratio,
        "out_dim": encoder.out_dim,
        "base_image_size": encoder.base_image_size,
        "roles": encoder.parameter_roles(),
    }
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez_compressed(Path(path), **arrays)


def load_encoder_checkpoint(path: Path | str) -> PatchVisionEncoder:
    data = np.load(Path(path), allow_pickle=False)
    if _META_KEY not in data:
        raise ValidationError(f"checkpoint {path} carries no metadata record")
    meta = json.loads(bytes(data[_META_KEY]).decode("utf-8"))
    encoder = PatchVisionEncoder(
        patch_size=meta["patch_size"], embed_dim=meta["embed_dim"], depth=meta["depth"],
        num_heads=meta["num_heads"], mlp_ratio=meta["mlp_ratio"], out_dim=meta["out_dim"],
        base_image_size=meta["base_image_size"],
        logit_scale=float(data["logit_scale"]),
    )
    state = {name: torch.as_tensor(data[name]) for name, _ in encoder.named_parameters()}
    state["logit_scale"] = torch.as_tensor(data["logit_scale"])
    encoder.load_state_dict(state)
    if encoder.parameter_roles() != meta["roles"]:
        raise ValidationError("checkpoint role tags do not match the constructed encoder")
    return encoder


def load_weight_map(path: Path | str) -> dict[str, str]:
    """Parse a weight-name mapping file with lines 'source_name -> target_name'."""
    mapping = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'source -> target', got {raw!r}")
        src, dst = (part.strip() for part in line.split("->", 1))
        if not src or not dst:
            raise ValidationError(f"{path}:{lineno}: empty name in {raw!r}")
        if src in mapping:
            raise ValidationError(f"{path}:{lineno}: duplicate source name {src!r}")
        mapping[src] = dst
    return mapping


def convert_state_dict(source: Mapping[str, np.ndarray],
                       weight_map: Mapping[str, str]) -> dict[str, np.ndarray]:
    """Rename a published checkpoint's arrays into this toolkit's scheme.

    Source names without a mapping entry are dropped with a warning; mapped
    names missing from the source raise.
    """
    out = {}
    for src, dst in weight_map.items():
        if src not in source:
            raise ValidationError(f"weight map references missing source array {src!r}")
        out[dst] = np.asarray(source[src])
    unmapped = sorted(set(source) - set(weight_map))
    if unmapped:
        warnings.warn(f"dropping {len(unmapped)} unmapped source arrays "
                      f"(first few: {unmapped[:3]})")
    return out


def encoder_fingerprint(encoder: PatchVisionEncoder) -> str:
    """Stable hash over all encoder weights, for cache keys."""
    digest = hashlib.sha256()
    for name, value in sorted(encoder.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(value.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()
