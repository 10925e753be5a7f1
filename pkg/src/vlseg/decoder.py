"""Language-guided segmentation decoder.

The decoder consumes a dense vision-language similarity map (one cosine
channel per class) and refines it with decoupled reasoning stages: spatial
reasoning shares its convolutional weights across classes, semantic reasoning
shares its transformer weights across locations, and class-wise upsampling
blocks recover resolution with encoder skip connections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError
from .vlm import PatchVisionEncoder


@dataclass
class DecoderConfig:
    """Decoder hyperparameters and ablation switches.

    decoupled=False reproduces the joint-reasoning baseline: all classes enter
    the spatial convolutions together (N times more channels, no weight
    sharing), which requires num_classes at construction. The use_* flags
    drop individual stages for ablations.
    """

    d: int = 128
    aspp_dilations: tuple[int, ...] = (6, 12, 18)
    semantic_blocks: int = 2
    semantic_heads: int = 4
    pool: int = 4
    skip_taps: tuple[int, int] = (0, 3)
    skip_channels: tuple[int, int] = (16, 32)
    fuse_channels: tuple[int, int] = (64, 32)
    decoupled: bool = True
    use_spatial: bool = True
    use_semantic: bool = True
    use_upsample: bool = True
    gn_groups: int = 8
    num_classes: Optional[int] = None

    def validate(self) -> None:
        if self.d <= 0:
            raise ValidationError(f"decoder width must be positive, got {self.d}")
        if len(self.skip_channels) != 2 or len(self.fuse_channels) != 2:
            raise ValidationError("skip_channels and fuse_channels must have length 2")
        if len(self.skip_taps) != 2:
            raise ValidationError("skip_taps must name two encoder blocks")
        if self.pool < 1:
            raise ValidationError(f"pool factor must be >= 1, got {self.pool}")
        if self.use_semantic and self.d % self.semantic_heads:
            raise ValidationError(
                f"decoder width {self.d} not divisible by {self.semantic_heads} heads")
        for ch in self.fuse_channels:
            if ch % self.gn_groups:
                raise ValidationError(
                    f"fuse channel count {ch} not divisible by gn_groups {self.gn_groups}")
        if not self.decoupled and self.num_classes is None:
            raise ValidationError("joint reasoning (decoupled=False) requires num_classes")

    def any_stage(self) -> bool:
        return self.use_spatial or self.use_semantic or self.use_upsample


# ---------------------------------------------------------------------------
# Similarity map
# ---------------------------------------------------------------------------

def _checked_normalize(x: torch.Tensor, dim: int, what: str) -> torch.Tensor:
    norms = x.norm(dim=dim)
    if (norms == 0).any():
        idx = (norms == 0).nonzero()[0].tolist()
        raise ValidationError(f"zero-norm {what} embedding at index {idx}")
    return x / norms.unsqueeze(dim)


def cosine_similarity_grid(dense: torch.Tensor, text_embeds: torch.Tensor) -> torch.Tensor:
    """Channels-first similarity map: dense (B, D, h, w) x text (N, D) -> (B, N, h, w)."""
    if dense.shape[1] != text_embeds.shape[1]:
        raise ValidationError(
            f"embedding dims differ: vision {dense.shape[1]} vs text {text_embeds.shape[1]}")
    v = _checked_normalize(dense, dim=1, what="patch")
    t = _checked_normalize(text_embeds, dim=1, what="text")
    sim = torch.einsum("bdhw,nd->bnhw", v, t)
    return sim.clamp(-1.0, 1.0)


def similarity_map(patch_embeds: torch.Tensor, text_embeds: torch.Tensor) -> torch.Tensor:
    """Patch-wise cosine similarities, channels last.

    patch_embeds: (h, w, D) or (B, h, w, D); text_embeds: (N, D).
    Returns (h, w, N) or (B, h, w, N) with every entry in [-1, 1].
    """
    squeeze = patch_embeds.ndim == 3
    if squeeze:
        patch_embeds = patch_embeds.unsqueeze(0)
    dense = patch_embeds.permute(0, 3, 1, 2)
    sim = cosine_similarity_grid(dense, text_embeds).permute(0, 2, 3, 1)
    return sim[0] if squeeze else sim


# ---------------------------------------------------------------------------
# Spatial reasoning: 7x7 embedding + residual ASPP, weights shared over classes
# ---------------------------------------------------------------------------

class ResidualASPP(nn.Module):
    """Parallel dilated 3x3 branches plus a 1x1 branch, fused and added back."""

    def __init__(self, channels: int, dilations: Sequence[int]):
        super().__init__()
        self.branches = nn.ModuleList(
            [nn.Conv2d(channels, channels, 1)]
            + [nn.Conv2d(channels, channels, 3, padding=r, dilation=r) for r in dilations]
        )
        self.fuse = nn.Conv2d(channels * (len(dilations) + 1), channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([F.gelu(branch(x)) for branch in self.branches], dim=1)
        return x + self.fuse(feats)


class SpatialReasoning(nn.Module):
    """Embed each class similarity channel to d dims and model long-range
    context with a residual ASPP. With decoupled=True each class is processed
    independently with shared weights; the joint variant mixes all classes."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.decoupled:
            self.embed = nn.Conv2d(1, cfg.d, 7, padding=3)
            channels = cfg.d
        else:
            self.embed = nn.Conv2d(cfg.num_classes, cfg.num_classes * cfg.d, 7, padding=3)
            channels = cfg.num_classes * cfg.d
        self.aspp = ResidualASPP(channels, cfg.aspp_dilations) if cfg.use_spatial else None

    def forward(self, sim: torch.Tensor) -> torch.Tensor:
        """sim: (B, N, h, w) -> volume (B, N, d, h, w)."""
        b, n, h, w = sim.shape
        if self.cfg.decoupled:
            x = self.embed(sim.reshape(b * n, 1, h, w))
            if self.aspp is not None:
                x = self.aspp(x)
            return x.reshape(b, n, self.cfg.d, h, w)
        if n != self.cfg.num_classes:
            raise ValidationError(
                f"joint reasoning built for {self.cfg.num_classes} classes, got {n}")
        x = self.embed(sim)
        if self.aspp is not None:
            x = self.aspp(x)
        return x.reshape(b, n, self.cfg.d, h, w)


# ---------------------------------------------------------------------------
# Semantic reasoning: transformer over the class axis, shared across locations
# ---------------------------------------------------------------------------

class ClassAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, int(dim * mlp_ratio)), nn.GELU(),
            nn.Linear(int(dim * mlp_ratio), dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class SemanticReasoning(nn.Module):
    """Per pooled location, the N class vectors attend to each other; text
    embeddings are projected to d dims and added as semantic anchors. Spatial
    locations share the transformer weights and do not interact."""

    def __init__(self, cfg: DecoderConfig, text_dim: int):
        super().__init__()
        self.cfg = cfg
        self.text_proj = nn.Linear(text_dim, cfg.d)
        self.blocks = nn.ModuleList(
            ClassAttentionBlock(cfg.d, cfg.semantic_heads) for _ in range(cfg.semantic_blocks)
        )

    def forward(self, volume: torch.Tensor, text_embeds: torch.Tensor) -> torch.Tensor:
        """volume: (B, N, d, h, w) -> same shape, residual-added."""
        b, n, d, h, w = volume.shape
        pool = self.cfg.pool
        pad_h = (pool - h % pool) % pool
        pad_w = (pool - w % pool) % pool
        x = volume.reshape(b, n * d, h, w)
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        hp, wp = x.shape[-2] // pool, x.shape[-1] // pool
        pooled = F.avg_pool2d(x, pool).reshape(b, n, d, hp, wp)

        tokens = pooled.permute(0, 3, 4, 1, 2).reshape(b * hp * wp, n, d)
        tokens = tokens + self.text_proj(text_embeds).unsqueeze(0)
        for block in self.blocks:
            tokens = block(tokens)

        out = tokens.reshape(b, hp, wp, n, d).permute(0, 3, 4, 1, 2)
        out = out.reshape(b, n * d, hp, wp)
        out = F.interpolate(out, scale_factor=pool, mode="nearest")
        out = out[:, :, :h, :w].reshape(b, n, d, h, w)
        return volume + out


# ---------------------------------------------------------------------------
# Class-wise upsampling head with encoder skip connections
# ---------------------------------------------------------------------------

class UpsampleBlock(nn.Module):
    """Learned 2x upsampling for one class channel group: transpose conv,
    concatenation of the (class-shared) projected skip, two GroupNorm convs."""

    def __init__(self, in_ch: int, skip_src_dim: int, skip_ch: int, out_ch: int, groups: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, in_ch, 2, stride=2)
        self.skip_proj = nn.Conv2d(skip_src_dim, skip_ch, 1)
        self.fuse = nn.Sequential(
            nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1),
            nn.GroupNorm(groups, out_ch), nn.GELU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GroupNorm(groups, out_ch), nn.GELU(),
        )

    def forward(self, x: torch.Tensor, skip: torch.Tensor, num_classes: int) -> torch.Tensor:
        """x: (B*N, C, h, w); skip: (B, D_enc, hs, ws) shared across classes."""
        x = self.up(x)
        s = self.skip_proj(skip)
        s = F.interpolate(s, size=x.shape[-2:], mode="bilinear", align_corners=False)
        b = s.shape[0]
        s = s.unsqueeze(1).expand(b, num_classes, *s.shape[1:]).reshape(
            b * num_classes, *s.shape[1:])
        return self.fuse(torch.cat([x, s], dim=1))


class UpsampleHead(nn.Module):
    """Two upsampling blocks (stride 16 -> 4) and a final per-class 1-channel
    convolution. The first block consumes the deeper skip tap, the second the
    earlier one, following the usual coarse-to-fine pairing."""

    def __init__(self, cfg: DecoderConfig, encoder_dim: int):
        super().__init__()
        self.block1 = UpsampleBlock(cfg.d, encoder_dim, cfg.skip_channels[1],
                                    cfg.fuse_channels[0], cfg.gn_groups)
        self.block2 = UpsampleBlock(cfg.fuse_channels[0], encoder_dim, cfg.skip_channels[0],
                                    cfg.fuse_channels[1], cfg.gn_groups)
        self.logit = nn.Conv2d(cfg.fuse_channels[1], 1, 1)

    def forward(self, volume: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        """volume: (B, N, d, h, w); skips: (early, deep) encoder grids.
        Returns logits (B, N, 4h, 4w)."""
        b, n, d, h, w = volume.shape
        x = volume.reshape(b * n, d, h, w)
        x = self.block1(x, skips[1], n)
        x = self.block2(x, skips[0], n)
        x = self.logit(x)
        return x.reshape(b, n, 4 * h, 4 * w)


class LanguageGuidedDecoder(nn.Module):
    """Similarity volume -> logits, composed of the reasoning stages enabled
    in the config. With every stage disabled the similarity map itself is the
    prediction (the raw-similarity ablation)."""

    def __init__(self, cfg: DecoderConfig, text_dim: int, encoder_dim: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        if cfg.any_stage():
            self.spatial = SpatialReasoning(cfg)
            self.semantic = SemanticReasoning(cfg, text_dim) if cfg.use_semantic else None
            if cfg.use_upsample:
                self.head = UpsampleHead(cfg, encoder_dim)
            else:
                self.head = None
                self.logit = nn.Conv2d(cfg.d, 1, 1)

    def spatial_reasoning(self, sim: torch.Tensor) -> torch.Tensor:
        return self.spatial(sim)

    def semantic_reasoning(self, volume: torch.Tensor, text_embeds: torch.Tensor) -> torch.Tensor:
        if self.semantic is None:
            raise ValidationError("semantic reasoning is disabled in this config")
        return self.semantic(volume, text_embeds)

    def upsample_head(self, volume: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        if self.head is None:
            raise ValidationError("upsampling head is disabled in this config")
        return self.head(volume, skips)

    def forward(self, sim: torch.Tensor, text_embeds: torch.Tensor,
                skips: Sequence[torch.Tensor]) -> torch.Tensor:
        """sim: (B, N, h, w) -> logits at stride 4 (with upsampling) or at the
        similarity resolution otherwise."""
        if not self.cfg.any_stage():
            return sim
        volume = self.spatial(sim)
        if self.semantic is not None:
            volume = self.semantic(volume, text_embeds)
        if self.head is not None:
            return self.head(volume, skips)
        b, n, d, h, w = volume.shape
        logits = self.logit(volume.reshape(b * n, d, h, w))
        return logits.reshape(b, n, h, w)


# ---------------------------------------------------------------------------
# Full model: encoder + similarity + decoder
# ---------------------------------------------------------------------------

class SegModel(nn.Module):
    """Patch encoder plus language-guided decoder, emitting per-class logits
    at input resolution."""

    def __init__(self, encoder: PatchVisionEncoder, cfg: DecoderConfig):
        super().__init__()
        cfg.validate()
        self.encoder = encoder
        self.cfg = cfg
        self.decoder = LanguageGuidedDecoder(cfg, text_dim=encoder.out_dim,
                                             encoder_dim=encoder.embed_dim)

    def decode_features(self, dense: torch.Tensor, skips: Sequence[torch.Tensor],
                        text_embeds: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
        sim = cosine_similarity_grid(dense, text_embeds)
        taps = [skips[i] for i in self.cfg.skip_taps]
        logits = self.decoder(sim, text_embeds, taps)
        if logits.shape[-2:] != out_hw:
            logits = F.interpolate(logits, size=out_hw, mode="bilinear", align_corners=False)
        return logits

    def forward(self, images: torch.Tensor, text_embeds: torch.Tensor) -> torch.Tensor:
        """images: (B, 3, H, W) or (3, H, W); returns (B, N, H, W) or (N, H, W)."""
        squeeze = images.ndim == 3
        if squeeze:
            images = images.unsqueeze(0)
        dense, skips = self.encoder.forward_features(images)
        logits = self.decode_features(dense, skips, text_embeds, images.shape[-2:])
        return logits[0] if squeeze else logits
