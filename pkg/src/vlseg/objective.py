"""Loss terms and schedules for semi-supervised training.

All probability inputs are channels-last arrays (..., N) whose pixel rows sum
to one. Pseudo-label targets are hardened by argmax with ties broken toward
the lowest class index, and no gradient ever flows through them. Means are
taken over all valid pixels, so below-threshold pixels contribute zero but
still count in the denominator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import torch

from .errors import ConfigurationError, NumericError, ValidationError

IGNORE_INDEX = 255


@dataclass
class LossConfig:
    """Thresholds and schedule constants of the unlabeled objective."""

    tau: float = 0.95
    zeta: float = 0.9
    lambda_dc0: float = 0.1
    total_steps: Optional[int] = None

    def validate(self) -> None:
        if not 0.0 < self.tau <= 1.0:
            raise ValidationError(f"tau must be in (0, 1], got {self.tau}")
        if not 0.0 < self.zeta <= 1.0:
            raise ValidationError(f"zeta must be in (0, 1], got {self.zeta}")
        if self.lambda_dc0 < 0:
            raise ValidationError(f"lambda_dc0 must be >= 0, got {self.lambda_dc0}")
        if self.total_steps is not None and self.total_steps <= 0:
            raise ValidationError(f"total_steps must be positive, got {self.total_steps}")


@dataclass
class PredictionSet:
    """Per-pixel probability maps entering the unlabeled loss.

    p_u is the pseudo-label source (weak view, no gradient); p_fp, p_p1 and
    p_p2 are the feature-perturbed and the two strongly augmented predictions.
    p_dc (with dc_confidence, the pre-renormalization maximum) carries the
    frozen-model guidance. valid marks pixels that exist in the crop (padding
    and ignore regions are False). The *_1 / *_2 fields override the
    pseudo-label source, guidance, and validity for the strong branches after
    CutMix has rearranged their pixels; they default to the base arrays.
    """

    p_u: torch.Tensor
    p_fp: Optional[torch.Tensor]
    p_p1: Optional[torch.Tensor]
    p_p2: Optional[torch.Tensor]
    p_dc: Optional[torch.Tensor] = None
    dc_confidence: Optional[torch.Tensor] = None
    valid: Optional[torch.Tensor] = None
    p_u_1: Optional[torch.Tensor] = None
    p_u_2: Optional[torch.Tensor] = None
    p_dc_1: Optional[torch.Tensor] = None
    p_dc_2: Optional[torch.Tensor] = None
    dc_confidence_1: Optional[torch.Tensor] = None
    dc_confidence_2: Optional[torch.Tensor] = None
    valid_1: Optional[torch.Tensor] = None
    valid_2: Optional[torch.Tensor] = None

    def branches(self):
        """The three consistency branches as (weight, p_p, p_u, p_dc, dc_conf, valid)."""
        return [
            (0.5, self.p_fp, self.p_u, self.p_dc, self.dc_confidence, self.valid),
            (0.25, self.p_p1,
             self.p_u_1 if self.p_u_1 is not None else self.p_u,
             self.p_dc_1 if self.p_dc_1 is not None else self.p_dc,
             self.dc_confidence_1 if self.dc_confidence_1 is not None else self.dc_confidence,
             self.valid_1 if self.valid_1 is not None else self.valid),
            (0.25, self.p_p2,
             self.p_u_2 if self.p_u_2 is not None else self.p_u,
             self.p_dc_2 if self.p_dc_2 is not None else self.p_dc,
             self.dc_confidence_2 if self.dc_confidence_2 is not None else self.dc_confidence,
             self.valid_2 if self.valid_2 is not None else self.valid),
        ]

    def validate(self, atol: float = 1e-5) -> None:
        for name in ("p_u", "p_fp", "p_p1", "p_p2", "p_dc"):
            p = getattr(self, name)
            if p is None:
                continue
            if (p < 0).any() or (p > 1).any():
                raise ValidationError(f"{name} entries must lie in [0, 1]")
            sums = p.sum(dim=-1)
            if name != "p_dc" and (sums - 1).abs().max() > atol:
                raise ValidationError(f"{name} pixel rows must sum to 1")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


def _hard_labels(p: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties break low.
    return p.detach().argmax(dim=-1)


def _pixel_count(reference: torch.Tensor, valid: Optional[torch.Tensor]) -> torch.Tensor:
    if valid is None:
        return torch.tensor(float(reference.shape[:-1].numel()),
                            dtype=reference.dtype, device=reference.device)
    return valid.to(reference.dtype).sum()


def supervised_loss(logits: torch.Tensor, mask: torch.Tensor,
                    ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Mean pixel-wise cross-entropy over non-ignored pixels.

    logits: (..., N); mask: (...) integer class indices. Returns 0 with a
    warning when every pixel is ignored.
    """
    logits = _as_tensor(logits)
    mask = _as_tensor(mask)
    if logits.shape[:-1] != mask.shape:
        raise ValidationError(
            f"logits {tuple(logits.shape)} and mask {tuple(mask.shape)} do not align")
    keep = mask != ignore_index
    if not keep.any():
        warnings.warn("supervised_loss: every pixel is ignored, returning 0")
        return logits.sum() * 0.0
    log_probs = torch.log_softmax(logits, dim=-1)
    flat = log_probs.reshape(-1, logits.shape[-1])
    targets = mask.reshape(-1)
    keep_flat = keep.reshape(-1)
    picked = flat[keep_flat].gather(1, targets[keep_flat].unsqueeze(1)).squeeze(1)
    return -picked.mean()


def consistency_loss(p_p: torch.Tensor, p_u: torch.Tensor, tau: float,
                     valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Thresholded cross-entropy against hardened pseudo-labels.

    Pixels whose pseudo-label confidence max(p_u) falls below tau contribute
    zero but stay in the mean's denominator; pixels outside `valid` are
    excluded from both numerator and denominator.
    """
    p_p, p_u = _as_tensor(p_p), _as_tensor(p_u)
    if p_p.shape != p_u.shape:
        raise ValidationError(f"shape mismatch: {tuple(p_p.shape)} vs {tuple(p_u.shape)}")
    conf = p_u.detach().max(dim=-1).values
    target = _hard_labels(p_u)
    nll = -torch.log(p_p.gather(-1, target.unsqueeze(-1)).squeeze(-1))
    weight = (conf >= tau).to(p_p.dtype)
    if valid is not None:
        weight = weight * valid.to(p_p.dtype)
    denom = _pixel_count(p_p, valid)
    if denom == 0:
        warnings.warn("consistency_loss: no valid pixels, returning 0")
        return p_p.sum() * 0.0
    return (nll * weight).sum() / denom


def guidance_term(p_p: torch.Tensor, p_dc: torch.Tensor,
                  zeta: float, dc_confidence: Optional[torch.Tensor] = None,
                  valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Cross-entropy against hardened frozen-model guidance, masked at zeta.

    The confidence gate uses dc_confidence when given (the pre-renormalization
    maximum stored with the pseudo-label), otherwise max(p_dc). Mean over
    valid pixels, independent of the consistency mask.
    """
    p_p, p_dc = _as_tensor(p_p), _as_tensor(p_dc)
    conf = _as_tensor(dc_confidence) if dc_confidence is not None \
        else p_dc.detach().max(dim=-1).values
    target = _hard_labels(p_dc)
    nll = -torch.log(p_p.gather(-1, target.unsqueeze(-1)).squeeze(-1))
    weight = (conf >= zeta).to(p_p.dtype)
    if valid is not None:
        weight = weight * valid.to(p_p.dtype)
    denom = _pixel_count(p_p, valid)
    if denom == 0:
        return p_p.sum() * 0.0
    return (nll * weight).sum() / denom


def guided_consistency_loss(p_p: torch.Tensor, p_u: torch.Tensor,
                            p_dc: Optional[torch.Tensor], cfg: LossConfig,
                            lambda_dc: float,
                            dc_confidence: Optional[torch.Tensor] = None,
                            valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Consistency loss supplemented by the weighted guidance term."""
    base = consistency_loss(p_p, p_u, cfg.tau, valid=valid)
    if p_dc is None or lambda_dc == 0.0:
        return base
    return base + lambda_dc * guidance_term(p_p, p_dc, cfg.zeta, dc_confidence, valid)


@dataclass
class UnlabeledLossTerms:
    """Decomposition of the unlabeled loss for the step record."""

    total: torch.Tensor
    base: float
    dc_contrib: float
    masked_frac_tau: float
    masked_frac_zeta: float


def _passing_fraction(conf: torch.Tensor, threshold: float,
                      valid: Optional[torch.Tensor]) -> float:
    passing = conf >= threshold
    if valid is not None:
        passing = passing & valid.bool()
        denom = valid.bool().sum().item()
    else:
        denom = conf.numel()
    return passing.sum().item() / denom if denom else 0.0


def unlabeled_loss_terms(preds: PredictionSet, cfg: LossConfig,
                         lambda_dc: float = 0.0) -> UnlabeledLossTerms:
    """Weighted three-branch consistency loss with optional guidance.

    The feature-perturbation branch carries weight 1/2 and the two strong
    branches 1/4 each; guidance enters every branch with the same lambda_dc.
    """
    cfg.validate()
    missing = [name for name in ("p_fp", "p_p1", "p_p2") if getattr(preds, name) is None]
    if missing:
        raise ConfigurationError(f"unlabeled loss requires all three branches, missing {missing}")
    total = None
    base_total = 0.0
    for weight, p_p, p_u, p_dc, dc_conf, valid in preds.branches():
        branch = consistency_loss(p_p, p_u, cfg.tau, valid=valid)
        base_total += weight * float(branch.detach())
        if p_dc is not None and lambda_dc != 0.0:
            branch = branch + lambda_dc * guidance_term(p_p, p_dc, cfg.zeta, dc_conf, valid)
        term = weight * branch
        total = term if total is None else total + term
    frac_tau = _passing_fraction(preds.p_u.detach().max(dim=-1).values, cfg.tau, preds.valid)
    if preds.p_dc is not None:
        conf = preds.dc_confidence if preds.dc_confidence is not None \
            else preds.p_dc.detach().max(dim=-1).values
        frac_zeta = _passing_fraction(_as_tensor(conf), cfg.zeta, preds.valid)
    else:
        frac_zeta = 0.0
    return UnlabeledLossTerms(
        total=total,
        base=base_total,
        dc_contrib=float(total.detach()) - base_total,
        masked_frac_tau=frac_tau,
        masked_frac_zeta=frac_zeta,
    )


def unlabeled_loss(preds: PredictionSet, cfg: LossConfig,
                   lambda_dc: float = 0.0) -> torch.Tensor:
    return unlabeled_loss_terms(preds, cfg, lambda_dc).total


def lambda_schedule(step: int, cfg: LossConfig) -> float:
    """Linearly decayed guidance weight: lambda_dc0 at step 0, zero at the end."""
    if cfg.total_steps is None:
        raise ConfigurationError("lambda_schedule requires cfg.total_steps")
    if step < 0 or step > cfg.total_steps:
        warnings.warn(f"lambda_schedule: step {step} outside [0, {cfg.total_steps}], clamping")
        step = min(max(step, 0), cfg.total_steps)
    return cfg.lambda_dc0 * (1.0 - step / cfg.total_steps)


def total_loss(loss_s: torch.Tensor, loss_u: torch.Tensor) -> torch.Tensor:
    """Overall objective: the mean of the supervised and unlabeled losses."""
    loss_s, loss_u = _as_tensor(loss_s), _as_tensor(loss_u)
    for name, value in (("supervised", loss_s), ("unlabeled", loss_u)):
        if not torch.isfinite(value).all():
            raise NumericError(f"{name} loss is non-finite: {value}")
    return 0.5 * (loss_s + loss_u)
