"""Segmentation, reconstruction-similarity and contrastive losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .decoders import masked_mean


@dataclass
class LossBreakdown:
    l_ce: torch.Tensor
    l_sim: torch.Tensor
    l_con: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return total_loss(self)

    def as_floats(self) -> dict[str, float]:
        return {"l_ce": float(self.l_ce.detach()), "l_sim": float(self.l_sim.detach()),
                "l_con": float(self.l_con.detach()), "total": float(self.total.detach())}


def total_loss(parts: LossBreakdown):
    return parts.l_ce + parts.l_sim + parts.l_con


def loss_ce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel two-class cross-entropy.

    ``logits`` is (B, 2, H, W); ``target`` is a binary (B, H, W) mask. An
    all-background target is valid supervision.
    """
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    if target.dtype != torch.bool:
        if not torch.all((target == 0) | (target == 1)):
            raise ValueError("target mask must be binary")
    return F.cross_entropy(logits, target.long())


def safe_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine; rows where either vector is zero give 0 with zero gradient."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    denom = na * nb
    ok = denom > 0
    # a dummy denominator keeps the unused branch finite, so where() passes zero grads
    safe = torch.where(ok, denom, torch.ones_like(denom))
    return torch.where(ok, (a * b).sum(-1) / safe, torch.zeros_like(denom))


def loss_sim(e_hat, e4, valid, delta) -> torch.Tensor:
    """Batch mean of delta * (1 - cos(pool(stopgrad(E*_4)), pool(E_hat)))."""
    target = masked_mean(e4.detach(), valid)
    recon = masked_mean(e_hat, valid)
    delta = torch.as_tensor(delta, dtype=e_hat.dtype, device=e_hat.device)
    # (1 - cos) computed only where delta is set, so delta = 0 rows carry exact zeros
    per_sample = torch.where(delta > 0, delta * (1 - safe_cosine(target, recon)), torch.zeros_like(delta))
    return per_sample.mean()


def loss_con(v_o, e_o, delta, tau: float = 0.05) -> torch.Tensor:
    """Symmetric InfoNCE with per-row delta gating.

    Every sample stays in the denominators; only the numerator terms of
    delta = 0 rows are dropped. The 1/B factor counts all samples.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    delta = torch.as_tensor(delta, dtype=v_o.dtype, device=v_o.device)
    sims = v_o @ e_o.T / tau
    idx = torch.arange(sims.shape[0], device=sims.device)
    i2t = torch.log_softmax(sims, dim=1)[idx, idx]
    t2i = torch.log_softmax(sims.T, dim=1)[idx, idx]
    keep = delta > 0
    zero = torch.zeros_like(delta)
    l_i2t = -torch.where(keep, delta * i2t, zero).sum() / sims.shape[0]
    l_t2i = -torch.where(keep, delta * t2i, zero).sum() / sims.shape[0]
    return l_i2t + l_t2i
