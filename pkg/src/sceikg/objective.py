"""Joint training objective: prediction error, state alignment, herb
compatibility reward, graph-completion loss, and L2 regularization.

Visit-level terms are averaged over each patient's real (non-padded)
visits, then over the batch; the final visit never contributes a state
term because no follow-up state exists to align with.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import torch

ZERO_NORM_EPS = 1e-12


@dataclass
class LossBreakdown:
    mse: float
    state: float
    compat: float
    ikg: float
    l2: float
    total: float
    visit_counts: list[int]

    def to_json(self, epoch: int | None = None) -> str:
        obj = {}
        if epoch is not None:
            obj["epoch"] = epoch
        obj.update({"mse": self.mse, "state": self.state, "compat": self.compat,
                    "ikg": self.ikg, "l2": self.l2, "total": self.total})
        return json.dumps(obj)


def loss_mse(herbs_true: torch.Tensor, herbs_pred: torch.Tensor) -> torch.Tensor:
    """Squared-error sum over the herb vector(s); summed along the last axis."""
    if herbs_true.shape != herbs_pred.shape:
        raise ValueError(f"shape mismatch {tuple(herbs_true.shape)} vs {tuple(herbs_pred.shape)}")
    diff = herbs_true.to(herbs_pred.dtype) - herbs_pred
    return (diff * diff).sum(dim=-1)


def loss_state(phi_next: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
    """Misalignment 1 - cos(phi_next, psi), in [0, 2]; zero-norm inputs score 1."""
    norms = phi_next.norm(dim=-1) * psi.norm(dim=-1)
    if bool((norms < ZERO_NORM_EPS).any()):
        warnings.warn("zero-norm state vector in alignment loss; treating as orthogonal")
    cos = (phi_next * psi).sum(dim=-1) / norms.clamp_min(ZERO_NORM_EPS)
    return 1.0 - cos


def loss_compat(herbs_pred: torch.Tensor, compat: torch.Tensor) -> torch.Tensor:
    """Compatibility reward -sum_ij W_ij s_i s_j; nonpositive for W >= 0."""
    if compat.shape[0] != compat.shape[1] or compat.shape[0] != herbs_pred.shape[-1]:
        raise ValueError("compatibility matrix must be N x N matching the herb scores")
    quad = herbs_pred @ compat
    return -(quad * herbs_pred).sum(dim=-1)


@dataclass
class VisitLossParts:
    """Per-visit loss tensors of shape (batch, visits) plus the real-visit mask.

    ``state`` holds, at index t, the alignment loss between visit t's
    post-medication state and visit t+1's patient vector; the last column is
    ignored (and by convention zero).
    """

    mse: torch.Tensor
    state: torch.Tensor
    compat: torch.Tensor
    mask: torch.Tensor


def _per_patient_mean(values: torch.Tensor, weights: torch.Tensor,
                      counts: torch.Tensor) -> torch.Tensor:
    return (values * weights).sum(dim=1) / counts


def total_loss(parts: VisitLossParts, lam: float, lam_theta: float,
               params: list[torch.Tensor], ikg: torch.Tensor | float = 0.0
               ) -> tuple[torch.Tensor, LossBreakdown]:
    """Compose the joint objective and report its pieces.

    Returns the differentiable total plus a detached breakdown. Raises when
    any patient row in the mask has no real visit.
    """
    mask = parts.mask.to(parts.mse.dtype)
    counts = mask.sum(dim=1)
    if bool((counts == 0).any()):
        raise ValueError("batch contains a patient with all visits padded")
    # state term: visit t aligns with t+1, so only positions whose successor
    # is real may contribute
    succ = torch.zeros_like(mask)
    succ[:, :-1] = mask[:, 1:]
    mse_b = _per_patient_mean(parts.mse, mask, counts)
    state_b = _per_patient_mean(parts.state, succ * mask, counts)
    compat_b = _per_patient_mean(parts.compat, mask, counts)

    mse_term = mse_b.mean()
    state_term = state_b.mean()
    compat_term = compat_b.mean()
    l2 = sum((p * p).sum() for p in params) if params else torch.zeros((), dtype=parts.mse.dtype)
    ikg_term = ikg if torch.is_tensor(ikg) else torch.tensor(float(ikg), dtype=parts.mse.dtype)

    total = mse_term + state_term + lam * compat_term + ikg_term + lam_theta * l2
    breakdown = LossBreakdown(
        mse=float(mse_term.detach()), state=float(state_term.detach()),
        compat=float(compat_term.detach()), ikg=float(ikg_term.detach()),
        l2=float(l2.detach()), total=float(total.detach()),
        visit_counts=[int(c) for c in counts])
    return total, breakdown
