"""Ranking, distillation, and combined objectives.

All functions return per-instance values; batch averaging is the caller's job.
"""

from __future__ import annotations

import torch
from torch.nn import functional as F


def _t(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def bpr_loss(pos, negs) -> torch.Tensor:
    """``-sum_k log sigmoid(pos - neg_k)`` over the trailing negatives axis."""
    pos, negs = _t(pos), _t(negs)
    return F.softplus(-(pos.unsqueeze(-1) - negs)).sum(-1)


def margin_mse_loss(z_pos, z_neg, y_pos, y_neg, detach_teacher: bool = True) -> torch.Tensor:
    """Squared gap between teacher (micro) and student (macro) margins, summed over aligned negatives."""
    z_pos, z_neg, y_pos, y_neg = map(_t, (z_pos, z_neg, y_pos, y_neg))
    if z_neg.shape != y_neg.shape:
        raise ValueError(f"micro negatives {tuple(z_neg.shape)} and macro negatives {tuple(y_neg.shape)} misaligned")
    teacher = z_pos.unsqueeze(-1) - z_neg
    if detach_teacher:
        teacher = teacher.detach()
    student = y_pos.unsqueeze(-1) - y_neg
    return ((teacher - student) ** 2).sum(-1)


def total_loss(l_ma, l_mi, l_sd, lam: float, mu: float, self_distill: bool = True):
    out = l_ma + lam * l_mi
    if self_distill:
        out = out + mu * l_sd
    return out
