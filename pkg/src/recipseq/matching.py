"""Macro dot-product scores, time-sensitive micro co-attention, negative expansion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch

from .numerics import masked_softmax

Aggregation = Literal["attention", "mean"]


class MicroUndefinedError(ValueError):
    """Micro matching needs a non-empty history on both sides."""


@dataclass
class MatchScores:
    y_fwd: torch.Tensor | None = None
    y_bwd: torch.Tensor | None = None
    z_fwd: torch.Tensor | None = None
    z_bwd: torch.Tensor | None = None

    @property
    def y_total(self):
        return self.y_fwd + self.y_bwd

    @property
    def z_total(self):
        return self.z_fwd + self.z_bwd


def _dot(a, b):
    return (a * b).sum(-1)


def macro_score(p_u, f_v, p_v, f_u) -> MatchScores:
    shapes = {tuple(t.shape) for t in (p_u, f_v, p_v, f_u)}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch among macro inputs: {sorted(shapes)}")
    return MatchScores(y_fwd=_dot(p_u, f_v), y_bwd=_dot(p_v, f_u))


def relative_time_bias(alpha: torch.Tensor, lens: torch.Tensor, n: int) -> torch.Tensor:
    """``(B, n)`` bias: the last valid position gets ``alpha[0]``, the one before ``alpha[1]``, ...

    Padding positions are left at 0; they are masked out by the caller.
    """
    j = torch.arange(n).view(1, -1)
    offset = (lens.view(-1, 1) - 1 - j).clamp(min=0)
    return alpha[offset] * (j < lens.view(-1, 1))


def ti_sensi_match_batch(p_micro, f_micro, e_p, e_f, alpha, len_p, len_f,
                         aggregation: Aggregation = "attention") -> torch.Tensor:
    """Vectorized ``delta^T (p f^T) gamma`` over a batch; returns ``(B,)``.

    Instances with an empty side yield 0; callers mask them via
    :func:`micro_defined`.
    """
    B, n, _ = p_micro.shape
    pos = torch.arange(n).view(1, -1)
    valid_p = pos < len_p.view(-1, 1)
    valid_f = pos < len_f.view(-1, 1)
    if aggregation == "attention":
        gamma = masked_softmax(torch.einsum("bnd,bd->bn", f_micro, e_p), valid_f)
        delta_logits = torch.einsum("bnd,bd->bn", p_micro, e_f) + relative_time_bias(alpha, len_p, n)
        delta = masked_softmax(delta_logits, valid_p)
    elif aggregation == "mean":
        gamma = valid_f.to(f_micro.dtype) / len_f.clamp(min=1).view(-1, 1).to(f_micro.dtype)
        delta = valid_p.to(p_micro.dtype) / len_p.clamp(min=1).view(-1, 1).to(p_micro.dtype)
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    G = p_micro @ f_micro.transpose(1, 2)
    return (delta.unsqueeze(1) @ G @ gamma.unsqueeze(2)).view(B)


def ti_sensi_match(p_micro, f_micro, e_p, e_f, alpha, valid_p: int, valid_f: int,
                   aggregation: Aggregation = "attention") -> torch.Tensor:
    """Single-instance micro score for one direction (``p_micro``/``f_micro`` are ``(n, d)``)."""
    if valid_p < 1 or valid_f < 1:
        raise MicroUndefinedError("micro undefined: empty behavior sequence")
    lp = torch.tensor([valid_p])
    lf = torch.tensor([valid_f])
    return ti_sensi_match_batch(p_micro[None], f_micro[None], e_p[None], e_f[None], alpha, lp, lf, aggregation)[0]


@dataclass
class SideView:
    """Encoded state of one user: macro/micro for both perspectives plus raw embeddings."""

    p: torch.Tensor
    p_micro: torch.Tensor
    f: torch.Tensor
    f_micro: torch.Tensor
    e_p: torch.Tensor
    e_f: torch.Tensor
    lens: torch.Tensor

    def unsqueeze(self) -> "SideView":
        return SideView(self.p[None], self.p_micro[None], self.f[None], self.f_micro[None],
                        self.e_p[None], self.e_f[None], self.lens.reshape(1))


def micro_score(u: SideView, v: SideView, alpha_uv, alpha_vu, aggregation: Aggregation = "attention") -> MatchScores:
    batched = u.p_micro.dim() == 3
    if not batched:
        if int(u.lens) < 1 or int(v.lens) < 1:
            raise MicroUndefinedError("micro undefined: empty behavior sequence")
        u, v = u.unsqueeze(), v.unsqueeze()
    z_fwd = ti_sensi_match_batch(u.p_micro, v.f_micro, u.e_p, v.e_f, alpha_uv, u.lens, v.lens, aggregation)
    z_bwd = ti_sensi_match_batch(v.p_micro, u.f_micro, v.e_p, u.e_f, alpha_vu, v.lens, u.lens, aggregation)
    if not batched:
        z_fwd, z_bwd = z_fwd[0], z_bwd[0]
    return MatchScores(z_fwd=z_fwd, z_bwd=z_bwd)


def micro_defined(*views: SideView) -> torch.Tensor:
    ok = views[0].lens >= 1
    for v in views[1:]:
        ok = ok & (v.lens >= 1)
    return ok


def expand_negative_scores(u: SideView, v: SideView, u_neg: SideView, v_neg: SideView,
                           alpha_uv, alpha_vu, aggregation: Aggregation = "attention",
                           with_micro: bool = True):
    """Four negatives per positive, each swapping exactly one of the four score elements.

    Order: (1) u's active side, (2) u's passive side, (3) v's active side,
    (4) v's passive side.  Returns ``(Y_neg, Z_neg)`` of shape ``(..., 4)``;
    ``Z_neg`` is ``None`` when ``with_micro`` is false.
    """
    fwd = _dot(u.p, v.f)
    bwd = _dot(v.p, u.f)
    Y = torch.stack([
        _dot(u_neg.p, v.f) + bwd,
        fwd + _dot(v.p, u_neg.f),
        fwd + _dot(v_neg.p, u.f),
        _dot(u.p, v_neg.f) + bwd,
    ], dim=-1)
    if not with_micro:
        return Y, None

    def tsm_fwd(a: SideView, b: SideView):
        return ti_sensi_match_batch(a.p_micro, b.f_micro, a.e_p, b.e_f, alpha_uv, a.lens, b.lens, aggregation)

    def tsm_bwd(b: SideView, a: SideView):
        return ti_sensi_match_batch(b.p_micro, a.f_micro, b.e_p, a.e_f, alpha_vu, b.lens, a.lens, aggregation)

    batched = u.p_micro.dim() == 3
    if not batched:
        u, v, u_neg, v_neg = (s.unsqueeze() for s in (u, v, u_neg, v_neg))
    zf = tsm_fwd(u, v)
    zb = tsm_bwd(v, u)
    Z = torch.stack([
        tsm_fwd(u_neg, v) + zb,
        zf + tsm_bwd(v, u_neg),
        zf + tsm_bwd(v_neg, u),
        tsm_fwd(u, v_neg) + zb,
    ], dim=-1)
    if not batched:
        Z = Z[0]
    return Y, Z
