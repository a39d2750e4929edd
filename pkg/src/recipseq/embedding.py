"""Decomposed, cross-perspective shared user embeddings.

Active U embeddings and passive V embeddings share one core matrix
(``M_U_active = A_u @ C1``, ``M_V_passive = B_v @ C1``); the mirrored pair
shares ``C2``.  With ``share=False`` the four tables are free parameters.
"""

from __future__ import annotations

import math
from typing import Literal

import torch
from torch import nn

from .data import BehaviorSequence, Side, other_side

Perspective = Literal["active", "passive"]
PERSPECTIVES: tuple[Perspective, Perspective] = ("active", "passive")

INIT_STD = 0.02

# (side, perspective) -> (core name, factor name)
_GROUPS = {
    ("U", "active"): ("C1", "A_u"),
    ("V", "passive"): ("C1", "B_v"),
    ("V", "active"): ("C2", "A_v"),
    ("U", "passive"): ("C2", "B_u"),
}


def table_name(side: Side, perspective: Perspective) -> str:
    return f"M_{side}_{perspective}"


class BilateralEmbedding(nn.Module):
    def __init__(self, n_u: int, n_v: int, d: int = 64, d_factor: int | None = None, share: bool = True):
        super().__init__()
        self.n = {"U": n_u, "V": n_v}
        self.d = d
        self.d_factor = d if d_factor is None else d_factor
        self.share = share
        self.read_log: list[tuple[Side, Perspective]] | None = None
        if share:
            # core entries at 1/sqrt(d') keep the composed rows at INIT_STD
            core_std = 1.0 / math.sqrt(self.d_factor)
            self.C1 = nn.Parameter(torch.randn(self.d_factor, d) * core_std)
            self.C2 = nn.Parameter(torch.randn(self.d_factor, d) * core_std)
            self.A_u = nn.Parameter(torch.randn(n_u, self.d_factor) * INIT_STD)
            self.B_v = nn.Parameter(torch.randn(n_v, self.d_factor) * INIT_STD)
            self.A_v = nn.Parameter(torch.randn(n_v, self.d_factor) * INIT_STD)
            self.B_u = nn.Parameter(torch.randn(n_u, self.d_factor) * INIT_STD)
        else:
            self.free = nn.ParameterDict({
                table_name(s, p): nn.Parameter(torch.randn(self.n[s], d) * INIT_STD)
                for s in ("U", "V") for p in PERSPECTIVES
            })

    def table(self, side: Side, perspective: Perspective) -> torch.Tensor:
        """Full ``|side| x d`` embedding matrix for one (side, perspective)."""
        if (side, perspective) not in _GROUPS:
            raise ValueError(f"bad side/perspective {(side, perspective)}")
        if self.read_log is not None:
            self.read_log.append((side, perspective))
        if not self.share:
            return self.free[table_name(side, perspective)]
        core, factor = _GROUPS[(side, perspective)]
        return getattr(self, factor) @ getattr(self, core)

    def padded_table(self, side: Side, perspective: Perspective) -> torch.Tensor:
        """Table with an all-zero padding row appended at index ``|side|``."""
        t = self.table(side, perspective)
        return torch.cat([t, t.new_zeros(1, self.d)], dim=0)

    def pad_index(self, side: Side) -> int:
        return self.n[side]


def resolve_embedding(emb: BilateralEmbedding, side: Side, perspective: Perspective, user: int) -> torch.Tensor:
    if not 0 <= user < emb.n[side]:
        raise IndexError(f"unknown {side}-side user index {user}")
    if not emb.share:
        return emb.table(side, perspective)[user]
    core, factor = _GROUPS[(side, perspective)]
    if emb.read_log is not None:
        emb.read_log.append((side, perspective))
    return getattr(emb, factor)[user] @ getattr(emb, core)


def sequence_table(emb: BilateralEmbedding, owner_side: Side, perspective: Perspective) -> torch.Tensor:
    """Padded table feeding an owner's sequence encoder.

    Active encoding reads the counterparts' passive embeddings and passive
    encoding reads their active ones.
    """
    flipped: Perspective = "passive" if perspective == "active" else "active"
    return emb.padded_table(other_side(owner_side), flipped)


def assemble_batch(table: torch.Tensor, cls: torch.Tensor, pos: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``idx`` is ``(B, n)`` counterpart indices right-padded with the pad row; returns ``(B, n+1, d)``.

    Event embeddings are scaled by ``sqrt(d)`` before positions are added,
    so that at 0.02-scale init the content is not drowned by CLS and
    position terms in the post-norm residual stream.
    """
    B, n = idx.shape
    if pos.shape[0] < n + 1:
        raise ValueError(f"position table has {pos.shape[0]} rows, need {n + 1}")
    events = table[idx] * math.sqrt(table.shape[-1]) + pos[1 : n + 1]
    head = (cls + pos[0]).expand(B, 1, -1)
    return torch.cat([head, events], dim=1)


def pad_indices(seqs: list, n: int, pad: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad integer index sequences to width ``n``."""
    idx = torch.full((len(seqs), n), pad, dtype=torch.long)
    lens = torch.zeros(len(seqs), dtype=torch.long)
    for i, s in enumerate(seqs):
        k = len(s)
        if k > n:
            raise ValueError(f"sequence of length {k} exceeds n={n}; truncate first")
        if k:
            idx[i, :k] = torch.as_tensor(s, dtype=torch.long)
        lens[i] = k
    return idx, lens


def assemble_input(emb: BilateralEmbedding, store, sequence: BehaviorSequence, perspective: Perspective,
                   cls: torch.Tensor, pos: torch.Tensor, n: int) -> tuple[torch.Tensor, int]:
    """Single-sequence ``(E, valid_len)`` with ``E`` of shape ``(n+1, d)``."""
    if len(sequence) > n:
        raise ValueError(f"sequence of length {len(sequence)} exceeds n={n}; truncate first")
    opp = other_side(sequence.side)
    cp = [store.user_index(opp, c) for c in sequence.counterparts]
    idx, lens = pad_indices([cp], n, emb.pad_index(opp))
    table = sequence_table(emb, sequence.side, perspective)
    return assemble_batch(table, cls, pos, idx)[0], int(lens[0])
