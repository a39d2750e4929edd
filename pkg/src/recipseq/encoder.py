"""Masked transformer stacks producing macro (CLS) and micro (per-event) states."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import torch
from torch import nn
from torch.nn import functional as F

from .numerics import AttentionMask, masked_softmax

MaskKind = Literal["unidirectional", "bidirectional"]


class NonFiniteActivationError(FloatingPointError):
    pass


# ------------------------------------------------------------------- masks


def batch_masks(lens: torch.Tensor, n: int, kind: MaskKind) -> torch.Tensor:
    """``(B, n+1, n+1)`` boolean masks, row = query position, column = key position.

    Position 0 is CLS, 1..len are events, the rest is padding (self-only).
    Unidirectional: CLS sees itself and every event; event i sees events
    1..i but not CLS.  Bidirectional: the CLS+event block is fully connected.
    """
    ar = torch.arange(n + 1)
    q = ar.view(1, -1, 1)
    k = ar.view(1, 1, -1)
    L = lens.view(-1, 1, 1)
    real_q = q <= L
    real_k = k <= L
    if kind == "unidirectional":
        cls_row = (q == 0) & real_k
        ev_row = (q >= 1) & real_q & (k >= 1) & (k <= q)
        allow = cls_row | ev_row
    elif kind == "bidirectional":
        allow = real_q & real_k
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    return allow | ((q == k) & ~real_q)


def build_unidirectional_mask(n: int, valid_len: int) -> AttentionMask:
    return AttentionMask(batch_masks(torch.tensor([valid_len]), n, "unidirectional")[0], n, valid_len)


def build_bidirectional_mask(n: int, valid_len: int) -> AttentionMask:
    return AttentionMask(batch_masks(torch.tensor([valid_len]), n, "bidirectional")[0], n, valid_len)


# ----------------------------------------------------------------- modules


class Dropout(nn.Module):
    """Inverted dropout; thresholding ``rand`` is about 2x cheaper than ``bernoulli_`` on CPU."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, dtype=x.dtype) >= self.p
        return x * keep * (1.0 / (1.0 - self.p))


class MaskedSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.h = heads
        self.dk = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.drop = Dropout(dropout)

    def forward(self, x: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        B, m, d = x.shape

        def split(t):
            return t.view(B, m, self.h, self.dk).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.dk)
        probs = self.drop(masked_softmax(logits, allow.unsqueeze(1)))
        out = (probs @ v).transpose(1, 2).reshape(B, m, d)
        return self.o(out)


class EncoderLayer(nn.Module):
    """Post-norm block: ``LN(x + attn(x))`` then ``LN(x + ffn(x))``."""

    def __init__(self, d: int, heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.attn = MaskedSelfAttention(d, heads, dropout)
        self.ln1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, d_ff)
        self.ff2 = nn.Linear(d_ff, d)
        self.ln2 = nn.LayerNorm(d)
        self.drop = Dropout(dropout)

    def forward(self, x, allow):
        x = self.ln1(x + self.drop(self.attn(x, allow)))
        return self.ln2(x + self.drop(self.ff2(F.gelu(self.ff1(x)))))


@dataclass
class EncoderOutput:
    macro: torch.Tensor  # (B, d)
    micro: torch.Tensor  # (B, n, d)
    valid_len: torch.Tensor  # (B,)


class SequenceEncoder(nn.Module):
    """One of the four stacks; owns its CLS vector and position table.

    CLS and positions start at ``N(0, init_std)``; linear layers keep
    PyTorch's default fan-in initialization.
    """

    def __init__(self, n: int, d: int, layers: int = 2, heads: int = 2, d_ff: int | None = None,
                 dropout: float = 0.5, mask_kind: MaskKind = "unidirectional",
                 embedding_dropout: bool = True, init_std: float = 0.02):
        super().__init__()
        self.n = n
        self.mask_kind = mask_kind
        self.cls = nn.Parameter(torch.randn(d) * init_std)
        self.pos = nn.Parameter(torch.randn(n + 1, d) * init_std)
        self.layers = nn.ModuleList(
            EncoderLayer(d, heads, d_ff or 4 * d, dropout) for _ in range(layers)
        )
        self.emb_drop = Dropout(dropout if embedding_dropout else 0.0)

    def forward(self, E: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        h = self.emb_drop(E)
        for i, layer in enumerate(self.layers):
            h = layer(h, allow)
            if not bool(torch.isfinite(h).all()):
                raise NonFiniteActivationError(f"non-finite activations after encoder layer {i}")
        return h

    def encode(self, E: torch.Tensor, lens: torch.Tensor) -> EncoderOutput:
        n = E.shape[1] - 1
        H = self(E, batch_masks(lens, n, self.mask_kind))
        return EncoderOutput(H[:, 0], H[:, 1:], lens)


def encode(encoder: SequenceEncoder, E: torch.Tensor, mask: AttentionMask) -> EncoderOutput:
    """Single-sequence forward pass with an explicit mask; ``E`` is ``(n+1, d)``."""
    H = encoder(E.unsqueeze(0), mask.allow.unsqueeze(0))[0]
    return EncoderOutput(H[0], H[1:], torch.tensor(mask.valid_len))
