"""The two-sided matcher: shared embeddings, four encoder stacks, and scoring heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import TrainingConfig
from .data import Side
from .embedding import BilateralEmbedding, Perspective, assemble_batch, sequence_table
from .encoder import EncoderOutput, SequenceEncoder
from .matching import SideView, expand_negative_scores, macro_score, micro_defined, micro_score

STACKS: tuple[tuple[Side, Perspective], ...] = (
    ("U", "active"), ("U", "passive"), ("V", "active"), ("V", "passive"),
)


def stack_name(side: Side, perspective: Perspective) -> str:
    return f"{side}_{perspective}"


@dataclass
class SideBatch:
    """Users of one side with their truncated histories: ``idx (B,)``, ``seq (B, n)``, ``lens (B,)``."""

    idx: torch.Tensor
    seq: torch.Tensor
    lens: torch.Tensor


@dataclass
class ForwardScores:
    y_pos: torch.Tensor
    y_neg: torch.Tensor
    z_pos: torch.Tensor | None
    z_neg: torch.Tensor | None
    micro_ok: torch.Tensor


class ReciprocalMatcher(nn.Module):
    def __init__(self, n_u: int, n_v: int, cfg: TrainingConfig):
        super().__init__()
        self.cfg = cfg
        self.n = cfg.n
        self.embedding = BilateralEmbedding(n_u, n_v, cfg.d, cfg.d_factor, share=cfg.share_embeddings)

        def kind(p: Perspective):
            if cfg.mask_mode == "bidirectional_all" or p == "passive":
                return "bidirectional"
            return "unidirectional"

        self.encoders = nn.ModuleDict({
            stack_name(s, p): SequenceEncoder(cfg.n, cfg.d, cfg.layers, cfg.heads, cfg.d_ff, cfg.dropout,
                                              kind(p), cfg.embedding_dropout)
            for s, p in STACKS
        })
        self.alpha_uv = nn.Parameter(torch.zeros(cfg.n))
        self.alpha_vu = self.alpha_uv if cfg.share_alpha else nn.Parameter(torch.zeros(cfg.n))

    # ------------------------------------------------------------ encoding

    def encode(self, side: Side, perspective: Perspective, seq: torch.Tensor, lens: torch.Tensor,
               table: torch.Tensor | None = None) -> EncoderOutput:
        enc = self.encoders[stack_name(side, perspective)]
        if table is None:
            table = sequence_table(self.embedding, side, perspective)
        E = assemble_batch(table, enc.cls, enc.pos, seq)
        return enc.encode(E, lens)

    def side_view(self, side: Side, batch: SideBatch, tables: dict | None = None) -> SideView:
        tables = tables or {}
        act = self.encode(side, "active", batch.seq, batch.lens, tables.get((side, "seq_active")))
        pas = self.encode(side, "passive", batch.seq, batch.lens, tables.get((side, "seq_passive")))
        e_p = tables.get((side, "active"))
        e_f = tables.get((side, "passive"))
        e_p = (self.embedding.table(side, "active") if e_p is None else e_p)[batch.idx]
        e_f = (self.embedding.table(side, "passive") if e_f is None else e_f)[batch.idx]
        return SideView(act.macro, act.micro, pas.macro, pas.micro, e_p, e_f, batch.lens)

    def _tables(self) -> dict:
        # every table is materialized once per forward pass
        t = {}
        for s, p in STACKS:
            t[(s, p)] = self.embedding.table(s, p)
        for s, p in STACKS:
            opp = "V" if s == "U" else "U"
            flipped = "passive" if p == "active" else "active"
            t[(s, f"seq_{p}")] = torch.cat([t[(opp, flipped)], t[(opp, flipped)].new_zeros(1, self.cfg.d)])
        return t

    # ------------------------------------------------------------- scoring

    def forward(self, u: SideBatch, v: SideBatch, u_neg: SideBatch, v_neg: SideBatch,
                with_micro: bool = True) -> ForwardScores:
        """Positive and four-way negative scores at both scales for a training batch."""
        B = u.idx.shape[0]
        # padded tail columns are inert; cut every history to the longest one in the batch
        width = max(1, int(max(b.lens.max() for b in (u, v, u_neg, v_neg))))
        u, v, u_neg, v_neg = (SideBatch(b.idx, b.seq[:, :width], b.lens) for b in (u, v, u_neg, v_neg))
        tables = self._tables()
        # positive and negative users of a side go through each stack together
        both_u = SideBatch(torch.cat([u.idx, u_neg.idx]), torch.cat([u.seq, u_neg.seq]), torch.cat([u.lens, u_neg.lens]))
        both_v = SideBatch(torch.cat([v.idx, v_neg.idx]), torch.cat([v.seq, v_neg.seq]), torch.cat([v.lens, v_neg.lens]))
        vu = self.side_view("U", both_u, tables)
        vv = self.side_view("V", both_v, tables)
        uu, uun = _halves(vu, B)
        vvp, vvn = _halves(vv, B)
        y = macro_score(uu.p, vvp.f, vvp.p, uu.f).y_total
        agg = self.cfg.micro_aggregation
        y_neg, z_neg = expand_negative_scores(uu, vvp, uun, vvn, self.alpha_uv, self.alpha_vu, agg, with_micro)
        z = None
        if with_micro:
            z = micro_score(uu, vvp, self.alpha_uv, self.alpha_vu, agg).z_total
        ok = micro_defined(uu, vvp, uun, vvn)
        return ForwardScores(y, y_neg, z, z_neg, ok)

    @torch.no_grad()
    def encode_macro(self, side: Side, seq: torch.Tensor, lens: torch.Tensor, chunk: int = 2048):
        """Inference-time ``(p, f)`` macro vectors for a block of sequences."""
        ps, fs = [], []
        tables = self._tables()
        for i in range(0, seq.shape[0], chunk):
            l = lens[i:i + chunk]
            s = seq[i:i + chunk, : max(1, int(l.max()))]
            ps.append(self.encode(side, "active", s, l, tables[(side, "seq_active")]).macro)
            fs.append(self.encode(side, "passive", s, l, tables[(side, "seq_passive")]).macro)
        d = self.cfg.d
        if not ps:
            return seq.new_zeros((0, d), dtype=self.alpha_uv.dtype), seq.new_zeros((0, d), dtype=self.alpha_uv.dtype)
        return torch.cat(ps), torch.cat(fs)


def _halves(view: SideView, B: int) -> tuple[SideView, SideView]:
    def part(sl):
        return SideView(view.p[sl], view.p_micro[sl], view.f[sl], view.f_micro[sl],
                        view.e_p[sl], view.e_f[sl], view.lens[sl])

    return part(slice(0, B)), part(slice(B, None))
