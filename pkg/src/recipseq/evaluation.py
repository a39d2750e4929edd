"""Dual-perspective sampled-negative ranking evaluation (HR / MRR / NDCG at k)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .data import InteractionRecord, SequenceStore, Side, sample_negative_block

PERSPECTIVES = ("u", "v")


class LeakageError(RuntimeError):
    pass


def rank_position(positive_score: float, negative_scores) -> int:
    """1 + number of negatives scoring at least as high as the positive (ties count against it)."""
    neg = np.asarray(negative_scores, dtype=float)
    return 1 + int(np.count_nonzero(neg >= positive_score))


def metrics_at_k(rank: int, k: int = 5) -> tuple[float, float, float]:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if rank > k:
        return 0.0, 0.0, 0.0
    return 1.0, 1.0 / rank, 1.0 / math.log2(rank + 1)


def ranks_from_scores(scores: np.ndarray) -> np.ndarray:
    """``scores`` is ``(R, C)`` with the positive in column 0."""
    return 1 + (scores[:, 1:] >= scores[:, :1]).sum(axis=1)


# ------------------------------------------------------------------ instances


@dataclass
class EvalInstances:
    """Candidate grids for both perspectives; column 0 is always the true counterpart."""

    u_idx: np.ndarray  # (R,)
    v_idx: np.ndarray  # (R,)
    T: np.ndarray  # (R,)
    cand_v: np.ndarray  # (R, 1 + n_neg) V candidates ranked for u
    cand_u: np.ndarray  # (R, 1 + n_neg) U candidates ranked for v

    def __len__(self):
        return len(self.T)


def build_eval_instances(store: SequenceStore, records: Sequence[InteractionRecord], n_neg: int = 100,
                         seed: int = 0) -> EvalInstances:
    if not records:
        raise ValueError("cannot evaluate an empty split")
    rng = np.random.default_rng(seed)
    R = len(records)
    u_idx = np.array([store.user_index("U", r.u_id) for r in records], dtype=np.int64)
    v_idx = np.array([store.user_index("V", r.v_id) for r in records], dtype=np.int64)
    T = np.array([r.timestamp for r in records], dtype=np.int64)
    cand_v = np.empty((R, 1 + n_neg), dtype=np.int64)
    cand_u = np.empty((R, 1 + n_neg), dtype=np.int64)
    nu, nv = store.n_users("U"), store.n_users("V")
    for i in range(R):
        cand_v[i, 0] = v_idx[i]
        cand_v[i, 1:] = sample_negative_block(rng, nv, v_idx[i], n_neg)
        cand_u[i, 0] = u_idx[i]
        cand_u[i, 1:] = sample_negative_block(rng, nu, u_idx[i], n_neg)
    return EvalInstances(u_idx, v_idx, T, cand_v, cand_u)


class PairScorer(Protocol):
    def score_pairs(self, u: np.ndarray, v: np.ndarray, T: np.ndarray) -> np.ndarray:
        """Scores for aligned ``(R, C)`` grids of U and V indices at per-row times ``T``."""


# ------------------------------------------------------------------ scoring


class HistoryCache:
    """Truncated histories keyed by ``(user, prefix length)``, with a leakage audit.

    A user's history at time T only depends on how many of its events
    precede T, so encodings are computed once per distinct prefix.
    """

    def __init__(self, store: SequenceStore, side: Side, n: int):
        self.store = store
        self.side = side
        self.n = n
        self.empty_lookups = 0
        self.lookups = 0

    def keys(self, users: np.ndarray, T: np.ndarray) -> np.ndarray:
        """Prefix lengths for a ``(R, C)`` grid of users at per-row times."""
        Tgrid = np.broadcast_to(T.reshape(-1, *([1] * (users.ndim - 1))), users.shape)
        out = np.empty(users.shape, dtype=np.int64)
        flat_u, flat_t, flat_o = users.reshape(-1), Tgrid.reshape(-1), out.reshape(-1)
        times = self.store._times[self.side]
        for i in range(flat_u.size):
            ts = times[flat_u[i]]
            k = int(np.searchsorted(ts, flat_t[i], side="left"))
            used = ts[max(0, k - self.n):k]
            if used.size and used.max() >= flat_t[i]:
                raise LeakageError(f"history of user {flat_u[i]} holds an event at {used.max()} >= T={flat_t[i]}")
            flat_o[i] = k
        return out

    def sequences(self, users: np.ndarray, prefix: np.ndarray):
        """Padded ``(N, n)`` index array and lengths for unique (user, prefix) pairs."""
        pad = self.store.n_users("V" if self.side == "U" else "U")
        seq = np.full((len(users), self.n), pad, dtype=np.int64)
        lens = np.zeros(len(users), dtype=np.int64)
        for i, (u, k) in enumerate(zip(users, prefix)):
            start = max(0, k - self.n)
            part = self.store._partners[self.side][u][start:k]
            seq[i, : len(part)] = part
            lens[i] = len(part)
        return torch.from_numpy(seq), torch.from_numpy(lens)


class MacroScorer:
    """Deployed scorer: ``p_u . f_v + p_v . f_u`` from CLS states of truncated histories."""

    def __init__(self, model, store: SequenceStore, n: int | None = None):
        self.model = model
        self.store = store
        self.n = n or model.cfg.n
        self.caches = {s: HistoryCache(store, s, self.n) for s in ("U", "V")}
        self.empty = 0
        self.total = 0

    def _vectors(self, side: Side, users: np.ndarray, T: np.ndarray):
        cache = self.caches[side]
        prefix = cache.keys(users, T)
        width = int(prefix.max()) + 1 if prefix.size else 1
        code = users.astype(np.int64) * width + prefix
        uniq, inv = np.unique(code.reshape(-1), return_inverse=True)
        uu, kk = uniq // width, uniq % width
        seq, lens = cache.sequences(uu, kk)
        was_training = self.model.training
        self.model.eval()
        try:
            p, f = self.model.encode_macro(side, seq, lens)
        finally:
            self.model.train(was_training)
        shape = users.shape + (p.shape[-1],)
        empties = (lens == 0).numpy()[inv].reshape(users.shape)
        return p[torch.from_numpy(inv)].reshape(shape), f[torch.from_numpy(inv)].reshape(shape), empties

    def score_pairs(self, u: np.ndarray, v: np.ndarray, T: np.ndarray) -> np.ndarray:
        pu, fu, _ = self._vectors("U", u, T)
        pv, fv, _ = self._vectors("V", v, T)
        return ((pu * fv).sum(-1) + (pv * fu).sum(-1)).double().numpy()

    def score_instances(self, inst: EvalInstances):
        """Returns score grids for both perspectives and the empty-history rate of negatives."""
        pu, fu, eu = self._vectors("U", inst.cand_u, inst.T)
        pv, fv, ev = self._vectors("V", inst.cand_v, inst.T)
        # anchors are column 0 of the other grid
        pa_u, fa_u = pu[:, :1], fu[:, :1]
        pa_v, fa_v = pv[:, :1], fv[:, :1]
        s_u = ((pa_u * fv).sum(-1) + (pv * fa_u).sum(-1)).double().numpy()
        s_v = ((pu * fa_v).sum(-1) + (pa_v * fu).sum(-1)).double().numpy()
        neg_empty = np.concatenate([eu[:, 1:].reshape(-1), ev[:, 1:].reshape(-1)])
        return s_u, s_v, float(neg_empty.mean()) if neg_empty.size else 0.0


# ------------------------------------------------------------------ reports


@dataclass
class EvalReport:
    k: int
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    count: int = 0
    empty_history_negative_rate: float = 0.0

    @property
    def mean_ndcg(self) -> float:
        return float(np.mean([self.metrics[p]["ndcg"] for p in PERSPECTIVES]))

    def flat(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for p in PERSPECTIVES:
            for name, val in self.metrics[p].items():
                out[f"perspective_{p}.{name}@{self.k}"] = val
        out[f"mean.ndcg@{self.k}"] = self.mean_ndcg
        out["count"] = self.count
        out["empty_history_negative_rate"] = self.empty_history_negative_rate
        return out

    def to_text(self) -> str:
        k = self.k
        lines = [f"{'perspective':<14}{'HR@' + str(k):>10}{'MRR@' + str(k):>10}{'NDCG@' + str(k):>10}"]
        labels = {"u": "U ranks V", "v": "V ranks U"}
        for p in PERSPECTIVES:
            m = self.metrics[p]
            lines.append(f"{labels[p]:<14}{m['hr']:>10.4f}{m['mrr']:>10.4f}{m['ndcg']:>10.4f}")
        lines.append(f"instances: {self.count}  empty-history negative rate: {self.empty_history_negative_rate:.4f}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        return "".join(f"{key}={val}\n" for key, val in self.flat().items())

    def write(self, directory: str | Path, stem: str = "metrics") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.txt").write_text(self.to_text(), encoding="utf-8")
        (directory / f"{stem}.kv").write_text(self.to_kv(), encoding="utf-8")
        (directory / f"{stem}.json").write_text(json.dumps(self.flat(), indent=2), encoding="utf-8")


def summarize(scores_u: np.ndarray, scores_v: np.ndarray, k: int) -> dict[str, dict[str, float]]:
    out = {}
    for p, s in (("u", scores_u), ("v", scores_v)):
        ranks = ranks_from_scores(s)
        rows = np.array([metrics_at_k(int(r), k) for r in ranks])
        out[p] = {"hr": float(rows[:, 0].mean()), "mrr": float(rows[:, 1].mean()), "ndcg": float(rows[:, 2].mean())}
    return out


def evaluate_scorer(scorer, store: SequenceStore, records: Sequence[InteractionRecord], k: int = 5,
                    n_neg: int = 100, seed: int = 0) -> EvalReport:
    """Rank each positive against ``n_neg`` sampled users, from both sides.

    ``scorer`` either provides ``score_instances`` (fast path) or the generic
    ``score_pairs`` grid interface.
    """
    inst = build_eval_instances(store, records, n_neg, seed)
    if hasattr(scorer, "score_instances"):
        s_u, s_v, empty_rate = scorer.score_instances(inst)
    else:
        u_grid = np.broadcast_to(inst.u_idx[:, None], inst.cand_v.shape)
        v_grid = np.broadcast_to(inst.v_idx[:, None], inst.cand_u.shape)
        s_u = np.asarray(scorer.score_pairs(u_grid, inst.cand_v, inst.T), dtype=float)
        s_v = np.asarray(scorer.score_pairs(inst.cand_u, v_grid, inst.T), dtype=float)
        empty_rate = _empty_rate(store, inst)
    return EvalReport(k, summarize(s_u, s_v, k), len(inst), empty_rate)


def _empty_rate(store: SequenceStore, inst: EvalInstances) -> float:
    empties = 0
    total = 0
    for side, grid in (("V", inst.cand_v), ("U", inst.cand_u)):
        for row, t in zip(grid[:, 1:], inst.T):
            for c in row:
                empties += store.prefix_len(side, int(c), int(t)) == 0
                total += 1
    return empties / total if total else 0.0


def evaluate_model(model, store: SequenceStore, records, k: int = 5, n_neg: int = 100, seed: int = 0) -> EvalReport:
    return evaluate_scorer(MacroScorer(model, store), store, records, k, n_neg, seed)


def evaluate_split(checkpoint, split, store: SequenceStore | None = None, k: int = 5, seed: int = 0,
                   part: str = "test", n_neg: int = 100) -> EvalReport:
    """Load (or take) a checkpoint and evaluate one part of a split with macro scoring."""
    from .training import load_checkpoint

    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    records = getattr(split, part)
    if not records:
        raise ValueError(f"cannot evaluate: {part} split is empty")
    if store is None:
        store = SequenceStore(split.all_records, ckpt.vocab["U"], ckpt.vocab["V"])
    return evaluate_model(ckpt.model, store, records, k, n_neg, seed)
