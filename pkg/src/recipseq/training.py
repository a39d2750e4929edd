"""Mini-batch training with four-way negatives, early stopping, and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import TrainingConfig
from .data import DatasetSplit, InteractionRecord, SequenceStore, sample_negative_index
from .evaluation import EvalReport, LeakageError, evaluate_model
from .losses import bpr_loss, margin_mse_loss, total_loss
from .model import ReciprocalMatcher, SideBatch
from .numerics import Adam

logger = logging.getLogger(__name__)

MAGIC = b"RESEQ1"
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class DivergenceError(FloatingPointError):
    pass


# ------------------------------------------------------------------ batches


@dataclass
class TrainBatch:
    u: SideBatch
    v: SideBatch
    u_neg: SideBatch
    v_neg: SideBatch


class BatchBuilder:
    """Turns positive (u, v, T) triples into padded histories plus sampled negatives.

    Every history is cut strictly before T and audited; a violation raises
    :class:`LeakageError`.
    """

    def __init__(self, store: SequenceStore, n: int):
        self.store = store
        self.n = n
        self.audited_events = 0

    def _side(self, side, users: Sequence[int], T: Sequence[int]) -> SideBatch:
        pad = self.store.n_users("V" if side == "U" else "U")
        seq = np.full((len(users), self.n), pad, dtype=np.int64)
        lens = np.zeros(len(users), dtype=np.int64)
        for i, (u, t) in enumerate(zip(users, T)):
            part, times = self.store.truncated_indices(side, u, t, self.n)
            if len(times) and times[-1] >= t:
                raise LeakageError(f"{side}-side user {u}: event at {times[-1]} >= T={t}")
            self.audited_events += len(times)
            seq[i, : len(part)] = part
            lens[i] = len(part)
        return SideBatch(torch.as_tensor(np.asarray(users, dtype=np.int64)), torch.from_numpy(seq),
                         torch.from_numpy(lens))

    def build(self, triples: np.ndarray, rng: np.random.Generator) -> TrainBatch:
        u, v, T = triples[:, 0], triples[:, 1], triples[:, 2]
        nu, nv = self.store.n_users("U"), self.store.n_users("V")
        u_neg = [sample_negative_index(rng, nu, int(x)) for x in u]
        v_neg = [sample_negative_index(rng, nv, int(x)) for x in v]
        return TrainBatch(self._side("U", u, T), self._side("V", v, T),
                          self._side("U", u_neg, T), self._side("V", v_neg, T))


def to_triples(store: SequenceStore, records: Sequence[InteractionRecord]) -> np.ndarray:
    return np.array([(store.user_index("U", r.u_id), store.user_index("V", r.v_id), r.timestamp)
                     for r in records], dtype=np.int64).reshape(-1, 3)


# ------------------------------------------------------------------- losses


@dataclass
class LossParts:
    total: torch.Tensor
    macro: torch.Tensor
    micro: torch.Tensor
    distill: torch.Tensor


def batch_loss(model: ReciprocalMatcher, batch: TrainBatch, cfg: TrainingConfig) -> LossParts:
    need_micro = cfg.lam > 0 or (cfg.self_distill and cfg.mu > 0)
    s = model(batch.u, batch.v, batch.u_neg, batch.v_neg, with_micro=need_micro)
    B = s.y_pos.shape[0]
    l_ma = bpr_loss(s.y_pos, s.y_neg).sum() / B
    zero = s.y_pos.new_zeros(())
    l_mi = l_sd = zero
    if need_micro:
        # instances whose micro score is undefined (an empty history) fall back to macro only
        w = s.micro_ok.to(s.y_pos.dtype)
        l_mi = (bpr_loss(s.z_pos, s.z_neg) * w).sum() / B
        l_sd = (margin_mse_loss(s.z_pos, s.z_neg, s.y_pos, s.y_neg, cfg.detach_teacher) * w).sum() / B
    return LossParts(total_loss(l_ma, l_mi, l_sd, cfg.lam, cfg.mu, cfg.self_distill), l_ma, l_mi, l_sd)


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    model: ReciprocalMatcher
    config: TrainingConfig
    vocab: dict[str, list[str]]
    epoch: int = 0
    best_metric: float = float("-inf")
    history: list[dict] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        save_checkpoint(self, path)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Layout: magic, u64 header length, JSON header (manifest + config + vocab), raw tensor bytes."""
    state = ckpt.model.state_dict()
    manifest = []
    blobs = []
    offset = 0
    for name, t in state.items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset,
                         "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": MAGIC.decode(),
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab,
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric if math.isfinite(ckpt.best_metric) else None,
        "history": ckpt.history,
        "tensors": manifest,
    }
    hb = json.dumps(header).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    body = start + hlen
    cfg = TrainingConfig.from_dict(header["config"])
    vocab = header["vocab"]
    model = ReciprocalMatcher(len(vocab["U"]), len(vocab["V"]), cfg).to(DTYPES[cfg.dtype])
    state = {}
    for ent in header["tensors"]:
        lo = body + ent["offset"]
        arr = np.frombuffer(data[lo:lo + ent["nbytes"]], dtype=np.dtype(ent["dtype"])).reshape(ent["shape"])
        state[ent["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    best = header["best_metric"]
    return Checkpoint(model, cfg, vocab, header["epoch"], float("-inf") if best is None else best,
                      header.get("history", []))


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    epochs_run: int
    audited_events: int


def build_model(cfg: TrainingConfig, n_u: int, n_v: int) -> ReciprocalMatcher:
    torch.manual_seed(cfg.seed)
    return ReciprocalMatcher(n_u, n_v, cfg).to(DTYPES[cfg.dtype])


def train(cfg: TrainingConfig, split: DatasetSplit, store: SequenceStore | None = None,
          validate: Callable[[ReciprocalMatcher, int], float] | None = None,
          log_every: int = 0) -> TrainResult:
    """Fit a matcher on ``split.train`` with early stopping on validation NDCG.

    ``validate`` overrides the default validation metric (mean of both
    perspectives' NDCG@k, macro scoring); it gets the model and epoch.
    """
    if not split.train:
        raise ValueError("training split is empty")
    store = store or SequenceStore(split.all_records)
    model = build_model(cfg, store.n_users("U"), store.n_users("V"))
    rng = np.random.default_rng(cfg.seed)
    builder = BatchBuilder(store, cfg.n)
    triples = to_triples(store, split.train)
    opt = Adam(model.named_parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)

    valid_records = list(split.valid)
    if cfg.max_valid_instances and len(valid_records) > cfg.max_valid_instances:
        pick = np.random.default_rng(cfg.seed + 1).choice(len(valid_records), cfg.max_valid_instances, replace=False)
        valid_records = [valid_records[i] for i in sorted(pick)]

    if validate is None:
        if valid_records:
            def validate(m, epoch):
                return evaluate_model(m, store, valid_records, cfg.eval_k, cfg.eval_negatives,
                                      seed=cfg.seed + 2).mean_ndcg
        else:
            def validate(m, epoch):
                return float(epoch)

    best = float("-inf")
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    bad = 0
    losses: list[float] = []
    history: list[dict] = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(triples))
        sums = np.zeros(4)
        steps = 0
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = builder.build(triples[order[lo:lo + cfg.batch_size]], rng)
            opt.zero_grad()
            parts = batch_loss(model, batch, cfg)
            if not bool(torch.isfinite(parts.total)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            parts.total.backward()
            opt.step()
            losses.append(parts.total.item())
            sums += [parts.total.item(), parts.macro.item(), parts.micro.item(), parts.distill.item()]
            steps += 1
            if log_every and step % log_every == 0:
                logger.info("epoch %d step %d loss %.4f", epoch, step, parts.total.item())
        model.eval()
        metric = float(validate(model, epoch))
        means = sums / max(steps, 1)
        history.append({"epoch": epoch, "loss": means[0], "l_ma": means[1], "l_mi": means[2], "l_sd": means[3],
                        "valid_metric": metric, "seconds": time.perf_counter() - t0})
        logger.info("epoch %d loss %.4f valid %.4f (%.1fs)", epoch, means[0], metric, history[-1]["seconds"])
        if metric > best:
            best, best_epoch, bad = metric, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    vocab = {"U": list(store.ids["U"]), "V": list(store.ids["V"])}
    ckpt = Checkpoint(model, cfg, vocab, best_epoch, best, history)
    return TrainResult(ckpt, losses, epoch, builder.audited_events)
