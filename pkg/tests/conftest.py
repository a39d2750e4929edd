import numpy as np
import pytest
import torch

from recipseq.config import TrainingConfig
from recipseq.data import SequenceStore, five_core_filter, generate_synthetic, temporal_split
from recipseq.model import SideBatch
from recipseq.training import BatchBuilder, TrainBatch, build_model, to_triples


def tiny_config(**kw) -> TrainingConfig:
    base = dict(n=4, d=8, d_factor=8, d_ff=16, layers=1, heads=1, dropout=0.0, batch_size=32, max_epochs=2,
                eval_negatives=10, seed=0)
    base.update(kw)
    return TrainingConfig(**base)


@pytest.fixture(scope="session")
def tiny_split():
    recs = generate_synthetic(0, 30, 30, 2, 8, 1000)
    split = temporal_split(five_core_filter(recs, k=2)[0])
    return split, SequenceStore(split.all_records)


def fd_problem(split, store, pairs=2, seed=0):
    """A float64 model with non-degenerate weights and a fixed batch of ``pairs`` positives.

    Positives (and their sampled negatives) are chosen so every history is
    non-empty, which keeps the micro and distillation terms in play.
    """
    cfg = tiny_config(n=4, d=8, d_factor=8, d_ff=16, layers=1, heads=1, dtype="float64", detach_teacher=False)
    model = build_model(cfg, store.n_users("U"), store.n_users("V"))
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.3)
    model.eval()
    triples = to_triples(store, split.train)[-200:]
    full = BatchBuilder(store, cfg.n).build(triples, np.random.default_rng(seed))
    sides = (full.u, full.v, full.u_neg, full.v_neg)
    ok = torch.stack([s.lens > 0 for s in sides]).all(0).nonzero().view(-1)[:pairs]
    batch = TrainBatch(*(SideBatch(s.idx[ok], s.seq[ok], s.lens[ok]) for s in sides))
    return cfg, model, batch


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES, summary

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in summary():
            terminalreporter.write_line(line)
