"""scikit-learn style front end.

Inputs are interaction triples ``(u_id, v_id, timestamp)`` given as a list
of :class:`~recipseq.data.InteractionRecord`, a list of tuples, a 3-column
array, or a DataFrame with ``u_id``/``v_id``/``timestamp`` columns.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import TrainingConfig
from .data import DatasetSplit, InteractionRecord, SequenceStore
from .evaluation import EvalReport, MacroScorer, evaluate_model
from .matching import micro_score
from .model import SideBatch
from .training import BatchBuilder, Checkpoint, load_checkpoint, train


def check_interactions(X) -> list[InteractionRecord]:
    """Coerce supported inputs into validated interaction records."""
    if hasattr(X, "columns"):
        missing = {"u_id", "v_id", "timestamp"} - set(X.columns)
        if missing:
            raise ValueError(f"DataFrame is missing columns {sorted(missing)}")
        rows = zip(X["u_id"], X["v_id"], X["timestamp"])
    else:
        rows = X
    out = []
    for i, row in enumerate(rows):
        try:
            u, v, t = row
        except (TypeError, ValueError):
            raise ValueError(f"row {i}: expected (u_id, v_id, timestamp)") from None
        u, v = str(u), str(v)
        if not u or not v:
            raise ValueError(f"row {i}: empty user id")
        if isinstance(t, (float, np.floating)) and not float(t).is_integer():
            raise ValueError(f"row {i}: timestamp {t!r} is not an integer")
        t = int(t)
        if t < 0:
            raise ValueError(f"row {i}: negative timestamp")
        out.append(InteractionRecord(u, v, t))
    return out


_PARAMS = [f.name for f in fields(TrainingConfig)]


class ReciprocalSequenceRecommender(BaseEstimator):
    """Two-sided sequence matcher with micro-to-macro self-distillation.

    Constructor arguments mirror :class:`~recipseq.config.TrainingConfig`.
    ``predict`` returns deployed (macro) match scores for ``(u, v, T)``
    triples; ``score`` is the mean dual-perspective NDCG@k.
    """

    def __init__(self, lam=5.0, mu=0.005, lr=1e-3, batch_size=256, weight_decay=1e-5, beta1=0.9,
                 beta2=0.999, eps=1e-8, patience=10, max_epochs=100, seed=0, n=50, d=64, d_factor=64,
                 d_ff=256, layers=2, heads=2, dropout=0.5, embedding_dropout=True, share_embeddings=True,
                 mask_mode="perspective", micro_aggregation="attention", self_distill=True,
                 detach_teacher=True, share_alpha=False, eval_k=5, eval_negatives=100,
                 max_valid_instances=0, dtype="float32"):
        self.lam = lam
        self.mu = mu
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.patience = patience
        self.max_epochs = max_epochs
        self.seed = seed
        self.n = n
        self.d = d
        self.d_factor = d_factor
        self.d_ff = d_ff
        self.layers = layers
        self.heads = heads
        self.dropout = dropout
        self.embedding_dropout = embedding_dropout
        self.share_embeddings = share_embeddings
        self.mask_mode = mask_mode
        self.micro_aggregation = micro_aggregation
        self.self_distill = self_distill
        self.detach_teacher = detach_teacher
        self.share_alpha = share_alpha
        self.eval_k = eval_k
        self.eval_negatives = eval_negatives
        self.max_valid_instances = max_valid_instances
        self.dtype = dtype

    def _config(self) -> TrainingConfig:
        return TrainingConfig(**{k: getattr(self, k) for k in _PARAMS})

    def fit(self, X, y=None, validation_data=None, history=None):
        """Train on interactions ``X``.

        ``validation_data`` enables early stopping; ``history`` is the log
        used to build behavior sequences (defaults to ``X`` plus validation).
        """
        train_recs = check_interactions(X)
        valid_recs = check_interactions(validation_data) if validation_data is not None else []
        hist = check_interactions(history) if history is not None else [*train_recs, *valid_recs]
        cfg = self._config()
        if not valid_recs:
            cfg = cfg.replace(patience=cfg.max_epochs)
        store = SequenceStore(hist)
        split = DatasetSplit(train_recs, valid_recs, [], (0, 0))
        result = train(cfg, split, store)
        self.checkpoint_ = result.checkpoint
        self.model_ = result.checkpoint.model
        self.store_ = store
        self.history_ = result.checkpoint.history
        self.n_epochs_ = result.epochs_run
        return self

    @classmethod
    def from_checkpoint(cls, path, history) -> "ReciprocalSequenceRecommender":
        ckpt = path if isinstance(path, Checkpoint) else load_checkpoint(path)
        est = cls(**ckpt.config.to_dict())
        est.checkpoint_ = ckpt
        est.model_ = ckpt.model
        est.store_ = SequenceStore(check_interactions(history), ckpt.vocab["U"], ckpt.vocab["V"])
        est.history_ = ckpt.history
        est.n_epochs_ = ckpt.epoch
        return est

    def _indices(self, recs):
        s = self.store_
        u = np.array([s.user_index("U", r.u_id) for r in recs], dtype=np.int64)
        v = np.array([s.user_index("V", r.v_id) for r in recs], dtype=np.int64)
        T = np.array([r.timestamp for r in recs], dtype=np.int64)
        return u, v, T

    def predict(self, X) -> np.ndarray:
        """Macro match scores for each ``(u, v, T)``, histories cut strictly before ``T``."""
        check_is_fitted(self, "model_")
        u, v, T = self._indices(check_interactions(X))
        if not len(T):
            return np.zeros(0)
        return MacroScorer(self.model_, self.store_).score_pairs(u, v, T)

    def predict_micro(self, X) -> np.ndarray:
        """Fine-grained (teacher) scores; NaN where either history is empty."""
        check_is_fitted(self, "model_")
        u, v, T = self._indices(check_interactions(X))
        if not len(T):
            return np.zeros(0)
        b = BatchBuilder(self.store_, self.model_.cfg.n)
        ub = b._side("U", u, T)
        vb = b._side("V", v, T)
        m = self.model_
        m.eval()
        with torch.no_grad():
            z = micro_score(m.side_view("U", ub), m.side_view("V", vb), m.alpha_uv, m.alpha_vu,
                            m.cfg.micro_aggregation).z_total.double().numpy()
        z[(ub.lens == 0).numpy() | (vb.lens == 0).numpy()] = np.nan
        return z

    def evaluate(self, X, k=None, seed=0) -> EvalReport:
        check_is_fitted(self, "model_")
        return evaluate_model(self.model_, self.store_, check_interactions(X), k or self.eval_k,
                              self.eval_negatives, seed)

    def score(self, X, y=None) -> float:
        return self.evaluate(X).mean_ndcg

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        self.checkpoint_.save(path)
