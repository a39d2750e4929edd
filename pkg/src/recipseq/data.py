"""Interaction logs, k-core filtering, temporal splits, truncated histories, sampling."""

from __future__ import annotations

import bisect
import io
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

Side = Literal["U", "V"]
SIDES: tuple[Side, Side] = ("U", "V")


def other_side(side: Side) -> Side:
    if side not in SIDES:
        raise ValueError(f"side must be 'U' or 'V', got {side!r}")
    return "V" if side == "U" else "U"


class InteractionRecord(NamedTuple):
    u_id: str
    v_id: str
    timestamp: int


@dataclass(frozen=True)
class BehaviorSequence:
    owner_id: str
    side: Side
    events: tuple[tuple[str, int], ...]

    def __len__(self):
        return len(self.events)

    @property
    def counterparts(self) -> list[str]:
        return [c for c, _ in self.events]

    @property
    def timestamps(self) -> list[int]:
        return [t for _, t in self.events]


@dataclass
class DatasetSplit:
    train: list[InteractionRecord]
    valid: list[InteractionRecord]
    test: list[InteractionRecord]
    boundaries: tuple[int, int]

    def __len__(self):
        return len(self.train) + len(self.valid) + len(self.test)

    @property
    def all_records(self) -> list[InteractionRecord]:
        return [*self.train, *self.valid, *self.test]


class ParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class ParseResult:
    records: list[InteractionRecord]
    duplicates: int = 0


# ------------------------------------------------------------------ parsing


def parse_interactions(source: str | Iterable[str]) -> ParseResult:
    """Parse ``u_id<TAB>v_id<TAB>timestamp`` lines, dropping exact duplicates.

    Blank lines and lines starting with ``#`` are skipped.
    """
    lines = io.StringIO(source) if isinstance(source, str) else source
    seen: set[InteractionRecord] = set()
    out: list[InteractionRecord] = []
    dups = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(lineno, f"expected 3 tab-separated fields, got {len(parts)}")
        u, v, ts = (p.strip() for p in parts)
        if not u or not v:
            raise ParseError(lineno, "empty user id")
        try:
            t = int(ts)
        except ValueError:
            raise ParseError(lineno, f"timestamp {ts!r} is not an integer") from None
        if t < 0:
            raise ParseError(lineno, "negative timestamp")
        rec = InteractionRecord(u, v, t)
        if rec in seen:
            dups += 1
            continue
        seen.add(rec)
        out.append(rec)
    return ParseResult(out, dups)


def read_interactions(path: str | Path) -> ParseResult:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interaction log not found: {path}")
    with path.open(encoding="utf-8") as fh:
        return parse_interactions(fh)


def format_interactions(records: Iterable[InteractionRecord]) -> str:
    return "".join(f"{r.u_id}\t{r.v_id}\t{r.timestamp}\n" for r in records)


def write_interactions(records: Iterable[InteractionRecord], path: str | Path) -> None:
    Path(path).write_text(format_interactions(records), encoding="utf-8")


# ---------------------------------------------------------------- filtering


@dataclass
class FilterReport:
    removed_u: set[str] = field(default_factory=set)
    removed_v: set[str] = field(default_factory=set)
    rounds: int = 0


def five_core_filter(records: Iterable[InteractionRecord], k: int = 5):
    """Drop users (either side) with fewer than ``k`` interactions until nothing changes.

    Each round recomputes degrees on the surviving log and removes every
    deficient user at once, so the result does not depend on visit order.
    """
    recs = list(records)
    report = FilterReport()
    while True:
        du = Counter(r.u_id for r in recs)
        dv = Counter(r.v_id for r in recs)
        bad_u = {u for u, c in du.items() if c < k}
        bad_v = {v for v, c in dv.items() if c < k}
        if not bad_u and not bad_v:
            break
        report.rounds += 1
        report.removed_u |= bad_u
        report.removed_v |= bad_v
        recs = [r for r in recs if r.u_id not in bad_u and r.v_id not in bad_v]
    return recs, report


# -------------------------------------------------------------------- split


def temporal_split(records: Iterable[InteractionRecord], ratios=(0.8, 0.1, 0.1)) -> DatasetSplit:
    """Split by timestamp quantiles; records tied with a boundary go to the later split."""
    recs = list(records)
    if not recs:
        raise ValueError("cannot split an empty interaction log")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ts = sorted(r.timestamp for r in recs)
    m = len(ts)
    i1 = min(int(round(ratios[0] * m)), m - 1)
    i2 = min(int(round((ratios[0] + ratios[1]) * m)), m - 1)
    b1, b2 = ts[i1], ts[i2]
    train = [r for r in recs if r.timestamp < b1]
    valid = [r for r in recs if b1 <= r.timestamp < b2]
    test = [r for r in recs if r.timestamp >= b2]
    for name, part in (("train", train), ("validation", valid), ("test", test)):
        if not part:
            warnings.warn(f"temporal split left the {name} set empty", stacklevel=2)
    return DatasetSplit(train, valid, test, (b1, b2))


# ---------------------------------------------------------- sequence store


class UnknownUserError(KeyError):
    pass


class SequenceStore:
    """Immutable per-user chronological histories for both sides.

    Users are indexed ``0..|side|-1`` in sorted-id order; those indices are
    what the embedding tables use.
    """

    def __init__(self, records: Iterable[InteractionRecord], users_u=None, users_v=None):
        recs = sorted(records, key=lambda r: (r.timestamp, r.u_id, r.v_id))
        ids_u = sorted(set(users_u) if users_u is not None else {r.u_id for r in recs})
        ids_v = sorted(set(users_v) if users_v is not None else {r.v_id for r in recs})
        self.ids = {"U": ids_u, "V": ids_v}
        self.index = {s: {uid: i for i, uid in enumerate(self.ids[s])} for s in SIDES}
        hist: dict[Side, list[list[tuple[int, int]]]] = {
            s: [[] for _ in self.ids[s]] for s in SIDES
        }
        for r in recs:
            ui, vi = self.index["U"].get(r.u_id), self.index["V"].get(r.v_id)
            if ui is None or vi is None:
                continue
            hist["U"][ui].append((vi, r.timestamp))
            hist["V"][vi].append((ui, r.timestamp))
        # counterpart indices and timestamps as parallel arrays, ascending in time
        self._partners = {
            s: [np.array([c for c, _ in h], dtype=np.int64) for h in hist[s]] for s in SIDES
        }
        self._times = {
            s: [np.array([t for _, t in h], dtype=np.int64) for h in hist[s]] for s in SIDES
        }

    def n_users(self, side: Side) -> int:
        return len(self.ids[side])

    def user_index(self, side: Side, user_id: str) -> int:
        try:
            return self.index[side][user_id]
        except KeyError:
            raise UnknownUserError(f"unknown {side}-side user {user_id!r}") from None

    def prefix_len(self, side: Side, idx: int, T: int) -> int:
        """Number of events strictly before ``T``."""
        return int(np.searchsorted(self._times[side][idx], T, side="left"))

    def truncated_indices(self, side: Side, idx: int, T: int, n: int):
        """Counterpart indices and timestamps of the ``n`` most recent events before ``T``."""
        end = self.prefix_len(side, idx, T)
        start = max(0, end - n)
        return self._partners[side][idx][start:end], self._times[side][idx][start:end]

    def history(self, side: Side, idx: int):
        return self._partners[side][idx], self._times[side][idx]


def build_truncated_sequence(store: SequenceStore, owner_id: str, side: Side, T: int, n: int) -> BehaviorSequence:
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = store.user_index(side, owner_id)
    partners, times = store.truncated_indices(side, idx, T, n)
    opp = store.ids[other_side(side)]
    return BehaviorSequence(owner_id, side, tuple((opp[c], int(t)) for c, t in zip(partners, times)))


# ----------------------------------------------------------------- sampling


def sample_negative_index(rng: np.random.Generator, n_users: int, exclude: int) -> int:
    if n_users < 2:
        raise ValueError("negative sampling needs at least 2 users on the side")
    j = int(rng.integers(n_users - 1))
    return j + 1 if j >= exclude else j


def sample_negative_user(rng: np.random.Generator, store: SequenceStore, side: Side,
                         exclude_id: str, T: int, n: int):
    """Uniform draw from ``side`` minus ``exclude_id``, with its history truncated to ``T``."""
    excl = store.user_index(side, exclude_id)
    j = sample_negative_index(rng, store.n_users(side), excl)
    uid = store.ids[side][j]
    return uid, build_truncated_sequence(store, uid, side, T, n)


def sample_negative_block(rng: np.random.Generator, n_users: int, exclude: int, size: int) -> np.ndarray:
    """``size`` distinct users other than ``exclude`` (with replacement if the side is too small)."""
    if n_users < 2:
        raise ValueError("negative sampling needs at least 2 users on the side")
    pool = n_users - 1
    draw = rng.choice(pool, size=size, replace=size > pool)
    return np.where(draw >= exclude, draw + 1, draw)


# ---------------------------------------------------------------- synthetic


def generate_synthetic(
    seed: int,
    n_u: int,
    n_v: int,
    n_clusters: int,
    events_per_user: int,
    horizon: int,
    p_in: float = 0.8,
    concentration: float = 4.0,
) -> list[InteractionRecord]:
    """Seeded two-sided clustered match log.

    Every U user makes ``events_per_user`` matches. A partner is drawn from
    the user's own cluster with probability ``p_in`` (otherwise from a
    uniformly chosen other cluster). Inside a cluster, users sit on a ring
    and the partner is drawn with weight ``exp(concentration * cos Δangle)``,
    giving each user a local taste beyond its cluster label;
    ``concentration=0`` makes the in-cluster draw uniform. Timestamps are
    uniform on ``[0, horizon)``.
    """
    if min(n_u, n_v, n_clusters, events_per_user, horizon) <= 0:
        raise ValueError("all counts must be positive")
    if n_clusters > min(n_u, n_v):
        raise ValueError("more clusters than users on a side")
    if not 0.0 <= p_in <= 1.0:
        raise ValueError("p_in must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    cu = np.arange(n_u) % n_clusters
    cv = np.arange(n_v) % n_clusters
    rng.shuffle(cu)
    rng.shuffle(cv)
    ang_u = rng.uniform(0, 2 * np.pi, n_u)
    ang_v = rng.uniform(0, 2 * np.pi, n_v)
    members = [np.flatnonzero(cv == k) for k in range(n_clusters)]

    width_u = len(str(n_u - 1))
    width_v = len(str(n_v - 1))
    out: list[InteractionRecord] = []
    for u in range(n_u):
        home = cu[u]
        for _ in range(events_per_user):
            k = home
            if n_clusters > 1 and rng.random() >= p_in:
                k = rng.integers(n_clusters - 1)
                k = k + 1 if k >= home else k
            cand = members[k]
            w = np.exp(concentration * np.cos(ang_u[u] - ang_v[cand]))
            v = cand[rng.choice(len(cand), p=w / w.sum())]
            t = int(rng.integers(horizon))
            out.append(InteractionRecord(f"u{u:0{width_u}d}", f"v{v:0{width_v}d}", t))
    return out


def synthetic_clusters(seed: int, n_u: int, n_v: int, n_clusters: int):
    """Cluster labels the generator assigns for ``seed`` (same RNG prefix)."""
    rng = np.random.default_rng(seed)
    cu = np.arange(n_u) % n_clusters
    cv = np.arange(n_v) % n_clusters
    rng.shuffle(cu)
    rng.shuffle(cv)
    return cu, cv
