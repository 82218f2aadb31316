"""
Continuous-time dynamic graphs: an immutable chronologically sorted event
store with a per-node adjacency index, CSV ingestion, chronological
splitting, temporal neighbour queries, negative sampling and a seeded
synthetic generator.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError, DomainError

logger = logging.getLogger(__name__)

Seed = Union[int, Sequence[int], np.random.Generator, None]


@dataclass(frozen=True)
class TemporalEvent:
    src: int
    dst: int
    t: float
    edge_feat: Optional[np.ndarray] = None
    label: int = 1


@dataclass(frozen=True)
class CsvSchema:
    """Column names of an event file and how to fill absent edge features."""

    src: str = "src"
    dst: str = "dst"
    t: str = "t"
    edge_dim: int = 16
    seed: int = 0


class CtdgStore:
    """Events sorted by time (stable on ties) plus an undirected adjacency index.

    Adjacency is stored CSR-style: entries of node v live in
    `adj_*[indptr[v]:indptr[v + 1]]`, ordered by (t, event index).
    """

    def __init__(
        self,
        src: np.ndarray,
        dst: np.ndarray,
        t: np.ndarray,
        edge_feat: np.ndarray,
        node_count: int,
        rejected: int = 0,
        time_scale: Optional[float] = None,
    ) -> None:
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        t = np.asarray(t, dtype=np.float64)
        edge_feat = np.asarray(edge_feat, dtype=np.float64)
        if edge_feat.ndim != 2:
            edge_feat = edge_feat.reshape(len(t), -1)
        if not len(src) == len(dst) == len(t):
            raise ConfigError("src, dst and t must have the same length")
        order = np.argsort(t, kind="stable")
        self.src = src[order]
        self.dst = dst[order]
        self.t = t[order]
        self.edge_feat = edge_feat[order]
        self.node_count = int(node_count)
        self.rejected = rejected
        # timestamps are divided by this before entering the model
        self.time_scale = float(time_scale) if time_scale else self._default_scale()
        self._build_adjacency()

    def _default_scale(self) -> float:
        return float(self.t[-1]) if len(self.t) and self.t[-1] > 0 else 1.0

    def _build_adjacency(self) -> None:
        n = len(self.t)
        index = np.arange(n)
        owner = np.concatenate([self.src, self.dst])
        other = np.concatenate([self.dst, self.src])
        events = np.concatenate([index, index])
        # events are time-sorted, so ordering by event index orders by time too
        order = np.lexsort((events, owner))
        self.adj_node = other[order]
        self.adj_event = events[order]
        self.adj_t = self.t[self.adj_event]
        self.indptr = np.searchsorted(owner[order], np.arange(self.node_count + 1))

    def __len__(self) -> int:
        return len(self.t)

    def __repr__(self) -> str:
        return f"CtdgStore(events={len(self)}, nodes={self.node_count})"

    @property
    def edge_dim(self) -> int:
        return self.edge_feat.shape[1]

    @property
    def min_t(self) -> float:
        return float(self.t[0]) if len(self) else 0.0

    @property
    def max_t(self) -> float:
        return float(self.t[-1]) if len(self) else 0.0

    def event(self, i: int) -> TemporalEvent:
        return TemporalEvent(
            int(self.src[i]), int(self.dst[i]), float(self.t[i]), self.edge_feat[i]
        )

    def events(self) -> list[TemporalEvent]:
        return [self.event(i) for i in range(len(self))]

    def subset(self, indices: np.ndarray) -> CtdgStore:
        indices = np.sort(np.asarray(indices, dtype=np.int64))
        return CtdgStore(
            self.src[indices],
            self.dst[indices],
            self.t[indices],
            self.edge_feat[indices],
            self.node_count,
            time_scale=self.time_scale,
        )

    @classmethod
    def concat(cls, stores: Sequence[CtdgStore]) -> CtdgStore:
        first = stores[0]
        return cls(
            np.concatenate([s.src for s in stores]),
            np.concatenate([s.dst for s in stores]),
            np.concatenate([s.t for s in stores]),
            np.concatenate([s.edge_feat for s in stores]),
            first.node_count,
            time_scale=first.time_scale,
        )

    def normalize(self, t: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        return t / self.time_scale

    def neighbors_before(
        self, v: int, t: float, k: int
    ) -> list[tuple[int, float, np.ndarray]]:
        """The k most recent interactions of v strictly before t, newest first."""
        lo, hi = self.indptr[v], self.indptr[v + 1]
        cut = lo + int(np.searchsorted(self.adj_t[lo:hi], t, side="left"))
        start = max(lo, cut - k)
        return [
            (
                int(self.adj_node[i]),
                float(self.adj_t[i]),
                self.edge_feat[self.adj_event[i]],
            )
            for i in range(cut - 1, start - 1, -1)
        ]

    def neighbors_before_batch(
        self, nodes: np.ndarray, times: np.ndarray, k: int
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Padded (node, t, event, mask) arrays of shape (len(nodes), k)."""
        b = len(nodes)
        nbr = np.zeros((b, k), dtype=np.int64)
        nbr_t = np.zeros((b, k))
        nbr_event = np.zeros((b, k), dtype=np.int64)
        mask = np.zeros((b, k), dtype=bool)
        if k == 0 or b == 0:
            return nbr, nbr_t, nbr_event, mask
        for row, (v, t) in enumerate(zip(nodes, times)):
            lo, hi = self.indptr[v], self.indptr[v + 1]
            if lo == hi:
                continue
            cut = lo + int(np.searchsorted(self.adj_t[lo:hi], t, side="left"))
            start = max(lo, cut - k)
            count = cut - start
            if count == 0:
                continue
            idx = np.arange(cut - 1, start - 1, -1)
            nbr[row, :count] = self.adj_node[idx]
            nbr_t[row, :count] = self.adj_t[idx]
            nbr_event[row, :count] = self.adj_event[idx]
            mask[row, :count] = True
        return nbr, nbr_t, nbr_event, mask


def ingest_csv(path: Union[str, Path], schema: CsvSchema = CsvSchema()) -> CtdgStore:
    """Load `src,dst,t[,f1..fd]` rows (with header) into a store.

    Node ids are densified in order of first appearance. Self-loops are
    dropped and counted in `store.rejected`.
    """
    id_map: dict[str, int] = {}
    src: list[int] = []
    dst: list[int] = []
    times: list[float] = []
    feats: list[list[float]] = []
    rejected = 0
    with open(path, "r", encoding="utf-8", newline="") as file:
        reader = csv.reader(file)
        try:
            header = [name.strip() for name in next(reader)]
        except StopIteration as exc:
            raise DataError(f"{path} is empty", line=1) from exc
        try:
            i_src, i_dst, i_t = (header.index(c) for c in (schema.src, schema.dst, schema.t))
        except ValueError as exc:
            raise DataError(
                f"header must name {schema.src}, {schema.dst} and {schema.t}", line=1
            ) from exc
        feat_cols = [i for i in range(len(header)) if i not in (i_src, i_dst, i_t)]
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", line)
            try:
                t = float(row[i_t])
                values = [float(row[i]) for i in feat_cols]
            except ValueError as exc:
                raise DataError(str(exc), line) from exc
            if not math.isfinite(t) or t < 0:
                raise DataError(f"timestamp must be finite and nonnegative, got {t}", line)
            a, b = row[i_src].strip(), row[i_dst].strip()
            if not a or not b:
                raise DataError("empty node id", line)
            if a == b:
                rejected += 1
                continue
            src.append(id_map.setdefault(a, len(id_map)))
            dst.append(id_map.setdefault(b, len(id_map)))
            times.append(t)
            feats.append(values)
    if not times:
        raise DataError(f"{path} holds no usable events")
    if rejected:
        logger.warning("rejected self-loops count=%d path=%s", rejected, path)
    if feat_cols:
        edge_feat = np.asarray(feats)
    else:
        rng = np.random.default_rng(schema.seed)
        edge_feat = rng.standard_normal((len(times), schema.edge_dim))
    store = CtdgStore(
        np.asarray(src), np.asarray(dst), np.asarray(times), edge_feat, len(id_map), rejected
    )
    logger.info("ingested path=%s events=%d nodes=%d", path, len(store), store.node_count)
    return store


def density_score(store: CtdgStore) -> float:
    """2|E| / (|V|(|V| - 1)) over the nodes that take part in some event."""
    nodes = np.unique(np.concatenate([store.src, store.dst]))
    v = len(nodes)
    if v < 2:
        raise DomainError(f"density is undefined for {v} node(s)")
    return 2.0 * len(store) / (v * (v - 1))


@dataclass(frozen=True)
class SplitSpec:
    train_ratio: float = 0.3
    valid_ratio: float = 0.2
    test_ratio: float = 0.5
    sample_ratio: float = 1.0

    def __post_init__(self) -> None:
        ratios = (self.train_ratio, self.valid_ratio, self.test_ratio)
        if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split ratios must be nonnegative and sum to 1, got {ratios}")
        if not 0 < self.sample_ratio <= 1:
            raise ConfigError(f"sample_ratio must lie in (0, 1], got {self.sample_ratio}")


def chrono_split(
    store: CtdgStore, spec: SplitSpec, seed: Seed = 0
) -> tuple[CtdgStore, CtdgStore, CtdgStore]:
    """Partition by fractions of the time axis; subsample training only."""
    duration = store.max_t - store.min_t
    train_end = store.min_t + spec.train_ratio * duration
    valid_end = store.min_t + (spec.train_ratio + spec.valid_ratio) * duration
    index = np.arange(len(store))
    train = index[store.t <= train_end]
    valid = index[(store.t > train_end) & (store.t <= valid_end)]
    test = index[store.t > valid_end]
    if spec.sample_ratio < 1.0:
        keep = math.floor(spec.sample_ratio * len(train))
        rng = np.random.default_rng(seed)
        train = np.sort(rng.choice(train, size=keep, replace=False))
    logger.debug(
        "split train=%d valid=%d test=%d sample_ratio=%g",
        len(train), len(valid), len(test), spec.sample_ratio,
    )
    return store.subset(train), store.subset(valid), store.subset(test)


def sample_negatives(
    store: CtdgStore, positive: TemporalEvent, n: int, seed: Seed = None
) -> list[TemporalEvent]:
    """n corrupted copies of `positive` with distinct random destinations."""
    if n == 0:
        return []
    dsts = negative_destinations(
        store.node_count, np.array([positive.src]), np.array([positive.dst]), n, seed
    )[0]
    return [
        TemporalEvent(positive.src, int(d), positive.t, positive.edge_feat, label=0)
        for d in dsts
    ]


def negative_destinations(
    node_count: int, src: np.ndarray, dst: np.ndarray, n: int, seed: Seed = None
) -> np.ndarray:
    """Array (len(src), n) of destinations excluding each row's src and dst."""
    if n > node_count - 2:
        raise DomainError(
            f"cannot draw {n} distinct negatives from {node_count} nodes"
        )
    rng = np.random.default_rng(seed)
    out = np.empty((len(src), n), dtype=np.int64)
    for row, (a, b) in enumerate(zip(src, dst)):
        # draw from the universe with a and b removed, then shift back
        excluded = np.sort(np.unique([a, b]))
        picks = rng.choice(node_count - len(excluded), size=n, replace=False)
        for e in excluded:
            picks = picks + (picks >= e)
        out[row] = picks
    return out


@dataclass
class LinkBatch:
    """Candidate links with labels, the unit fed to the model."""

    src: np.ndarray
    dst: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_store(cls, store: CtdgStore, indices: Optional[np.ndarray] = None) -> LinkBatch:
        if indices is None:
            indices = np.arange(len(store))
        return cls(
            store.src[indices].copy(),
            store.dst[indices].copy(),
            store.t[indices].copy(),
            np.ones(len(indices)),
        )

    def with_negatives(self, node_count: int, n: int, seed: Seed = None) -> LinkBatch:
        """Each positive followed by n negatives sharing its src and t."""
        if n == 0 or len(self) == 0:
            return self
        dsts = negative_destinations(node_count, self.src, self.dst, n, seed)
        reps = n + 1
        dst = np.concatenate([self.dst[:, None], dsts], axis=1).reshape(-1)
        y = np.zeros((len(self), reps))
        y[:, 0] = self.y
        return LinkBatch(
            np.repeat(self.src, reps), dst, np.repeat(self.t, reps), y.reshape(-1)
        )

    def take(self, mask: np.ndarray) -> LinkBatch:
        return LinkBatch(self.src[mask], self.dst[mask], self.t[mask], self.y[mask])


class ArrivalProfile(enum.Enum):
    POISSON = "poisson"
    BURSTY = "bursty"


@dataclass(frozen=True)
class SyntheticSpec:
    """Community-structured event stream with optional bursts of activity.

    `spikes` holds (start, end, multiplier) windows as fractions of the
    horizon; intensity is `rate * multiplier` inside a window.
    """

    nodes: int = 100
    communities: int = 2
    events: int = 2000
    profile: ArrivalProfile = ArrivalProfile.POISSON
    rate: float = 1.0
    spikes: tuple[tuple[float, float, float], ...] = ((0.25, 0.35, 15.0),)
    p_intra: float = 0.8
    p_triadic: float = 0.3
    # linear drift of p_intra over the horizon, None keeps it constant
    p_intra_end: Optional[float] = None
    # partner weight of the k-th lowest id in a pool is k ** -popularity
    popularity: float = 0.0
    edge_dim: int = 16
    memory: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.nodes < 2:
            raise ConfigError("synthetic graph needs at least 2 nodes")
        if not 1 <= self.communities <= self.nodes:
            raise ConfigError("communities must lie in [1, nodes]")
        if self.events < 1:
            raise ConfigError("synthetic graph needs at least one event")
        if self.rate <= 0:
            raise ConfigError("rate must be positive")
        for p in (self.p_intra, self.p_triadic, self.p_intra_end):
            if p is not None and not 0 <= p <= 1:
                raise ConfigError(f"probability {p} outside [0, 1]")
        if self.popularity < 0:
            raise ConfigError("popularity must be nonnegative")
        last_end = 0.0
        for start, end, mult in sorted(self.spikes):
            if not 0 <= start < end <= 1 or mult <= 0:
                raise ConfigError(f"invalid spike window {(start, end, mult)}")
            if start < last_end:
                raise ConfigError("spike windows overlap")
            last_end = end


def synthetic_horizon(spec: SyntheticSpec) -> float:
    """Horizon whose expected event count under the profile equals spec.events."""
    if spec.profile == ArrivalProfile.POISSON:
        return spec.events / spec.rate
    boost = sum((m - 1.0) * (e - s) for s, e, m in spec.spikes)
    return spec.events / (spec.rate * (1.0 + boost))


def _bursty_times(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Map unit-rate arrivals through the inverse cumulative intensity."""
    horizon = synthetic_horizon(spec)
    knots = [0.0]
    for s, e, _ in sorted(spec.spikes):
        knots += [s * horizon, e * horizon]
    knots.append(horizon)
    knots_arr = np.unique(np.asarray(knots))
    mids = (knots_arr[:-1] + knots_arr[1:]) / 2
    intensity = np.full(len(mids), spec.rate)
    for s, e, m in spec.spikes:
        inside = (mids >= s * horizon) & (mids < e * horizon)
        intensity[inside] = spec.rate * m
    cum = np.concatenate([[0.0], np.cumsum(intensity * np.diff(knots_arr))])
    arrivals = np.cumsum(rng.exponential(1.0, size=spec.events))
    seg = np.clip(np.searchsorted(cum, arrivals, side="right") - 1, 0, len(mids) - 1)
    # past the horizon the base rate continues
    beyond = arrivals > cum[-1]
    times = knots_arr[seg] + (arrivals - cum[seg]) / intensity[seg]
    times[beyond] = horizon + (arrivals[beyond] - cum[-1]) / spec.rate
    return times


def generate_synthetic(spec: SyntheticSpec) -> CtdgStore:
    """Seeded stream: intra-community pairs are favoured and recent
    partners-of-partners get a triadic-closure boost."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.profile == ArrivalProfile.POISSON:
        times = np.cumsum(rng.exponential(1.0 / spec.rate, size=spec.events))
    else:
        times = _bursty_times(spec, rng)
    horizon = max(float(times[-1]), 1e-12)
    community = np.arange(spec.nodes) % spec.communities
    members = [np.flatnonzero(community == c) for c in range(spec.communities)]
    recent: list[deque[int]] = [deque(maxlen=spec.memory) for _ in range(spec.nodes)]
    src = rng.integers(spec.nodes, size=spec.events)
    dst = np.empty(spec.events, dtype=np.int64)
    for i, (a, t) in enumerate(zip(src, times)):
        dst[i] = _pick_partner(spec, rng, int(a), t / horizon, community, members, recent)
        recent[a].append(int(dst[i]))
        recent[dst[i]].append(int(a))
    edge_feat = rng.standard_normal((spec.events, spec.edge_dim))
    logger.debug(
        "generated synthetic events=%d nodes=%d profile=%s",
        spec.events, spec.nodes, spec.profile.value,
    )
    return CtdgStore(src, dst, times, edge_feat, spec.nodes)


def _pick_partner(
    spec: SyntheticSpec,
    rng: np.random.Generator,
    a: int,
    frac: float,
    community: np.ndarray,
    members: list[np.ndarray],
    recent: list[deque[int]],
) -> int:
    if recent[a] and rng.random() < spec.p_triadic:
        hop = [w for v in recent[a] for w in recent[v] if w != a]
        if hop:
            return int(hop[rng.integers(len(hop))])
    p_intra = spec.p_intra
    if spec.p_intra_end is not None:
        p_intra += (spec.p_intra_end - spec.p_intra) * frac
    same = members[community[a]]
    same = same[same != a]
    if len(same) and (rng.random() < p_intra or spec.communities == 1):
        return _draw(spec, rng, same)
    others = np.flatnonzero(community != community[a])
    if not len(others):
        others = same
    return _draw(spec, rng, others)


def _draw(spec: SyntheticSpec, rng: np.random.Generator, pool: np.ndarray) -> int:
    if spec.popularity == 0.0:
        return int(pool[rng.integers(len(pool))])
    weights = np.arange(1.0, len(pool) + 1.0) ** -spec.popularity
    return int(rng.choice(pool, p=weights / weights.sum()))
