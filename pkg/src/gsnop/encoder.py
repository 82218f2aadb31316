"""
Temporal graph encoder.

Node states are computed recursively from the event history: layer 0 is a
learnable embedding per node, and layer l adds to the state below an update
computed from the mean of messages from the k most recent neighbours
strictly before the query time. Each message is (neighbour state at layer
l-1, edge features, time encoding of the gap).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ctdg import CtdgStore, LinkBatch, TemporalEvent
from .nn import MLP, Module, Parameter, uniform_parameter

logger = logging.getLogger(__name__)

# message gaps resolve down to about 1% of the dataset duration
MESSAGE_LOG_FREQ = 2.0


class TimeEncoding(Module):
    """cos(omega * t + phi) with learnable frequencies and phases.

    Frequencies start log-spaced from `10 ** max_log_freq` down to 1 per
    normalised time unit.
    """

    def __init__(self, dim: int, max_log_freq: float = 1.0) -> None:
        self.dim = dim
        freq = 10.0 ** np.linspace(max_log_freq, 0.0, dim)
        self.freq = Parameter(freq.reshape(1, dim))
        self.phase = Parameter(np.zeros((1, dim)))

    def __call__(self, t: Union[float, np.ndarray]) -> Tensor:
        column = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        return ad.cos(ad.add(ad.mul(column, self.freq), self.phase))


@dataclass(frozen=True)
class EncoderDims:
    node_dim: int = 100
    latent_dim: int = 256
    msg_time_dim: int = 100
    layers: int = 2
    neighbors: int = 10
    dropout: float = 0.1


class TemporalEncoder(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        node_count: int,
        edge_dim: int,
        dims: EncoderDims,
    ) -> None:
        self.node_dim = dims.node_dim
        self.neighbors = dims.neighbors
        self.base = uniform_parameter(rng, dims.node_dim, (node_count, dims.node_dim))
        self.time_enc = TimeEncoding(dims.msg_time_dim, MESSAGE_LOG_FREQ)
        width = 2 * dims.node_dim + edge_dim + dims.msg_time_dim
        self.layers = [
            MLP(rng, [width, dims.node_dim, dims.node_dim], dropout=dims.dropout)
            for _ in range(dims.layers)
        ]

    def node_states(
        self, store: CtdgStore, nodes: np.ndarray, times: np.ndarray
    ) -> Tensor:
        """Top-layer states, one row per (node, time) query."""
        nodes = np.asarray(nodes, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        return self._states(store, nodes, times, len(self.layers))

    def node_state(self, store: CtdgStore, v: int, t: float) -> Tensor:
        return self.node_states(store, np.array([v]), np.array([t]))

    def _states(
        self, store: CtdgStore, nodes: np.ndarray, times: np.ndarray, layer: int
    ) -> Tensor:
        if layer == 0:
            return ad.take_rows(self.base, nodes)
        if len(nodes) > 1:
            pairs = np.stack([nodes.astype(np.float64), times], axis=1)
            unique, inverse = np.unique(pairs, axis=0, return_inverse=True)
            if len(unique) < len(nodes):
                states = self._layer(
                    store, unique[:, 0].astype(np.int64), unique[:, 1], layer
                )
                return ad.take_rows(states, inverse.reshape(-1))
        return self._layer(store, nodes, times, layer)

    def _layer(
        self, store: CtdgStore, nodes: np.ndarray, times: np.ndarray, layer: int
    ) -> Tensor:
        below = self._states(store, nodes, times, layer - 1)
        nbr, nbr_t, nbr_event, mask = store.neighbors_before_batch(
            nodes, times, self.neighbors
        )
        rows, slots = np.nonzero(mask)
        if rows.size == 0:
            return below
        sources = nbr[rows, slots]
        source_t = nbr_t[rows, slots]
        nbr_states = self._states(store, sources, source_t, layer - 1)
        gaps = store.normalize(times[rows] - source_t)
        messages = ad.concat(
            [
                nbr_states,
                store.edge_feat[nbr_event[rows, slots]],
                self.time_enc(gaps),
            ]
        )
        # nodes without history keep their state from the layer below
        active = np.unique(rows)
        agg = ad.segment_mean(messages, np.searchsorted(active, rows), len(active))
        own = ad.take_rows(below, active)
        updated = ad.add(own, self.layers[layer - 1](ad.concat([own, agg])))
        return ad.scatter_rows(below, active, updated)


class PairEncoder(Module):
    """r = MLP(h_i || h_j || y) + t_emb(t)."""

    def __init__(
        self,
        rng: np.random.Generator,
        node_dim: int,
        latent_dim: int,
        time_emb: TimeEncoding,
    ) -> None:
        self.mlp = MLP(rng, [2 * node_dim + 1, latent_dim, latent_dim])
        self.time_emb = time_emb

    def __call__(
        self, h_src: Tensor, h_dst: Tensor, y: np.ndarray, t_norm: np.ndarray
    ) -> Tensor:
        label = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        return ad.add(self.mlp(ad.concat([h_src, h_dst, label])), self.time_emb(t_norm))


class Encoder(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        node_count: int,
        edge_dim: int,
        dims: EncoderDims,
        time_emb: TimeEncoding,
    ) -> None:
        self.temporal = TemporalEncoder(rng, node_count, edge_dim, dims)
        self.pair = PairEncoder(rng, dims.node_dim, dims.latent_dim, time_emb)

    def endpoint_states(
        self, store: CtdgStore, batch: LinkBatch
    ) -> tuple[Tensor, Tensor]:
        """States of both endpoints of every link, from one batched pass."""
        n = len(batch)
        states = self.temporal.node_states(
            store,
            np.concatenate([batch.src, batch.dst]),
            np.concatenate([batch.t, batch.t]),
        )
        return ad.take_rows(states, np.arange(n)), ad.take_rows(states, np.arange(n, 2 * n))

    def encode_pairs(self, store: CtdgStore, batch: LinkBatch) -> Tensor:
        h_src, h_dst = self.endpoint_states(store, batch)
        return self.pair(h_src, h_dst, batch.y, store.normalize(batch.t))

    def encode_pair(self, store: CtdgStore, event: TemporalEvent, y: int) -> Tensor:
        batch = LinkBatch(
            np.array([event.src]), np.array([event.dst]), np.array([event.t]), np.array([y])
        )
        return self.encode_pairs(store, batch)
