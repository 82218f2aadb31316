"""
The full model: encoder, latent aggregator and decoder wired per variant.

`window_loss` is the training objective for one context/target split;
`score` ranks candidate links given everything observed before them.
"""

from __future__ import annotations

import logging
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ctdg import CtdgStore, LinkBatch, Seed
from .decoder import LinkDecoder, predict
from .elbo import (
    ElboConfig,
    ElboTerms,
    GaussianDiag,
    build_posterior,
    deterministic_code,
    elbo_terms,
    reconstruction_terms,
)
from .encoder import Encoder, EncoderDims, TimeEncoding
from .latent import AggregatorKind, LatentAggregator, LatentState
from .nn import Module
from .odeint import SolverConfig

logger = logging.getLogger(__name__)

# candidate rows scored per encoder pass at evaluation time
SCORE_CHUNK = 2048


class Gsnop(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        node_count: int,
        edge_dim: int,
        dims: EncoderDims,
        kind: AggregatorKind,
        solver: SolverConfig,
    ) -> None:
        self.kind = kind
        self.node_dim = dims.node_dim
        time_emb = TimeEncoding(dims.latent_dim)
        self.encoder = Encoder(rng, node_count, edge_dim, dims, time_emb)
        self.aggregator = LatentAggregator(rng, kind, dims.latent_dim, time_emb, solver)
        self.decoder = LinkDecoder(rng, dims.node_dim, dims.latent_dim)

    def context_state(
        self, store: CtdgStore, context: LinkBatch
    ) -> tuple[Tensor, LatentState]:
        reps = self.encoder.encode_pairs(store, context)
        return reps, self.aggregator.summarize(reps, store.normalize(context.t))

    def window_loss(
        self,
        store: CtdgStore,
        context: LinkBatch,
        target: LinkBatch,
        cfg: ElboConfig,
        seed: Seed = None,
    ) -> ElboTerms:
        """Negative ELBO of `target` given `context`, both labelled candidate links.

        The prior is evolved once, to the latest target time, and shared by
        every target in the window. `score` evolves to each query time instead.
        """
        ctx_reps, ctx_state = self.context_state(store, context)
        h_src, h_dst = self.encoder.endpoint_states(store, target)

        def decode_fn(z: Tensor) -> Tensor:
            return self.decoder(h_src, h_dst, z)

        if not self.kind.stochastic:
            code = deterministic_code(self.aggregator, ctx_state)
            return reconstruction_terms(code, decode_fn, target.y)
        target_t = store.normalize(target.t)
        horizon = float(np.max(target_t)) if len(target) else ctx_state.t_ref
        prior = self.aggregator.build_prior(ctx_state, max(horizon, ctx_state.t_ref))
        tgt_reps = self.encoder.encode_pairs(store, target)
        posterior = build_posterior(
            self.aggregator, ctx_state, ctx_reps, tgt_reps, target_t
        )
        return elbo_terms(
            GaussianDiag.from_state(prior), posterior, decode_fn, target.y, cfg, seed
        )

    def score(
        self,
        store: CtdgStore,
        context: LinkBatch,
        queries: LinkBatch,
        n_samples: int = 10,
        seed: Seed = None,
    ) -> np.ndarray:
        """Link probabilities for `queries`, which must not precede the context.

        The ODE variant is evolved forward once per distinct query time,
        chaining from one timestamp to the next.
        """
        rng = np.random.default_rng(seed)
        scores = np.zeros(len(queries))
        with ad.paused():
            _, state = self.context_state(store, context)
            h_src, h_dst = self._endpoint_values(store, queries)
            if self.kind is AggregatorKind.GSNOP:
                stamps, inverse = np.unique(queries.t, return_inverse=True)
                inverse = inverse.reshape(-1)
                groups = [
                    (float(s), np.flatnonzero(inverse == i))
                    for i, s in enumerate(stamps)
                ]
            else:
                groups = [(state.t_ref, np.arange(len(queries)))]
            for stamp, rows in groups:
                latent: Union[GaussianDiag, Tensor]
                if not self.kind.stochastic:
                    latent = deterministic_code(self.aggregator, state)
                else:
                    if self.kind is AggregatorKind.GSNOP:
                        t_norm = max(float(store.normalize(stamp)), state.t_ref)
                        state = self.aggregator.evolve_ode(state, t_norm)
                    latent = GaussianDiag.from_state(
                        self.aggregator.distribution_head(state)
                    )
                scores[rows] = predict(
                    self.decoder,
                    Tensor(h_src[rows]),
                    Tensor(h_dst[rows]),
                    latent,
                    n_samples,
                    rng,
                )
        return scores

    def _endpoint_values(
        self, store: CtdgStore, queries: LinkBatch
    ) -> tuple[np.ndarray, np.ndarray]:
        h_src = np.zeros((len(queries), self.node_dim))
        h_dst = np.zeros((len(queries), self.node_dim))
        for start in range(0, len(queries), SCORE_CHUNK):
            chunk = np.arange(start, min(start + SCORE_CHUNK, len(queries)))
            src, dst = self.encoder.endpoint_states(store, queries.take(chunk))
            h_src[chunk] = src.value
            h_dst[chunk] = dst.value
        return h_src, h_dst
