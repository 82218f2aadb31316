"""
Global latent representation: context aggregation, continuous-time
evolution through a neural ODE, and the Gaussian distribution head.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import TimeEncoding
from .errors import UsageError
from .nn import MLP, GRUCell, Linear, Module, uniform_parameter
from .odeint import SolverConfig, odeint

logger = logging.getLogger(__name__)

# floor and span of the standard deviation head
SIGMA_MIN = 0.1
SIGMA_SPAN = 0.9


class AggregatorKind(enum.Enum):
    ORIGIN = "origin"
    NP = "np"
    CNP = "cnp"
    SNP = "snp"
    GSNOP = "gsnop"

    @property
    def sequential(self) -> bool:
        return self in (AggregatorKind.SNP, AggregatorKind.GSNOP)

    @property
    def stochastic(self) -> bool:
        return self in (AggregatorKind.NP, AggregatorKind.SNP, AggregatorKind.GSNOP)


@dataclass(frozen=True)
class LatentState:
    r: Tensor
    # normalised time at which r is current
    t_ref: float
    mu: Optional[Tensor] = None
    sigma: Optional[Tensor] = None


def aggregate_mean(
    reps: Union[Tensor, Sequence[Tensor]], empty: Optional[Tensor] = None
) -> Tensor:
    """Row mean of the context representations; `empty` stands in for no context."""
    if not isinstance(reps, Tensor):
        if not reps:
            reps = Tensor(np.zeros((0, 0)))
        else:
            reps = ad.concat(list(reps), axis=0)
    if reps.shape[0] == 0:
        if empty is None:
            raise UsageError("aggregate_mean needs at least one representation")
        return empty
    return ad.mean_rows(reps)


def time_buckets(times: np.ndarray) -> list[tuple[float, np.ndarray]]:
    """(timestamp, row indices) groups in ascending time; equal stamps share a group."""
    times = np.asarray(times, dtype=np.float64)
    stamps, inverse = np.unique(times, return_inverse=True)
    inverse = inverse.reshape(-1)
    return [(float(s), np.flatnonzero(inverse == i)) for i, s in enumerate(stamps)]


class OdeDynamics(Module):
    """dr/dt = tanh(MLP(r + t_emb(t)))."""

    def __init__(
        self, rng: np.random.Generator, latent_dim: int, time_emb: TimeEncoding
    ) -> None:
        self.mlp = MLP(rng, [latent_dim, latent_dim, latent_dim])
        self.time_emb = time_emb

    def __call__(self, r: Tensor, t: float) -> Tensor:
        return ad.tanh(self.mlp(ad.add(r, self.time_emb(t))))


class DistributionHead(Module):
    """Shared trunk chi = MLP(r) with separate mean and scale outputs."""

    def __init__(self, rng: np.random.Generator, latent_dim: int) -> None:
        self.trunk = MLP(rng, [latent_dim, latent_dim, latent_dim])
        self.mu = Linear(rng, latent_dim, latent_dim)
        self.sigma = Linear(rng, latent_dim, latent_dim)

    def __call__(self, r: Tensor) -> tuple[Tensor, Tensor]:
        chi = self.trunk(r)
        mu = ad.relu(self.mu(chi))
        gate = ad.clip(ad.sigmoid(self.sigma(chi)), 1e-9, 1.0 - 1e-9)
        sigma = ad.add(ad.scale(gate, SIGMA_SPAN), SIGMA_MIN)
        return mu, sigma


class LatentAggregator(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        kind: AggregatorKind,
        latent_dim: int,
        time_emb: TimeEncoding,
        solver: SolverConfig,
    ) -> None:
        self.kind = kind
        self.solver = solver
        self.r0 = uniform_parameter(rng, latent_dim, (1, latent_dim))
        self.gru = GRUCell(rng, latent_dim, latent_dim)
        self.dynamics = OdeDynamics(rng, latent_dim, time_emb)
        self.head = DistributionHead(rng, latent_dim)

    def aggregate_mean(self, reps: Tensor) -> Tensor:
        return aggregate_mean(reps, self.r0)

    def aggregate_sequential(
        self, prev: Optional[LatentState], reps: Tensor, t: float
    ) -> LatentState:
        """Fold one time bucket into the running state."""
        if prev is None:
            return LatentState(self.aggregate_mean(reps), t)
        if t < prev.t_ref:
            raise UsageError(f"bucket at t={t:.6g} arrives after t={prev.t_ref:.6g}")
        return LatentState(self.gru(ad.mean_rows(reps), prev.r), t)

    def sequence(
        self,
        reps: Tensor,
        times: np.ndarray,
        start: Optional[LatentState] = None,
    ) -> Optional[LatentState]:
        state = start
        for t, rows in time_buckets(times):
            state = self.aggregate_sequential(state, ad.take_rows(reps, rows), t)
        return state

    def summarize(self, reps: Tensor, times: np.ndarray) -> LatentState:
        """Context state r_T per aggregator kind (before any ODE evolution)."""
        t_last = float(np.max(times)) if len(times) else 0.0
        if self.kind.sequential:
            state = self.sequence(reps, times)
            return state if state is not None else LatentState(self.r0, 0.0)
        return LatentState(self.aggregate_mean(reps), t_last)

    def evolve_ode(self, state: LatentState, target_t: float) -> LatentState:
        if target_t < state.t_ref:
            raise UsageError(
                f"cannot evolve from t={state.t_ref:.6g} back to t={target_t:.6g}"
            )
        if target_t == state.t_ref:
            return LatentState(state.r, state.t_ref)
        r = odeint(self.dynamics, state.r, state.t_ref, target_t, self.solver)
        return LatentState(r, target_t)

    def distribution_head(self, state: LatentState) -> LatentState:
        mu, sigma = self.head(state.r)
        return replace(state, mu=mu, sigma=sigma)

    def build_prior(self, context: LatentState, target_t: float) -> LatentState:
        if self.kind is AggregatorKind.GSNOP:
            context = self.evolve_ode(context, target_t)
        return self.distribution_head(context)

    def prior_from_reps(
        self, reps: Tensor, times: np.ndarray, target_t: float
    ) -> LatentState:
        return self.build_prior(self.summarize(reps, times), target_t)
