from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ctdg import Seed
from .errors import ConfigError, DivergenceError, DomainError
from .latent import AggregatorKind, LatentAggregator, LatentState

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12

DecodeFn = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class GaussianDiag:
    mu: Tensor
    sigma: Tensor

    def __post_init__(self) -> None:
        if not np.all(self.sigma.value > 0):
            raise DomainError("GaussianDiag needs strictly positive sigma")

    @classmethod
    def from_state(cls, state: LatentState) -> GaussianDiag:
        if state.mu is None or state.sigma is None:
            raise ConfigError("latent state has no distribution head applied")
        return cls(state.mu, state.sigma)


@dataclass(frozen=True)
class ElboConfig:
    mc_samples: int = 10
    kl_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be at least 1")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be nonnegative")


@dataclass
class ElboTerms:
    loss: Tensor
    reconstruction: float
    kl: float


def sample_reparam(dist: GaussianDiag, seed: Seed = None) -> Tensor:
    """z = mu + sigma * eps with eps ~ N(0, I)."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(dist.mu.shape)
    return ad.add(dist.mu, ad.mul(dist.sigma, eps))


def kl_diag_gaussians(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """KL(q || p) summed over dimensions."""
    diff = ad.sub(q.mu, p.mu)
    numerator = ad.add(ad.mul(q.sigma, q.sigma), ad.mul(diff, diff))
    ratio = ad.div(numerator, ad.scale(ad.mul(p.sigma, p.sigma), 2.0))
    terms = ad.sub(ad.add(ad.sub(ad.log(p.sigma), ad.log(q.sigma)), ratio), 0.5)
    return ad.sum(terms)


def bernoulli_log_likelihood(probs: Tensor, labels: np.ndarray) -> Tensor:
    y = np.asarray(labels, dtype=np.float64).reshape(probs.shape)
    log_p = ad.log(ad.clip(probs, LOG_CLAMP, 1.0))
    log_q = ad.log(ad.clip(ad.sub(1.0, probs), LOG_CLAMP, 1.0))
    return ad.sum(ad.add(ad.mul(log_p, y), ad.mul(log_q, 1.0 - y)))


def build_posterior(
    aggregator: LatentAggregator,
    context_state: LatentState,
    context_reps: Tensor,
    target_reps: Tensor,
    target_times: np.ndarray,
) -> GaussianDiag:
    """Q(z | context, target) from representations encoded with true labels.

    Sequential kinds keep folding the target buckets into r_T; the mean
    aggregator pools context and target together.
    """
    if len(target_times) == 0:
        return GaussianDiag.from_state(aggregator.distribution_head(context_state))
    if aggregator.kind.sequential:
        state = aggregator.sequence(target_reps, target_times, start=context_state)
    else:
        pooled = ad.concat([context_reps, target_reps], axis=0)
        state = LatentState(aggregator.aggregate_mean(pooled), float(np.max(target_times)))
    assert state is not None
    return GaussianDiag.from_state(aggregator.distribution_head(state))


def _stats(dist: Optional[GaussianDiag]) -> dict[str, float]:
    if dist is None:
        return {}
    return {
        "mu_mean": float(np.mean(dist.mu.value)),
        "sigma_min": float(np.min(dist.sigma.value)),
        "sigma_max": float(np.max(dist.sigma.value)),
    }


def elbo_terms(
    prior: GaussianDiag,
    posterior: GaussianDiag,
    decode_fn: DecodeFn,
    labels: np.ndarray,
    cfg: ElboConfig,
    seed: Seed = None,
) -> ElboTerms:
    """Negative ELBO with z shared across all targets of one Monte-Carlo draw."""
    rng = np.random.default_rng(seed)
    total: Optional[Tensor] = None
    for _ in range(cfg.mc_samples):
        z = sample_reparam(posterior, rng)
        ll = bernoulli_log_likelihood(decode_fn(z), labels)
        total = ll if total is None else ad.add(total, ll)
    assert total is not None
    reconstruction = ad.scale(total, -1.0 / cfg.mc_samples)
    kl = kl_diag_gaussians(posterior, prior)
    loss = ad.add(reconstruction, ad.scale(kl, cfg.kl_weight))
    if not np.isfinite(loss.item()):
        diagnostics = {f"prior_{k}": v for k, v in _stats(prior).items()}
        diagnostics.update({f"posterior_{k}": v for k, v in _stats(posterior).items()})
        diagnostics["kl"] = kl.item()
        raise DivergenceError("ELBO became non-finite", diagnostics)
    return ElboTerms(loss, reconstruction.item(), kl.item())


def reconstruction_terms(
    code: Tensor, decode_fn: DecodeFn, labels: np.ndarray
) -> ElboTerms:
    """Negative log-likelihood with a deterministic latent code and no KL."""
    loss = ad.scale(bernoulli_log_likelihood(decode_fn(code), labels), -1.0)
    if not np.isfinite(loss.item()):
        raise DivergenceError(
            "reconstruction loss became non-finite",
            {"code_mean": float(np.mean(code.value))},
        )
    return ElboTerms(loss, loss.item(), 0.0)


def deterministic_code(aggregator: LatentAggregator, context: LatentState) -> Tensor:
    """Latent code of the non-sampling kinds: r itself for CNP, zeros otherwise."""
    if aggregator.kind is AggregatorKind.CNP:
        return context.r
    return Tensor(np.zeros(context.r.shape))
