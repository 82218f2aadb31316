from __future__ import annotations

from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ctdg import Seed
from .elbo import GaussianDiag, sample_reparam
from .nn import MLP, Module


class LinkDecoder(Module):
    """y = sigmoid(MLP(h~_i || h~_j)) with h~ = ReLU(MLP(h || z)) shared by both ends."""

    def __init__(self, rng: np.random.Generator, node_dim: int, latent_dim: int) -> None:
        self.project = MLP(rng, [node_dim + latent_dim, node_dim, node_dim])
        self.output = MLP(rng, [2 * node_dim, node_dim, 1])

    def __call__(self, h_src: Tensor, h_dst: Tensor, z: Tensor) -> Tensor:
        zs = ad.broadcast_rows(z, h_src.shape[0])
        src = ad.relu(self.project(ad.concat([h_src, zs])))
        dst = ad.relu(self.project(ad.concat([h_dst, zs])))
        return ad.sigmoid(self.output(ad.concat([src, dst])))


def predict(
    decoder: LinkDecoder,
    h_src: Tensor,
    h_dst: Tensor,
    latent: Union[GaussianDiag, Tensor],
    n_samples: int = 10,
    seed: Seed = None,
) -> np.ndarray:
    """Mean probability over `n_samples` draws; a plain Tensor is used as a fixed code."""
    with ad.paused():
        if isinstance(latent, Tensor):
            return decoder(h_src, h_dst, latent).value.reshape(-1)
        rng = np.random.default_rng(seed)
        total = np.zeros(h_src.shape[0])
        for _ in range(n_samples):
            z = sample_reparam(latent, rng)
            total += decoder(h_src, h_dst, z).value.reshape(-1)
    return total / n_samples
