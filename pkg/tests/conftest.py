from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import pytest

from gsnop import autodiff as ad
from gsnop.config import RunConfig
from gsnop.ctdg import CtdgStore, SyntheticSpec, generate_synthetic
from gsnop.encoder import EncoderDims
from gsnop.odeint import Method, SolverConfig

TINY_DIMS = EncoderDims(
    node_dim=6, latent_dim=8, msg_time_dim=4, layers=2, neighbors=3, dropout=0.0
)
FIXED_RK4 = SolverConfig(method=Method.RK4, initial_step=0.25)


def numeric_grad(
    fn: Callable[[], float], array: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Central differences of `fn` with respect to `array`, perturbed in place."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        orig = array[idx]
        array[idx] = orig + eps
        up = fn()
        array[idx] = orig - eps
        down = fn()
        array[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def tape_grads(
    fn: Callable[[], ad.Tensor], tensors: Sequence[ad.Tensor]
) -> list[np.ndarray]:
    for tensor in tensors:
        tensor.zero_grad()
    with ad.Tape():
        loss = fn()
        ad.backward(loss)
    return [tensor.grad.copy() for tensor in tensors]


@pytest.fixture
def tiny_store() -> CtdgStore:
    return generate_synthetic(SyntheticSpec(nodes=12, events=120, edge_dim=3, seed=0))


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    return RunConfig(
        edge_dim=3,
        synthetic_nodes=12,
        synthetic_events=160,
        node_dim=6,
        latent_dim=8,
        msg_time_dim=4,
        neighbors=3,
        dropout=0.0,
        solver="rk4",
        step_size=0.25,
        mc_samples=2,
        learning_rate=1e-3,
        steps=3,
        window_size=40,
        eval_negatives=5,
        eval_samples=2,
        log_every=1,
        out_dir=str(tmp_path / "run"),
    )
