"""
Explicit Runge-Kutta integration of dz/dt = f(z, t).

Fixed-step methods (Euler, classic RK4) and the adaptive Dormand-Prince 5(4)
pair share one tableau-driven stepper. Gradients come either from the tape
(discretize-then-differentiate, every stage is recorded) or from the adjoint
sensitivity equations integrated backward in time.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DivergenceError, IntegrationError, UsageError

logger = logging.getLogger(__name__)


class OdeFunc(Protocol):
    def __call__(self, z: Tensor, t: float) -> Tensor: ...

    def parameters(self) -> dict[str, Tensor]: ...


class FunctionOdeFunc:
    """Adapter turning a plain callable (z, t) -> dz/dt into an `OdeFunc`."""

    def __init__(
        self,
        fn: Callable[[Tensor, float], Tensor],
        params: Optional[dict[str, Tensor]] = None,
    ) -> None:
        self.fn = fn
        self.params = dict(params or {})

    def __call__(self, z: Tensor, t: float) -> Tensor:
        return self.fn(z, t)

    def parameters(self) -> dict[str, Tensor]:
        return self.params


class Method(enum.Enum):
    EULER = "euler"
    RK4 = "rk4"
    DOPRI5 = "dopri5"


class GradientMode(enum.Enum):
    AUTO = "auto"
    ADJOINT = "adjoint"
    BACKPROP = "backprop"


@dataclass(frozen=True)
class SolverConfig:
    method: Method = Method.DOPRI5
    rtol: float = 1e-5
    atol: float = 1e-7
    max_steps: int = 10000
    # fixed step size for Euler/RK4, first trial step for DOPRI5 (None: automatic)
    initial_step: Optional[float] = None
    gradient: GradientMode = GradientMode.AUTO

    def __post_init__(self) -> None:
        if self.rtol <= 0 or self.atol <= 0:
            raise ConfigError("solver tolerances must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if self.initial_step is not None and self.initial_step <= 0:
            raise ConfigError("initial_step must be positive")

    @property
    def adaptive(self) -> bool:
        return self.method is Method.DOPRI5

    @property
    def uses_adjoint(self) -> bool:
        if self.gradient is GradientMode.AUTO:
            return self.adaptive
        return self.gradient is GradientMode.ADJOINT


DEFAULT_FIXED_STEP = 0.05


@dataclass(frozen=True)
class ButcherTableau:
    c: tuple[float, ...]
    a: tuple[tuple[float, ...], ...]
    b: tuple[float, ...]
    # b - b_hat of the embedded lower-order solution, for error estimation
    e: Optional[tuple[float, ...]] = None
    order: int = 1


EULER = ButcherTableau(c=(0.0,), a=((),), b=(1.0,), order=1)

RK4 = ButcherTableau(
    c=(0.0, 0.5, 0.5, 1.0),
    a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
    b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
    order=4,
)

DOPRI5 = ButcherTableau(
    c=(0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0),
    a=(
        (),
        (1 / 5,),
        (3 / 40, 9 / 40),
        (44 / 45, -56 / 15, 32 / 9),
        (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
        (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
        (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
    ),
    b=(35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0),
    e=(
        35 / 384 - 5179 / 57600,
        0.0,
        500 / 1113 - 7571 / 16695,
        125 / 192 - 393 / 640,
        -2187 / 6784 + 92097 / 339200,
        11 / 84 - 187 / 2100,
        -1 / 40,
    ),
    order=5,
)

TABLEAUS = {Method.EULER: EULER, Method.RK4: RK4, Method.DOPRI5: DOPRI5}

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
# PI controller exponents (Hairer & Wanner's DOPRI5 defaults)
BETA = 0.04
ALPHA = 0.2 - 0.75 * BETA


def _rk_stages(
    f: OdeFunc, tableau: ButcherTableau, y: Tensor, t: float, h: float
) -> tuple[Tensor, list[Tensor]]:
    stages: list[Tensor] = []
    for c, row in zip(tableau.c, tableau.a):
        yi = y
        for a_ij, k in zip(row, stages):
            if a_ij != 0.0:
                yi = ad.add(yi, ad.scale(k, h * a_ij))
        stages.append(f(yi, t + c * h))
    y_new = y
    for b_i, k in zip(tableau.b, stages):
        if b_i != 0.0:
            y_new = ad.add(y_new, ad.scale(k, h * b_i))
    return y_new, stages


def _check_finite(y: Tensor, t: float) -> None:
    if not np.all(np.isfinite(y.value)):
        raise DivergenceError("ODE state became non-finite", {"t": t})


def _rms_norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def _initial_step(
    f: OdeFunc, y: Tensor, t0: float, t1: float, cfg: SolverConfig
) -> float:
    span = abs(t1 - t0)
    if cfg.initial_step is not None:
        return min(cfg.initial_step, span)
    direction = math.copysign(1.0, t1 - t0)
    with ad.paused():
        f0 = f(y, t0).value
        scale = cfg.atol + cfg.rtol * np.abs(y.value)
        d0, d1 = _rms_norm(y.value / scale), _rms_norm(f0 / scale)
        h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h0 = min(h0, span)
        y1 = Tensor(y.value + direction * h0 * f0)
        f1 = f(y1, t0 + direction * h0).value
    d2 = _rms_norm((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (DOPRI5.order))
    return min(100 * h0, h1, span)


def _integrate_fixed(
    f: OdeFunc, y: Tensor, t0: float, t1: float, cfg: SolverConfig
) -> Tensor:
    tableau = TABLEAUS[cfg.method]
    span = t1 - t0
    step = cfg.initial_step or DEFAULT_FIXED_STEP
    n_steps = max(1, math.ceil(abs(span) / step - 1e-9))
    if n_steps > cfg.max_steps:
        raise IntegrationError(
            f"{n_steps} fixed steps exceed max_steps={cfg.max_steps}", y.value, t0
        )
    h = span / n_steps
    for i in range(n_steps):
        t = t0 + i * h
        y, _ = _rk_stages(f, tableau, y, t, h)
        _check_finite(y, t + h)
    return y


def _integrate_adaptive(
    f: OdeFunc, y: Tensor, t0: float, t1: float, cfg: SolverConfig
) -> Tensor:
    tableau = TABLEAUS[cfg.method]
    direction = math.copysign(1.0, t1 - t0)
    t = t0
    h = _initial_step(f, y, t0, t1, cfg)
    prev_err = 1e-4
    attempts = 0
    while direction * (t1 - t) > 0:
        if attempts >= cfg.max_steps:
            raise IntegrationError(
                f"step budget of {cfg.max_steps} exhausted", y.value, t
            )
        attempts += 1
        last = abs(t1 - t) <= h * (1 + 1e-12)
        if last:
            h = abs(t1 - t)
        y_new, stages = _rk_stages(f, tableau, y, t, direction * h)
        err_vec = np.zeros_like(y.value)
        for e_i, k in zip(tableau.e, stages):
            if e_i != 0.0:
                err_vec = err_vec + (h * e_i) * k.value
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y.value), np.abs(y_new.value))
        err = _rms_norm(err_vec / scale)
        if not np.isfinite(err):
            raise DivergenceError("ODE error estimate became non-finite", {"t": t})
        if err <= 1.0:
            t = t1 if last else t + direction * h
            y = y_new
            _check_finite(y, t)
            factor = (
                MAX_FACTOR
                if err == 0.0
                else SAFETY * err ** (-ALPHA) * prev_err**BETA
            )
            factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
            prev_err = max(err, 1e-4)
        else:
            factor = max(MIN_FACTOR, SAFETY * err ** (-ALPHA))
            logger.debug("rejected step t=%.6g h=%.3g err=%.3g", t, h, err)
        h *= factor
    return y


def _integrate(
    f: OdeFunc, y0: Tensor, t0: float, t1: float, cfg: SolverConfig
) -> Tensor:
    if t1 == t0:
        return y0
    _check_finite(y0, t0)
    if cfg.adaptive:
        return _integrate_adaptive(f, y0, t0, t1, cfg)
    return _integrate_fixed(f, y0, t0, t1, cfg)


def ode_solve(
    f: OdeFunc,
    z0: Union[Tensor, np.ndarray],
    t0: float,
    t1: float,
    cfg: SolverConfig,
) -> Tensor:
    """Return z(t1) for dz/dt = f(z, t), z(t0) = z0.

    When a tape is active every stage is recorded, so the result can be
    differentiated by backpropagating through the solver steps.
    """
    if t1 < t0:
        raise UsageError(f"ode_solve integrates forward only (t0={t0}, t1={t1})")
    return _integrate(f, ad.as_tensor(z0), t0, t1, cfg)


def ode_solve_adjoint(
    f: OdeFunc,
    z0: Union[Tensor, np.ndarray],
    t0: float,
    t1: float,
    cfg: SolverConfig,
    loss_grad_at_t1: np.ndarray,
    z1: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of a loss through z(t1) with respect to z0 and the parameters of f.

    The augmented state (z, a, a_theta) is integrated from t1 back to t0 with
    da/dt = -a df/dz and da_theta/dt = -a df/dtheta, starting from
    a(t1) = dL/dz(t1) and a_theta(t1) = 0.
    """
    z0 = ad.as_tensor(z0).value
    params = f.parameters()
    names = list(params)
    shape = z0.shape
    n = z0.size
    if z1 is None:
        with ad.paused():
            z1 = ode_solve(f, z0, t0, t1, cfg).value
    seed = np.asarray(loss_grad_at_t1, dtype=np.float64).reshape(-1)
    if seed.size != n:
        raise ConfigError(
            f"loss gradient has {seed.size} entries, state has {n}"
        )
    sizes = [params[name].value.size for name in names]

    def augmented(y: Tensor, t: float) -> Tensor:
        flat = y.value
        z = ad.Tensor(flat[:n].reshape(shape), requires_grad=True)
        a = flat[n : 2 * n]
        with ad.Tape():
            dz = f(z, t)
            grads = ad.vjp(dz, [z, *(params[name] for name in names)], a)
        parts = [dz.value.reshape(-1)] + [-g.reshape(-1) for g in grads]
        return Tensor(np.concatenate(parts))

    y1 = np.concatenate([np.asarray(z1).reshape(-1), seed, np.zeros(int(np.sum(sizes)))])
    with ad.paused():
        y0 = _integrate(
            FunctionOdeFunc(augmented), Tensor(y1), t1, t0, cfg
        ).value
    grad_z0 = y0[n : 2 * n].reshape(shape)
    grad_params: dict[str, np.ndarray] = {}
    offset = 2 * n
    for name, size in zip(names, sizes):
        grad_params[name] = y0[offset : offset + size].reshape(params[name].shape)
        offset += size
    return grad_z0, grad_params


def odeint(
    f: OdeFunc, z0: Tensor, t0: float, t1: float, cfg: SolverConfig
) -> Tensor:
    """Solve forward and attach the gradient path selected by `cfg`."""
    if t1 < t0:
        raise UsageError(f"odeint integrates forward only (t0={t0}, t1={t1})")
    if t1 == t0:
        return z0
    tape = ad.active_tape()
    params = f.parameters()
    inputs = (z0, *params.values())
    if not cfg.uses_adjoint or tape is None or not any(x.requires_grad for x in inputs):
        return ode_solve(f, z0, t0, t1, cfg)
    with ad.paused():
        z1 = ode_solve(f, z0, t0, t1, cfg).value

    def backward(g: np.ndarray) -> list[np.ndarray]:
        grad_z0, grad_params = ode_solve_adjoint(f, z0, t0, t1, cfg, g, z1=z1)
        return [grad_z0, *grad_params.values()]

    return ad.custom_op("odeint_adjoint", z1, inputs, backward)
