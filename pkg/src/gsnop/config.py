"""
Run configuration: one flat JSON document validated against
`config.schema.json`, with defaults sized for full-scale runs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

import jsonschema

from .autodiff import AdamState
from .ctdg import ArrivalProfile, CsvSchema, SplitSpec, SyntheticSpec
from .elbo import ElboConfig
from .encoder import EncoderDims
from .errors import ConfigError
from .latent import AggregatorKind
from .odeint import GradientMode, Method, SolverConfig

SCHEMA_PATH = Path(__file__).with_name("config.schema.json")
RESOLVED_NAME = "config.resolved"
SEQUENCE_FIELDS = (
    "time_buckets",
    "variants",
    "sparsity_ratios",
    "stats_ratios",
    "bench_sizes",
)


@dataclass(frozen=True)
class RunConfig:
    data_path: Optional[str] = None
    edge_dim: int = 16
    synthetic_nodes: int = 100
    synthetic_communities: int = 2
    synthetic_events: int = 2000
    synthetic_profile: str = "poisson"
    synthetic_rate: float = 1.0
    synthetic_spikes: tuple[tuple[float, float, float], ...] = ((0.25, 0.35, 15.0),)
    synthetic_p_intra: float = 0.8
    synthetic_p_triadic: float = 0.3
    synthetic_p_intra_end: Optional[float] = None
    synthetic_popularity: float = 0.0
    train_ratio: float = 0.3
    valid_ratio: float = 0.2
    test_ratio: float = 0.5
    sample_ratio: float = 1.0
    variant: str = "gsnop"
    node_dim: int = 100
    latent_dim: int = 256
    msg_time_dim: int = 100
    layers: int = 2
    neighbors: int = 10
    dropout: float = 0.1
    solver: str = "dopri5"
    rtol: float = 1e-5
    atol: float = 1e-7
    max_steps: int = 10000
    step_size: Optional[float] = None
    gradient: str = "auto"
    mc_samples: int = 10
    kl_weight: float = 1.0
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    steps: int = 200
    window_size: int = 200
    train_negatives: int = 1
    eval_negatives: int = 50
    eval_samples: int = 10
    eval_every: int = 50
    log_every: int = 10
    time_buckets: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    use_valid_context: bool = True
    checkpoint: Optional[str] = None
    variants: tuple[str, ...] = tuple(kind.value for kind in AggregatorKind)
    sparsity_ratios: tuple[float, ...] = (1.0, 0.5, 0.1)
    stats_ratios: tuple[float, ...] = (0.1, 0.3)
    bench_sizes: tuple[int, ...] = (250, 500, 1000, 1500, 2000)
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self) -> None:
        try:
            AggregatorKind(self.variant)
            ArrivalProfile(self.synthetic_profile)
            self.solver_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.split_spec()
        self.elbo_config()
        if list(self.time_buckets) != sorted(set(self.time_buckets)):
            raise ConfigError("time_buckets must be strictly increasing")
        if self.time_buckets[0] != 0.0 or self.time_buckets[-1] != 1.0:
            raise ConfigError("time_buckets must start at 0 and end at 1")

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["synthetic_spikes"] = [list(s) for s in self.synthetic_spikes]
        for name in SEQUENCE_FIELDS:
            data[name] = list(getattr(self, name))
        return data

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes)

    @property
    def kind(self) -> AggregatorKind:
        return AggregatorKind(self.variant)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(
            self.train_ratio, self.valid_ratio, self.test_ratio, self.sample_ratio
        )

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            method=Method(self.solver),
            rtol=self.rtol,
            atol=self.atol,
            max_steps=self.max_steps,
            initial_step=self.step_size,
            gradient=GradientMode(self.gradient),
        )

    def elbo_config(self) -> ElboConfig:
        return ElboConfig(self.mc_samples, self.kl_weight)

    def encoder_dims(self) -> EncoderDims:
        return EncoderDims(
            node_dim=self.node_dim,
            latent_dim=self.latent_dim,
            msg_time_dim=self.msg_time_dim,
            layers=self.layers,
            neighbors=self.neighbors,
            dropout=self.dropout,
        )

    def synthetic_spec(
        self, seed: Optional[int] = None, events: Optional[int] = None
    ) -> SyntheticSpec:
        return SyntheticSpec(
            nodes=self.synthetic_nodes,
            communities=self.synthetic_communities,
            events=self.synthetic_events if events is None else events,
            profile=ArrivalProfile(self.synthetic_profile),
            rate=self.synthetic_rate,
            spikes=self.synthetic_spikes,
            p_intra=self.synthetic_p_intra,
            p_triadic=self.synthetic_p_triadic,
            p_intra_end=self.synthetic_p_intra_end,
            popularity=self.synthetic_popularity,
            edge_dim=self.edge_dim,
            seed=self.seed if seed is None else seed,
        )

    def csv_schema(self) -> CsvSchema:
        return CsvSchema(edge_dim=self.edge_dim, seed=self.seed)

    def adam_state(self) -> AdamState:
        return AdamState(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.adam_eps,
        )


def _schema() -> dict[str, Any]:
    return json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    try:
        jsonschema.validate(instance=data, schema=_schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc
    values = dict(data)
    if "synthetic_spikes" in values:
        values["synthetic_spikes"] = tuple(tuple(s) for s in values["synthetic_spikes"])
    for name in SEQUENCE_FIELDS:
        if name in values:
            values[name] = tuple(values[name])
    return RunConfig(**values)


def load_config(
    path: Optional[Union[str, Path]] = None, **overrides: Any
) -> RunConfig:
    """Defaults, then the file at `path`, then non-None `overrides`."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(data)


def write_resolved(cfg: RunConfig, out_dir: Union[str, Path]) -> Path:
    path = Path(out_dir) / RESOLVED_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return path
