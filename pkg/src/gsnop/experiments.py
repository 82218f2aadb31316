"""
Experiment drivers built on top of train/eval: variant ablation, training
sparsity sweeps, forward-pass timing and dataset statistics.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from ._utils import append_csv_row, write_json
from .config import RunConfig, write_resolved
from .ctdg import LinkBatch, chrono_split, density_score, generate_synthetic
from .errors import ConfigError
from .latent import AggregatorKind
from .train import (
    RESULT_FIELDS,
    RESULTS_NAME,
    build_model,
    cmd_eval,
    cmd_train,
    load_dataset,
    result_row,
)

logger = logging.getLogger(__name__)

EXPERIMENT_FIELDS = RESULT_FIELDS + ("data_hash",)
BENCH_REPEATS = 3


def _start(cfg: RunConfig, out_dir: Optional[Union[str, Path]], **lists: Any) -> RunConfig:
    """Settle the output directory and sweep lists, then record them."""
    path = Path(out_dir if out_dir is not None else cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    chosen = {name: tuple(v) for name, v in lists.items() if v is not None}
    cfg = cfg.replace(out_dir=str(path), **chosen)
    write_resolved(cfg, path)
    return cfg


def _train_and_eval(cfg: RunConfig, run_dir: Path, results: Path) -> dict[str, Any]:
    cfg = cfg.replace(out_dir=str(run_dir))
    data = load_dataset(cfg)
    trained = cmd_train(cfg, run_dir, data=data)
    report = cmd_eval(cfg, trained.checkpoint, run_dir, data=data)
    row: dict[str, Any] = {**result_row(cfg, report), "data_hash": data.digest}
    append_csv_row(results, EXPERIMENT_FIELDS, row)
    return row


def cmd_ablate(
    cfg: RunConfig,
    variants: Optional[Sequence[str]] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> list[dict[str, Any]]:
    """Train and evaluate each variant on identical data and seeds."""
    cfg = _start(cfg, out_dir, variants=variants)
    out = Path(cfg.out_dir)
    results = out / RESULTS_NAME
    rows = []
    for variant in cfg.variants:
        try:
            variant_cfg = cfg.replace(variant=AggregatorKind(variant).value)
        except ValueError as exc:
            raise ConfigError(f"unknown variant {variant!r}") from exc
        logger.info("ablation variant=%s seed=%d", variant, cfg.seed)
        rows.append(_train_and_eval(variant_cfg, out / variant, results))
    return rows


def cmd_sparsity(
    cfg: RunConfig,
    ratios: Optional[Sequence[float]] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> list[dict[str, Any]]:
    """One train/eval cycle per training sample ratio."""
    cfg = _start(cfg, out_dir, sparsity_ratios=ratios)
    out = Path(cfg.out_dir)
    results = out / RESULTS_NAME
    rows = []
    for ratio in cfg.sparsity_ratios:
        if not 0 < ratio <= 1:
            raise ConfigError(f"sample ratio {ratio} outside (0, 1]")
        ratio_cfg = cfg.replace(sample_ratio=float(ratio))
        logger.info("sparsity ratio=%g variant=%s seed=%d", ratio, cfg.variant, cfg.seed)
        rows.append(_train_and_eval(ratio_cfg, out / f"ratio-{ratio:g}", results))
    return rows


def linear_fit(x: np.ndarray, y: np.ndarray) -> dict[str, float]:
    slope, intercept = np.polyfit(x, y, 1)
    predicted = slope * x + intercept
    total = float(np.sum((y - np.mean(y)) ** 2))
    residual = float(np.sum((y - predicted) ** 2))
    r2 = 1.0 - residual / total if total > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2}


def cmd_bench(
    cfg: RunConfig,
    sizes: Optional[Sequence[int]] = None,
    out_dir: Optional[Union[str, Path]] = None,
    target_fraction: float = 0.5,
) -> dict[str, Any]:
    """Wall-clock of one forward pass against the number of context plus target links."""
    cfg = _start(cfg, out_dir, bench_sizes=sizes)
    out = Path(cfg.out_dir)
    sizes = cfg.bench_sizes
    bench_csv = out / "bench.csv"
    if bench_csv.exists():
        bench_csv.unlink()
    elbo_cfg = cfg.elbo_config()
    timings = []
    for size in sizes:
        store = generate_synthetic(cfg.synthetic_spec(events=int(size)))
        model = build_model(cfg, store)
        model.eval()
        n_target = int(round(target_fraction * len(store)))
        split = len(store) - n_target
        context = LinkBatch.from_store(store, np.arange(split))
        target = LinkBatch.from_store(store, np.arange(split, len(store)))
        best = float("inf")
        for repeat in range(BENCH_REPEATS):
            start = time.perf_counter()
            with ad.paused():
                if len(target):
                    model.window_loss(store, context, target, elbo_cfg, [cfg.seed, repeat])
                else:
                    model.context_state(store, context)
            best = min(best, time.perf_counter() - start)
        timings.append(best)
        logger.info("bench n_plus_m=%d seconds=%.4f", size, best)
        append_csv_row(bench_csv, ("n_plus_m", "seconds"), {"n_plus_m": size, "seconds": best})
    fit = linear_fit(np.asarray(sizes, dtype=np.float64), np.asarray(timings))
    report = {"sizes": list(sizes), "seconds": timings, **fit}
    write_json(out / "bench.json", report)
    return report


def cmd_stats(
    cfg: RunConfig,
    ratios: Optional[Sequence[float]] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> dict[str, Any]:
    """Node and link counts plus the training-window density for each ratio."""
    cfg = _start(cfg, out_dir, stats_ratios=ratios)
    out = Path(cfg.out_dir)
    store = load_dataset(cfg).store
    density = {}
    for ratio in cfg.stats_ratios:
        spec = cfg.replace(train_ratio=float(ratio), valid_ratio=0.0, test_ratio=1.0 - ratio)
        train, _, _ = chrono_split(store, spec.split_spec(), seed=cfg.seed)
        density[f"{ratio:g}"] = density_score(train)
    stats = {
        "nodes": store.node_count,
        "links": len(store),
        "rejected": store.rejected,
        "density": density,
    }
    write_json(out / "stats.json", stats)
    return stats
