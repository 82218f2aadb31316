"""
Training and evaluation commands.

Training walks the training split in fixed-size chronological windows; each
window is split at its temporal midpoint into context and target links and
one Adam step descends the negative ELBO of the targets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from ._utils import append_csv_row, data_hash, write_json
from .config import RunConfig, write_resolved
from .ctdg import CtdgStore, LinkBatch, chrono_split, generate_synthetic, ingest_csv
from .errors import ConfigError, DivergenceError
from .metrics import MetricReport, build_report
from .model import Gsnop

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint"
LOSS_LOG = "loss.csv"
METRICS_NAME = "metrics.json"
RESULTS_NAME = "results.csv"
LOSS_FIELDS = ("step", "loss", "reconstruction", "kl", "grad_norm")
RESULT_FIELDS = ("variant", "seed", "split", "sample_ratio", "ap", "mrr")


class SeedPurpose:
    """Second element of every seed sequence, so streams never collide."""

    SPLIT = 1
    INIT = 2
    STEP = 3
    EVAL_CONTEXT = 4
    EVAL_NEGATIVES = 5
    EVAL_SAMPLES = 6


@dataclass
class Dataset:
    store: CtdgStore
    train: CtdgStore
    valid: CtdgStore
    test: CtdgStore
    digest: str = ""

    @property
    def observed(self) -> CtdgStore:
        return CtdgStore.concat([self.train, self.valid, self.test])


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data_path:
        store = ingest_csv(cfg.data_path, cfg.csv_schema())
    else:
        store = generate_synthetic(cfg.synthetic_spec())
    train, valid, test = chrono_split(
        store, cfg.split_spec(), seed=[cfg.seed, SeedPurpose.SPLIT]
    )
    return Dataset(store, train, valid, test, data_hash(store))


def build_model(cfg: RunConfig, store: CtdgStore) -> Gsnop:
    rng = np.random.default_rng([cfg.seed, SeedPurpose.INIT])
    return Gsnop(
        rng,
        store.node_count,
        store.edge_dim,
        cfg.encoder_dims(),
        cfg.kind,
        cfg.solver_config(),
    )


def training_windows(
    train: CtdgStore, size: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(context, target) index pairs, each window split at its temporal midpoint."""
    windows = []
    for start in range(0, len(train), size):
        index = np.arange(start, min(start + size, len(train)))
        if len(index) < 2:
            continue
        t = train.t[index]
        middle = t[0] + 0.5 * (t[-1] - t[0])
        context, target = index[t <= middle], index[t > middle]
        if not len(target):
            half = len(index) // 2
            context, target = index[:half], index[half:]
        windows.append((context, target))
    return windows


def split_label(cfg: RunConfig) -> str:
    return f"{cfg.train_ratio:g}/{cfg.valid_ratio:g}/{cfg.test_ratio:g}"


def evaluate(
    model: Gsnop,
    cfg: RunConfig,
    context_store: CtdgStore,
    observed: CtdgStore,
    query_store: CtdgStore,
) -> MetricReport:
    """Rank every event of `query_store` against seeded negatives."""
    if len(query_store) == 0:
        raise ConfigError("no events to evaluate in the requested split")
    node_count = observed.node_count
    context = LinkBatch.from_store(context_store).with_negatives(
        node_count, cfg.train_negatives, [cfg.seed, SeedPurpose.EVAL_CONTEXT]
    )
    positives = LinkBatch.from_store(query_store)
    queries = positives.with_negatives(
        node_count, cfg.eval_negatives, [cfg.seed, SeedPurpose.EVAL_NEGATIVES]
    )
    was_training = model.training
    model.eval()
    try:
        scores = model.score(
            observed,
            context,
            queries,
            cfg.eval_samples,
            [cfg.seed, SeedPurpose.EVAL_SAMPLES],
        ).reshape(len(positives), cfg.eval_negatives + 1)
    finally:
        model.train(was_training)
    return build_report(scores[:, 0], scores[:, 1:], positives.t, cfg.time_buckets)


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[float] = field(default_factory=list)
    best_valid_mrr: Optional[float] = None


class Trainer:
    def __init__(self, cfg: RunConfig, data: Dataset, out_dir: Path) -> None:
        self.cfg = cfg
        self.data = data
        self.out_dir = out_dir
        self.model = build_model(cfg, data.store)
        self.params = self.model.parameters()
        self.adam = cfg.adam_state()
        self.elbo_cfg = cfg.elbo_config()
        self.windows = training_windows(data.train, cfg.window_size)
        self.best: Optional[dict[str, np.ndarray]] = None
        self.best_mrr: Optional[float] = None

    def step(self, step: int) -> tuple[float, float, float, float]:
        context_idx, target_idx = self.windows[step % len(self.windows)]
        rng = np.random.default_rng([self.cfg.seed, SeedPurpose.STEP, step])
        train = self.data.train
        n = self.cfg.train_negatives
        context = LinkBatch.from_store(train, context_idx).with_negatives(
            train.node_count, n, rng
        )
        target = LinkBatch.from_store(train, target_idx).with_negatives(
            train.node_count, n, rng
        )
        with ad.Tape():
            terms = self.model.window_loss(train, context, target, self.elbo_cfg, rng)
            ad.backward(terms.loss)
        norm = ad.clip_grad_norm(self.params, self.cfg.clip_norm)
        ad.optimizer_step(self.params, self.adam)
        return terms.loss.item(), terms.reconstruction, terms.kl, norm

    def validate(self, step: int) -> None:
        data = self.data
        report = evaluate(
            self.model,
            self.cfg,
            data.train,
            CtdgStore.concat([data.train, data.valid]),
            data.valid,
        )
        logger.info("validation step=%d mrr=%.4f ap=%.4f", step, report.mrr, report.ap)
        if self.best_mrr is None or report.mrr > self.best_mrr:
            self.best_mrr = report.mrr
            self.best = {name: p.value.copy() for name, p in self.params.items()}

    def save(self) -> Path:
        path = self.out_dir / CHECKPOINT_NAME
        if self.best is not None:
            for name, value in self.best.items():
                self.params[name].value = value
        ad.save_checkpoint(path, self.params)
        return path

    def run(self) -> TrainResult:
        cfg = self.cfg
        if cfg.steps and not self.windows:
            raise ConfigError("the training split holds fewer than two events")
        validating = len(self.data.valid) > 0
        loss_path = self.out_dir / LOSS_LOG
        if loss_path.exists():
            loss_path.unlink()
        losses = []
        self.model.train()
        for step in range(cfg.steps):
            try:
                loss, recon, kl, norm = self.step(step)
            except DivergenceError:
                path = self.save()
                logger.error("training diverged step=%d checkpoint=%s", step, path)
                raise
            losses.append(loss)
            append_csv_row(
                loss_path,
                LOSS_FIELDS,
                {
                    "step": step,
                    "loss": loss,
                    "reconstruction": recon,
                    "kl": kl,
                    "grad_norm": norm,
                },
            )
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                logger.info(
                    "step=%d loss=%.4f reconstruction=%.4f kl=%.4f grad_norm=%.3g",
                    step, loss, recon, kl, norm,
                )
            due = (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1
            if validating and due:
                self.validate(step)
        return TrainResult(self.save(), losses, self.best_mrr)


def _out_dir(cfg: RunConfig, out_dir: Optional[Union[str, Path]]) -> Path:
    path = Path(out_dir if out_dir is not None else cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(
    cfg: RunConfig,
    out_dir: Optional[Union[str, Path]] = None,
    data: Optional[Dataset] = None,
) -> TrainResult:
    out = _out_dir(cfg, out_dir)
    cfg = cfg.replace(out_dir=str(out), checkpoint=str(out / CHECKPOINT_NAME))
    write_resolved(cfg, out)
    data = data or load_dataset(cfg)
    logger.info(
        "training variant=%s seed=%d events=%d train=%d steps=%d",
        cfg.variant, cfg.seed, len(data.store), len(data.train), cfg.steps,
    )
    return Trainer(cfg, data, out).run()


def cmd_eval(
    cfg: RunConfig,
    checkpoint: Union[str, Path],
    out_dir: Optional[Union[str, Path]] = None,
    data: Optional[Dataset] = None,
) -> MetricReport:
    out = _out_dir(cfg, out_dir)
    cfg = cfg.replace(out_dir=str(out), checkpoint=str(checkpoint))
    write_resolved(cfg, out)
    data = data or load_dataset(cfg)
    model = build_model(cfg, data.store)
    ad.load_checkpoint(checkpoint, model.parameters())
    context = (
        CtdgStore.concat([data.train, data.valid])
        if cfg.use_valid_context
        else data.train
    )
    report = evaluate(model, cfg, context, data.observed, data.test)
    logger.info(
        "evaluated variant=%s seed=%d ap=%.4f mrr=%.4f queries=%d",
        cfg.variant, cfg.seed, report.ap, report.mrr, report.n_queries,
    )
    write_json(
        out / METRICS_NAME,
        {**report.to_dict(), "variant": cfg.variant, "seed": cfg.seed},
    )
    append_csv_row(out / RESULTS_NAME, RESULT_FIELDS, result_row(cfg, report))
    return report


def result_row(cfg: RunConfig, report: MetricReport) -> dict[str, object]:
    return {
        "variant": cfg.variant,
        "seed": cfg.seed,
        "split": split_label(cfg),
        "sample_ratio": cfg.sample_ratio,
        "ap": report.ap,
        "mrr": report.mrr,
    }
