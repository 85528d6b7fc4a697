"""Training regimes: supervised (real labels), generated-labels only, and the
curriculum mix of the two, all with early stopping on validation H@5.

The mixed regime pairs each real example with its generated counterpart in
the same step (same prompt), so for a fixed batch the combined gradient is
exactly (1 - tau) * grad(real part) + tau * grad(generated part).
"""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import tensor as T
from .curriculum import SchedulerState, init_scheduler, measure_distance, update_tau
from .data import SplitDataset
from .distill import SDPair, sd_loss
from .errors import ContractError, NumericError, TrainingDivergedError
from .grounding import build_index
from .metrics import hit_ratio, rank_candidates
from .model import ModelConfig, ModelState, init_model, nll_loss, save_checkpoint

log = logging.getLogger(__name__)

REGIMES = ("sft", "sdft_only", "soft")


@dataclass
class TrainConfig:
    regime: str
    epochs_max: int = 7
    patience: int = 2
    batch_size: int = 32
    lr: float = 0.03
    optimizer: str = "sgd"  # sgd | adam
    seed: int = 0
    max_gen_len: int = 8
    eval_k: int = 5
    model: ModelConfig = field(default_factory=ModelConfig)
    # Curriculum fields; required only for the soft regime.
    alpha: Optional[float] = None
    distance_samples: Optional[int] = None
    resample_each_epoch: bool = False
    sample_seed: int = 101

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ContractError(f"unknown regime {self.regime!r}")
        if self.epochs_max < 1 or self.patience < 1:
            raise ContractError("epochs_max and patience must be >= 1")
        if self.regime == "soft" and (self.alpha is None or self.distance_samples is None):
            raise ContractError("soft regime requires alpha and distance_samples")


@dataclass
class EpochReport:
    epoch: int
    regime: str
    train_loss: float
    sft_component: Optional[float]
    sdft_component: Optional[float]
    tau: Optional[float]
    valid_metric: float
    d_t: Optional[float] = None
    d0: Optional[float] = None
    alpha: Optional[float] = None
    distance_samples: Optional[int] = None
    wall_clock_s: float = field(default=0.0, compare=False)


@dataclass
class TrainResult:
    model: ModelState            # best-validation checkpoint
    reports: list[EpochReport]
    best_epoch: int
    best_metric: float
    stopped_early: bool


# ---------------------------------------------------------------------------
# Batch losses
# ---------------------------------------------------------------------------


def batch_nll_loss(model: ModelState, pairs) -> T.Tensor:
    """Sum of token losses per example, averaged over the batch."""
    losses = [nll_loss(model, p.x, p.y) for p in pairs]
    return T.scale(T.sum_tensors(losses), 1.0 / len(losses))


def batch_sd_loss(model: ModelState, sd_pairs: Sequence[SDPair]) -> tuple[Optional[T.Tensor], int]:
    """Mean loss over non-empty generated pairs; (None, 0) if all are empty."""
    usable = [p for p in sd_pairs if not p.empty]
    if not usable:
        return None, 0
    losses = [sd_loss(model, p) for p in usable]
    return T.scale(T.sum_tensors(losses), 1.0 / len(losses)), len(usable)


def soft_batch_loss(model: ModelState, pairs, sd_pairs: Sequence[SDPair], tau: float):
    """Combined loss (1-tau)*real + tau*generated for one paired batch.

    Returns (loss, real_component_value, generated_component_value, n_sd_used);
    the generated component is None when every pair in the batch is empty.
    """
    real = batch_nll_loss(model, pairs)
    sd, n_used = batch_sd_loss(model, sd_pairs)
    if sd is None:
        return T.scale(real, 1.0 - tau), real.item(), None, 0
    combined = T.add(T.scale(real, 1.0 - tau), T.scale(sd, tau))
    return combined, real.item(), sd.item(), n_used


# ---------------------------------------------------------------------------
# Shared loop
# ---------------------------------------------------------------------------


def _epoch_permutation(seed: int, epoch: int, n: int) -> list[int]:
    rng = random.Random((seed * 1000003 + epoch) ^ 0x5F5E1)
    perm = list(range(n))
    rng.shuffle(perm)
    return perm


def default_valid_metric(config: TrainConfig, data: SplitDataset) -> Callable[[ModelState], float]:
    def metric(model: ModelState) -> float:
        index = build_index(model, data.catalog, data.vocab)
        preds = [
            rank_candidates(model, index, p, data.catalog, config.max_gen_len)
            for p in data.valid
        ]
        return hit_ratio(preds, config.eval_k)

    return metric


def _make_stepper(config: TrainConfig):
    if config.optimizer == "sgd":
        return lambda model: model.apply_sgd(config.lr)
    if config.optimizer == "adam":
        opt = T.Adam(config.lr)
        return lambda model: model.apply_adam(opt)
    raise ContractError(f"unknown optimizer {config.optimizer!r}")


def _train_loop(config: TrainConfig, data: SplitDataset, epoch_fn,
                valid_metric_fn: Optional[Callable[[ModelState], float]],
                out_dir, start_model: Optional[ModelState],
                scheduler: Optional[SchedulerState]) -> TrainResult:
    if not data.train:
        raise ContractError("training requires a nonempty train split")
    model = start_model.copy() if start_model is not None else init_model(
        data.vocab.size, config.model, config.seed)
    stepper = _make_stepper(config)
    if valid_metric_fn is None:
        valid_metric_fn = default_valid_metric(config, data)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    reports: list[EpochReport] = []
    best_model = model.copy()
    best_metric = float("-inf")
    best_epoch = 0
    bad_epochs = 0
    stopped_early = False
    for epoch in range(1, config.epochs_max + 1):
        t0 = time.perf_counter()
        try:
            report = epoch_fn(model, stepper, epoch, scheduler)
        except NumericError as exc:
            raise TrainingDivergedError(
                f"epoch {epoch}: {exc}", last_good=best_model) from exc
        metric = valid_metric_fn(model)
        report.valid_metric = metric
        report.wall_clock_s = time.perf_counter() - t0
        reports.append(report)
        log.info("%s epoch %d: loss=%.4f tau=%s valid@%d=%.4f",
                 config.regime, epoch, report.train_loss, report.tau, config.eval_k, metric)
        if out_path is not None:
            save_checkpoint(model, out_path / f"epoch_{epoch}.ckpt")
        if metric > best_metric:
            best_metric = metric
            best_model = model.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                stopped_early = True
                break
    if out_path is not None:
        save_checkpoint(best_model, out_path / "best.ckpt")
    return TrainResult(best_model, reports, best_epoch, best_metric, stopped_early)


# ---------------------------------------------------------------------------
# Regimes
# ---------------------------------------------------------------------------


def train_sft(config: TrainConfig, data: SplitDataset, out_dir=None,
              valid_metric_fn=None, start_model=None) -> TrainResult:
    """Minimize the real-label loss; keep the best-validation checkpoint."""

    def epoch_fn(model, stepper, epoch, _scheduler):
        perm = _epoch_permutation(config.seed, epoch, len(data.train))
        total, seen = 0.0, 0
        for start in range(0, len(perm), config.batch_size):
            batch = [data.train[i] for i in perm[start:start + config.batch_size]]
            loss = batch_nll_loss(model, batch)
            T.backward(loss)
            stepper(model)
            total += loss.item() * len(batch)
            seen += len(batch)
        mean = total / seen
        return EpochReport(epoch, "sft", mean, mean, None, None, 0.0)

    return _train_loop(config, data, epoch_fn, valid_metric_fn, out_dir, start_model, None)


def train_sdft_only(config: TrainConfig, data: SplitDataset, sd_data: Sequence[SDPair],
                    out_dir=None, valid_metric_fn=None, start_model=None) -> TrainResult:
    """Train purely on generated labels (the tau == 1 ablation)."""
    sd_by_id = _align_sd(data, sd_data)

    def epoch_fn(model, stepper, epoch, _scheduler):
        perm = _epoch_permutation(config.seed, epoch, len(data.train))
        total, used = 0.0, 0
        for start in range(0, len(perm), config.batch_size):
            batch_sd = [sd_by_id[data.train[i].pair_id] for i in perm[start:start + config.batch_size]]
            loss, n_used = batch_sd_loss(model, batch_sd)
            if loss is None:
                continue
            T.backward(loss)
            stepper(model)
            total += loss.item() * n_used
            used += n_used
        mean = total / used if used else 0.0
        return EpochReport(epoch, "sdft_only", mean, None, mean, None, 0.0)

    return _train_loop(config, data, epoch_fn, valid_metric_fn, out_dir, start_model, None)


def train_soft(config: TrainConfig, data: SplitDataset, sd_data: Sequence[SDPair],
               out_dir=None, valid_metric_fn=None, start_model=None,
               scheduler: Optional[SchedulerState] = None,
               fixed_tau: Optional[float] = None) -> TrainResult:
    """Curriculum regime: measure distance, update tau, mix both losses.

    ``scheduler`` may be injected (tests); otherwise it is initialized from
    the starting model. ``fixed_tau`` bypasses the scheduler entirely.
    """
    sd_by_id = _align_sd(data, sd_data)
    needs_scheduler = fixed_tau is None
    if needs_scheduler and scheduler is None:
        start = start_model.copy() if start_model is not None else init_model(
            data.vocab.size, config.model, config.seed)
        scheduler = init_scheduler(start, data.train, config.alpha, config.distance_samples,
                                   config.sample_seed, config.max_gen_len,
                                   config.resample_each_epoch)

    def epoch_fn(model, stepper, epoch, sched):
        if fixed_tau is not None:
            tau = fixed_tau
            d_t = d0 = None
        else:
            sample = sched.sampled_pairs(data.train, epoch)
            d_t = measure_distance(model, sample, sched.M, config.max_gen_len, sched.ruler)
            update_tau(sched, d_t)
            tau = sched.tau
            d0 = sched.d0
        perm = _epoch_permutation(config.seed, epoch, len(data.train))
        sft_total, sft_seen = 0.0, 0
        sd_total, sd_seen = 0.0, 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = [data.train[i] for i in idx]
            batch_sd = [sd_by_id[p.pair_id] for p in batch]
            loss, sft_val, sd_val, n_used = soft_batch_loss(model, batch, batch_sd, tau)
            T.backward(loss)
            stepper(model)
            sft_total += sft_val * len(batch)
            sft_seen += len(batch)
            if sd_val is not None:
                sd_total += sd_val * n_used
                sd_seen += n_used
        sft_mean = sft_total / sft_seen
        sd_mean = sd_total / sd_seen if sd_seen else 0.0
        total = (1.0 - tau) * sft_mean + tau * sd_mean
        return EpochReport(epoch, "soft", total, sft_mean, sd_mean, tau, 0.0,
                           d_t=d_t, d0=d0, alpha=config.alpha,
                           distance_samples=config.distance_samples)

    return _train_loop(config, data, epoch_fn, valid_metric_fn, out_dir, start_model, scheduler)


def _align_sd(data: SplitDataset, sd_data: Sequence[SDPair]) -> dict[str, SDPair]:
    sd_by_id = {p.source_pair_id: p for p in sd_data}
    missing = [p.pair_id for p in data.train if p.pair_id not in sd_by_id]
    if missing:
        raise ContractError(
            f"{len(missing)} training pairs lack a generated counterpart "
            f"(first: {missing[0]!r})"
        )
    return sd_by_id
