"""Self-adaptive curriculum weight.

Before each epoch the trainer measures the sampled mean squared L2 distance
between pooled embeddings of current generations and real targets, then sets

    tau = exp(alpha * (d_t / d0 - 1)),  clamped to 1 when d_t > d0,

where d0 is the same measurement at training start. tau weights the
generated-label loss; 1 - tau weights the real-label loss. The clamp keeps
the mix a convex combination when the model regresses past its start point.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import PromptTargetPair
from .errors import ContractError, DegenerateStartError
from .model import N_RESERVED, ModelState, embed_sequence, generate


def _pool(table: np.ndarray, tokens) -> np.ndarray:
    ids = [i for i in tokens.ids if i >= N_RESERVED]
    if not ids:
        return np.zeros(table.shape[1], dtype=table.dtype)
    return table[np.asarray(ids, dtype=np.intp)].mean(axis=0)


def measure_distance(model: ModelState, pairs: Sequence[PromptTargetPair], M: int,
                     max_gen_len: int, ruler: Optional[np.ndarray] = None) -> float:
    """Mean ||embed(generate(x)) - embed(y)||^2 over the first M pairs.

    ``ruler`` is the embedding table used for pooling. The scheduler passes
    the table frozen at its own init so the metric tracks generation
    progress, not embedding drift; None falls back to the current model's
    table. Deterministic: greedy generation, fixed summation order.
    """
    if M <= 0:
        raise ContractError(f"measure_distance: M must be positive, got {M}")
    if M > len(pairs):
        raise ContractError(f"measure_distance: M={M} exceeds {len(pairs)} pairs")
    total = 0.0
    for pair in pairs[:M]:
        gen = generate(model, pair.x, max_gen_len)
        if ruler is None:
            diff = embed_sequence(model, gen) - embed_sequence(model, pair.y)
        else:
            diff = _pool(ruler, gen) - _pool(ruler, pair.y)
        total += float(np.dot(diff, diff))
    return total / M


@dataclass
class SchedulerState:
    alpha: float
    d0: float
    d_t: float
    tau: float
    M: int
    sample_seed: int
    sample_indices: tuple[int, ...]
    resample_each_epoch: bool = False
    # Embedding table snapshotted at init; the same ruler measures every
    # epoch so d_t reflects generation progress, not embedding drift.
    ruler: Optional[np.ndarray] = None

    def sampled_pairs(self, pairs: Sequence[PromptTargetPair],
                      epoch: Optional[int] = None) -> list[PromptTargetPair]:
        """The frozen sample, or a fresh per-epoch draw when configured."""
        if self.resample_each_epoch and epoch is not None:
            rng = random.Random(self.sample_seed * 1000003 + epoch)
            indices = sorted(rng.sample(range(len(pairs)), self.M))
            return [pairs[i] for i in indices]
        return [pairs[i] for i in self.sample_indices]

    def log_row(self, epoch: int) -> dict:
        return {"epoch": epoch, "d_t": self.d_t, "d0": self.d0,
                "tau": self.tau, "alpha": self.alpha, "M": self.M}


def init_scheduler(model_0: ModelState, pairs: Sequence[PromptTargetPair], alpha: float,
                   M: int, seed: int, max_gen_len: int,
                   resample_each_epoch: bool = False,
                   freeze_ruler: bool = True) -> SchedulerState:
    """Freeze the measurement sample (and ruler), record d0, start at tau = 1."""
    if alpha < 0:
        raise ContractError(f"init_scheduler: alpha must be nonnegative, got {alpha}")
    if M <= 0 or M > len(pairs):
        raise ContractError(f"init_scheduler: M={M} out of range for {len(pairs)} pairs")
    rng = random.Random(seed)
    indices = tuple(sorted(rng.sample(range(len(pairs)), M)))
    ruler = np.array(model_0.embedding(), copy=True) if freeze_ruler else None
    d0 = measure_distance(model_0, [pairs[i] for i in indices], M, max_gen_len, ruler)
    if d0 == 0.0:
        raise DegenerateStartError(
            "initial generation distance is zero: the starting model already reproduces "
            "every sampled target, leaving the curriculum nothing to schedule"
        )
    return SchedulerState(alpha=alpha, d0=d0, d_t=d0, tau=1.0, M=M, sample_seed=seed,
                          sample_indices=indices, resample_each_epoch=resample_each_epoch,
                          ruler=ruler)


def update_tau(state: SchedulerState, d_t: float) -> SchedulerState:
    """Recompute tau from the progression formula; clamp to 1 when d_t > d0."""
    if state.d0 <= 0:
        raise ContractError("update_tau: scheduler was not initialized with d0 > 0")
    tau = math.exp(state.alpha * (d_t / state.d0 - 1.0))
    state.d_t = d_t
    state.tau = min(tau, 1.0)
    return state
