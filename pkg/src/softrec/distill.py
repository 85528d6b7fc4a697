"""Self-distilled auxiliary dataset: regenerate every training prompt's label
with a converged supervised checkpoint, then train against those labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import tensor as T
from .data import ItemCatalog, PromptTargetPair
from .errors import ContractError, DatasetError
from .model import ModelState, TokenSeq, generate, label_is_empty, nll_loss


@dataclass(frozen=True)
class SDPair:
    source_pair_id: str
    x: TokenSeq          # the source pair's prompt, shared verbatim
    y_hat: TokenSeq      # generated label, EOS-terminated
    empty: bool          # no non-reserved tokens were generated


def default_max_gen_len(catalog: ItemCatalog) -> int:
    """Longest catalog title in tokens plus room for one extra token and EOS."""
    return catalog.max_title_tokens() + 2


def build_sd_dataset(model_sft: ModelState, train_pairs: Sequence[PromptTargetPair],
                     max_gen_len: int) -> list[SDPair]:
    """One greedy generation per training pair, in input order.

    Deterministic for a fixed checkpoint. Empty generations are kept and
    flagged; they are skipped (and counted) by loss consumers.
    """
    out = []
    for pair in train_pairs:
        y_hat = generate(model_sft, pair.x, max_gen_len)
        out.append(SDPair(pair.pair_id, pair.x, y_hat, label_is_empty(y_hat)))
    return out


def sd_loss(model: ModelState, sd_pair: SDPair) -> T.Tensor:
    """Token-level loss against the generated label; same math as nll_loss."""
    if sd_pair.empty:
        raise ContractError(f"sd_loss: pair {sd_pair.source_pair_id!r} has an empty generation")
    return nll_loss(model, sd_pair.x, sd_pair.y_hat)


def mean_nll(model: ModelState, pairs: Sequence[PromptTargetPair]) -> float:
    """Mean per-pair summed token loss over real labels (no gradients)."""
    if not pairs:
        raise ContractError("mean_nll: no pairs")
    with T.no_grad():
        return sum(nll_loss(model, p.x, p.y).item() for p in pairs) / len(pairs)


def mean_sd_loss(model: ModelState, sd_pairs: Sequence[SDPair]) -> tuple[float, int]:
    """Mean loss over the non-empty generated pairs; returns (mean, n_used)."""
    usable = [p for p in sd_pairs if not p.empty]
    if not usable:
        raise DatasetError("every self-distilled pair is empty")
    with T.no_grad():
        total = sum(sd_loss(model, p).item() for p in usable)
    return total / len(usable), len(usable)


def save_sd_dataset(sd_pairs: Sequence[SDPair], path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for p in sd_pairs:
            fh.write(json.dumps({
                "source_pair_id": p.source_pair_id,
                "x_tokens": list(p.x.ids),
                "y_hat_tokens": list(p.y_hat.ids),
                "empty_flag": p.empty,
            }) + "\n")


def load_sd_dataset(path) -> list[SDPair]:
    out = []
    with open(Path(path), encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            out.append(SDPair(
                source_pair_id=d["source_pair_id"],
                x=TokenSeq(tuple(d["x_tokens"]), "prompt"),
                y_hat=TokenSeq(tuple(d["y_hat_tokens"]), "label"),
                empty=d["empty_flag"],
            ))
    return out
